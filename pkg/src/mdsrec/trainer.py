"""Adam optimisation, early-stopped training, checkpoints and ablation wiring."""
from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SplitDataset, make_batches
from .errors import DataError, NumericError
from .evaluation import evaluate
from .model import ABLATIONS, MDSRec, ModelConfig, rng_stream
from .numkit import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MDSC"
CHECKPOINT_VERSION = 1


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
            p.grad = None


@dataclass
class TrainState:
    epoch: int = 0
    best_recall: float = -math.inf
    best_epoch: int = 0
    stale: int = 0


@dataclass
class History:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        out = ["epoch,train_loss,valid_recall10,valid_ndcg10"]
        out += [f"{e},{l!r},{r!r},{n!r}" for e, l, r, n in self.rows]
        return "\n".join(out) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class FitResult:
    model: MDSRec
    history: History
    state: TrainState


class TrainingDiverged(NumericError):
    def __init__(self, message: str, result: FitResult):
        super().__init__(message)
        self.result = result


def default_validation(model: MDSRec, split: SplitDataset) -> tuple[float, float]:
    report = evaluate(model, split, mode="valid", cutoffs=(10,))
    return report.recall[10], report.ndcg[10]


def train_epoch(model: MDSRec, opt: Adam, split: SplitDataset, batch_seed: int,
                gumbel_rng: np.random.Generator) -> float:
    cfg = model.config
    total, count = 0.0, 0
    for batch in make_batches(split, cfg.batch_size, cfg.max_len, seed=batch_seed, mode="train",
                              prefix_augment=cfg.prefix_augment):
        loss = model.loss(batch, gumbel_rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"loss became {value}")
        loss.backward()
        opt.step()
        total += value * len(batch)
        count += len(batch)
    if count == 0:
        raise DataError("no training examples: every training prefix has a single item")
    return total / count


def fit(config: ModelConfig, split: SplitDataset, features: dict, model: MDSRec | None = None,
        valid_fn: Callable[[MDSRec, SplitDataset], tuple[float, float]] | None = None,
        on_epoch: Callable[[int, tuple], None] | None = None) -> FitResult:
    """Train until validation Recall@10 stalls for ``patience`` epochs.

    The parameters from the best validation epoch are restored on return,
    including when training diverges.
    """
    config.validate()
    features = {m: getattr(f, "rows", f) for m, f in features.items()}
    model = model or MDSRec.from_data(config, split, features)
    valid_fn = valid_fn or default_validation
    opt = Adam(model.params, config.lr, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    batch_rng = rng_stream(config.seed, "batch")
    gumbel_rng = rng_stream(config.seed, "gumbel")
    history, state = History(), TrainState()
    best = model.state()

    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        try:
            loss = train_epoch(model, opt, split, int(batch_rng.integers(2**32)), gumbel_rng)
        except NumericError as exc:
            model.load_state(best)
            raise TrainingDiverged(f"epoch {epoch}: {exc}", FitResult(model, history, state)) from exc
        recall, ndcg = valid_fn(model, split)
        row = (epoch, loss, recall, ndcg)
        history.rows.append(row)
        if recall > state.best_recall:
            state.best_recall, state.best_epoch, state.stale = recall, epoch, 0
            best = model.state()
        else:
            state.stale += 1
        log.info("epoch %d loss %.5f valid R@10 %.4f N@10 %.4f", *row)
        if on_epoch is not None:
            on_epoch(epoch, row)
        if state.stale >= config.patience:
            break
    model.load_state(best)
    return FitResult(model, history, state)


def apply_ablation(config: ModelConfig, *variants: str) -> ModelConfig:
    """Return ``config`` with the named ablation flags switched on."""
    for v in variants:
        if v not in ABLATIONS:
            raise ValueError(f"unknown ablation {v!r}; expected one of {ABLATIONS}")
    if len(set(variants)) > 1:
        warnings.warn(f"several ablations at once ({', '.join(variants)}) muddy comparisons", stacklevel=2)
    return replace(config, **{f"ablate_{v}": True for v in variants}).validate()


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: MDSRec, path) -> None:
    """Magic, version, config echo, then named little-endian float32 tensors."""
    cfg = model.config.to_text().encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = model.params[name].data
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    config = ModelConfig.from_text(blob[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        name = blob[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        shape = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(
            config.np_dtype)
        pos += 4 * size
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return config, arrays
