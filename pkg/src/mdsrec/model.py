"""Model configuration, channel fusion, scoring and the training objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cooccur import build_cooccurrence, inject_behavior, row_normalized
from .data import MODALITIES, Batch, SplitDataset
from .errors import DataError, ShapeError
from .interest import ClusterAssignment, center_features, centralized_attention, kmeans_cluster
from .numkit import (SparseMatrix, Tensor, concat, log_softmax, no_grad, parameter, row_softmax,
                     scale, tmean)
from .relgraph import RelationGraph, build_topH_graph, graph_convolve
from .seqenc import EncoderParams, embed_sequence, init_encoder, transformer_forward

ABLATIONS = ("dis", "cre", "mrgc", "ica")

_STREAMS = {"data": 1, "init": 2, "gumbel": 3, "kmeans": 4, "batch": 5}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.default_rng([seed, _STREAMS[name]])


@dataclass
class ModelConfig:
    d: int = 64
    max_len: int = 50
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 0
    activation: str = "gelu"
    H: int = 10
    k: int = 32
    mu_id: float = 16.0
    mu_m: float = 0.2
    rho_v: float = 0.5
    rho_t: float = 0.5
    tau: float = 0.5
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 512
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0
    dtype: str = "float32"
    init_std: float = 0.0
    kmeans_iters: int = 100
    cooccur_floor: float = 0.0
    normalize_cooccur: bool = False
    graph_row_scale: bool = False
    conv_source: str = "raw"
    seq_input: str = "injected"
    untie_positions: bool = False
    prefix_augment: bool = False
    filter_seen: bool = False
    ablate_dis: bool = False
    ablate_cre: bool = False
    ablate_mrgc: bool = False
    ablate_ica: bool = False

    def validate(self) -> ModelConfig:
        problems = []
        if abs(self.rho_v + self.rho_t - 1.0) > 1e-9:
            problems.append(f"rho_v + rho_t must be 1, got {self.rho_v + self.rho_t}")
        if min(self.rho_v, self.rho_t) < 0:
            problems.append("rho weights must be >= 0")
        if self.tau <= 0:
            problems.append("tau must be > 0")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if min(self.mu_id, self.mu_m) < 0:
            problems.append("mu weights must be >= 0")
        if self.d <= 0 or self.d % self.n_heads:
            problems.append(f"d={self.d} must be positive and divisible by n_heads={self.n_heads}")
        if self.n_layers < 0 or self.H < 0 or self.k < 1 or self.max_len < 1 or self.batch_size < 1:
            problems.append("n_layers, H >= 0; k, max_len, batch_size >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            problems.append("max_epochs >= 0 and patience >= 1")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.activation not in ("gelu", "relu"):
            problems.append(f"activation must be gelu or relu, got {self.activation!r}")
        if self.conv_source not in ("raw", "injected") or self.seq_input not in ("raw", "injected"):
            problems.append("conv_source and seq_input take 'raw' or 'injected'")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def rho(self) -> dict[str, float]:
        return {"visual": self.rho_v, "textual": self.rho_t}

    def ablations(self) -> list[str]:
        return [a for a in ABLATIONS if getattr(self, f"ablate_{a}")]

    # -- key = value text form ------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: ModelConfig | None = None) -> ModelConfig:
        return (base or cls()).updated(parse_key_values(text))

    @classmethod
    def from_file(cls, path, base: ModelConfig | None = None) -> ModelConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)

    def updated(self, values: dict[str, str]) -> ModelConfig:
        kinds = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            parsed[key] = _parse(kinds[key], raw, key)
        return replace(self, **parsed).validate()

    @classmethod
    def schema(cls) -> str:
        return "".join(f"{f.name} : {f.type} = {_fmt(f.default)}\n" for f in fields(cls))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(kind: str, raw: str, key: str):
    raw = str(raw).strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


# -- fusion and prediction ----------------------------------------------------

@dataclass
class PredictionTriple:
    fused: Tensor
    modal: dict[str, Tensor]
    combined: Tensor


def fuse_sequence(id_last: Tensor, modal_last: dict[str, Tensor], rho: dict[str, float]) -> Tensor:
    """``sum_m rho_m * e^m_last + e^id_last``."""
    out = id_last
    for m, e in modal_last.items():
        out = out + scale(e, rho[m])
    return out


def gumbel_noise(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """``log d - log(1 - d)`` with ``d ~ U(0, 1)``; exact zeros are redrawn."""
    delta = rng.random(shape)
    bad = delta <= 0.0
    while bad.any():
        delta[bad] = rng.random(int(bad.sum()))
        bad = delta <= 0.0
    return (np.log(delta) - np.log1p(-delta)).astype(dtype)


def gumbel_relation(e_u: Tensor, e_c: Tensor, tau: float, rng: np.random.Generator | None = None) -> Tensor:
    """Per-position soft assignment of sequence states to interest centers.

    ``e_u`` is (B, t, d) and ``e_c`` is (B, k, d); returns (B, t, k) rows that
    sum to one. Noise is drawn from ``rng`` in training; ``rng=None`` is the
    deterministic evaluation form.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    logits = e_u @ e_c.T
    if rng is not None:
        logits = logits + gumbel_noise(rng, logits.shape, logits.dtype)
    return row_softmax(scale(logits, 1.0 / tau))


def centralize_modal(e_u: Tensor, gamma: Tensor, e_c: Tensor) -> Tensor:
    if gamma.shape[-1] != e_c.shape[-2] or gamma.shape[:-1] != e_u.shape[:-1]:
        raise ShapeError(f"relation {gamma.shape} does not fit states {e_u.shape} / centers {e_c.shape}")
    return e_u + gamma @ e_c


def score_channels(e_s: Tensor, e_tilde_last: dict[str, Tensor], id_table: Tensor,
                   modal_tables: dict[str, Tensor], rho: dict[str, float]) -> PredictionTriple:
    fused = e_s @ id_table.T
    modal = {m: e_tilde_last[m] @ modal_tables[m].T for m in e_tilde_last}
    combined = fused
    for m, y in modal.items():
        combined = combined + scale(y, rho[m])
    return PredictionTriple(fused, modal, combined)


def channel_losses(triple: PredictionTriple, targets: np.ndarray) -> dict[str, Tensor]:
    """Per-row cross entropy of each channel (``fused`` plus each modality)."""
    rows = np.arange(len(targets))
    out = {"fused": -(log_softmax(triple.fused)[rows, targets])}
    for m, y in triple.modal.items():
        out[m] = -(log_softmax(y)[rows, targets])
    return out


def compute_loss(triple: PredictionTriple, targets: np.ndarray, rho: dict[str, float]) -> Tensor:
    """Batch mean of ``L^s + sum_m rho_m L^m``."""
    targets = np.asarray(targets)
    n_items = triple.fused.shape[-1]
    if np.any(targets >= n_items) or np.any(targets < 0):
        raise ValueError("targets must be real item ids (PAD or out of range found)")
    losses = channel_losses(triple, targets)
    per_row = losses["fused"]
    for m in triple.modal:
        per_row = per_row + scale(losses[m], rho[m])
    return tmean(per_row)


# -- assembled model ----------------------------------------------------------

@dataclass
class ForwardResult:
    triple: PredictionTriple
    centers: dict[str, Tensor] = field(default_factory=dict)
    modal_states: dict[str, Tensor] = field(default_factory=dict)
    relations: dict[str, Tensor] = field(default_factory=dict)
    id_states: Tensor | None = None
    user_centers: dict[str, Tensor] = field(default_factory=dict)


class MDSRec:
    """Fixed item structures (co-occurrence, graphs, clusters) plus trainable params."""

    def __init__(self, config: ModelConfig, n_items: int, features: dict[str, np.ndarray],
                 cooccurrence: SparseMatrix, graphs: dict[str, RelationGraph],
                 clusters: dict[str, ClusterAssignment], params: dict[str, Tensor] | None = None):
        self.config = config.validate()
        self.n_items = n_items
        self.features = features
        self.cooccurrence = cooccurrence
        self.graphs = graphs
        self.clusters = clusters
        self._assign = {m: c.matrix for m, c in clusters.items()}
        self.params = params if params is not None else self.init_params(rng_stream(config.seed, "init"))
        self.encoders = self._encoder_views()

    # -- construction -------------------------------------------------------
    @classmethod
    def from_data(cls, config: ModelConfig, split: SplitDataset, features: dict[str, np.ndarray]) -> MDSRec:
        config.validate()
        n = split.n_items
        features = {m: getattr(f, "rows", f) for m, f in features.items()}
        for m in MODALITIES:
            if features[m].shape[0] != n:
                raise DataError(f"{m} features have {features[m].shape[0]} rows for {n} items")
        o = build_cooccurrence(split.train, n, distance_weighted=not config.ablate_dis,
                               floor=config.cooccur_floor).matrix
        if config.normalize_cooccur:
            o = row_normalized(o)
        graphs = {}
        if not config.ablate_mrgc:
            for m in MODALITIES:
                src = features[m] if config.ablate_cre else inject_behavior(
                    np.asarray(features[m], dtype=np.float64), o, config.mu_m)
                graphs[m] = build_topH_graph(src, config.H, modality=m, row_scale=config.graph_row_scale)
        clusters = {}
        if not config.ablate_ica:
            if config.k > n:
                raise ValueError(f"k={config.k} exceeds the {n}-item catalog")
            seeds = rng_stream(config.seed, "kmeans").integers(2**32, size=len(MODALITIES))
            for m, s in zip(MODALITIES, seeds):
                clusters[m] = kmeans_cluster(features[m], config.k, int(s), config.kmeans_iters, modality=m)
        return cls(config, n, {m: np.asarray(features[m]) for m in MODALITIES}, o, graphs, clusters)

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        cfg, dt = self.config, self.config.np_dtype
        std = cfg.init_std or 1.0 / math.sqrt(cfg.d)
        params = {"item_id": parameter((rng.standard_normal((self.n_items, cfg.d)) * std).astype(dt))}
        pos_names = ["pos"] if not cfg.untie_positions else ["pos.id"] + [f"pos.{m}" for m in MODALITIES]
        for name in pos_names:
            params[name] = parameter((rng.standard_normal((cfg.max_len, cfg.d)) * std).astype(dt))
        for channel in ("id",) + MODALITIES:
            enc = init_encoder(rng, cfg.d, cfg.n_layers, cfg.n_heads, cfg.d_ff or None, dt, cfg.activation)
            params.update(enc.named(f"enc.{channel}"))
        if cfg.ablate_mrgc:
            for m in MODALITIES:
                d_m = self.features[m].shape[1]
                params[f"proj.{m}"] = parameter((rng.standard_normal((d_m, cfg.d)) / math.sqrt(d_m)).astype(dt))
        for name, t in params.items():
            t.name = name
        return params

    def _encoder_views(self) -> dict[str, EncoderParams]:
        cfg = self.config
        views = {}
        for channel in ("id",) + MODALITIES:
            layers = [{key: self.params[f"enc.{channel}.{l}.{key}"] for key in
                       ("q", "k", "v", "u", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")}
                      for l in range(cfg.n_layers)]
            views[channel] = EncoderParams(layers, cfg.n_heads, cfg.activation)
        return views

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
            t.data[...] = arrays[name]

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    # -- forward ------------------------------------------------------------
    def position_table(self, channel: str) -> Tensor:
        return self.params["pos"] if not self.config.untie_positions else self.params[f"pos.{channel}"]

    def modal_item_table(self, m: str, conv_source: Tensor) -> Tensor:
        if self.config.ablate_mrgc:
            raw = Tensor(self.features[m].astype(self.config.np_dtype))
            return raw @ self.params[f"proj.{m}"]
        return graph_convolve(self.graphs[m], conv_source)

    def forward(self, batch: Batch, gumbel_rng: np.random.Generator | None = None) -> ForwardResult:
        cfg = self.config
        ids, valid = batch.item_ids, batch.pad_mask
        if ids.shape[1] > cfg.max_len:
            raise ShapeError(f"batch width {ids.shape[1]} exceeds max_len {cfg.max_len}")
        e_id = self.params["item_id"]
        e_bar = inject_behavior(e_id, self.cooccurrence, cfg.mu_id)
        pad_row = np.zeros((1, cfg.d), dtype=cfg.np_dtype)

        seq_table = e_bar if cfg.seq_input == "injected" else e_id
        x = embed_sequence(ids, valid, concat([seq_table, pad_row], axis=0), self.position_table("id"))
        id_states = transformer_forward(x, valid, self.encoders["id"])[-1]
        id_last = id_states[:, -1, :]

        conv_src = e_id if cfg.conv_source == "raw" else e_bar
        result = ForwardResult(triple=None, id_states=id_states)
        modal_last, tilde_last, tables = {}, {}, {}
        for m in MODALITIES:
            table = self.modal_item_table(m, conv_src)
            tables[m] = table
            x = embed_sequence(ids, valid, concat([table, pad_row], axis=0), self.position_table(m))
            states = transformer_forward(x, valid, self.encoders[m])
            e_u = states[-1]
            result.modal_states[m] = e_u
            if cfg.ablate_ica:
                e_tilde = e_u
            else:
                centers0 = center_features(self._assign[m], table)
                centers0.retain = True
                result.centers[m] = centers0
                e_c = centralized_attention(centers0, states, self.encoders[m].layers, cfg.n_heads,
                                            valid, cfg.activation)
                result.user_centers[m] = e_c
                gamma = gumbel_relation(e_u, e_c, cfg.tau, gumbel_rng)
                result.relations[m] = gamma
                e_tilde = centralize_modal(e_u, gamma, e_c)
            modal_last[m] = e_u[:, -1, :]
            tilde_last[m] = e_tilde[:, -1, :]

        e_s = fuse_sequence(id_last, modal_last, cfg.rho)
        result.triple = score_channels(e_s, tilde_last, e_id, tables, cfg.rho)
        return result

    def loss(self, batch: Batch, gumbel_rng: np.random.Generator | None = None) -> Tensor:
        return compute_loss(self.forward(batch, gumbel_rng).triple, batch.targets, self.config.rho)

    def score(self, batch: Batch) -> np.ndarray:
        """Combined full-catalog scores in evaluation mode (no noise, no graph)."""
        with no_grad():
            return self.forward(batch).triple.combined.data

    def gradient_report(self, batch: Batch, gumbel_rng: np.random.Generator | None = None) -> dict[str, float]:
        """Gradient norm per parameter, plus the retained layer-0 interest centers."""
        for t in self.params.values():
            t.zero_grad()
        out = self.forward(batch, gumbel_rng)
        compute_loss(out.triple, batch.targets, self.config.rho).backward()
        report = {name: float(np.linalg.norm(t.grad)) for name, t in self.params.items() if t.grad is not None}
        for m, c in out.centers.items():
            report[f"centers.{m}"] = float(np.linalg.norm(c.grad))
        for t in self.params.values():
            t.zero_grad()
        return report
