"""Interaction logs, modal feature files, leave-one-out splits and batching.

Also hosts the synthetic generator used by the tests and the CLI, which
plants either a deterministic ID transition rule or a modal-neighbour rule
so that experiments have a known right answer.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

MODALITIES = ("visual", "textual")
MIN_INTERACTIONS = 3
FEATURE_MAGIC = b"MDSF"
FEATURE_VERSION = 1


@dataclass
class InteractionDataset:
    n_users: int
    n_items: int
    sequences: list[np.ndarray]
    max_len: int = 50
    user_ids: list[str] | None = None
    item_ids: list[str] | None = None
    dropped_users: int = 0

    def __post_init__(self):
        if len(self.sequences) != self.n_users:
            raise DataError(f"{len(self.sequences)} sequences for {self.n_users} users")
        for u, seq in enumerate(self.sequences):
            if len(seq) < MIN_INTERACTIONS:
                raise DataError(f"user {u} has {len(seq)} interactions, need >= {MIN_INTERACTIONS}")
            if seq.min() < 0 or seq.max() >= self.n_items:
                raise DataError(f"user {u} has item ids outside [0, {self.n_items})")

    @property
    def n_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    @property
    def sparsity(self) -> float:
        return 1.0 - self.n_interactions / (self.n_users * self.n_items)

    def item_index(self) -> dict[str, int]:
        ids = self.item_ids if self.item_ids is not None else [str(i) for i in range(self.n_items)]
        return {raw: i for i, raw in enumerate(ids)}

    def user_index(self) -> dict[str, int]:
        ids = self.user_ids if self.user_ids is not None else [str(u) for u in range(self.n_users)]
        return {raw: u for u, raw in enumerate(ids)}

    def stats(self) -> dict[str, float]:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_interactions": self.n_interactions,
            "avg_len": self.n_interactions / self.n_users,
            "sparsity": self.sparsity,
            "dropped_users": self.dropped_users,
        }


def _sorted_ids(raw: set[str]) -> list[str]:
    try:
        return sorted(raw, key=int)
    except ValueError:
        return sorted(raw)


def load_interactions(path, max_len: int = 50, min_interactions: int = MIN_INTERACTIONS) -> InteractionDataset:
    """Read ``user<TAB>item<TAB>timestamp`` lines into dense per-user sequences.

    Ids are re-indexed in sorted order (numeric when every id is an integer).
    Each user's rows are ordered by timestamp with ties kept in file order;
    users with fewer than ``min_interactions`` rows are dropped and counted.
    """
    path = Path(path)
    rows: dict[str, list[tuple[float, int, str]]] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts
            try:
                stamp = float(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not a number") from None
            rows.setdefault(user, []).append((stamp, lineno, item))

    kept = {u: r for u, r in rows.items() if len(r) >= min_interactions}
    dropped = len(rows) - len(kept)
    if not kept:
        raise DataError(f"{path}: no user has >= {min_interactions} interactions")
    user_ids = _sorted_ids(set(kept))
    item_ids = _sorted_ids({item for r in kept.values() for _, _, item in r})
    item_of = {raw: i for i, raw in enumerate(item_ids)}
    sequences = []
    for u in user_ids:
        ordered = sorted(kept[u], key=lambda rec: (rec[0], rec[1]))
        sequences.append(np.array([item_of[item] for _, _, item in ordered], dtype=np.int64))
    if dropped:
        log.info("dropped %d users with fewer than %d interactions", dropped, min_interactions)
    return InteractionDataset(len(user_ids), len(item_ids), sequences, max_len=max_len,
                              user_ids=user_ids, item_ids=item_ids, dropped_users=dropped)


def write_interactions(dataset: InteractionDataset, path) -> None:
    """Write one line per interaction; timestamps are sequence positions."""
    users = dataset.user_ids or [str(u) for u in range(dataset.n_users)]
    items = dataset.item_ids or [str(i) for i in range(dataset.n_items)]
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("# user\titem\ttimestamp\n")
        for u, seq in enumerate(dataset.sequences):
            for pos, item in enumerate(seq):
                fh.write(f"{users[u]}\t{items[item]}\t{pos}\n")


# -- modal features -----------------------------------------------------------

@dataclass
class ModalFeatureTable:
    modality: str
    rows: np.ndarray
    missing: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        if self.rows.ndim != 2:
            raise DataError(f"feature table must be 2-D, got shape {self.rows.shape}")
        if np.isnan(self.rows).any():
            raise DataError(f"{self.modality} features contain NaN")

    @property
    def n_items(self) -> int:
        return self.rows.shape[0]

    @property
    def d_m(self) -> int:
        return self.rows.shape[1]


def write_modal_features(table: ModalFeatureTable, path, fmt: str = "binary",
                         item_ids: list[str] | None = None) -> None:
    path = Path(path)
    if fmt == "binary":
        with path.open("wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<III", FEATURE_VERSION, table.n_items, table.d_m))
            fh.write(np.ascontiguousarray(table.rows, dtype="<f4").tobytes())
    elif fmt == "text":
        ids = item_ids or [str(i) for i in range(table.n_items)]
        missing = set(table.missing)
        with path.open("w", encoding="utf-8") as fh:
            for i, row in enumerate(table.rows):
                if i in missing:
                    continue
                fh.write(ids[i] + "\t" + " ".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ValueError(f"unknown feature format {fmt!r}")


def load_modal_features(path, modality: str, n_items: int | None = None,
                        item_index: dict[str, int] | None = None) -> ModalFeatureTable:
    """Load one modality's item feature matrix.

    The binary form is self-describing. The text form keys rows by raw item
    id (mapped through ``item_index``, or read as dense indices when none is
    given); items absent from a text file get zero rows and are reported.
    """
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return _load_binary_features(path, modality, n_items)
    if n_items is None:
        n_items = len(item_index) if item_index is not None else None
    if n_items is None:
        raise DataError(f"{path}: text feature files need the catalog size")
    return _load_text_features(path, modality, n_items, item_index)


def _load_binary_features(path: Path, modality: str, n_items: int | None) -> ModalFeatureTable:
    blob = path.read_bytes()
    if len(blob) < 16:
        raise DataError(f"{path}: truncated feature header")
    version, n, d_m = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    if n_items is not None and n != n_items:
        raise DataError(f"{path}: header declares {n} items, dataset has {n_items}")
    body = blob[16:]
    if len(body) != n * d_m * 4:
        raise DataError(f"{path}: expected {n * d_m * 4} payload bytes, found {len(body)}")
    rows = np.frombuffer(body, dtype="<f4").reshape(n, d_m).astype(np.float32)
    return ModalFeatureTable(modality, rows)


def _load_text_features(path: Path, modality: str, n_items: int,
                        item_index: dict[str, int] | None) -> ModalFeatureTable:
    found: dict[int, np.ndarray] = {}
    d_m = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            try:
                key, payload = line.split("\t", 1)
                vec = np.array([float(v) for v in payload.split()], dtype=np.float32)
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed feature row") from None
            if d_m is None:
                d_m = vec.size
            elif vec.size != d_m:
                raise DataError(f"{path}:{lineno}: row has {vec.size} values, expected {d_m}")
            if item_index is not None:
                if key not in item_index:
                    raise DataError(f"{path}:{lineno}: item {key!r} is not in the catalog")
                idx = item_index[key]
            else:
                try:
                    idx = int(key)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: item id {key!r} is not an index") from None
                if not 0 <= idx < n_items:
                    raise DataError(f"{path}:{lineno}: item index {idx} outside [0, {n_items})")
            found[idx] = vec
    if d_m is None:
        raise DataError(f"{path}: no feature rows")
    rows = np.zeros((n_items, d_m), dtype=np.float32)
    for idx, vec in found.items():
        rows[idx] = vec
    missing = sorted(set(range(n_items)) - set(found))
    if missing:
        log.warning("%s: %d items have no %s features; zero-filled", path, len(missing), modality)
    return ModalFeatureTable(modality, rows, missing)


# -- split and batching -------------------------------------------------------

@dataclass
class SplitDataset:
    n_users: int
    n_items: int
    train: list[np.ndarray]
    valid_target: np.ndarray
    test_target: np.ndarray
    max_len: int = 50

    def full_sequence(self, u: int) -> np.ndarray:
        return np.concatenate([self.train[u], [self.valid_target[u], self.test_target[u]]])


def split_leave_one_out(dataset: InteractionDataset) -> SplitDataset:
    """Hold out the last item for test and the one before it for validation."""
    for u, seq in enumerate(dataset.sequences):
        if len(seq) < MIN_INTERACTIONS:
            raise DataError(f"user {u}: leave-one-out needs >= {MIN_INTERACTIONS} interactions")
    seqs = dataset.sequences
    return SplitDataset(
        n_users=dataset.n_users,
        n_items=dataset.n_items,
        train=[np.asarray(s[:-2]) for s in seqs],
        valid_target=np.array([s[-2] for s in seqs], dtype=np.int64),
        test_target=np.array([s[-1] for s in seqs], dtype=np.int64),
        max_len=dataset.max_len,
    )


@dataclass
class Batch:
    users: np.ndarray
    item_ids: np.ndarray
    pad_mask: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


EVAL_MODES = ("train", "valid", "test")


def build_examples(split: SplitDataset, mode: str, prefix_augment: bool = False
                   ) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """(users, input sequences, targets) for one pass over ``mode``.

    ``train`` predicts the last training item from the items before it, so a
    user whose training prefix is a single item contributes no example.
    """
    users, inputs, targets = [], [], []
    for u in range(split.n_users):
        tr = split.train[u]
        if mode == "train":
            starts = range(1, len(tr)) if prefix_augment else ([len(tr) - 1] if len(tr) > 1 else [])
            for j in starts:
                users.append(u)
                inputs.append(tr[:j])
                targets.append(tr[j])
        elif mode == "valid":
            users.append(u)
            inputs.append(tr)
            targets.append(split.valid_target[u])
        elif mode == "test":
            users.append(u)
            inputs.append(np.append(tr, split.valid_target[u]))
            targets.append(split.test_target[u])
        else:
            raise ValueError(f"unknown mode {mode!r}; expected one of {EVAL_MODES}")
    return np.array(users, dtype=np.int64), inputs, np.array(targets, dtype=np.int64)


def pad_sequences(inputs: list[np.ndarray], max_len: int, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad (and left-truncate) so the newest item sits in the last column."""
    ids = np.full((len(inputs), max_len), pad_id, dtype=np.int64)
    for b, seq in enumerate(inputs):
        seq = np.asarray(seq)[-max_len:]
        if len(seq):
            ids[b, max_len - len(seq):] = seq
    return ids, ids != pad_id


def make_batches(split: SplitDataset, batch_size: int, max_len: int, seed: int | None = None,
                 mode: str = "train", prefix_augment: bool = False) -> Iterator[Batch]:
    """Yield padded batches; shuffled when ``seed`` is given, file order otherwise."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    users, inputs, targets = build_examples(split, mode, prefix_augment)
    order = np.arange(len(users))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(users))
    for lo in range(0, len(order), batch_size):
        sel = order[lo:lo + batch_size]
        ids, mask = pad_sequences([inputs[i] for i in sel], max_len, split.n_items)
        yield Batch(users[sel], ids, mask, targets[sel])


# -- synthetic data -----------------------------------------------------------

SYNTH_RULES = ("markov_id", "modal_neighbor", "mixed")


@dataclass
class SynthSpec:
    n_users: int = 200
    n_items: int = 100
    k_true: int = 4
    len_min: int = 5
    len_max: int = 15
    rule: str = "modal_neighbor"
    d_visual: int = 16
    d_textual: int = 16
    sigma: float = 1.0
    separation: float = 10.0
    n_neighbors: int = 5
    mix: float = 0.5
    max_len: int = 50

    def validate(self) -> None:
        if self.rule not in SYNTH_RULES:
            raise DataError(f"unknown transition rule {self.rule!r}; expected one of {SYNTH_RULES}")
        if self.k_true > self.n_items:
            raise DataError(f"k_true={self.k_true} exceeds n_items={self.n_items}")
        if not MIN_INTERACTIONS <= self.len_min <= self.len_max:
            raise DataError(f"sequence length range [{self.len_min}, {self.len_max}] is infeasible")
        if self.rule != "markov_id" and not 1 <= self.n_neighbors < self.n_items:
            raise DataError("n_neighbors must lie in [1, n_items)")

    @classmethod
    def from_text(cls, text: str) -> SynthSpec:
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"synth spec line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise DataError(f"synth spec line {lineno}: unknown key {key!r}")
            kind = kinds[key]
            values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
        spec = cls(**values)
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path) -> SynthSpec:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _cluster_centers(rng: np.random.Generator, k: int, d: int, dist: float) -> np.ndarray:
    if d >= k:
        # scaled orthonormal directions: pairwise distance exactly `dist`
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return (dist / np.sqrt(2.0)) * q[:, :k].T
    for _ in range(1000):
        c = rng.standard_normal((k, d)) * dist
        gaps = np.linalg.norm(c[:, None] - c[None], axis=-1) + np.eye(k) * np.inf
        if gaps.min() >= dist:
            return c
    raise DataError(f"cannot place {k} centers {dist} apart in {d} dimensions")


def cosine_neighbors(x: np.ndarray, n: int) -> np.ndarray:
    """Indices of each row's ``n`` most cosine-similar other rows (ties: lower index)."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x, dtype=np.float64), where=norms > 0)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    return np.argsort(-sim, axis=1, kind="stable")[:, :n]


def synth_generate(spec: SynthSpec, seed: int, return_truth: bool = False):
    """Generate ``(dataset, {modality: table})`` with planted structure.

    With ``return_truth`` a third element carries the planted cluster labels
    per modality, the ID transition permutation and the neighbour sets.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.n_items
    features, labels, neighbors = {}, {}, {}
    for m, d_m in zip(MODALITIES, (spec.d_visual, spec.d_textual)):
        lab = rng.permutation(np.arange(n) % spec.k_true)
        centers = _cluster_centers(rng, spec.k_true, d_m, spec.separation * spec.sigma)
        rows = centers[lab] + spec.sigma * rng.standard_normal((n, d_m))
        features[m] = ModalFeatureTable(m, rows.astype(np.float32))
        labels[m] = lab
        if spec.rule != "markov_id":
            neighbors[m] = cosine_neighbors(features[m].rows.astype(np.float64), spec.n_neighbors)

    cycle = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[cycle] = np.roll(cycle, -1)
    starts = rng.permutation(n)

    sequences = []
    for u in range(spec.n_users):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        pref = MODALITIES[int(rng.integers(2))]
        seq = [int(starts[u % n])]
        for _ in range(length - 1):
            cur = seq[-1]
            use_id = spec.rule == "markov_id" or (spec.rule == "mixed" and rng.random() < spec.mix)
            seq.append(int(perm[cur]) if use_id else int(rng.choice(neighbors[pref][cur])))
        sequences.append(np.array(seq, dtype=np.int64))

    dataset = InteractionDataset(spec.n_users, n, sequences, max_len=spec.max_len,
                                 user_ids=[str(u) for u in range(spec.n_users)],
                                 item_ids=[str(i) for i in range(n)])
    if return_truth:
        return dataset, features, {"labels": labels, "permutation": perm, "neighbors": neighbors}
    return dataset, features
