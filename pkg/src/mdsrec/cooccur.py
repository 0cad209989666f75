"""Behavioural co-occurrence: positional-distance affinities and feature injection."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .numkit import SparseMatrix, Tensor, scale, sparse_dense_matmul


@dataclass
class CooccurrenceMatrix:
    matrix: SparseMatrix
    built_from: int

    @property
    def n_items(self) -> int:
        return self.matrix.n_rows


def pair_score(sequence: Sequence[int], i: int, j: int, distance_weighted: bool = True) -> float:
    """Affinity of items ``i`` and ``j`` within one sequence.

    ``1/D`` where ``D`` is the smallest positional gap between an occurrence
    of ``i`` and one of ``j``; 0 when either is absent. With
    ``distance_weighted=False`` any co-occurrence scores 1.
    """
    if i == j:
        raise ValueError("pair_score is undefined for i == j")
    seq = np.asarray(sequence)
    pi, pj = np.flatnonzero(seq == i), np.flatnonzero(seq == j)
    if not pi.size or not pj.size:
        return 0.0
    if not distance_weighted:
        return 1.0
    return 1.0 / int(np.abs(pi[:, None] - pj[None, :]).min())


def _pair_distances(seq: np.ndarray, n_items: int) -> tuple[np.ndarray, np.ndarray]:
    """Unordered item-pair keys (lo * n_items + hi) with their minimum gap."""
    ii, jj = np.triu_indices(len(seq), 1)
    a, b = seq[ii], seq[jj]
    keep = a != b
    a, b, gap = a[keep], b[keep], (jj - ii)[keep]
    keys = np.minimum(a, b) * n_items + np.maximum(a, b)
    order = np.lexsort((gap, keys))
    keys, gap = keys[order], gap[order]
    first = np.ones(keys.size, dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    return keys[first], gap[first]


def build_cooccurrence(train_sequences: Sequence[Sequence[int]], n_items: int,
                       distance_weighted: bool = True, floor: float = 0.0) -> CooccurrenceMatrix:
    """Sum per-user pair affinities into a symmetric, zero-diagonal matrix.

    Callers pass training prefixes only, so held-out targets never leak in.
    Per-pair sums accumulate in user order.
    """
    all_keys, all_w = [], []
    for seq in train_sequences:
        keys, gap = _pair_distances(np.asarray(seq, dtype=np.int64), n_items)
        all_keys.append(keys)
        all_w.append(1.0 / gap if distance_weighted else np.ones(gap.size))
    if all_keys:
        keys, w = np.concatenate(all_keys), np.concatenate(all_w)
    else:
        keys, w = np.zeros(0, dtype=np.int64), np.zeros(0)
    uniq, inv = np.unique(keys, return_inverse=True)
    sums = np.bincount(inv, weights=w, minlength=uniq.size)
    if floor > 0:
        keep = sums >= floor
        uniq, sums = uniq[keep], sums[keep]
    lo, hi = uniq // n_items, uniq % n_items
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    vals = np.concatenate([sums, sums])
    return CooccurrenceMatrix(SparseMatrix.from_coo(n_items, n_items, rows, cols, vals),
                              built_from=len(train_sequences))


def row_normalized(o: SparseMatrix) -> SparseMatrix:
    """Divide each row by its sum (empty rows stay empty). Breaks symmetry."""
    sums = np.bincount(o.row_ids(), weights=o.values, minlength=o.n_rows)
    return SparseMatrix(o.n_rows, o.n_cols, o.indptr, o.indices, o.values / sums[o.row_ids()])


def inject_behavior(e, o: SparseMatrix, mu: float):
    """``mu * (O @ E) + E`` for a Tensor (differentiable) or a plain array."""
    if mu < 0:
        raise ValueError("injection weight mu must be >= 0")
    if e.shape[0] != o.n_cols:
        raise ShapeError(f"feature table has {e.shape[0]} rows, co-occurrence matrix is {o.shape}")
    if isinstance(e, Tensor):
        return scale(sparse_dense_matmul(o, e), mu) + e
    e = np.asarray(e)
    return (e.dtype.type(mu) * o.dot(e) + e).astype(e.dtype, copy=False)


def dump_cooccurrence(cm: CooccurrenceMatrix, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(cm.matrix.n_rows):
            cols, vals = cm.matrix.row(i)
            for j, v in zip(cols, vals):
                fh.write(f"{i}\t{j}\t{float(v)!r}\n")
