"""Interest centers: k-means over raw modal features and centralized attention.

Centers start as cluster means of the graph-convolved item table and are
refined per user by cross-attending to that user's encoder states, reusing
the channel encoder's attention and feed-forward weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError
from .numkit import ACTIVATIONS, SparseMatrix, Tensor, sparse_dense_matmul
from .seqenc import multi_head_attention


@dataclass
class ClusterAssignment:
    modality: str
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.inertia_history)

    @property
    def matrix(self) -> SparseMatrix:
        """k x |X| hard assignment with rows scaled to sum to 1."""
        return assignment_matrix(self.labels, self.k)


def assignment_matrix(labels: np.ndarray, k: int) -> SparseMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    sizes = np.bincount(labels, minlength=k).astype(np.float64)
    if np.any(sizes == 0):
        raise ValueError("assignment has an empty cluster")
    items = np.arange(labels.size)
    return SparseMatrix.from_coo(k, labels.size, labels, items, 1.0 / sizes[labels])


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        else:
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]]).ravel())
    return x[chosen].copy()


def _fill_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    """Move the point farthest from its center into each empty cluster."""
    labels = labels.copy()
    while True:
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if not empty.size:
            return labels
        dist = ((x - centroids[labels]) ** 2).sum(1)
        dist[sizes[labels] <= 1] = -1.0  # never empty a donor cluster
        far = int(np.argmax(dist))
        labels[far] = empty[0]
        centroids[empty[0]] = x[far]


def _inertia(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans_cluster(features: np.ndarray, k: int, seed: int, max_iter: int = 100,
                   modality: str = "visual") -> ClusterAssignment:
    """Lloyd's k-means with k-means++ seeding; deterministic for a given seed.

    Stops at an assignment fixpoint or after ``max_iter`` rounds. Assignment
    ties go to the lowest cluster index.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        new = _fill_empty(x, new, centroids, k)
        converged = labels is not None and np.array_equal(new, labels)
        labels = new
        centroids = np.stack([x[labels == c].mean(axis=0) for c in range(k)])
        inertia = _inertia(x, labels, centroids)
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise NumericError(f"k-means inertia rose from {history[-1]!r} to {inertia!r}")
        history.append(inertia)
        if converged:
            break
    return ClusterAssignment(modality, k, labels, centroids, history[-1], history)


def center_features(assign, item_table) -> Tensor:
    """Cluster means of ``item_table`` rows (differentiable in the table)."""
    c = assign.matrix if isinstance(assign, ClusterAssignment) else assign
    if c.n_cols != item_table.shape[0]:
        raise ShapeError(f"assignment covers {c.n_cols} items, table has {item_table.shape[0]} rows")
    return sparse_dense_matmul(c, item_table)


def centralized_attention(centers0: Tensor, channel_states: list[Tensor], layers: list[dict[str, Tensor]],
                          n_heads: int, pad_mask: np.ndarray, activation: str = "gelu") -> Tensor:
    """Refine centers layer by layer against a user's encoder states.

    At layer ``l`` the centers query the encoder's layer ``l-1`` output with
    that layer's Q/K/V/U, then pass through ``act((g W1 + b1) W2 + b2)`` using
    the same block's feed-forward weights. There is no residual path.
    Returns (batch, k, d).
    """
    if len(layers) != len(channel_states) - 1:
        raise ShapeError(f"{len(layers)} attention layers for {len(channel_states) - 1} encoder blocks")
    act = ACTIVATIONS[activation]
    batch, _, d = channel_states[0].shape
    k = centers0.shape[0]
    c = centers0.reshape(1, k, d) + np.zeros((batch, k, d), dtype=centers0.dtype)
    key_mask = pad_mask[:, None, None, :]
    for layer, states in zip(layers, channel_states[:-1]):
        g, _ = multi_head_attention(c, states, layer, n_heads, key_mask, math.sqrt(d))
        c = act((g @ layer["w1"] + layer["b1"]) @ layer["w2"] + layer["b2"])
    return c


def dump_clusters(assignments: dict[str, ClusterAssignment], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("modality\titem\tcluster\n")
        for m, a in assignments.items():
            for i, c in enumerate(a.labels):
                fh.write(f"{m}\t{i}\t{int(c)}\n")
