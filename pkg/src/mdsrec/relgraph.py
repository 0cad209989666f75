"""Per-modality item-item top-H cosine graphs and one-layer light convolution."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .numkit import SparseMatrix, Tensor, sparse_dense_matmul


@dataclass
class RelationGraph:
    modality: str
    adjacency: SparseMatrix
    H: int
    cold_items: list[int] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return self.adjacency.n_rows

    def neighbors(self, i: int) -> np.ndarray:
        return self.adjacency.row(i)[0]


def cosine_affinity(e_bar: np.ndarray, i: int, j: int) -> float:
    a, b = np.asarray(e_bar[i], dtype=np.float64), np.asarray(e_bar[j], dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    unit = np.zeros_like(x)
    nz = norms > 0
    unit[nz] = x[nz] / norms[nz, None]
    return unit, np.flatnonzero(~nz)


def build_topH_graph(e_bar: np.ndarray, H: int, modality: str = "visual",
                     block: int = 512, row_scale: bool = False) -> RelationGraph:
    """Connect every item to its ``H`` most cosine-similar other items.

    Ties go to the smaller item index. Edge weights are 1, or ``1/H`` with
    ``row_scale``. Affinities are computed one row block at a time.
    """
    if H < 0:
        raise ValueError("H must be >= 0")
    n = e_bar.shape[0]
    if H > n - 1:
        warnings.warn(f"H={H} exceeds |X|-1={n - 1}; clamping", stacklevel=2)
        H = n - 1
    unit, cold = _unit_rows(e_bar)
    cols = np.empty((n, H), dtype=np.int64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        sim = unit[lo:hi] @ unit.T
        sim[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        cols[lo:hi] = np.sort(np.argsort(-sim, axis=1, kind="stable")[:, :H], axis=1)
    weight = 1.0 / H if (row_scale and H > 0) else 1.0
    indptr = np.arange(n + 1, dtype=np.int64) * H
    adj = SparseMatrix(n, n, indptr, cols.reshape(-1), np.full(n * H, weight))
    return RelationGraph(modality, adj, H, cold_items=cold.tolist())


def graph_convolve(graph: RelationGraph, e_id) -> Tensor:
    """Each item's representation becomes the sum of its neighbours' ID embeddings."""
    if e_id.shape[0] != graph.n_items:
        raise ShapeError(f"ID table has {e_id.shape[0]} rows, graph has {graph.n_items} items")
    return sparse_dense_matmul(graph.adjacency, e_id)


def dump_graph(graph: RelationGraph, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"# modality={graph.modality} H={graph.H}\n")
        for i in range(graph.n_items):
            fh.write(f"{i}\t" + " ".join(str(j) for j in graph.neighbors(i)) + "\n")
