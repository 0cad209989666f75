"""Full-catalog ranking with Recall@N and NDCG@N."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import SplitDataset, make_batches


def rank_target(scores: np.ndarray, target: int, exclusions: Iterable[int] = ()) -> int:
    """1 + number of other candidates scoring at least as high as ``target``.

    Ties count against the target, so the rank is pessimistic and platform
    independent.
    """
    excluded = set(int(e) for e in exclusions)
    if target in excluded:
        raise ValueError(f"target {target} is excluded from ranking")
    scores = np.asarray(scores)
    keep = np.ones(scores.size, dtype=bool)
    if excluded:
        keep[list(excluded)] = False
    keep[target] = False
    return 1 + int(np.count_nonzero(scores[keep] >= scores[target]))


def rank_targets(scores: np.ndarray, targets: np.ndarray, excluded: np.ndarray | None = None) -> np.ndarray:
    """Vectorised :func:`rank_target` over a (B, |X|) score block."""
    scores = np.asarray(scores)
    rows = np.arange(len(targets))
    tgt = scores[rows, targets][:, None]
    ahead = scores >= tgt
    if excluded is not None:
        if np.any(excluded[rows, targets]):
            raise ValueError("a target is excluded from ranking")
        ahead &= ~excluded
    return ahead.sum(axis=1).astype(np.int64)


def metrics(ranks: np.ndarray, n: int) -> tuple[float, float]:
    """(Recall@n, NDCG@n) for single-target ranked lists.

    The gain sum is correctly rounded (``math.fsum``), so the result does not
    depend on summation order or batch layout.
    """
    if n < 1:
        raise ValueError("cutoff must be >= 1")
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        return 0.0, 0.0
    hits = ranks[ranks <= n]
    gain = math.fsum(1.0 / math.log2(int(r) + 1) for r in hits)
    return hits.size / ranks.size, gain / ranks.size


@dataclass
class RankingReport:
    ranks: np.ndarray
    cutoffs: tuple[int, ...] = (10, 20)
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for n in self.cutoffs:
            self.recall[n], self.ndcg[n] = metrics(self.ranks, n)

    @property
    def n_users(self) -> int:
        return int(self.ranks.size)

    def to_csv(self) -> str:
        lines = ["metric,cutoff,value"]
        for n in self.cutoffs:
            lines.append(f"recall,{n},{self.recall[n]!r}")
            lines.append(f"ndcg,{n},{self.ndcg[n]!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        parts = [f"R@{n}={self.recall[n]:.4f} N@{n}={self.ndcg[n]:.4f}" for n in self.cutoffs]
        return f"{self.n_users} users: " + "  ".join(parts)

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RankingReport):
            return NotImplemented
        return (self.cutoffs == other.cutoffs and np.array_equal(self.ranks, other.ranks)
                and self.recall == other.recall and self.ndcg == other.ndcg)


def evaluate(model, split: SplitDataset, mode: str = "test", cutoffs=(10, 20),
             batch_size: int | None = None, filter_seen: bool | None = None) -> RankingReport:
    """Rank each example's target against every item with the frozen model."""
    cfg = model.config
    batch_size = batch_size or cfg.batch_size
    filter_seen = cfg.filter_seen if filter_seen is None else filter_seen
    ranks = []
    for batch in make_batches(split, batch_size, cfg.max_len, seed=None, mode=mode):
        scores = model.score(batch)
        excluded = None
        if filter_seen:
            excluded = np.zeros(scores.shape, dtype=bool)
            for b, u in enumerate(batch.users):
                seen = batch.item_ids[b][batch.pad_mask[b]]
                excluded[b, seen] = True
                excluded[b, batch.targets[b]] = False
        ranks.append(rank_targets(scores, batch.targets, excluded))
    all_ranks = np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)
    return RankingReport(all_ranks, tuple(cutoffs))


