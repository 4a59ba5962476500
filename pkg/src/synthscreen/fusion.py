"""Rank-average (Borda) fusion of per-model synthesizability probabilities.

For each model m the rank of candidate i is ``1 + #{j : s_m(j) < s_m(i)}``,
so tied candidates share the lowest rank of their tie group.  The fused
score averages the ranks over models and divides by N, giving values in
``[1/N, 1]``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .scoring import ScoreVector

MODEL_NAMES = ("c", "s")


@dataclass
class RankTable:
    ids: list[str]
    scores: dict[str, np.ndarray]
    ranks: dict[str, np.ndarray]
    rank_avg: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def to_csv(self, path: str | Path | None = None) -> str:
        """CSV with columns ``id, s_<m>..., rank_<m>..., rank_avg``; floats in round-trip repr."""
        models = list(self.scores)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id"] + [f"s_{m}" for m in models] + [f"rank_{m}" for m in models] + ["rank_avg"])
        cols_s = [self.scores[m].tolist() for m in models]
        cols_r = [self.ranks[m].tolist() for m in models]
        ra = self.rank_avg.tolist()
        for k, cid in enumerate(self.ids):
            row = [cid] + [repr(c[k]) for c in cols_s] + [str(c[k]) for c in cols_r] + [repr(ra[k])]
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def below_counts(column: np.ndarray) -> np.ndarray:
    """``#{j : x_j < x_i}`` for every i, via one sort (O(N log N))."""
    sorted_col = np.sort(column, kind="mergesort")
    return np.searchsorted(sorted_col, column, side="left")


def rank_average_columns(ids: Sequence[str], columns: Mapping[str, Sequence[float]]) -> RankTable:
    """Fuse M score columns over N candidates; M = 2 reproduces the two-model formula."""
    n = len(ids)
    if n < 1:
        raise ValueError("rank fusion needs at least one candidate")
    if not columns:
        raise ValueError("rank fusion needs at least one model column")
    scores, ranks = {}, {}
    total = np.zeros(n, dtype=np.int64)
    for m, col in columns.items():
        arr = np.asarray(col, dtype=float)
        if arr.shape != (n,):
            raise ValueError(f"model {m}: expected {n} scores, got {arr.shape}")
        if np.any(np.isnan(arr)):
            raise ValueError(f"model {m}: NaN score")
        r = 1 + below_counts(arr)
        scores[m] = arr
        ranks[m] = r
        total += r
    rank_avg = total / float(len(columns) * n)
    return RankTable(list(ids), scores, ranks, rank_avg)


def rank_average(scores: Sequence[ScoreVector]) -> RankTable:
    """RankAvg over candidates that all carry both a composition and a structure score."""
    missing = [sv.id for sv in scores if sv.s_c is None or sv.s_s is None]
    if missing:
        raise ValueError(f"missing model score for {len(missing)} candidate(s), first: {missing[0]!r}")
    return rank_average_columns(
        [sv.id for sv in scores],
        {"c": [sv.s_c for sv in scores], "s": [sv.s_s for sv in scores]},
    )


def rank_threshold_select(table: RankTable, tau: float) -> list[str]:
    """Ids with RankAvg >= tau, highest first; equal RankAvg ordered by id."""
    keep = np.flatnonzero(table.rank_avg >= tau)
    return [table.ids[k] for k in sorted(keep, key=lambda k: (-table.rank_avg[k], table.ids[k]))]
