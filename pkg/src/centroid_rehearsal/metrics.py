"""Evaluation metrics over the accuracy matrix, plus the centroid-drift statistic.

The accuracy matrix is a lower-triangular list of rows: ``R[t][j]`` is the
accuracy on task ``j`` after finishing training task ``t`` (0-indexed).
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError


def _check_rows(R: Sequence[Sequence[float]]) -> list[list[float]]:
    rows = [list(map(float, row)) for row in R]
    if not rows:
        raise ContractError("accuracy matrix is empty")
    for t, row in enumerate(rows):
        if len(row) != t + 1:
            raise ContractError(f"row {t} has {len(row)} entries, expected {t + 1}")
    return rows


def average_accuracy(R: Sequence[Sequence[float]]) -> float:
    """Mean accuracy over all tasks after the final task finished training."""
    rows = _check_rows(R)
    return float(np.mean(rows[-1]))


def forgetting(R: Sequence[Sequence[float]]) -> float:
    """Mean drop from each old task's best intermediate accuracy to its final one.

    Negative contributions (backward transfer) are kept as-is, so the value
    can be below zero. Defined as 0 for a single task.
    """
    rows = _check_rows(R)
    T = len(rows)
    if T < 2:
        return 0.0
    drops = []
    for j in range(T - 1):
        best = max(rows[t][j] for t in range(j, T - 1))
        drops.append(best - rows[-1][j])
    return float(np.mean(drops))


def long_term_remembering(R: Sequence[Sequence[float]]) -> float:
    """Accumulated positive accuracy drop relative to when each task was first trained.

    For task ``j`` the drops at every later checkpoint are averaged over the
    remaining horizon, then summed over tasks. Never negative.
    """
    rows = _check_rows(R)
    T = len(rows)
    total = 0.0
    for j in range(T - 1):
        first = rows[j][j]
        drops = sum(max(0.0, first - rows[t][j]) for t in range(j + 1, T))
        total += drops / (T - 1 - j)
    return float(total)


def centroid_drift(stored: Mapping[int, np.ndarray],
                   checkpoints: Sequence[Mapping[int, np.ndarray]]) -> list[float]:
    """Mean displacement of recomputed centroids from their stored vectors.

    ``stored`` maps centroid id to the reference vector captured at the
    owning task's boundary; each checkpoint maps ids to the recomputed
    vectors. Returns one mean over aligned ids per checkpoint (NaN when a
    checkpoint aligns with nothing); an empty series when nothing ever aligns.
    """
    if not stored or not checkpoints:
        return []
    series = []
    any_aligned = False
    for cp in checkpoints:
        ids = sorted(set(stored) & set(cp))
        if not ids:
            series.append(float("nan"))
            continue
        any_aligned = True
        disp = [float(np.linalg.norm(np.asarray(stored[i]) - np.asarray(cp[i]))) for i in ids]
        series.append(float(np.mean(disp)))
    return series if any_aligned else []
