"""Centroid cosine-structure distillation and anchored-feature distillation.

At each task boundary the pairwise cosine similarities among that task's
centroids are frozen into a small matrix. While later tasks train, the same
matrix is recomputed from the memory exemplars (per-centroid means of
current-model features) and pulled toward the frozen one with a squared
Frobenius penalty. The matrices cost a few floats per centroid pair, far less
than storing per-sample features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .nn import ActivationCache, Network
from .rehearsal import MemoryItem


@dataclass
class DistanceMatrix:
    """Symmetric cosine-similarity matrix over one task's centroids.

    Rows/columns follow ``centroid_ids``. Zero-norm vectors cannot be
    normalized; their ids are flagged degenerate and their rows are stored as
    0 off-diagonal, 1 on the diagonal.
    """

    task_id: int
    centroid_ids: tuple[int, ...]
    entries: np.ndarray
    degenerate_ids: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "centroid_ids": list(self.centroid_ids),
            "entries": [float(v) for v in self.entries.ravel()],
            "degenerate_ids": list(self.degenerate_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistanceMatrix":
        ids = tuple(int(i) for i in d["centroid_ids"])
        n = len(ids)
        entries = np.array(d["entries"], dtype=np.float64).reshape(n, n)
        return cls(
            task_id=int(d["task_id"]), centroid_ids=ids, entries=entries,
            degenerate_ids=tuple(int(i) for i in d.get("degenerate_ids", ())),
        )


def distance_matrix(vectors: Sequence[np.ndarray], centroid_ids: Sequence[int] | None = None,
                    task_id: int = -1) -> DistanceMatrix:
    """Pairwise cosine similarities of the given centroid vectors."""
    if len(vectors) == 0:
        raise ShapeError("need at least one centroid vector")
    V = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    ids = tuple(range(len(vectors))) if centroid_ids is None else tuple(int(i) for i in centroid_ids)
    if len(ids) != V.shape[0]:
        raise ShapeError("centroid_ids length must match the number of vectors")
    norms = np.linalg.norm(V, axis=1)
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    U = V / safe[:, None]
    W = U @ U.T
    W[degenerate, :] = 0.0
    W[:, degenerate] = 0.0
    np.fill_diagonal(W, 1.0)
    return DistanceMatrix(
        task_id=task_id, centroid_ids=ids, entries=W,
        degenerate_ids=tuple(ids[i] for i in np.flatnonzero(degenerate)),
    )


@dataclass
class RecomputedCentroids:
    """Per-centroid means of current-model features over the memory items.

    Keeps the forward-order features, grouping indices, and activation cache
    so the distillation gradient can flow back into the extractor.
    """

    task_id: int
    centroid_ids: tuple[int, ...]
    means: np.ndarray                       # K x D
    counts: np.ndarray                      # K
    item_groups: list[np.ndarray] = field(repr=False, default_factory=list)
    features: np.ndarray | None = field(repr=False, default=None)
    cache: ActivationCache | None = field(repr=False, default=None)
    items: list[MemoryItem] = field(repr=False, default_factory=list)


def recompute_task_centroids(net: Network, items: Sequence[MemoryItem]) -> RecomputedCentroids | None:
    """Group one task's memory by source centroid and average current features.

    Items without a source centroid (baseline samplers) carry no grouping and
    are ignored; returns ``None`` when nothing is left to group.
    """
    tagged = [it for it in items if it.source_centroid_id is not None]
    if not tagged:
        return None
    ids = sorted({it.source_centroid_id for it in tagged})
    ordered: list[MemoryItem] = []
    groups: list[np.ndarray] = []
    row = 0
    for cid in ids:
        members = [it for it in tagged if it.source_centroid_id == cid]
        groups.append(np.arange(row, row + len(members)))
        ordered.extend(members)
        row += len(members)
    F, cache = net.forward(np.stack([it.x for it in ordered]))
    means = np.stack([F[g].mean(axis=0) for g in groups])
    counts = np.array([len(g) for g in groups])
    return RecomputedCentroids(
        task_id=ordered[0].task_id, centroid_ids=tuple(ids), means=means,
        counts=counts, item_groups=groups, features=F, cache=cache, items=ordered,
    )


def cosine_matrix_from_means(rec: RecomputedCentroids) -> DistanceMatrix:
    """The recomputed similarity matrix itself (diagnostics, drift reports)."""
    return distance_matrix(list(rec.means), rec.centroid_ids, task_id=rec.task_id)


def centroid_distance_loss(stored: Sequence[DistanceMatrix],
                           recomputed: Sequence[RecomputedCentroids | None],
                           normalize: bool = False,
                           ) -> tuple[float, list[np.ndarray | None]]:
    """Squared Frobenius gap between stored and recomputed cosine matrices.

    Returns the summed loss over tasks and, per task, the gradient w.r.t. the
    recomputed per-item features (``None`` where the task was skipped).
    Centroids absent from memory, and degenerate ones, are masked out of both
    matrices symmetrically; a task needs two surviving centroids to
    contribute. ``normalize`` divides each task's term by its number of
    unmasked entries.
    """
    if len(stored) != len(recomputed):
        raise ContractError("stored and recomputed matrix lists are misaligned")
    total = 0.0
    grads: list[np.ndarray | None] = []
    for W, rec in zip(stored, recomputed):
        if rec is None:
            grads.append(None)
            continue
        pos = {cid: k for k, cid in enumerate(W.centroid_ids)}
        missing = [cid for cid in rec.centroid_ids if cid not in pos]
        if missing:
            raise ContractError(f"recomputed centroid ids {missing} not in the stored matrix")
        norms = np.linalg.norm(rec.means, axis=1)
        keep = [
            k for k, cid in enumerate(rec.centroid_ids)
            if cid not in W.degenerate_ids and norms[k] > 0.0
        ]
        if len(keep) < 2:
            grads.append(None)
            continue
        stored_pos = [pos[rec.centroid_ids[k]] for k in keep]
        Ws = W.entries[np.ix_(stored_pos, stored_pos)]
        C = rec.means[keep]
        nk = norms[keep]
        U = C / nk[:, None]
        Wp = U @ U.T
        diff = Wp - Ws
        denom = diff.size if normalize else 1
        total += float((diff ** 2).sum()) / denom
        G = (2.0 / denom) * diff
        np.fill_diagonal(G, 0.0)
        dU = 2.0 * G @ U
        # cosine normalization projects out the radial component
        dC = (dU - (dU * U).sum(axis=1, keepdims=True) * U) / nk[:, None]
        dF = np.zeros_like(rec.features)
        for k_local, k in enumerate(keep):
            rows = rec.item_groups[k]
            dF[rows] = dC[k_local] / rec.counts[k]
        grads.append(dF)
    return total, grads


@dataclass
class FeatureDistillationResult:
    loss: float
    feature_grad: np.ndarray | None
    cache: ActivationCache | None
    items: list[MemoryItem]
    skipped: int


def feature_distillation_loss(net: Network, items: Sequence[MemoryItem]) -> FeatureDistillationResult:
    """Mean squared distance between current features and anchored features.

    Items lacking an anchored feature are skipped and counted. The gradient
    w.r.t. the features is ``2 * (h(x) - anchor) / batch``.
    """
    anchored = [it for it in items if it.anchored_feature is not None]
    skipped = len(items) - len(anchored)
    if not anchored:
        return FeatureDistillationResult(0.0, None, None, [], skipped)
    F, cache = net.forward(np.stack([it.x for it in anchored]))
    A = np.stack([np.asarray(it.anchored_feature, dtype=np.float64) for it in anchored])
    diff = F - A
    loss = float((diff ** 2).sum() / len(anchored))
    grad = 2.0 * diff / len(anchored)
    return FeatureDistillationResult(loss, grad, cache, anchored, skipped)
