"""Streaming per-class centroids with bounded candidate caches.

Each training sample is seen exactly once. A sample either spawns a new
centroid (nearest same-class centroid farther than ``epsilon``) or refines the
nearest one, whose centroid vector becomes the mean of its cached candidate
features plus the incoming feature. Every centroid carries a cache of at most
``gamma`` raw candidates; when full, the candidate farthest from the freshly
updated centroid is evicted (the incoming sample competes too, so the cache
always holds the ``gamma`` nearest of the ``gamma + 1`` candidates at that
instant).

Distances here are Euclidean in feature space. Cached candidate features are
recomputed with the attached ``feature_fn`` at every update so a moving model
does not leave stale features behind; without a ``feature_fn`` the features
captured at insertion are reused.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, NotFoundError, ShapeError

UPDATE_RULES = ("cache_mean", "running_mean")


@dataclass
class CacheEntry:
    """One cached candidate: raw input, label, last feature, last distance."""

    x: np.ndarray
    y: int
    feature: np.ndarray
    dist: float


@dataclass
class Centroid:
    id: int
    class_label: int
    task_id: int
    vector: np.ndarray
    n: int = 1          # data points represented
    m: int = 1          # update events, creation included
    cache: list[CacheEntry] = field(default_factory=list)


@dataclass(frozen=True)
class FrozenEntry:
    x: np.ndarray
    y: int
    dist: float


@dataclass(frozen=True)
class FrozenCentroid:
    """Immutable end-of-task snapshot of one centroid and its candidates."""

    id: int
    class_label: int
    task_id: int
    vector: np.ndarray
    n: int
    m: int
    entries: tuple[FrozenEntry, ...]


@dataclass(frozen=True)
class UpdateOutcome:
    """Result of one observe call.

    ``nearest_distance`` is the pre-decision distance to the nearest eligible
    centroid (``inf`` when none existed yet).
    """

    kind: str                # "created" | "updated"
    centroid_id: int
    nearest_distance: float


def update_centroid_running_mean(c: Centroid, f: np.ndarray) -> np.ndarray:
    """Count-weighted running mean: ``(n * c + f) / (n + 1)``."""
    if c.n < 1:
        raise ContractError("running-mean update requires n >= 1")
    return (c.n * c.vector + f) / (c.n + 1)


def update_centroid_cache_mean(c: Centroid, f: np.ndarray | None,
                               cached_features: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the cached candidate features plus the incoming feature.

    The denominator is the pre-insert cache size plus one; it coincides with
    the running-mean count only while the cache is still filling.
    """
    if len(cached_features) == 0 and f is None:
        raise ContractError("cache-mean update needs a cached feature or an incoming one")
    total = np.zeros_like(c.vector)
    count = 0
    for g in cached_features:
        total = total + g
        count += 1
    if f is not None:
        total = total + f
        count += 1
    return total / count


class CentroidStore:
    """Maintains per-task, per-class centroids over a single-pass stream.

    The nearest-centroid search is restricted to the sample's own class by
    default; ``class_scoped=False`` lets samples be absorbed across classes
    within the task (fidelity-experiment switch, which also relaxes the
    cache-label invariant).
    """

    def __init__(self, epsilon: float, gamma: int,
                 feature_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                 update_rule: str = "cache_mean",
                 class_scoped: bool = True):
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        if gamma < 1:
            raise ValueError(f"gamma must be a positive integer, got {gamma}")
        if update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")
        self.epsilon = float(epsilon)
        self.gamma = int(gamma)
        self.feature_fn = feature_fn
        self.update_rule = update_rule
        self.class_scoped = class_scoped
        self.dim: int | None = None
        self._by_task: dict[int, list[Centroid]] = {}
        self._begun: set[int] = set()
        self._finalized: set[int] = set()
        self._next_id = 0
        self.observe_count = 0

    def begin_task(self, task_id: int) -> None:
        self._begun.add(int(task_id))

    def centroids_for_task(self, task_id: int) -> list[Centroid]:
        return list(self._by_task.get(int(task_id), ()))

    def observe(self, x, y: int, f, task_id: int = 0) -> UpdateOutcome:
        """Route one streamed sample through the create-or-update rule."""
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 1:
            raise ShapeError(f"feature must be a vector, got shape {f.shape}")
        if self.dim is None:
            self.dim = f.shape[0]
        elif f.shape[0] != self.dim:
            raise ShapeError(f"feature width {f.shape[0]} != store width {self.dim}")
        if not np.all(np.isfinite(f)):
            raise DataError("non-finite feature vector")
        task_id = int(task_id)
        if task_id in self._finalized:
            raise ContractError(f"task {task_id} already finalized; streams pass once")
        self.begin_task(task_id)
        self.observe_count += 1
        x = np.asarray(x, dtype=np.float64).copy()
        y = int(y)

        nearest, nearest_dist = self._nearest(task_id, y, f)
        if nearest is None or nearest_dist > self.epsilon:
            c = Centroid(
                id=self._next_id, class_label=y, task_id=task_id, vector=f.copy(),
                cache=[CacheEntry(x=x, y=y, feature=f.copy(), dist=0.0)],
            )
            self._next_id += 1
            self._by_task.setdefault(task_id, []).append(c)
            return UpdateOutcome("created", c.id, nearest_dist)

        self._update(nearest, x, y, f)
        return UpdateOutcome("updated", nearest.id, nearest_dist)

    def _nearest(self, task_id: int, y: int, f: np.ndarray) -> tuple[Centroid | None, float]:
        best = None
        best_dist = np.inf
        for c in self._by_task.get(task_id, ()):
            if self.class_scoped and c.class_label != y:
                continue
            d = float(np.linalg.norm(f - c.vector))
            # ties go to the lowest centroid id, which is the scan order
            if d < best_dist:
                best, best_dist = c, d
        return best, best_dist

    def _update(self, c: Centroid, x: np.ndarray, y: int, f: np.ndarray) -> None:
        if self.feature_fn is not None and c.cache:
            fresh = np.asarray(
                self.feature_fn(np.stack([e.x for e in c.cache])), dtype=np.float64
            )
            for e, row in zip(c.cache, fresh):
                e.feature = row
        if self.update_rule == "cache_mean":
            c.vector = update_centroid_cache_mean(c, f, [e.feature for e in c.cache])
        else:
            c.vector = update_centroid_running_mean(c, f)
        c.n += 1
        c.m += 1
        c.cache.append(CacheEntry(x=x, y=y, feature=f.copy(), dist=0.0))
        for e in c.cache:
            e.dist = float(np.linalg.norm(e.feature - c.vector))
        if len(c.cache) > self.gamma:
            # insert-then-evict over the gamma+1 candidates; among equally
            # distant entries the earliest-inserted one is removed
            farthest = max(range(len(c.cache)), key=lambda i: c.cache[i].dist)
            del c.cache[farthest]

    def finalize_task(self, task_id: int) -> list[FrozenCentroid]:
        """Freeze the task's centroids and drop the raw cached inputs.

        The returned snapshot still carries the candidates so memory
        selection can consume them; the store itself keeps only vectors and
        counts afterwards.
        """
        task_id = int(task_id)
        if task_id not in self._begun:
            raise NotFoundError(f"task {task_id} was never streamed")
        if task_id in self._finalized:
            raise ContractError(f"task {task_id} already finalized; caches were consumed")
        snaps = []
        for c in self._by_task.get(task_id, ()):
            vector = c.vector.copy()
            vector.setflags(write=False)
            entries = []
            for e in c.cache:
                ex = e.x.copy()
                ex.setflags(write=False)
                entries.append(FrozenEntry(x=ex, y=e.y, dist=e.dist))
            snaps.append(FrozenCentroid(
                id=c.id, class_label=c.class_label, task_id=c.task_id,
                vector=vector, n=c.n, m=c.m, entries=tuple(entries),
            ))
            c.cache = []
        self._finalized.add(task_id)
        return snaps
