"""Episodic memory: centroid-frequency sampling, baseline samplers, batches.

The centroid sampler draws centroid indices i.i.d. with probability
proportional to each centroid's total update frequency, then takes the
not-yet-taken cached candidate nearest to that centroid. Baseline samplers
(ring buffer, reservoir, mean-of-feature, uniform random) operate on a plain
record of the task stream and never see centroid state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .centroids import FrozenCentroid
from .errors import ConfigError, ContractError

SAMPLERS = ("centroid", "ring_buffer", "reservoir", "mean_of_feature", "uniform_random")


@dataclass
class MemoryItem:
    """One stored exemplar; ``anchored_feature`` is filled at selection time."""

    x: np.ndarray
    label: int
    task_id: int
    source_centroid_id: int | None = None
    anchored_feature: np.ndarray | None = None


@dataclass
class ObservedSample:
    """Stream record used by the baseline samplers: raw input, label, feature."""

    x: np.ndarray
    y: int
    feature: np.ndarray


class MemoryBuffer:
    """Per-task exemplar lists, append-only between tasks."""

    def __init__(self):
        self._items: dict[int, list[MemoryItem]] = {}
        self._budgets: dict[int, int] = {}

    def add_task(self, task_id: int, items: Sequence[MemoryItem], budget: int) -> None:
        task_id = int(task_id)
        if task_id in self._items:
            raise ContractError(f"memory for task {task_id} was already stored")
        if len(items) > budget:
            raise ContractError(f"{len(items)} items exceed the budget of {budget}")
        self._items[task_id] = list(items)
        self._budgets[task_id] = int(budget)

    def items_for_task(self, task_id: int) -> list[MemoryItem]:
        return list(self._items.get(int(task_id), ()))

    def all_items(self) -> list[MemoryItem]:
        out = []
        for t in sorted(self._items):
            out.extend(self._items[t])
        return out

    def task_ids(self) -> list[int]:
        return sorted(self._items)

    def budget(self, task_id: int) -> int:
        return self._budgets[int(task_id)]

    def __len__(self) -> int:
        return sum(len(v) for v in self._items.values())


def centroid_probabilities(centroids: Sequence) -> np.ndarray:
    """Selection probabilities proportional to each centroid's update frequency."""
    if len(centroids) == 0:
        raise ContractError("no centroids to sample from")
    m = np.array([float(c.m) for c in centroids])
    if np.any(m < 1):
        raise ContractError("every centroid must have update frequency >= 1")
    return m / m.sum()


def select_memory(snapshot: Sequence[FrozenCentroid], budget: int,
                  rng_seed) -> list[MemoryItem]:
    """Draw the task's memory from finalized centroid caches.

    Each draw picks a centroid by frequency, then the nearest unused
    candidate in its cache. A draw that hits an exhausted cache is redrawn
    with that centroid's probability zeroed and the rest renormalized; when
    every cache is empty the selection ends short of the budget.
    """
    if budget <= 0:
        raise ContractError(f"budget must be positive, got {budget}")
    cents = list(snapshot)
    if not cents:
        return []
    rng = np.random.default_rng(rng_seed)
    weights = centroid_probabilities(cents).copy()
    # nearest-first pools; stable sort keeps insertion order among equal dists
    pools = [
        sorted(range(len(c.entries)), key=lambda i: (c.entries[i].dist, i))
        for c in cents
    ]
    taken = [0] * len(cents)
    items: list[MemoryItem] = []
    while len(items) < budget:
        total = weights.sum()
        if total <= 0.0:
            break
        k = int(rng.choice(len(cents), p=weights / total))
        c = cents[k]
        if taken[k] >= len(pools[k]):
            weights[k] = 0.0
            continue
        e = c.entries[pools[k][taken[k]]]
        taken[k] += 1
        items.append(MemoryItem(
            x=np.array(e.x), label=e.y, task_id=c.task_id, source_centroid_id=c.id,
        ))
    return items


def select_memory_baseline(kind: str, stream: Sequence[ObservedSample], budget: int,
                           rng_seed, task_id: int = 0) -> list[MemoryItem]:
    """Sample a task's memory from the recorded stream with a baseline rule.

    The per-class quota is ``budget // n_classes``. ``ring_buffer`` keeps the
    last quota samples of each class, ``reservoir`` is standard per-class
    reservoir sampling, ``mean_of_feature`` keeps the quota samples whose
    features sit closest to the class feature mean, ``uniform_random`` draws
    the quota uniformly without replacement.
    """
    if kind == "centroid":
        raise ContractError("the centroid sampler selects from caches, not the stream")
    if kind not in SAMPLERS:
        raise ConfigError(f"unknown sampler {kind!r}; expected one of {SAMPLERS}")
    if budget <= 0:
        raise ContractError(f"budget must be positive, got {budget}")
    samples = list(stream)
    if not samples:
        return []
    rng = np.random.default_rng(rng_seed)
    classes = sorted({s.y for s in samples})
    quota = budget // len(classes)
    by_class = {c: [i for i, s in enumerate(samples) if s.y == c] for c in classes}

    chosen: list[int] = []
    for c in classes:
        idx = by_class[c]
        if quota <= 0:
            continue
        if kind == "ring_buffer":
            chosen.extend(idx[-quota:])
        elif kind == "reservoir":
            kept: list[int] = []
            for seen, i in enumerate(idx):
                if seen < quota:
                    kept.append(i)
                else:
                    j = int(rng.integers(0, seen + 1))
                    if j < quota:
                        kept[j] = i
            chosen.extend(kept)
        elif kind == "mean_of_feature":
            feats = np.stack([samples[i].feature for i in idx])
            mean = feats.mean(axis=0)
            d = np.linalg.norm(feats - mean, axis=1)
            order = sorted(range(len(idx)), key=lambda k: (d[k], k))
            chosen.extend(idx[k] for k in order[:quota])
        else:  # uniform_random
            take = min(quota, len(idx))
            picks = rng.choice(len(idx), size=take, replace=False)
            chosen.extend(idx[int(k)] for k in picks)

    return [
        MemoryItem(x=np.array(samples[i].x), label=samples[i].y, task_id=int(task_id))
        for i in chosen
    ]


def rehearsal_batch(buffer: MemoryBuffer, batch_size: int, rng_seed,
                    balance_tasks: bool = False) -> list[MemoryItem]:
    """Uniform mini-batch over all stored items, spanning past tasks.

    Draws without replacement; when the buffer is smaller than the batch,
    every item appears once and the remainder is drawn with replacement. An
    empty buffer yields an empty batch (rehearsal is a no-op before task 2).
    ``balance_tasks`` splits the batch evenly across stored tasks instead.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.default_rng(rng_seed)
    if balance_tasks:
        tasks = buffer.task_ids()
        if not tasks:
            return []
        base, extra = divmod(batch_size, len(tasks))
        out: list[MemoryItem] = []
        for i, t in enumerate(tasks):
            want = base + (1 if i < extra else 0)
            out.extend(_draw(buffer.items_for_task(t), want, rng))
        return out
    return _draw(buffer.all_items(), batch_size, rng)


def _draw(items: list[MemoryItem], want: int, rng: np.random.Generator) -> list[MemoryItem]:
    if not items or want <= 0:
        return []
    if want <= len(items):
        picks = rng.choice(len(items), size=want, replace=False)
        return [items[int(i)] for i in picks]
    extra = rng.choice(len(items), size=want - len(items), replace=True)
    return list(items) + [items[int(i)] for i in extra]
