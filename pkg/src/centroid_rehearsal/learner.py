"""The continual training loop and its task-boundary bookkeeping.

Each task streams once through the model in mini-batches. Every batch feeds
the centroid store (features from the pre-step forward pass), assembles the
joint objective (current-task cross-entropy, rehearsal cross-entropy, the
centroid-distance term, the anchored-feature term), accumulates gradients
into one tape, and takes a single SGD step.

At the end of a task, in this order: the centroid store is finalized, memory
is selected from the frozen caches, anchored features are captured with the
end-of-task model, the cosine matrix of the finalized centroids is stored,
and the raw caches are gone. Reordering any of these breaks the method:
selection needs the caches and anchoring needs the end-of-task model.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as metrics_mod
from .benchmarks import TaskSpec
from .centroids import CentroidStore
from .distill import (
    DistanceMatrix,
    centroid_distance_loss,
    distance_matrix,
    feature_distillation_loss,
    recompute_task_centroids,
)
from .errors import ConfigError, ContractError, NotFoundError
from .nn import GradientTape, Network, TaskHead, cross_entropy, sgd_step
from .rehearsal import (
    SAMPLERS,
    MemoryBuffer,
    MemoryItem,
    ObservedSample,
    rehearsal_batch,
    select_memory,
    select_memory_baseline,
)


@dataclass
class ContinualConfig:
    """Hyperparameters for one continual run."""

    epsilon: float = 3.0
    gamma: int = 8
    memory_per_class: int = 10
    batch_size: int = 10
    lr: float = 0.022
    cd_weight: float = 0.0
    fd_weight: float = 0.0
    sampler: str = "centroid"
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 10
    rehearsal_batch_size: int | None = None   # None: same as batch_size
    update_rule: str = "cache_mean"
    class_scoped_nearest: bool = True
    cd_stride: int = 1
    cd_normalize: bool = False
    balance_rehearsal: bool = False
    num_tasks: int | None = None              # None: use the benchmark's count

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.memory_per_class < 1:
            raise ConfigError(f"memory_per_class must be >= 1, got {self.memory_per_class}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be nonnegative, got {self.lr}")
        if self.cd_weight < 0 or self.fd_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.cd_stride < 1:
            raise ConfigError(f"cd_stride must be >= 1, got {self.cd_stride}")
        if self.rehearsal_batch_size is not None and self.rehearsal_batch_size < 1:
            raise ConfigError("rehearsal_batch_size must be >= 1 when set")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


class Learner:
    """Owns the model, the centroid store, the memory, and the run state."""

    def __init__(self, config: ContinualConfig, input_dim: int):
        self.config = config
        self.net = Network([input_dim, *config.hidden_dims, config.feature_dim],
                           seed=[config.seed, 1])
        self.heads: dict[int, TaskHead] = {}
        self.tape = GradientTape(self.net)
        self.store = CentroidStore(
            config.epsilon, config.gamma, feature_fn=self._features,
            update_rule=config.update_rule, class_scoped=config.class_scoped_nearest,
        )
        self.buffer = MemoryBuffer()
        self.stored_matrices: list[DistanceMatrix] = []
        self.stored_centroids: dict[int, list[dict]] = {}
        self.drift_refs: dict[int, dict[int, np.ndarray]] = {}
        self.task_classes: dict[int, tuple[int, ...]] = {}
        self.R: list[list[float]] = []
        self.trained_tasks: list[int] = []
        self.loss_trace: list[dict] = []

    def _features(self, X) -> np.ndarray:
        return self.net.forward(np.atleast_2d(X))[0]

    def _local_labels(self, labels, task_id: int) -> np.ndarray:
        classes = self.task_classes[task_id]
        index = {c: i for i, c in enumerate(classes)}
        return np.array([index[int(y)] for y in labels], dtype=np.int64)

    def head_for(self, task_id: int) -> TaskHead:
        if task_id not in self.heads:
            raise NotFoundError(f"no head for task {task_id}")
        return self.heads[task_id]

    def train_task(self, task: TaskSpec) -> None:
        """Single-pass training on one task, then the boundary ritual."""
        cfg = self.config
        t = task.task_id
        if t in self.trained_tasks:
            raise ContractError(f"single-pass violation: task {t} was already streamed")
        self.task_classes[t] = tuple(task.classes)
        if t not in self.heads:
            self.heads[t] = TaskHead(t, cfg.feature_dim, len(task.classes),
                                     seed=[cfg.seed, 10_000 + t])
            self.tape.ensure_head(self.heads[t])
        self.store.begin_task(t)
        head = self.heads[t]
        reh_rng = np.random.default_rng([cfg.seed, 20_000 + t])
        reh_size = cfg.rehearsal_batch_size or cfg.batch_size
        record_stream = cfg.sampler != "centroid"
        stream_record: list[ObservedSample] = []
        local_y = self._local_labels(task.train_y, t)
        past_tasks = [j for j in self.buffer.task_ids() if j != t]

        n = len(task.train_y)
        step = 0
        for start in range(0, n, cfg.batch_size):
            Xb = task.train_x[start:start + cfg.batch_size]
            yb = task.train_y[start:start + cfg.batch_size]
            yb_local = local_y[start:start + cfg.batch_size]

            F, cache = self.net.forward(Xb)
            for i in range(len(yb)):
                self.store.observe(Xb[i], int(yb[i]), F[i], task_id=t)
                if record_stream:
                    stream_record.append(ObservedSample(
                        x=Xb[i].copy(), y=int(yb[i]), feature=F[i].copy()))

            logits, probs = head.classify(F)
            ce_loss, d_logits = cross_entropy(probs, yb_local)
            dF = head.backward(F, d_logits, self.tape)
            self.net.backward(cache, dF, self.tape)

            reh_loss = self._rehearsal_term(reh_size, reh_rng)
            cd_loss_val = 0.0
            if cfg.cd_weight > 0 and past_tasks and step % cfg.cd_stride == 0:
                cd_loss_val = self._centroid_distance_term(past_tasks)
            fd_loss_val = 0.0
            if cfg.fd_weight > 0 and len(self.buffer):
                fd_loss_val = self._feature_distillation_term()

            sgd_step(self.net, self.heads, self.tape, cfg.lr)
            self.loss_trace.append({
                "task": t, "step": step, "ce": ce_loss, "reh": reh_loss,
                "cd": cd_loss_val, "fd": fd_loss_val,
            })
            step += 1

        self._finish_task(task, stream_record)
        self.trained_tasks.append(t)

    def _rehearsal_term(self, batch_size: int, rng) -> float:
        if not len(self.buffer):
            return 0.0
        batch = rehearsal_batch(self.buffer, batch_size, rng,
                                balance_tasks=self.config.balance_rehearsal)
        if not batch:
            return 0.0
        X = np.stack([it.x for it in batch])
        F, cache = self.net.forward(X)
        total = len(batch)
        dF = np.zeros_like(F)
        loss = 0.0
        by_task: dict[int, list[int]] = {}
        for i, it in enumerate(batch):
            by_task.setdefault(it.task_id, []).append(i)
        for j, rows in sorted(by_task.items()):
            rows = np.array(rows)
            head = self.head_for(j)
            logits, probs = head.classify(F[rows])
            yl = self._local_labels([batch[i].label for i in rows], j)
            # normalize by the whole rehearsal batch, not the per-task slice
            part_loss, d_logits = cross_entropy(probs, yl)
            scale = len(rows) / total
            loss += part_loss * scale
            dF[rows] = head.backward(F[rows], d_logits * scale, self.tape)
        self.net.backward(cache, dF, self.tape)
        return loss

    def _centroid_distance_term(self, past_tasks: list[int]) -> float:
        cfg = self.config
        stored, recs = [], []
        for W in self.stored_matrices:
            if W.task_id not in past_tasks:
                continue
            rec = recompute_task_centroids(self.net, self.buffer.items_for_task(W.task_id))
            stored.append(W)
            recs.append(rec)
        if not stored:
            return 0.0
        loss, grads = centroid_distance_loss(stored, recs, normalize=cfg.cd_normalize)
        for rec, g in zip(recs, grads):
            if g is not None:
                self.net.backward(rec.cache, cfg.cd_weight * g, self.tape)
        return loss

    def _feature_distillation_term(self) -> float:
        res = feature_distillation_loss(self.net, self.buffer.all_items())
        if res.feature_grad is not None:
            self.net.backward(res.cache, self.config.fd_weight * res.feature_grad, self.tape)
        return res.loss

    def _finish_task(self, task: TaskSpec, stream_record: list[ObservedSample]) -> None:
        cfg = self.config
        t = task.task_id
        snapshot = self.store.finalize_task(t)
        budget = cfg.memory_per_class * len(task.classes)
        boundary_rng = np.random.default_rng([cfg.seed, 30_000 + t])
        if cfg.sampler == "centroid":
            items = select_memory(snapshot, budget, boundary_rng)
        else:
            items = select_memory_baseline(cfg.sampler, stream_record, budget,
                                           boundary_rng, task_id=t)
        if items:
            anchors = self._features(np.stack([it.x for it in items]))
            for it, a in zip(items, anchors):
                it.anchored_feature = a.copy()
        if snapshot:
            W = distance_matrix([c.vector for c in snapshot],
                                [c.id for c in snapshot], task_id=t)
            self.stored_matrices.append(W)
        self.stored_centroids[t] = [
            {"id": c.id, "class": c.class_label, "task": c.task_id,
             "vector": [float(v) for v in c.vector], "n": c.n, "m": c.m}
            for c in snapshot
        ]
        self.drift_refs[t] = _anchored_means(items)
        self.buffer.add_task(t, items, budget)

    def memory_centroid_means(self, task_id: int) -> dict[int, np.ndarray]:
        """Current-model mean feature per source centroid of a task's memory."""
        rec = recompute_task_centroids(self.net, self.buffer.items_for_task(task_id))
        if rec is None:
            return {}
        return {cid: rec.means[k] for k, cid in enumerate(rec.centroid_ids)}

    def evaluate(self, test_tasks: Sequence[TaskSpec]) -> list[float]:
        """Accuracy on every trained task under its own head; appends a row."""
        trained = len(self.trained_tasks)
        if len(test_tasks) < trained:
            raise NotFoundError(
                f"need test sets for {trained} tasks, got {len(test_tasks)}"
            )
        row = []
        for task in test_tasks[:trained]:
            head = self.head_for(task.task_id)
            F = self.net.features(task.test_x)
            logits, _ = head.classify(F)
            pred = logits.argmax(axis=1)
            truth = self._local_labels(task.test_y, task.task_id)
            row.append(float((pred == truth).mean()))
        self.R.append(row)
        return row


def _anchored_means(items: Sequence[MemoryItem]) -> dict[int, np.ndarray]:
    groups: dict[int, list[np.ndarray]] = {}
    for it in items:
        if it.source_centroid_id is None or it.anchored_feature is None:
            continue
        groups.setdefault(it.source_centroid_id, []).append(it.anchored_feature)
    return {cid: np.mean(np.stack(fs), axis=0) for cid, fs in groups.items()}


@dataclass
class RunResult:
    """Everything one seeded run produced."""

    config: dict
    seed: int
    R: list[list[float]]
    average_accuracy: float
    forgetting: float
    long_term_remembering: float
    drift: dict[int, list[float]]
    drift_final: float
    seconds: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift"] = {str(k): v for k, v in self.drift.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["drift"] = {int(k): list(map(float, v)) for k, v in d["drift"].items()}
        return cls(**d)


def run_sequence(config: ContinualConfig, tasks: Sequence[TaskSpec],
                 checkpoint_dir: str | Path | None = None) -> RunResult:
    """Train the task sequence in order, evaluating and checkpointing per task."""
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("benchmark provides no tasks")
    if config.num_tasks is not None:
        if config.num_tasks > len(tasks):
            raise ConfigError(
                f"config asks for {config.num_tasks} tasks, benchmark has {len(tasks)}"
            )
        tasks = tasks[:config.num_tasks]
    t0 = time.perf_counter()
    learner = Learner(config, input_dim=tasks[0].input_dim)
    drift: dict[int, list[float]] = {}
    for k, task in enumerate(tasks):
        learner.train_task(task)
        for j in learner.buffer.task_ids():
            refs = learner.drift_refs.get(j, {})
            if not refs:
                continue
            series = metrics_mod.centroid_drift(refs, [learner.memory_centroid_means(j)])
            if series:
                drift.setdefault(j, []).append(series[0])
        learner.evaluate(tasks[:k + 1])
        if checkpoint_dir is not None:
            save_checkpoint(learner, Path(checkpoint_dir) / f"task_{task.task_id:03d}.json")
    seconds = time.perf_counter() - t0
    first = min(drift) if drift else None
    return RunResult(
        config=config.to_dict(),
        seed=config.seed,
        R=learner.R,
        average_accuracy=metrics_mod.average_accuracy(learner.R),
        forgetting=metrics_mod.forgetting(learner.R),
        long_term_remembering=metrics_mod.long_term_remembering(learner.R),
        drift=drift,
        drift_final=(drift[first][-1] if first is not None else float("nan")),
        seconds=seconds,
    )


def save_checkpoint(learner: Learner, path: str | Path) -> None:
    """One JSON document per task boundary; enough to resume analysis offline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "task_id": learner.trained_tasks[-1] if learner.trained_tasks else None,
        "config": learner.config.to_dict(),
        "network": {
            "layer_dims": learner.net.layer_dims,
            "weights": [W.tolist() for W in learner.net.weights],
            "biases": [b.tolist() for b in learner.net.biases],
        },
        "heads": {
            str(t): {"n_classes": h.n_classes, "weight": h.weight.tolist(),
                     "bias": h.bias.tolist()}
            for t, h in learner.heads.items()
        },
        "task_classes": {str(t): list(c) for t, c in learner.task_classes.items()},
        "memory": [
            {
                "x": it.x.tolist(), "label": it.label, "task_id": it.task_id,
                "source_centroid_id": it.source_centroid_id,
                "anchored_feature": (None if it.anchored_feature is None
                                     else it.anchored_feature.tolist()),
            }
            for it in learner.buffer.all_items()
        ],
        "memory_budgets": {str(t): learner.buffer.budget(t) for t in learner.buffer.task_ids()},
        "stored_centroids": {str(t): v for t, v in learner.stored_centroids.items()},
        "distance_matrices": [W.to_dict() for W in learner.stored_matrices],
        "drift_refs": {
            str(t): {str(cid): v.tolist() for cid, v in refs.items()}
            for t, refs in learner.drift_refs.items()
        },
        "R": learner.R,
    }
    path.write_text(json.dumps(doc))


@dataclass
class Checkpoint:
    task_id: int
    config: dict
    net: Network
    heads: dict[int, TaskHead]
    memory: list[MemoryItem]
    stored_matrices: list[DistanceMatrix]
    drift_refs: dict[int, dict[int, np.ndarray]]
    R: list[list[float]]


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    net = Network(doc["network"]["layer_dims"], seed=0)
    net.weights = [np.array(W, dtype=np.float64) for W in doc["network"]["weights"]]
    net.biases = [np.array(b, dtype=np.float64) for b in doc["network"]["biases"]]
    heads = {}
    for t, h in doc["heads"].items():
        head = TaskHead(int(t), net.feature_dim, h["n_classes"], seed=0)
        head.weight = np.array(h["weight"], dtype=np.float64)
        head.bias = np.array(h["bias"], dtype=np.float64)
        heads[int(t)] = head
    memory = [
        MemoryItem(
            x=np.array(it["x"], dtype=np.float64), label=int(it["label"]),
            task_id=int(it["task_id"]),
            source_centroid_id=(None if it["source_centroid_id"] is None
                                else int(it["source_centroid_id"])),
            anchored_feature=(None if it["anchored_feature"] is None
                              else np.array(it["anchored_feature"], dtype=np.float64)),
        )
        for it in doc["memory"]
    ]
    return Checkpoint(
        task_id=int(doc["task_id"]),
        config=doc["config"],
        net=net,
        heads=heads,
        memory=memory,
        stored_matrices=[DistanceMatrix.from_dict(d) for d in doc["distance_matrices"]],
        drift_refs={
            int(t): {int(cid): np.array(v, dtype=np.float64) for cid, v in refs.items()}
            for t, refs in doc["drift_refs"].items()
        },
        R=[list(map(float, row)) for row in doc["R"]],
    )


def checkpoint_drift(cp: Checkpoint) -> dict[int, float]:
    """Recompute each past task's centroid displacement from a checkpoint."""
    out = {}
    for t, refs in sorted(cp.drift_refs.items()):
        if not refs:
            continue
        items = [it for it in cp.memory if it.task_id == t]
        rec = recompute_task_centroids(cp.net, items)
        if rec is None:
            continue
        means = {cid: rec.means[k] for k, cid in enumerate(rec.centroid_ids)}
        series = metrics_mod.centroid_drift(refs, [means])
        if series:
            out[t] = series[0]
    return out
