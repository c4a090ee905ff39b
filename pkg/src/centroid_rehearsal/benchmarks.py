"""Task-stream generation: split Gaussians, permuted inputs, file ingestion.

Generators are pure functions of (spec, seed); a task's train stream is
shuffled once at generation and then fixed, so single-pass runs reproduce.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class TaskSpec:
    """One task: global class labels, ordered train stream, held-out test set."""

    task_id: int
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]


@dataclass
class SplitGaussianSpec:
    """Synthetic split benchmark: disjoint Gaussian classes per task.

    Class means are drawn with per-coordinate scale ``mean_scale`` and
    re-drawn until all pairwise distances reach ``separation``; samples add
    isotropic noise ``sigma``. The default scale puts class means at radius
    about ``separation``, which keeps input magnitudes friendly to the
    default learning rate.
    """

    tasks: int = 5
    classes_per_task: int = 2
    input_dim: int = 32
    sigma: float = 0.5
    separation: float = 4.0
    train_per_class: int = 200
    test_per_class: int = 100
    mean_scale: float | None = None  # defaults to separation / sqrt(mean dims)
    mean_subspace_dim: int | None = None  # confine all class means to a shared subspace
    modes_per_class: int = 1          # >1 gives each class a mixture of sub-clusters
    mode_spread: float = 0.0          # radius of the mode offsets around the class mean
    label_noise: float = 0.0          # fraction of train samples relabeled within the task
    outlier_fraction: float = 0.0     # fraction of train samples displaced off their mode
    outlier_scale: float = 0.0        # displacement radius for those outliers
    noise_df: float | None = None     # Student-t degrees of freedom; None keeps Gaussian noise


@dataclass
class PermutedSpec:
    """Same base dataset under per-task fixed pixel permutations."""

    train: "BaseDataset"
    test: "BaseDataset"
    tasks: int = 5


@dataclass
class BaseDataset:
    """Flat dataset: inputs in [0, 1], integer labels."""

    x: np.ndarray
    y: np.ndarray


def make_split_gaussian(spec: SplitGaussianSpec, seed) -> list[TaskSpec]:
    rng = np.random.default_rng(seed)
    n_classes = spec.tasks * spec.classes_per_task
    sub_dim = spec.mean_subspace_dim or spec.input_dim
    if not 1 <= sub_dim <= spec.input_dim:
        raise DataError(
            f"mean_subspace_dim must lie in [1, {spec.input_dim}], got {sub_dim}"
        )
    if spec.mean_scale is None:
        # typical pairwise distance is scale * sqrt(2 * sub_dim); the 1.5
        # margin keeps the minimum over all pairs above the separation floor
        scale = 1.5 * spec.separation / np.sqrt(sub_dim)
    else:
        scale = spec.mean_scale
    # class means share a sub_dim-dimensional subspace; with fewer directions
    # than classes, tasks compete for them and interfere through the extractor
    basis = np.linalg.qr(rng.normal(size=(spec.input_dim, sub_dim)))[0]
    means = None
    for _ in range(200):
        cand = rng.normal(0.0, scale, size=(n_classes, sub_dim)) @ basis.T
        d = np.linalg.norm(cand[:, None, :] - cand[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        if d.min() >= spec.separation:
            means = cand
            break
    if means is None:
        raise DataError(
            f"could not place {n_classes} class means at separation "
            f"{spec.separation} with mean scale {scale} in {sub_dim} dims"
        )

    n_modes = max(1, int(spec.modes_per_class))
    mode_centers = np.repeat(means[:, None, :], n_modes, axis=1)
    if n_modes > 1 and spec.mode_spread > 0:
        offsets = rng.normal(0.0, spec.mode_spread / np.sqrt(sub_dim),
                             size=(n_classes, n_modes, sub_dim)) @ basis.T
        mode_centers = mode_centers + offsets

    def draw(c: int, count: int, contaminate: bool = False) -> np.ndarray:
        picks = rng.integers(0, n_modes, size=count)
        if spec.noise_df is not None:
            # heavy-tailed class noise: tail samples are genuine members that
            # sit far off their mode and bias any memory that stores them
            noise = spec.sigma * rng.standard_t(spec.noise_df,
                                                size=(count, spec.input_dim))
        else:
            noise = rng.normal(0.0, spec.sigma, size=(count, spec.input_dim))
        x = mode_centers[c, picks] + noise
        if contaminate and spec.outlier_fraction > 0 and spec.outlier_scale > 0:
            # correct-label displacement along the mean subspace, where the
            # classes live; these land in foreign territory and bias any
            # memory that keeps them
            hit = rng.random(count) < spec.outlier_fraction
            shift = rng.normal(0.0, spec.outlier_scale / np.sqrt(sub_dim),
                               size=(count, sub_dim)) @ basis.T
            x = x + hit[:, None] * shift
        return x

    tasks = []
    for t in range(spec.tasks):
        classes = tuple(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for c in classes:
            tr_x.append(draw(c, spec.train_per_class, contaminate=True))
            tr_y.append(np.full(spec.train_per_class, c, dtype=np.int64))
            te_x.append(draw(c, spec.test_per_class))
            te_y.append(np.full(spec.test_per_class, c, dtype=np.int64))
        train_x = np.concatenate(tr_x)
        train_y = np.concatenate(tr_y)
        if spec.label_noise > 0 and len(classes) > 1:
            # train-only contamination: a corrupted sample keeps its inputs but
            # claims another class of the same task; test labels stay clean
            flip = rng.random(len(train_y)) < spec.label_noise
            shift = rng.integers(1, len(classes), size=len(train_y))
            pos = np.searchsorted(classes, train_y)
            train_y = np.where(
                flip,
                np.asarray(classes)[(pos + shift) % len(classes)],
                train_y,
            )
        order = rng.permutation(len(train_y))
        train_x, train_y = train_x[order], train_y[order]
        test_x = np.concatenate(te_x)
        test_y = np.concatenate(te_y)
        _assert_disjoint(train_x, test_x)
        tasks.append(TaskSpec(t, classes, train_x, train_y, test_x, test_y))
    return tasks


def _assert_disjoint(train_x: np.ndarray, test_x: np.ndarray) -> None:
    train_rows = {row.tobytes() for row in train_x}
    for row in test_x:
        if row.tobytes() in train_rows:
            raise DataError("train/test streams share a sample")


def make_permuted(spec: PermutedSpec, seed) -> list[TaskSpec]:
    """Task 1 is the base dataset; later tasks permute the input coordinates."""
    rng = np.random.default_rng(seed)
    dim = spec.train.x.shape[1]
    classes = tuple(int(c) for c in np.unique(spec.train.y))
    tasks = []
    for t in range(spec.tasks):
        perm = np.arange(dim) if t == 0 else rng.permutation(dim)
        order = rng.permutation(len(spec.train.y))
        tasks.append(TaskSpec(
            task_id=t, classes=classes,
            train_x=spec.train.x[:, perm][order],
            train_y=spec.train.y[order].astype(np.int64),
            test_x=spec.test.x[:, perm],
            test_y=spec.test.y.astype(np.int64),
        ))
    return tasks


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise ParseError(
            f"truncated {what} at byte {offset}: wanted {n} bytes, "
            f"got {len(data)} (missing {n - len(data)})"
        )
    return data


def load_idx_images(path) -> np.ndarray:
    """Read a big-endian IDX image file into (count, rows*cols) uint8 rows."""
    with open(path, "rb") as f:
        magic, = struct.unpack(">i", _read_exact(f, 4, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise ParseError(
                f"bad image magic at byte 0: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
            )
        count, rows, cols = struct.unpack(">iii", _read_exact(f, 12, "image dims"))
        raw = _read_exact(f, count * rows * cols, "image payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, = struct.unpack(">i", _read_exact(f, 4, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise ParseError(
                f"bad label magic at byte 0: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
            )
        count, = struct.unpack(">i", _read_exact(f, 4, "label count"))
        raw = _read_exact(f, count, "label payload")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def _sniff_magic(path: Path) -> int | None:
    with open(path, "rb") as f:
        head = f.read(4)
    if len(head) < 4:
        return None
    return struct.unpack(">i", head)[0]


def load_external(path, fmt: str) -> BaseDataset:
    """Load a user-supplied dataset; inputs come back scaled to [0, 1].

    ``fmt="idx"`` expects a directory holding one image file and one label
    file (identified by magic number). ``fmt="csv"`` expects rows of
    ``label, pixel_0, ..., pixel_{D-1}`` with an optional header; pixel
    values are raw [0, 255] and get divided by 255.
    """
    path = Path(path)
    if fmt == "idx":
        if not path.is_dir():
            raise ParseError(f"idx format expects a directory, got {path}")
        image_files = [p for p in sorted(path.iterdir())
                       if p.is_file() and _sniff_magic(p) == IDX_IMAGES_MAGIC]
        label_files = [p for p in sorted(path.iterdir())
                       if p.is_file() and _sniff_magic(p) == IDX_LABELS_MAGIC]
        if len(image_files) != 1 or len(label_files) != 1:
            raise ParseError(
                f"{path} must hold exactly one image and one label file, "
                f"found {len(image_files)} image / {len(label_files)} label"
            )
        x = load_idx_images(image_files[0]).astype(np.float64) / 255.0
        y = load_idx_labels(label_files[0])
        if len(x) != len(y):
            raise ParseError(f"{len(x)} images but {len(y)} labels")
        return BaseDataset(x=x, y=y)
    if fmt == "csv":
        return _load_csv(path)
    raise ParseError(f"unknown format {fmt!r}; expected 'idx' or 'csv'")


def _load_csv(path: Path) -> BaseDataset:
    xs, ys = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = [s.strip() for s in line.split(",")]
            if lineno == 1 and not _is_number(fields[0]):
                continue  # header
            try:
                label_val = float(fields[0])
                pixels = [float(v) for v in fields[1:]]
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from None
            if label_val != int(label_val) or label_val < 0:
                raise ParseError(f"line {lineno}: label {fields[0]} out of range")
            if any(not (0.0 <= v <= 255.0) for v in pixels):
                raise ParseError(f"line {lineno}: pixel value outside [0, 255]")
            ys.append(int(label_val))
            xs.append(pixels)
    if not xs:
        raise ParseError(f"{path} holds no data rows")
    widths = {len(row) for row in xs}
    if len(widths) != 1:
        raise ParseError(f"inconsistent row widths {sorted(widths)}")
    return BaseDataset(
        x=np.array(xs, dtype=np.float64) / 255.0,
        y=np.array(ys, dtype=np.int64),
    )


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
