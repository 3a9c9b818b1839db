"""Sequential task streams over synthetic blobs or IDX image files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, TruncatedFileError
from .model import Batch

TASK_KINDS = ("split_class", "permuted_label", "permuted_input")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise DataError(f"inputs {inputs.shape} and labels {labels.shape} are inconsistent")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.size

    @property
    def dim(self):
        return self.inputs.shape[1]


def make_blobs(n_classes: int, n_per_class: int, dim: int, separation: float, seed: int,
               max_tries: int = 10_000) -> Dataset:
    """Unit-covariance Gaussian clusters.

    Centers lie on the sphere of radius ``separation`` and are placed by
    seeded rejection sampling so every pair is at least ``separation`` apart.
    Fails with :class:`ConfigError` when ``dim`` leaves no room for them.
    """
    if min(n_classes, n_per_class, dim) < 1 or not separation > 0:
        raise ConfigError("make_blobs arguments must be positive")
    rng = np.random.default_rng(seed)
    centers = []
    tries = 0
    while len(centers) < n_classes:
        tries += 1
        if tries > max_tries:
            raise ConfigError(f"could not place {n_classes} centers {separation} apart in {dim} dimensions")
        c = rng.standard_normal(dim)
        c *= separation / np.linalg.norm(c)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
    centers = np.array(centers)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    inputs = centers[labels] + rng.standard_normal((labels.size, dim))
    return Dataset(inputs, labels, n_classes)


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if len(buf) < offset + count:
        raise TruncatedFileError(
            f"truncated IDX {what}: expected {offset + count} bytes, got {len(buf)}",
            expected=offset + count, actual=len(buf))
    return buf[offset:offset + count]


def _open_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes.

    Image files (magic ``0x00000803``) come back as a float matrix
    ``[n, rows * cols]`` scaled to ``[0, 1]``; label files (``0x00000801``)
    as an int64 vector.
    """
    buf = _open_bytes(path)
    magic, = struct.unpack(">I", _read_exact(buf, 0, 4, "header"))
    if magic == IDX_IMAGES_MAGIC:
        n, rows, cols = struct.unpack(">III", _read_exact(buf, 4, 12, "header"))
        pixels = _read_exact(buf, 16, n * rows * cols, "payload")
        data = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols)
        return data.astype(np.float64) / 255.0
    if magic == IDX_LABELS_MAGIC:
        n, = struct.unpack(">I", _read_exact(buf, 4, 4, "header"))
        return np.frombuffer(_read_exact(buf, 8, n, "payload"), dtype=np.uint8).astype(np.int64)
    raise FormatError(f"unsupported IDX magic 0x{magic:08x} in {path}")


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 images ``[n, rows, cols]`` or labels ``[n]`` as IDX."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *array.shape)
    elif array.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, array.shape[0])
    else:
        raise DataError(f"IDX writer supports 1-D labels or 3-D images, got {array.ndim}-D")
    Path(path).write_bytes(header + array.tobytes())


def load_idx_dataset(images_path, labels_path, limit: int | None = None) -> Dataset:
    images, labels = load_idx(images_path), load_idx(labels_path)
    if images.ndim != 2:
        raise FormatError(f"{images_path} is not an IDX image file")
    if labels.ndim != 1 or images.shape[0] != labels.size:
        raise FormatError(f"{images.shape[0]} images but {labels.size} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels, int(labels.max()) + 1 if labels.size else 0)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    num_tasks: int
    base_dataset: Dataset
    seed: int = 0
    train_fraction: float = 0.8
    drop_remainder: bool = False
    shared_head: bool | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.num_tasks < 1:
            raise ConfigError(f"num_tasks must be >= 1, got {self.num_tasks}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")

    @property
    def uses_shared_head(self) -> bool:
        if self.shared_head is None:
            return self.kind != "split_class"
        return self.shared_head


@dataclass(frozen=True)
class Task:
    index: int
    train: Batch
    test: Batch
    classes: tuple = ()

    @property
    def head(self):
        return self.train.task_id


@dataclass(frozen=True)
class TaskStream:
    tasks: list
    classes_per_task: int
    num_heads: int
    input_dim: int
    permutations: list = field(default_factory=list)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)


def stratified_split(labels: np.ndarray, train_fraction: float, rng: np.random.Generator):
    """Per-class shuffled split; each class contributes ``round(frac * count)`` to train."""
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(train_fraction * idx.size))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def build_stream(spec: TaskSpec) -> TaskStream:
    """Materialize the task sequence described by ``spec``.

    * ``split_class``: classes shuffled, cut into contiguous groups, relabelled
      to ``[0, classes_per_task)``; one head per task unless ``shared_head``.
    * ``permuted_label``: one fixed train/test split, a fresh label bijection
      per task.
    * ``permuted_input``: one fixed split, a fresh feature bijection per task.
    """
    base = spec.base_dataset
    rng = np.random.default_rng(spec.seed)
    T = spec.num_tasks

    def head(t):
        return 0 if spec.uses_shared_head else t

    tasks, perms = [], []
    if spec.kind == "split_class":
        order = rng.permutation(base.n_classes)
        per_task, rem = divmod(base.n_classes, T)
        if per_task == 0:
            raise ConfigError(f"{base.n_classes} classes cannot fill {T} tasks")
        if rem and not spec.drop_remainder:
            raise ConfigError(f"{base.n_classes} classes not divisible into {T} tasks; set drop_remainder")
        for t in range(T):
            group = order[t * per_task:(t + 1) * per_task]
            remap = {int(c): i for i, c in enumerate(group)}
            mask = np.isin(base.labels, group)
            inputs = base.inputs[mask]
            labels = np.array([remap[int(c)] for c in base.labels[mask]], dtype=np.int64)
            tr, te = stratified_split(labels, spec.train_fraction, rng)
            tasks.append(Task(t, Batch(inputs[tr], labels[tr], head(t)), Batch(inputs[te], labels[te], head(t)),
                              classes=tuple(int(c) for c in group)))
            perms.append(group.copy())
        return TaskStream(tasks, per_task, 1 if spec.uses_shared_head else T, base.dim, perms)

    tr, te = stratified_split(base.labels, spec.train_fraction, rng)
    for t in range(T):
        if spec.kind == "permuted_label":
            perm = rng.permutation(base.n_classes)
            labels = perm[base.labels]
            train = Batch(base.inputs[tr], labels[tr], head(t))
            test = Batch(base.inputs[te], labels[te], head(t))
        else:
            perm = rng.permutation(base.dim)
            inputs = base.inputs[:, perm]
            train = Batch(inputs[tr], base.labels[tr], head(t))
            test = Batch(inputs[te], base.labels[te], head(t))
        tasks.append(Task(t, train, test, classes=tuple(range(base.n_classes))))
        perms.append(perm)
    return TaskStream(tasks, base.n_classes, 1 if spec.uses_shared_head else T, base.dim, perms)
