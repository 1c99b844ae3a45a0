"""Task streams for continual learning: IDX ingestion, split / permuted
streams over a labelled dataset, and Gaussian-blob synthetic streams.

Scenarios:

* ``IDL`` one shared output space of ``classes_per_task`` units.
* ``ICL`` one output unit per distinct class seen across the stream.
* ``ITL`` one head of ``classes_per_task`` units per task, selected by
  ``head_id`` at train and test time.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SCENARIOS = ("ITL", "IDL", "ICL")
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


# --------------------------------------------------------------------- IDX


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an MNIST IDX payload.

    Image files (magic 0x803) give a float64 ``(n, rows*cols)`` array scaled
    by 1/255; label files (magic 0x801) give an int64 vector.
    """
    if len(data) < 4:
        raise IdxFormatError(f"IDX header truncated: expected at least 4 bytes, got {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IMAGE_MAGIC:
        header = 16
        if len(data) < header:
            raise IdxFormatError(f"IDX image header truncated: expected {header} bytes, got {len(data)}")
        _, n, rows, cols = struct.unpack(">IIII", data[:header])
        expected = header + n * rows * cols
    elif magic == LABEL_MAGIC:
        header = 8
        if len(data) < header:
            raise IdxFormatError(f"IDX label header truncated: expected {header} bytes, got {len(data)}")
        _, n = struct.unpack(">II", data[:header])
        expected = header + n
    else:
        raise IdxFormatError(
            f"bad IDX magic 0x{magic:08x}; expected 0x{IMAGE_MAGIC:08x} (images) "
            f"or 0x{LABEL_MAGIC:08x} (labels)"
        )
    if len(data) != expected:
        raise IdxFormatError(f"IDX payload length mismatch: expected {expected} bytes, got {len(data)}")
    payload = np.frombuffer(data, dtype=np.uint8, offset=header)
    if magic == LABEL_MAGIC:
        return payload.astype(np.int64)
    return payload.reshape(n, rows * cols).astype(np.float64) / 255.0


def write_idx_images(pixels: np.ndarray) -> bytes:
    """Serialize ``(n, rows, cols)`` uint8 pixels as an IDX image file."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.dtype != np.uint8:
        raise ValueError("pixels must be a uint8 array of shape (n, rows, cols)")
    n, rows, cols = pixels.shape
    return struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must be a 1-D array of values in [0, 255]")
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def load_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


# ------------------------------------------------------------------- types


@dataclass
class Dataset:
    images: np.ndarray  # (n, m), float64
    labels: np.ndarray  # (n,), int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


def load_mnist(images_path, labels_path) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images, labels, 10)


@dataclass
class Task:
    """One task of a stream. Dataset labels are scenario classes."""

    id: int
    train: Dataset
    test: Dataset
    scenario: str
    label_map: dict
    head_id: int
    output_dim: int
    classes_per_task: int

    @property
    def columns(self) -> np.ndarray:
        """Output units this task is trained and scored on."""
        if self.scenario == "ITL":
            c = self.classes_per_task
            return np.arange(self.head_id * c, (self.head_id + 1) * c)
        return np.arange(self.output_dim)

    def targets(self, labels) -> np.ndarray:
        """Map scenario labels to output-unit indices."""
        labels = np.asarray(labels, dtype=np.int64)
        if self.scenario == "ITL":
            return labels + self.head_id * self.classes_per_task
        return labels

    def mask(self, n: int) -> np.ndarray:
        row = np.zeros(self.output_dim, dtype=bool)
        row[self.columns] = True
        return np.broadcast_to(row, (n, self.output_dim))


@dataclass
class TaskStream:
    tasks: list
    seed: int
    provenance: str  # split | permuted | synthetic
    scenario: str
    output_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if [t.id for t in self.tasks] != list(range(len(self.tasks))):
            raise ValueError("task ids must be 0..K-1 in order")

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, k) -> Task:
        return self.tasks[k]

    @property
    def head_count(self) -> int:
        return len(self.tasks) if self.scenario == "ITL" else 1


def _check_scenario(scenario: str) -> str:
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    return scenario


def _train_test_split(n: int, rng: np.random.Generator, test_fraction: float):
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    else:
        n_test = 0
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# ------------------------------------------------------------ split stream


def make_split_tasks(ds: Dataset, pairs: Sequence[Sequence[int]], scenario: str,
                     test: Optional[Dataset] = None, seed: int = 0,
                     test_fraction: float = 0.2) -> TaskStream:
    """One task per class group in ``pairs``.

    With ``test=None`` each task's samples from ``ds`` are split 80/20 by a
    seeded shuffle, so train and test of all tasks together partition
    the selected part of ``ds``. Otherwise ``ds`` is the train pool and
    ``test`` the held-out pool.
    """
    _check_scenario(scenario)
    groups = [tuple(int(c) for c in g) for g in pairs]
    if not groups:
        raise ValueError("need at least one class group")
    flat = [c for g in groups for c in g]
    if len(set(flat)) != len(flat):
        raise ValueError(f"class groups overlap: {groups}")
    cpt = len(groups[0])
    if any(len(g) != cpt for g in groups):
        raise ValueError("all class groups must have the same size")
    present = set(np.unique(ds.labels).tolist())
    missing = [c for c in flat if c not in present]
    if missing:
        raise ValueError(f"classes {missing} absent from dataset")

    K = len(groups)
    out_dim = {"IDL": cpt, "ICL": cpt * K, "ITL": cpt * K}[scenario]
    rng = np.random.default_rng(seed)
    tasks = []
    for k, g in enumerate(groups):
        if scenario == "ICL":
            label_map = {c: k * cpt + j for j, c in enumerate(g)}
        else:
            label_map = {c: j for j, c in enumerate(g)}
        lut = np.full(max(ds.class_count, max(flat) + 1), -1, dtype=np.int64)
        for c, v in label_map.items():
            lut[c] = v
        scen_classes = {"IDL": cpt, "ICL": cpt * K, "ITL": cpt}[scenario]

        def relabel(d: Dataset, idx):
            return Dataset(d.images[idx], lut[d.labels[idx]], scen_classes)

        idx = np.flatnonzero(np.isin(ds.labels, g))
        if test is None:
            tr, te = _train_test_split(len(idx), rng, test_fraction)
            train_ds, test_ds = relabel(ds, idx[tr]), relabel(ds, idx[te]) if len(te) else None
            if test_ds is None:
                test_ds = train_ds
        else:
            train_ds = relabel(ds, idx)
            test_ds = relabel(test, np.flatnonzero(np.isin(test.labels, g)))
        tasks.append(Task(k, train_ds, test_ds, scenario, label_map,
                          k if scenario == "ITL" else 0, out_dim, cpt))
    return TaskStream(tasks, seed, "split", scenario, out_dim, {"groups": groups})


# --------------------------------------------------------- permuted stream


def make_permuted_tasks(ds: Dataset, K: int, seed: int = 0, scenario: str = "IDL",
                        test: Optional[Dataset] = None, test_fraction: float = 0.2,
                        repeat_task_at: Optional[dict] = None,
                        provenance: str = "permuted") -> TaskStream:
    """Task 0 uses the identity permutation, task k>0 a seeded random one.

    ``repeat_task_at`` maps a task index to an earlier one whose permutation
    and label offset it reuses (a deliberate repeat of that task).
    """
    _check_scenario(scenario)
    if K < 1:
        raise ValueError("K must be >= 1")
    repeat_task_at = dict(repeat_task_at or {})
    for k, src in repeat_task_at.items():
        if not 0 <= src < k < K:
            raise ValueError(f"repeat_task_at[{k}] = {src} must point at an earlier task")
    c = ds.class_count
    m = ds.images.shape[1]
    rng = np.random.default_rng(seed)
    perms, offsets = [], []
    n_blocks = 0
    for k in range(K):
        # draw every permutation so repeats do not shift later ones
        fresh = np.arange(m) if k == 0 else rng.permutation(m)
        if k in repeat_task_at:
            perms.append(perms[repeat_task_at[k]])
            offsets.append(offsets[repeat_task_at[k]])
        else:
            perms.append(fresh)
            offsets.append(n_blocks)
            n_blocks += 1
    out_dim = {"IDL": c, "ICL": c * n_blocks, "ITL": c * K}[scenario]

    if test is None:
        tr, te = _train_test_split(len(ds), np.random.default_rng([seed, 1]), test_fraction)
        train_pool = ds.subset(tr)
        test_pool = ds.subset(te) if len(te) else train_pool
    else:
        train_pool, test_pool = ds, test

    tasks = []
    for k in range(K):
        off = offsets[k] * c if scenario == "ICL" else 0
        scen_classes = out_dim if scenario == "ICL" else c
        label_map = {j: j + off for j in range(c)}

        def permuted(d: Dataset):
            return Dataset(d.images[:, perms[k]], d.labels + off, scen_classes)

        tasks.append(Task(k, permuted(train_pool), permuted(test_pool), scenario, label_map,
                          k if scenario == "ITL" else 0, out_dim, c))
    meta = {"permutations": perms, "repeat_task_at": repeat_task_at}
    return TaskStream(tasks, seed, provenance, scenario, out_dim, meta)


# -------------------------------------------------------- synthetic stream


@dataclass
class SyntheticSpec:
    K: int = 5
    classes_per_task: int = 2
    dim: int = 50
    samples: int = 1250  # per task, before the 80/20 train/test split
    separation: float = 6.0
    seed: int = 0
    scenario: str = "ICL"
    repeat_task_at: dict = field(default_factory=dict)


def _class_means(n_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    # orthonormal directions scaled so every pair of means is `separation` apart
    if n_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((n_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if n_classes == 1:
        return dirs * separation / 2
    return dirs * separation / np.sqrt(2.0)


def make_synthetic_dataset(classes: int, dim: int, samples: int, separation: float,
                           seed: int = 0) -> Dataset:
    """Unit-covariance Gaussian blobs, ``samples`` in total, balanced classes."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be > 0")
    rng = np.random.default_rng(seed)
    means = _class_means(classes, dim, separation, rng)
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    images = means[labels] + rng.standard_normal((samples, dim))
    return Dataset(images, labels, classes)


def make_synthetic_tasks(spec: SyntheticSpec) -> TaskStream:
    """Split-style stream of Gaussian blobs.

    Each task introduces ``classes_per_task`` fresh classes whose means are
    mutually ``separation`` apart; ``repeat_task_at`` makes task k reuse
    an earlier task's classes (fresh samples from the same distribution).
    """
    if spec.samples < 1:
        raise ValueError("samples must be >= 1")
    if spec.separation <= 0:
        raise ValueError("separation must be > 0")
    if spec.K < 1 or spec.classes_per_task < 1 or spec.dim < 1:
        raise ValueError("K, classes_per_task and dim must be >= 1")
    scenario = _check_scenario(spec.scenario)
    repeat = dict(spec.repeat_task_at or {})
    for k, src in repeat.items():
        if not 0 <= src < k < spec.K:
            raise ValueError(f"repeat_task_at[{k}] = {src} must point at an earlier task")
    cpt = spec.classes_per_task
    rng = np.random.default_rng(spec.seed)
    blocks = []
    for k in range(spec.K):
        blocks.append(blocks[repeat[k]] if k in repeat else len(set(blocks)))
    n_blocks = len(set(blocks))
    means = _class_means(n_blocks * cpt, spec.dim, spec.separation, rng)
    out_dim = {"IDL": cpt, "ICL": cpt * n_blocks, "ITL": cpt * spec.K}[scenario]

    tasks = []
    for k in range(spec.K):
        task_rng = np.random.default_rng([spec.seed, k])
        y = np.arange(spec.samples) % cpt
        task_rng.shuffle(y)
        global_cls = blocks[k] * cpt + y
        x = means[global_cls] + task_rng.standard_normal((spec.samples, spec.dim))
        if scenario == "ICL":
            labels, n_cls = global_cls, out_dim
            label_map = {blocks[k] * cpt + j: blocks[k] * cpt + j for j in range(cpt)}
        else:
            labels, n_cls = y, cpt
            label_map = {blocks[k] * cpt + j: j for j in range(cpt)}
        tr, te = _train_test_split(spec.samples, task_rng, 0.2)
        full = Dataset(x, labels, n_cls)
        test_ds = full.subset(te) if len(te) else full.subset(tr)
        tasks.append(Task(k, full.subset(tr), test_ds, scenario, label_map,
                          k if scenario == "ITL" else 0, out_dim, cpt))
    return TaskStream(tasks, spec.seed, "synthetic", scenario, out_dim,
                      {"spec": spec, "blocks": blocks})
