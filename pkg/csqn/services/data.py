"""Task sequences: MNIST ingestion, rotation/permutation tasks, synthetic blobs."""
import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from scipy import ndimage

from csqn.errors import DataFormatError, DataMissingError
from csqn.services.nn import Batch

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
GZIP_MAGIC = b"\x1f\x8b"
IMAGE_SIDE = 28
MNIST_CLASSES = 10

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class RawMnist:
    """MNIST split into train/validation/test, pixels scaled to [0, 1]."""
    train: Batch
    validation: Batch
    test: Batch


@dataclass(frozen=True)
class RotationSpec:
    tasks: int
    degrees_per_task: float

    def __post_init__(self):
        if self.tasks < 1:
            raise ValueError(f"task count must be >= 1, got {self.tasks}")

    def angle(self, t: int) -> float:
        return self.degrees_per_task * (t - 1)


@dataclass
class TaskData:
    name: str
    train: Batch
    validation: Batch
    test: Batch


@dataclass
class TaskSequence:
    tasks: List[TaskData]
    input_dim: int
    classes: int
    descriptor: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)


# IDX parsing

def read_idx(path: Path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into a uint8 array."""
    payload = path.read_bytes()
    if payload[:2] == GZIP_MAGIC:
        try:
            payload = gzip.decompress(payload)
        except (OSError, EOFError) as e:
            raise DataFormatError(f"{path}: corrupt gzip stream ({e})")
    if len(payload) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", payload[:8])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic number {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, payload[4:header])
    size = int(np.prod(dims))
    if len(payload) - header < size:
        raise DataFormatError(
            f"{path}: truncated file, expected {size} data bytes, found {len(payload) - header}"
        )
    return np.frombuffer(payload, dtype=np.uint8, count=size, offset=header).reshape(dims)


def _locate(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.is_file():
            return candidate
    raise DataMissingError(f"MNIST file '{stem}' not found in {directory}")


def _load_pair(directory: Path, images_key: str, labels_key: str) -> Batch:
    images = read_idx(_locate(directory, MNIST_FILES[images_key]), IMAGE_MAGIC)
    labels = read_idx(_locate(directory, MNIST_FILES[labels_key]), LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels in {directory}"
        )
    inputs = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return Batch(inputs, labels.astype(np.int64))


def load_mnist(directory, validation_size: int = 5000, split_seed: int = 0) -> RawMnist:
    """Load MNIST and split training images into train/validation by seeded shuffle."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataMissingError(f"MNIST directory not found: {directory}")
    full_train = _load_pair(directory, "train_images", "train_labels")
    test = _load_pair(directory, "test_images", "test_labels")
    if validation_size >= len(full_train):
        raise DataFormatError(
            f"validation size {validation_size} leaves no training images"
        )
    order = np.random.default_rng(split_seed).permutation(len(full_train))
    raw = RawMnist(
        train=full_train.take(order[validation_size:]),
        validation=full_train.take(order[:validation_size]),
        test=test,
    )
    logger.info(
        "Loaded MNIST from %s: %d train, %d validation, %d test",
        directory, len(raw.train), len(raw.validation), len(raw.test),
    )
    return raw


def cap_training(raw: RawMnist, cap: Optional[int]) -> RawMnist:
    """Keep the first `cap` training images (already shuffled by the split)."""
    if cap is None or cap >= len(raw.train):
        return raw
    return RawMnist(raw.train.take(np.arange(cap)), raw.validation, raw.test)


# Task transforms

def rotate_images(inputs: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate flattened 28x28 images counter-clockwise about their centre.

    Bilinear interpolation; samples falling outside the image read as 0.
    """
    images = inputs.reshape(-1, IMAGE_SIDE, IMAGE_SIDE)
    phi = np.deg2rad(degrees)
    c, s = np.cos(phi), np.sin(phi)
    centre = np.array([(IMAGE_SIDE - 1) / 2.0] * 2)
    # output (r, c) samples input at inv_rot @ ((r, c) - centre) + centre
    inv_rot = np.array([[c, s], [-s, c]])
    matrix = np.eye(3)
    matrix[1:, 1:] = inv_rot
    offset = np.zeros(3)
    offset[1:] = centre - inv_rot @ centre
    rotated = ndimage.affine_transform(
        images, matrix, offset=offset, order=1, mode="grid-constant", cval=0.0, prefilter=False
    )
    return np.clip(rotated, 0.0, 1.0).reshape(inputs.shape).astype(inputs.dtype)


def _rotate_batch(batch: Batch, degrees: float) -> Batch:
    return Batch(rotate_images(batch.inputs, degrees), batch.labels.copy())


def rotate_task(raw: RawMnist, spec: RotationSpec, t: int) -> TaskData:
    if not 1 <= t <= spec.tasks:
        raise ValueError(f"task index {t} outside 1..{spec.tasks}")
    angle = spec.angle(t)
    if angle == 0:
        return TaskData(f"rotation-{angle:g}", raw.train, raw.validation, raw.test)
    return TaskData(
        name=f"rotation-{angle:g}",
        train=_rotate_batch(raw.train, angle),
        validation=_rotate_batch(raw.validation, angle),
        test=_rotate_batch(raw.test, angle),
    )


def task_permutation(seed: int, t: int, size: int = IMAGE_SIDE * IMAGE_SIDE) -> np.ndarray:
    if t == 1:
        return np.arange(size)
    return np.random.default_rng([seed, t]).permutation(size)


def permute_task(raw: RawMnist, seed: int, t: int) -> TaskData:
    if t == 1:
        return TaskData("permutation-1", raw.train, raw.validation, raw.test)
    perm = task_permutation(seed, t, raw.train.inputs.shape[1])

    def apply(batch: Batch) -> Batch:
        return Batch(batch.inputs[:, perm], batch.labels.copy())

    return TaskData(f"permutation-{t}", apply(raw.train), apply(raw.validation), apply(raw.test))


# Synthetic blobs

def _blob_batch(means: np.ndarray, per_class: int, rng: np.random.Generator) -> Batch:
    classes, d = means.shape
    labels = np.repeat(np.arange(classes), per_class)
    inputs = means[labels] + rng.standard_normal((labels.shape[0], d))
    order = rng.permutation(labels.shape[0])
    return Batch(inputs[order].astype(np.float32), labels[order].astype(np.int64))


def synthetic_sequence(tasks: int, dim: int, classes: int, shift: float, seed: int,
                       samples_per_class: int = 200, eval_samples_per_class: int = 50,
                       separation: float = 5.0,
                       centers: Optional[np.ndarray] = None) -> TaskSequence:
    """Gaussian blobs with unit covariance whose class means drift by `shift` per task.

    Class means are drawn once (norm `separation`) unless `centers` is given;
    each class then drifts along its own fixed random unit direction.
    """
    if dim < 2 or classes < 2:
        raise ValueError("synthetic tasks need dim >= 2 and classes >= 2")
    rng = np.random.default_rng([seed, 0])
    if centers is None:
        raw = rng.standard_normal((classes, dim))
        centers = separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != (classes, dim):
        raise ValueError(f"centers must have shape ({classes}, {dim}), got {centers.shape}")
    drift = rng.standard_normal((classes, dim))
    drift /= np.linalg.norm(drift, axis=1, keepdims=True)
    task_list = []
    for t in range(1, tasks + 1):
        means = centers + shift * (t - 1) * drift
        task_rng = np.random.default_rng([seed, t])
        task_list.append(TaskData(
            name=f"blobs-{t}",
            train=_blob_batch(means, samples_per_class, task_rng),
            validation=_blob_batch(means, eval_samples_per_class, task_rng),
            test=_blob_batch(means, eval_samples_per_class, task_rng),
        ))
    return TaskSequence(task_list, dim, classes, {
        "kind": "synthetic", "tasks": tasks, "dim": dim, "classes": classes,
        "shift": shift, "seed": seed,
    })


def _order(tasks: List[TaskData], shuffle: bool, seed: int) -> List[TaskData]:
    if not shuffle:
        return tasks
    order = np.random.default_rng(seed).permutation(len(tasks))
    return [tasks[i] for i in order]


def build_task_sequence(spec, data_dir: Optional[Path] = None,
                        raw: Optional[RawMnist] = None) -> TaskSequence:
    """Build the sequence described by a DatasetSpec."""
    if spec.kind == "synthetic":
        seq = synthetic_sequence(
            spec.tasks, spec.dim, spec.classes, spec.shift, spec.synthetic_seed,
            samples_per_class=spec.samples_per_class,
            eval_samples_per_class=spec.eval_samples_per_class,
            separation=spec.separation,
        )
        seq.tasks = _order(seq.tasks, spec.shuffle_tasks, spec.task_order_seed)
        return seq
    if raw is None:
        if data_dir is None:
            raise DataMissingError("MNIST tasks need a data directory")
        raw = load_mnist(data_dir, spec.validation_size, spec.split_seed)
    raw = cap_training(raw, spec.train_cap)
    if spec.kind == "rotated_mnist":
        rotation = RotationSpec(spec.tasks, spec.angle_step)
        tasks = [rotate_task(raw, rotation, t) for t in range(1, spec.tasks + 1)]
        descriptor = {"kind": spec.kind, "tasks": spec.tasks, "angle_step": spec.angle_step}
    else:
        tasks = [permute_task(raw, spec.permutation_seed, t) for t in range(1, spec.tasks + 1)]
        descriptor = {"kind": spec.kind, "tasks": spec.tasks, "seed": spec.permutation_seed}
    descriptor["train_cap"] = spec.train_cap
    return TaskSequence(
        _order(tasks, spec.shuffle_tasks, spec.task_order_seed),
        raw.train.inputs.shape[1], MNIST_CLASSES, descriptor,
    )

