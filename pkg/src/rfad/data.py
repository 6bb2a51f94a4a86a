"""Dataset ingestion (IDX, CIFAR binary) and preprocessing (standardize, ZCA)."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataError, NumericError, RecordSizeError, TruncatedFileError
from .utils import hash_arrays

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32

DATA_ROOT_ENV = "RFAD_DATA_ROOT"
CACHE_DIR_ENV = "RFAD_CACHE_DIR"

FETCH_INSTRUCTIONS = {
    "mnist": "place train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte and "
    "t10k-labels-idx1-ubyte (optionally .gz) under {root}/mnist/ "
    "(or run scripts/prepare_mnist_subset.py for the bundled 5k subset)",
    "fashion-mnist": "place the four Fashion-MNIST IDX files (same names as MNIST) under {root}/fashion-mnist/",
    "cifar10": "extract cifar-10-binary.tar.gz so that {root}/cifar-10-batches-bin/data_batch_1.bin exists",
    "cifar100": "extract cifar-100-binary.tar.gz so that {root}/cifar-100-binary/train.bin exists",
}


@dataclass(frozen=True)
class Standardize:
    mean: float
    std: float

    def apply(self, images: np.ndarray) -> np.ndarray:
        out = (images.astype(np.float64) - self.mean) / self.std
        return out.astype(np.result_type(images.dtype, np.float32))


@dataclass(frozen=True)
class ZcaTransform:
    mean: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)
    lam: float = 0.1
    pixel_std: float = 1.0  # sqrt of the mean raw-pixel variance

    def apply(self, images: np.ndarray) -> np.ndarray:
        return zca_apply(self, images)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32, preprocessed space
    labels: np.ndarray  # [N] int64
    num_classes: int
    preprocessing: Standardize | ZcaTransform | None = None
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def content_hash(self) -> str:
        return hash_arrays(self.images, self.labels)[:16]


# -- IDX ------------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: expected at least 4 header bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: expected {header} header bytes, got {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "") -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels")
    pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(pixels, labels.astype(np.int64), num_classes, None, name)


# -- CIFAR ------------------------------------------------------------------------------


def load_cifar_binary(paths, variant: str = "cifar10", name: str = "") -> Dataset:
    """Read CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine; fine kept) records."""
    label_bytes = 1 if variant == "cifar10" else 2
    record = label_bytes + CIFAR_PIXELS
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    imgs, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            raise RecordSizeError(f"{path}: size {len(raw)} is not a multiple of the {record}-byte record")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, label_bytes - 1].astype(np.int64))
        imgs.append(arr[:, label_bytes:].reshape(-1, 3, 32, 32))
    images = np.concatenate(imgs).astype(np.float32) / 255.0
    return Dataset(images, np.concatenate(labels), 10 if variant == "cifar10" else 100, None, name or variant)


# -- preprocessing ------------------------------------------------------------------------


def standardize(ds: Dataset, stats: Standardize | None = None) -> Dataset:
    """Global scalar standardisation; fits on ``ds`` unless ``stats`` is given."""
    if stats is None:
        x = ds.images.astype(np.float64)
        mean, std = float(x.mean()), float(x.std())
        if not std > 0:
            raise NumericError("standardize: zero-variance input")
        stats = Standardize(mean, std)
    return replace(ds, images=stats.apply(ds.images), preprocessing=stats)


def zca_fit(ds: Dataset, lam: float = 0.1) -> ZcaTransform:
    x = ds.images.reshape(len(ds), -1).astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"zca_fit: eigendecomposition failed ({exc})") from exc
    evals = np.maximum(evals, 0.0)
    shift = lam * evals.mean()
    denom = evals + shift
    if np.any(denom <= 0):
        raise NumericError("zca_fit: covariance is singular and lam == 0")
    W = (evecs * denom ** -0.5) @ evecs.T
    W = 0.5 * (W + W.T)
    return ZcaTransform(mean, W, lam, float(np.sqrt(evals.mean())))


def zca_apply(t: ZcaTransform, images: np.ndarray) -> np.ndarray:
    shape = images.shape
    flat = images.reshape(shape[0], -1).astype(np.float64) - t.mean
    return (flat @ t.W).reshape(shape).astype(np.result_type(images.dtype, np.float32))


def apply_preprocessing(ds: Dataset, descriptor) -> Dataset:
    if descriptor is None:
        return ds
    return replace(ds, images=descriptor.apply(ds.images), preprocessing=descriptor)


# -- named datasets ---------------------------------------------------------------------------


def data_root(root=None) -> Path:
    return Path(root or os.environ.get(DATA_ROOT_ENV) or Path.cwd() / "data")


def _find(directory: Path, stem: str) -> Path | None:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    return None


def load_raw(name: str, root=None) -> tuple[Dataset, Dataset]:
    root = data_root(root)
    if name in ("mnist", "fashion-mnist"):
        d = root / name
        files = [_find(d, s) for s in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                                        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
        if any(f is None for f in files):
            raise DataError(f"{name} not found: " + FETCH_INSTRUCTIONS[name].format(root=root))
        return load_idx(files[0], files[1], name=name), load_idx(files[2], files[3], name=name)
    if name == "cifar10":
        d = root / "cifar-10-batches-bin"
        train = [d / f"data_batch_{i}.bin" for i in range(1, 6)]
        if not all(p.exists() for p in train + [d / "test_batch.bin"]):
            raise DataError("cifar10 not found: " + FETCH_INSTRUCTIONS[name].format(root=root))
        return load_cifar_binary(train, "cifar10"), load_cifar_binary(d / "test_batch.bin", "cifar10")
    if name == "cifar100":
        d = root / "cifar-100-binary"
        if not (d / "train.bin").exists() or not (d / "test.bin").exists():
            raise DataError("cifar100 not found: " + FETCH_INSTRUCTIONS[name].format(root=root))
        return load_cifar_binary(d / "train.bin", "cifar100"), load_cifar_binary(d / "test.bin", "cifar100")
    raise DataError(f"unknown dataset {name!r}; known: {sorted(FETCH_INSTRUCTIONS)}")


def load_dataset(name: str, root=None, zca_lambda: float = 0.1) -> tuple[Dataset, Dataset]:
    """Train/test splits in preprocessed space; test uses train statistics."""
    train, test = load_raw(name, root)
    if name in ("mnist", "fashion-mnist"):
        train = standardize(train)
    else:
        train = apply_preprocessing(train, zca_fit(train, zca_lambda))
    return train, apply_preprocessing(test, train.preprocessing)


def class_balanced_indices(labels: np.ndarray, per_class: int, num_classes: int, rng) -> np.ndarray:
    out = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < per_class:
            raise DataError(f"class {c} has {len(pool)} examples, need {per_class}")
        out.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
    return np.concatenate(out)
