"""Datasets: synthetic desk-scale generators and the PAID / PAIT binary formats.

PAID v1 layout (all little-endian)::

    b"PAID" | u32 version=1 | u32 n | u32 c | u32 h | u32 w
    | n*c*h*w float32 pixels | n u32 labels

Flat d-dimensional inputs are stored with c=1, h=1, w=d. PAIT shares the
header (magic b"PAIT") and has no label block; it carries exported
features, saliency maps and loss grids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("gauss-blobs", "two-moons", "ring")
SPLITS = ("train", "val", "test")
# labels are not bounded by the file header; anything above this is treated as corruption
MAX_LABEL = 1 << 16


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class PixelRangeError(DatasetError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.split not in SPLITS:
            raise DatasetError(f"split must be one of {SPLITS}")
        if len(self.inputs) == 0 or len(self.inputs) != len(self.labels):
            raise DatasetError("dataset needs n > 0 inputs with one label each")
        if self.inputs.min() < 0 or self.inputs.max() > 1:
            raise PixelRangeError("inputs must lie in [0, 1]")
        if self.labels.min() < 0:
            raise LabelRangeError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return self.inputs.shape[1:]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split, self.name)

    def holdout(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic (train, val) split holding out ``fraction`` of the samples."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_val = max(1, int(round(fraction * len(self))))
        return self.subset(np.sort(order[n_val:]), "train"), self.subset(np.sort(order[:n_val]), "val")


def _balanced_counts(n: int, classes: int) -> list:
    return [n // classes + (1 if k < n % classes else 0) for k in range(classes)]


def blob_centers(classes: int) -> np.ndarray:
    """Class centres of ``gauss-blobs``: a circle of radius 0.3 around (0.5, 0.5)."""
    angles = 2 * np.pi * np.arange(classes) / classes
    return 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _fit_unit_square(pts: np.ndarray) -> np.ndarray:
    # isotropic affine map of a layout into [0.1, 0.9]^2, centred
    lo = pts.min(axis=0)
    pts = (pts - lo) * (0.8 / (pts.max(axis=0) - lo).max())
    return pts + (1.0 - pts.max(axis=0)) / 2


def gen_synthetic(kind: str, classes: int, n: int, noise: float, seed: int, dim: int = 2,
                  feature_shift: float = 0.0, feature_noise: float | None = None,
                  split: str = "train", pattern_seed: int | None = None) -> Dataset:
    """Class-balanced toy data in the unit cube.

    The noise-free layout is affinely mapped into [0, 1]^2 first:
    ``gauss-blobs`` centres sit on a circle of radius 0.3 around the middle,
    ``two-moons`` interleaves half-circle arcs and ``ring`` uses concentric
    circles. Isotropic Gaussian noise of standard deviation ``noise`` (in
    input units) is then added and values are clipped to [0, 1].

    With ``dim > 2`` the extra axes are centred on 0.5 with a class-dependent
    mean offset of ``+-feature_shift`` (a fixed random sign pattern per
    class) and noise ``feature_noise`` (default: ``noise``). Small shifts give features that are predictive
    yet removable by a small l-infinity perturbation. ``pattern_seed``
    (default: ``seed``) fixes that sign pattern, so a fresh sample drawn with
    another ``seed`` can share the class layout of a training set.

    Values are rounded to float32 so a PAID round trip is exact.
    """
    if kind not in KINDS:
        raise DatasetError(f"kind must be one of {KINDS}")
    if classes < 2 or n < classes or noise < 0 or dim < 2:
        raise DatasetError("need classes >= 2, n >= classes, noise >= 0, dim >= 2")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), _balanced_counts(n, classes))
    if kind == "gauss-blobs":
        base = blob_centers(classes)[labels]
    elif kind == "two-moons":
        t = rng.uniform(0, np.pi, size=n)
        flip = np.where(labels % 2 == 0, 1.0, -1.0)
        base = _fit_unit_square(np.stack([np.cos(t) * flip + (labels % 2) + 2.5 * (labels // 2),
                                          np.sin(t) * flip - 0.5 * (labels % 2)], axis=1))
    else:
        t = rng.uniform(0, 2 * np.pi, size=n)
        r = (labels + 1.0)[:, None] / classes
        base = 0.5 + 0.4 * r * np.stack([np.cos(t), np.sin(t)], axis=1)
    pts = base + noise * rng.standard_normal(base.shape)
    if dim > 2:
        pattern = np.random.default_rng([seed if pattern_seed is None else pattern_seed, 1]).choice([-1.0, 1.0], size=(classes, dim - 2))
        sd = noise if feature_noise is None else feature_noise
        extra = 0.5 + feature_shift * pattern[labels] + sd * rng.standard_normal((n, dim - 2))
        pts = np.concatenate([pts, extra], axis=1)
    pts = np.clip(pts, 0.0, 1.0).astype(np.float32).astype(np.float64)
    order = rng.permutation(n)
    return Dataset(pts[order], labels[order], split, f"{kind}-{classes}c")


def class_gap(data: Dataset) -> float:
    """Smallest l-infinity distance between two class means."""
    means = np.stack([data.inputs[data.labels == k].reshape(-1, int(np.prod(data.input_shape))).mean(axis=0)
                      for k in range(data.classes)])
    gaps = [np.abs(means[i] - means[j]).max() for i in range(len(means)) for j in range(i + 1, len(means))]
    return float(min(gaps))


# ---------------------------------------------------------------- binary formats


def _chw(shape: tuple) -> tuple:
    if len(shape) == 1:
        return 1, 1, shape[0]
    if len(shape) == 2:
        return 1, shape[0], shape[1]
    if len(shape) == 3:
        return shape
    raise DatasetError(f"cannot store per-sample shape {shape}")


def _write(path, magic: bytes, array: np.ndarray, labels=None) -> None:
    n = array.shape[0]
    c, h, w = _chw(array.shape[1:])
    head = magic + struct.pack("<5I", 1, n, c, h, w)
    body = np.ascontiguousarray(array, dtype="<f4").tobytes()
    tail = b"" if labels is None else np.ascontiguousarray(labels, dtype="<u4").tobytes()
    Path(path).write_bytes(head + body + tail)


def _read(path, magic: bytes, with_labels: bool):
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, found {buf[:4]!r}")
    if len(buf) < 24:
        raise TruncatedPayloadError("truncated header")
    version, n, c, h, w = struct.unpack_from("<5I", buf, 4)
    if version != 1:
        raise DatasetError(f"unsupported version {version}")
    count = n * c * h * w
    need = 24 + 4 * count + (4 * n if with_labels else 0)
    if len(buf) < need:
        raise TruncatedPayloadError(f"truncated payload: {len(buf)} bytes, expected {need}")
    pixels = np.frombuffer(buf, dtype="<f4", count=count, offset=24).astype(np.float64)
    shape = (n, w) if (c, h) == (1, 1) else (n, c, h, w)
    labels = None
    if with_labels:
        labels = np.frombuffer(buf, dtype="<u4", count=n, offset=24 + 4 * count).astype(np.int64)
    return pixels.reshape(shape), labels


def save_dataset(path, data: Dataset) -> None:
    _write(path, b"PAID", data.inputs, data.labels)


def load_dataset(path, split: str = "train", classes: int | None = None) -> Dataset:
    """Parse a PAID file; each malformation raises its own :class:`DatasetError` subclass."""
    inputs, labels = _read(path, b"PAID", with_labels=True)
    limit = classes if classes is not None else MAX_LABEL
    if labels.size and labels.max() >= limit:
        raise LabelRangeError(f"label {labels.max()} out of range [0, {limit})")
    if not np.all((inputs >= 0) & (inputs <= 1)):
        raise PixelRangeError("pixel value outside [0, 1]")
    return Dataset(inputs, labels, split, Path(path).stem)


def save_tensor(path, array: np.ndarray) -> None:
    """Export a batch-leading array (features, saliency maps, loss grids) as PAIT."""
    array = np.asarray(array)
    if array.ndim == 1:
        array = array[None, :]
    _write(path, b"PAIT", array)


def load_tensor(path) -> np.ndarray:
    return _read(path, b"PAIT", with_labels=False)[0]
