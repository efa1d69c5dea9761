"""Dataset ingestion: IDX files, a seeded synthetic generator, calibration
sampling with a class-balanced default and enforced eval disjointness."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.base.str.lstrip("><=|"): k for k, v in IDX_DTYPES.items()}


class IdxFormatError(ValueError):
    pass


def load_idx(path) -> np.ndarray:
    """Big-endian IDX: 0x00 0x00 <dtype> <ndims>, then uint32 dims, then data."""
    with open(path, "rb") as f:
        header = f.read(4)
        if len(header) < 4 or header[0] != 0 or header[1] != 0:
            raise IdxFormatError(f"{path}: bad IDX magic {header!r}")
        code, ndim = header[2], header[3]
        if code not in IDX_DTYPES:
            raise IdxFormatError(f"{path}: unknown IDX dtype code 0x{code:02x}")
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = f.read()
    dtype = IDX_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) != expected:
        raise IdxFormatError(f"{path}: payload {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=dtype).reshape(dims).astype(
        dtype.newbyteorder("="))


def save_idx(path, arr: np.ndarray) -> None:
    key = arr.dtype.str.lstrip("><=|")
    if key not in IDX_CODES:
        raise IdxFormatError(f"dtype {arr.dtype} not representable in IDX")
    code = IDX_CODES[key]
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, arr.ndim]))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=IDX_DTYPES[code]).tobytes())


@dataclass
class Splits:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    classes: int

    def __post_init__(self):
        for y, k in ((self.train_y, "train"), (self.eval_y, "eval")):
            if len(y) and (y.min() < 0 or y.max() >= self.classes):
                raise ValueError(f"{k} labels outside [0, {self.classes})")


def synthetic_splits(classes=10, image_size=16, channels=1, train_size=4096,
                     eval_size=1024, noise=1.5, blobs_per_class=24,
                     sigma_min=0.5, sigma_max=1.0, offset=2.0, seed=0) -> Splits:
    """Gaussian-blob multiclass images: each class owns a fixed template of
    many small isotropic blobs; samples add pixel noise. Fully seeded, no
    downloads. Dense sharp templates keep classification sensitive to fine
    weight structure, so pruning damage is visible at desk scale."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    h = w = image_size
    yy, xx = np.mgrid[0:h, 0:w]
    templates = np.zeros((classes, channels, h, w))
    for k in range(classes):
        for _ in range(blobs_per_class):
            cy, cx = rng.uniform(1, h - 1), rng.uniform(1, w - 1)
            sig = rng.uniform(sigma_min, sigma_max)
            amp = rng.uniform(0.6, 1.4) * rng.choice([-1.0, 1.0])
            blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
            ch = rng.integers(channels)
            templates[k, ch] += blob

    def make(n, r):
        labels = r.integers(0, classes, size=n)
        # the constant background level mimics natural images' nonzero mean,
        # which makes stale BN statistics genuinely harmful after pruning
        x = offset + templates[labels] + r.standard_normal((n, channels, h, w)) * noise
        return x, labels.astype(np.int64)

    train_x, train_y = make(train_size, rng)
    eval_x, eval_y = make(eval_size, rng)
    return Splits(train_x, train_y, eval_x, eval_y, classes)


def idx_splits(train_images, train_labels, eval_images, eval_labels,
               classes: int | None = None) -> Splits:
    tx = load_idx(train_images).astype(np.float64)
    ty = load_idx(train_labels).astype(np.int64)
    ex = load_idx(eval_images).astype(np.float64)
    ey = load_idx(eval_labels).astype(np.int64)
    if tx.ndim == 3:  # H x W images -> single channel
        tx = tx[:, None]
        ex = ex[:, None]
    scale = max(tx.max(), 1.0)
    tx, ex = tx / scale, ex / scale
    if classes is None:
        classes = int(max(ty.max(), ey.max())) + 1
    return Splits(tx, ty, ex, ey, classes)


@dataclass
class CalibrationSet:
    inputs: np.ndarray
    labels: np.ndarray
    seed: int

    def __len__(self):
        return len(self.inputs)


def _row_digests(x: np.ndarray) -> set:
    return {hashlib.sha1(np.ascontiguousarray(row).tobytes()).digest() for row in x}


def sample_calibration(splits: Splits, size: int, seed: int,
                       balanced: bool = True) -> CalibrationSet:
    """Draw the calibration set from the training split; order is fixed by the
    seed. Disjointness from the eval split is asserted sample-by-sample."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCA11B)))
    n = len(splits.train_x)
    if size > n:
        raise ValueError(f"calibration size {size} exceeds train split {n}")
    if balanced:
        chosen = []
        per_class = size // splits.classes
        for k in range(splits.classes):
            pool = np.flatnonzero(splits.train_y == k)
            take = min(per_class, len(pool))
            chosen.append(rng.choice(pool, size=take, replace=False))
        chosen = np.concatenate(chosen) if chosen else np.array([], dtype=int)
        if len(chosen) < size:  # top up uniformly from the remainder
            rest = np.setdiff1d(np.arange(n), chosen)
            extra = rng.choice(rest, size=size - len(chosen), replace=False)
            chosen = np.concatenate([chosen, extra])
        chosen = chosen[rng.permutation(len(chosen))]
    else:
        chosen = rng.choice(n, size=size, replace=False)
    inputs = splits.train_x[chosen].copy()
    labels = splits.train_y[chosen].copy()
    overlap = _row_digests(inputs) & _row_digests(splits.eval_x)
    if overlap:
        raise ValueError(f"calibration overlaps eval split ({len(overlap)} rows)")
    return CalibrationSet(inputs=inputs, labels=labels, seed=seed)
