"""Image datasets: IDX files, raw-tensor directories and a synthetic generator.

IDX layout (big-endian): two zero bytes, a dtype code, the number of
dimensions, one uint32 per dimension, then the payload in C order.

Raw-tensor directory layout: ``labels.csv`` with header
``file,label,channels,height,width``; each listed file holds
``channels * height * width`` little-endian float32 values in C order.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from prom.tensor import FLOAT

_IDX_CODES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_BY_KIND = {(v.kind, v.itemsize): k for k, v in _IDX_CODES.items()}


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Train/validation split; images are N x C x H x W float32."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    def __post_init__(self):
        for x, y, split in ((self.x_train, self.y_train, "train"), (self.x_val, self.y_val, "val")):
            if x.ndim != 4:
                raise DataFormatError(f"{split} images must be N x C x H x W, got {x.shape}")
            if len(x) != len(y):
                raise DataFormatError(f"{split}: {len(x)} images but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataFormatError(f"{split} labels outside [0, {self.num_classes})")
        if len(self.x_train) == 0:
            raise DataFormatError("empty training split")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])


def write_idx(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _IDX_BY_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX code")
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=_IDX_CODES[code]).tobytes())


def read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_CODES:
        raise DataFormatError(f"{path}: unknown IDX dtype code 0x{code:02x}")
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", raw[4:hdr])
    dt = _IDX_CODES[code]
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) - hdr != n:
        raise DataFormatError(f"{path}: payload is {len(raw) - hdr} bytes, expected {n}")
    return np.frombuffer(raw, dtype=dt, offset=hdr).reshape(shape).astype(dt.newbyteorder("="))


def _as_images(x: np.ndarray) -> np.ndarray:
    """uint8 images are scaled to [0, 1]; a missing channel axis is added."""
    if x.ndim == 3:
        x = x[:, None]
    if x.dtype == np.uint8:
        return (x.astype(FLOAT) / FLOAT(255.0))
    return x.astype(FLOAT)


def load_idx_dataset(train_images: str, train_labels: str, val_images: str, val_labels: str,
                     num_classes: int | None = None) -> Dataset:
    xt, yt = _as_images(read_idx(train_images)), read_idx(train_labels).astype(np.int64)
    xv, yv = _as_images(read_idx(val_images)), read_idx(val_labels).astype(np.int64)
    k = num_classes or int(max(yt.max(initial=0), yv.max(initial=0))) + 1
    return Dataset(xt, yt, xv, yv, k)


def write_tensor_dir(root: str, x: np.ndarray, y: np.ndarray) -> None:
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "labels.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["file", "label", "channels", "height", "width"])
        for i, (img, lab) in enumerate(zip(x, y)):
            name = f"{i:06d}.f32"
            np.ascontiguousarray(img, dtype="<f4").tofile(os.path.join(root, name))
            w.writerow([name, int(lab), *img.shape])


def read_tensor_dir(root: str) -> tuple[np.ndarray, np.ndarray]:
    index = os.path.join(root, "labels.csv")
    if not os.path.exists(index):
        raise DataFormatError(f"{root}: missing labels.csv")
    images, labels = [], []
    with open(index, newline="") as f:
        for row in csv.DictReader(f):
            try:
                shape = (int(row["channels"]), int(row["height"]), int(row["width"]))
                label = int(row["label"])
                name = row["file"]
            except (KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"{index}: bad row {row}") from e
            arr = np.fromfile(os.path.join(root, name), dtype="<f4")
            if arr.size != np.prod(shape):
                raise DataFormatError(f"{name}: {arr.size} values, expected {shape}")
            images.append(arr.reshape(shape))
            labels.append(label)
    if images and len({a.shape for a in images}) != 1:
        raise DataFormatError(f"{root}: images have differing shapes")
    x = np.stack(images).astype(FLOAT) if images else np.zeros((0, 0, 0, 0), FLOAT)
    return x, np.asarray(labels, np.int64)


def load_tensor_dir_dataset(train_root: str, val_root: str, num_classes: int | None = None) -> Dataset:
    xt, yt = read_tensor_dir(train_root)
    xv, yv = read_tensor_dir(val_root)
    k = num_classes or int(max(yt.max(initial=0), yv.max(initial=0))) + 1
    return Dataset(xt, yt, xv, yv, k)


def synthetic_dataset(n_train: int = 600, n_val: int = 300, num_classes: int = 10, size: int = 32,
                      noise: float = 0.6, seed: int = 0) -> Dataset:
    """Oriented colour gratings with random phase, frequency jitter, shift and noise.

    Class ``k`` fixes the grating angle and a colour mix; everything else is
    nuisance, so a small convnet needs a few epochs to separate the classes.
    """
    g = np.random.default_rng(seed)
    colours = np.random.default_rng(10_000 + seed).uniform(0.2, 1.0, size=(num_classes, 3)).astype(FLOAT)

    def make(n):
        labels = g.integers(0, num_classes, size=n)
        yy, xx = np.mgrid[0:size, 0:size].astype(FLOAT) / FLOAT(size)
        theta = np.pi * labels / num_classes + g.normal(0, 0.05, n)
        freq = g.uniform(3.0, 5.0, n)
        phase = g.uniform(0, 2 * np.pi, n)
        u = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
        wave = np.sin(2 * np.pi * freq[:, None, None] * u + phase[:, None, None]).astype(FLOAT)
        # soft circular window at a random centre
        cy, cx = g.uniform(0.3, 0.7, n), g.uniform(0.3, 0.7, n)
        win = np.exp(-((yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2) / 0.08).astype(FLOAT)
        img = colours[labels][:, :, None, None] * (wave * win)[:, None]
        img += g.normal(0, noise, img.shape).astype(FLOAT)
        return img.astype(FLOAT), labels.astype(np.int64)

    xt, yt = make(n_train)
    xv, yv = make(n_val)
    return Dataset(xt, yt, xv, yv, num_classes)
