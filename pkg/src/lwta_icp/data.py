"""Dataset ingestion, normalization, file formats and augmentation.

Two on-disk formats are understood:

* ``.csv`` -- one example per line, numeric features then an integer label
  in the last column; an optional non-numeric header line is skipped.
* ``.lwd`` -- little-endian binary: 8-byte magic ``LWTADATA``, ``u16``
  version, ``u8`` dtype code, ``u8`` ndim, ``ndim`` x ``u32`` extents, the raw
  array, then ``u32`` label count and that many ``i64`` labels.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .samplers import make_rng

MAGIC = b"LWTADATA"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
PRESETS = ("blobs", "spirals", "digits8x8")


@dataclass
class DatasetBundle:
    name: str
    kind: str  # "vector" or "image"
    x_train: np.ndarray
    t_train: np.ndarray
    x_test: np.ndarray
    t_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_classes: int

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    @property
    def n_train(self):
        return len(self.t_train)

    def all_x(self):
        return np.concatenate([self.x_train, self.x_test])

    def all_t(self):
        return np.concatenate([self.t_train, self.t_test])


@dataclass
class AugmentFlags:
    crop: bool = False
    flip: bool = False
    pad: int = 4

    @property
    def any(self):
        return self.crop or self.flip


# presets ---------------------------------------------------------------------------

def make_blobs(seed, n=1000):
    """Two isotropic Gaussian clusters at (-2, -2) and (2, 2), unit spread."""
    rng = make_rng(seed)
    labels = np.repeat([0, 1], [n - n // 2, n // 2])
    centers = np.array([[-2.0, -2.0], [2.0, 2.0]])
    x = centers[labels] + rng.standard_normal((n, 2))
    order = rng.permutation(n)
    return x[order], labels[order]


def make_spirals(seed, n=1000, noise=0.2):
    rng = make_rng(seed)
    labels = np.repeat([0, 1], [n - n // 2, n // 2])
    theta = np.sqrt(rng.random(n)) * 3 * np.pi
    radius = theta / (3 * np.pi) * 4
    sign = np.where(labels == 0, 1.0, -1.0)
    x = np.stack([sign * radius * np.cos(theta), sign * radius * np.sin(theta)], axis=1)
    x = x + noise * rng.standard_normal((n, 2))
    order = rng.permutation(n)
    return x[order], labels[order]


def load_digits8x8():
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = digits.images.astype(np.float64)[..., None]
    return images, digits.target.astype(np.int64)


# normalization & split --------------------------------------------------------------

def channel_stats(x):
    """Per-channel mean/std: channels are the last axis."""
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    std = x.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def normalize(x, mean, std):
    return (np.asarray(x, dtype=np.float64) - mean) / std


def split(x, t, seed, test_fraction=0.2):
    order = make_rng(seed).permutation(len(t))
    n_test = int(round(len(t) * test_fraction))
    test, train = order[:n_test], order[n_test:]
    return x[train], t[train], x[test], t[test]


def ingest(path_or_preset, seed=0, test_fraction=0.2):
    """Load a preset or file, normalize per channel once, split by seed."""
    name = str(path_or_preset)
    if name == "blobs":
        x, t = make_blobs(seed)
    elif name == "spirals":
        x, t = make_spirals(seed)
    elif name == "digits8x8":
        x, t = load_digits8x8()
    elif os.path.exists(name):
        x, t = read_dataset(name)
    else:
        raise DataError(f"unknown dataset preset or missing file: {name}")
    if len(t) != len(x):
        raise DataError(f"{len(x)} examples but {len(t)} labels")
    if len(t) < 2:
        raise DataError("dataset needs at least two examples")
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 0:
        raise DataError("labels must be nonnegative")
    kind = "image" if x.ndim == 4 else "vector"
    if x.ndim not in (2, 4):
        raise DataError(f"expected [N, J] vectors or [N, H, L, C] images, got shape {x.shape}")
    mean, std = channel_stats(x)
    x = normalize(x, mean, std)
    x_train, t_train, x_test, t_test = split(x, t, seed, test_fraction)
    return DatasetBundle(name=name, kind=kind, x_train=x_train, t_train=t_train, x_test=x_test,
                         t_test=t_test, mean=mean, std=std, n_classes=int(t.max()) + 1)


# file formats -----------------------------------------------------------------------

def read_dataset(path):
    if str(path).endswith(".csv"):
        return read_csv(path)
    return read_binary(path)


def write_binary(path, x, labels):
    x = np.asarray(x)
    labels = np.asarray(labels, dtype="<i8")
    dtype = np.dtype(x.dtype).newbyteorder("<") if x.dtype.kind == "f" else x.dtype
    if dtype not in _DTYPE_CODES:
        x = x.astype("<f8")
        dtype = np.dtype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBB", FORMAT_VERSION, _DTYPE_CODES[dtype], x.ndim))
        fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype=dtype).tobytes())
        fh.write(struct.pack("<I", labels.size))
        fh.write(labels.tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError(f"truncated file while reading {what}", offset=pos, path=path)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise ParseError("bad magic", offset=0, path=path)
    version, code, ndim = struct.unpack("<HBB", take(4, "header"))
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {version}", offset=8, path=path)
    if code not in _DTYPES:
        raise ParseError(f"unknown dtype code {code}", offset=10, path=path)
    if ndim not in (2, 4):
        raise ParseError(f"unsupported rank {ndim}", offset=11, path=path)
    dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "extents"))
    dtype = _DTYPES[code]
    count = int(np.prod(dims))
    data = np.frombuffer(take(count * dtype.itemsize, "array data"), dtype=dtype).reshape(dims)
    label_offset = pos
    (n_labels,) = struct.unpack("<I", take(4, "label count"))
    if n_labels != dims[0]:
        raise DataError(f"{dims[0]} examples but {n_labels} labels (offset {label_offset}, path={path})")
    labels = np.frombuffer(take(8 * n_labels, "labels"), dtype="<i8")
    if pos != len(blob):
        raise ParseError("trailing bytes after labels", offset=pos, path=path)
    return data.astype(np.float64), labels.astype(np.int64)


def write_csv(path, x, labels):
    with open(path, "w") as fh:
        for row, label in zip(np.asarray(x), np.asarray(labels)):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def read_csv(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    rows, labels = [], []
    offset = 0
    width = None
    for lineno, line in enumerate(raw.splitlines(keepends=True)):
        start = offset
        offset += len(line)
        text = line.decode("utf-8", errors="replace").strip()
        if not text:
            continue
        fields = text.split(",")
        try:
            values = [float(f) for f in fields]
        except ValueError:
            if lineno == 0:
                continue  # header
            raise ParseError(f"non-numeric field on line {lineno + 1}", offset=start, path=path) from None
        if width is None:
            width = len(values)
            if width < 2:
                raise ParseError("need at least one feature and a label", offset=start, path=path)
        elif len(values) != width:
            raise ParseError(f"expected {width} fields on line {lineno + 1}, got {len(values)}",
                             offset=start, path=path)
        if values[-1] != int(values[-1]):
            raise ParseError(f"label on line {lineno + 1} is not an integer", offset=start, path=path)
        rows.append(values[:-1])
        labels.append(int(values[-1]))
    if not rows:
        raise ParseError("no data rows", offset=0, path=path)
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


# augmentation -----------------------------------------------------------------------

def flip_horizontal(batch, mask):
    out = batch.copy()
    out[mask] = out[mask][:, :, ::-1, :]
    return out


def random_crop(batch, offsets, pad):
    padded = np.pad(batch, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    h, w = batch.shape[1:3]
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, dy:dy + h, dx:dx + w]
    return out


def augment(batch, flags, rng):
    """Reflect-padded random crop and horizontal mirroring of image batches."""
    if not flags.any:
        return batch
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ConfigError("augmentation applies to image data only")
    if flags.crop:
        offsets = rng.integers(0, 2 * flags.pad + 1, size=(batch.shape[0], 2))
        batch = random_crop(batch, offsets, flags.pad)
    if flags.flip:
        batch = flip_horizontal(batch, rng.random(batch.shape[0]) < 0.5)
    return batch
