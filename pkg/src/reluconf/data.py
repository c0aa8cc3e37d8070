"""Datasets, IDX files, checkpoints and tensor containers.

Binary layouts
--------------
IDX: big-endian magic (``0x00000803`` images, ``0x00000801`` labels), one
big-endian uint32 per dimension, then unsigned bytes.

Checkpoint (``PARN1``) and tensor container (``PART1``): 5 magic bytes, a
little-endian uint32 header length, a canonical JSON header, then the raw
little-endian payload of every tensor in directory order. Checkpoints always
store float32; tensor containers declare their dtype in the header.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import (CheckpointHeaderError, CheckpointLengthError, CheckpointVersionError, FormatError,
                     TruncatedFileError, ValidationError)
from .models import Conv, Dense, Flatten, Pool, RbfNetwork, ReluNetwork
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CHECKPOINT_MAGIC = b"PARN1"
TENSORS_MAGIC = b"PART1"
FORMAT_VERSION = 1

PathLike = Union[str, os.PathLike]


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _open(path: PathLike):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path: PathLike, expected_magic: int) -> np.ndarray:
    """Raw uint8 array of an IDX file."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic, expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} payload bytes, found {len(raw) - header}")
    if len(raw) - header > size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes after IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path: PathLike, array: np.ndarray) -> None:
    """Write a uint8 array as IDX; magic 0x801 for 1-d, 0x803 for 3-d, etc."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValidationError("IDX writer expects uint8 data")
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> LabeledDataset:
    """MNIST-style pair of IDX files; pixels are divided by 255."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValidationError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), num_classes)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist(directory: PathLike, split: str = "train") -> LabeledDataset:
    directory = Path(directory)
    img, lab = MNIST_FILES[split]
    return load_idx(_find(directory, img), _find(directory, lab))


def to_grayscale(images: np.ndarray) -> np.ndarray:
    """Average the channels of NCHW images, keeping a single channel."""
    images = np.asarray(images, dtype=np.float64)
    return images.mean(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# synthetic and desk-scale datasets
# ---------------------------------------------------------------------------


def _balanced_counts(n: int, K: int) -> List[int]:
    return [n // K + (1 if k < n % K else 0) for k in range(K)]


def blob_centers(K: int) -> np.ndarray:
    angles = 2 * np.pi * np.arange(K) / K
    return 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def synth_2d(kind: str, n: int, noise_std: float = 0.05, seed: int = 0, num_classes: int = 3) -> LabeledDataset:
    """``two_moons`` or ``gaussian_blobs`` with coordinates in [0, 1]^2.

    Moon noise is added in the native moon coordinates (radius 1) before
    rescaling; blob noise is added in the unit square.
    """
    K = 2 if kind == "two_moons" else int(num_classes)
    if kind not in ("two_moons", "gaussian_blobs"):
        raise ValidationError(f"unknown synthetic dataset {kind!r}")
    if n < K:
        raise ValidationError(f"need n >= {K} points")
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n, K)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)])
    if kind == "two_moons":
        t0 = np.linspace(0, np.pi, counts[0])
        t1 = np.linspace(0, np.pi, counts[1])
        upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        lower = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        pts = np.concatenate([upper, lower])
        if noise_std:
            pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
        # noise-free moons live in [-1, 2] x [-0.5, 1]
        pts = (pts - np.array([-1.0, -0.5])) / np.array([3.0, 1.5]) * 0.8 + 0.1
    else:
        pts = blob_centers(K)[labels]
        if noise_std:
            pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    pts = np.clip(pts, 0.0, 1.0)
    perm = rng.permutation(n)
    return LabeledDataset(pts[perm], labels[perm], K)


def _digit_canvas(img8: np.ndarray) -> np.ndarray:
    from scipy.ndimage import zoom

    box = np.clip(zoom(img8, 20 / 8, order=1), 0.0, 1.0)
    canvas = np.zeros((28, 28))
    canvas[4:24, 4:24] = box
    return canvas


def _jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    from scipy.ndimage import affine_transform

    angle = np.deg2rad(rng.uniform(-12, 12))
    s = rng.uniform(0.9, 1.1)
    shear = rng.uniform(-0.15, 0.15)
    A = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) @ np.array([[1, shear], [0, 1]]) / s
    c = np.array([13.5, 13.5])
    shift = rng.uniform(-2, 2, size=2)
    offset = c - A @ (c + shift)
    return np.clip(affine_transform(img, A, offset=offset, order=1, mode="constant"), 0.0, 1.0)


def desk_digits(n_train: int = 10000, n_test: int = 500, seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """A 28x28 handwritten-digit stand-in for MNIST built from scikit-learn's digits.

    The 1797 scanned 8x8 digits are upsampled into a 20x20 box on a 28x28
    canvas. ``n_test`` originals are held out as the test set; the training
    set is drawn from the remaining originals with random affine jitter.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = raw.images / 16.0
    y = raw.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    test_ix, train_ix = perm[:n_test], perm[n_test:]
    canv = np.stack([_digit_canvas(im) for im in imgs])
    test = LabeledDataset(canv[test_ix][:, None], y[test_ix], 10)
    # every original once, then jittered copies cycling through the originals
    picks = train_ix[np.arange(n_train) % len(train_ix)]
    train_imgs = np.empty((n_train, 1, 28, 28))
    for i, j in enumerate(picks):
        train_imgs[i, 0] = canv[j] if i < len(train_ix) else _jitter(canv[j], rng)
    order = rng.permutation(n_train)
    return LabeledDataset(train_imgs[order], y[picks][order], 10), test


def load_digit_benchmark(n_train: int = 10000, n_test: int = 2000, seed: int = 0,
                         mnist_dir: Optional[PathLike] = None):
    """``(train, test, source)``: an MNIST subset when available, else :func:`desk_digits`.

    The MNIST directory comes from ``mnist_dir`` or the ``MNIST_DIR`` variable.
    """
    mnist_dir = mnist_dir or os.environ.get("MNIST_DIR")
    if mnist_dir and Path(mnist_dir).is_dir():
        rng = np.random.default_rng(seed)
        train, test = load_mnist(mnist_dir, "train"), load_mnist(mnist_dir, "test")
        train = train.subset(np.sort(rng.permutation(len(train))[:n_train]))
        test = test.subset(np.sort(rng.permutation(len(test))[:n_test]))
        return train, test, "mnist"
    train, test = desk_digits(n_train, min(n_test, 797), seed)
    return train, test, "desk_digits"


# ---------------------------------------------------------------------------
# binary containers
# ---------------------------------------------------------------------------


def _canonical(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_container(path: PathLike, magic: bytes, header: dict, arrays: List[Tuple[str, np.ndarray]],
                     dtype: str) -> None:
    np_dtype = np.dtype(dtype).newbyteorder("<")
    directory, chunks, offset = [], [], 0
    for name, arr in arrays:
        buf = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {**header, "format_version": FORMAT_VERSION, "tensors": directory}
    blob = _canonical(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def _read_container(path: PathLike, magic: bytes, dtype: Optional[str] = None):
    raw = Path(path).read_bytes()
    if raw[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}, found {raw[:len(magic)]!r}")
    pos = len(magic)
    if len(raw) < pos + 4:
        raise CheckpointHeaderError(f"{path}: missing header length")
    (hlen,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    if len(raw) < pos + hlen:
        raise CheckpointHeaderError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        directory = header["tensors"]
        version = header["format_version"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointHeaderError(f"{path}: corrupt header ({exc})") from exc
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {version}, supported {FORMAT_VERSION}")
    payload = raw[pos + hlen:]
    np_dtype = np.dtype(dtype or header.get("dtype", "float32")).newbyteorder("<")
    arrays: Dict[str, np.ndarray] = {}
    expected = 0
    try:
        for entry in directory:
            shape = tuple(int(s) for s in entry["shape"])
            nbytes = int(np.prod(shape)) * np_dtype.itemsize
            if int(entry["offset"]) != expected:
                raise CheckpointHeaderError(f"{path}: tensor {entry['name']} at offset {entry['offset']}, "
                                            f"expected {expected}")
            expected += nbytes
            if expected > len(payload):
                raise CheckpointLengthError(f"{path}: payload has {len(payload)} bytes, "
                                            f"directory needs at least {expected}")
            arrays[entry["name"]] = np.frombuffer(payload, dtype=np_dtype, count=int(np.prod(shape)),
                                                  offset=expected - nbytes).reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise CheckpointHeaderError(f"{path}: malformed tensor directory ({exc})") from exc
    if expected != len(payload):
        raise CheckpointLengthError(f"{path}: payload has {len(payload)} bytes, directory needs {expected}")
    return header, arrays


def _layer_descriptor(layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "activation": layer.activation, "slope": layer.slope}
    if isinstance(layer, Conv):
        return {"kind": "conv", "activation": layer.activation, "slope": layer.slope,
                "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, Pool):
        return {"kind": layer.kind, "window": layer.window, "stride": layer.stride}
    return {"kind": "flatten"}


def architecture(net: Union[ReluNetwork, RbfNetwork]) -> dict:
    if isinstance(net, RbfNetwork):
        return {"type": "rbf", "gamma": float(net.gamma)}
    return {"type": "relu", "input_shape": list(net.input_shape),
            "layers": [_layer_descriptor(l) for l in net.layers]}


def save_checkpoint(net: Union[ReluNetwork, RbfNetwork], path: PathLike) -> None:
    """Write parameters as float32 with the architecture in the JSON header."""
    if isinstance(net, RbfNetwork):
        arrays = [("centers", net.centers), ("coefficients", net.coefficients.data)]
    else:
        arrays = []
        for i, layer in enumerate(net.layers):
            if isinstance(layer, (Dense, Conv)):
                arrays += [(f"layers.{i}.W", layer.W.data), (f"layers.{i}.b", layer.b.data)]
    _write_container(path, CHECKPOINT_MAGIC, {"architecture": architecture(net), "dtype": "float32"},
                     arrays, "float32")


def load_checkpoint(path: PathLike) -> Union[ReluNetwork, RbfNetwork]:
    header, arrays = _read_container(path, CHECKPOINT_MAGIC, "float32")
    try:
        arch = header["architecture"]
        if arch["type"] == "rbf":
            return RbfNetwork(arrays["centers"], Tensor(arrays["coefficients"]), arch["gamma"])
        layers = []
        for i, d in enumerate(arch["layers"]):
            kind = d["kind"]
            if kind == "dense":
                layers.append(Dense(arrays[f"layers.{i}.W"], arrays[f"layers.{i}.b"], d["activation"], d["slope"]))
            elif kind == "conv":
                layers.append(Conv(arrays[f"layers.{i}.W"], arrays[f"layers.{i}.b"], d["stride"], d["padding"],
                                   d["activation"], d["slope"]))
            elif kind in ("maxpool", "avgpool"):
                layers.append(Pool("max" if kind == "maxpool" else "avg", d["window"], d["stride"]))
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise CheckpointHeaderError(f"{path}: unknown layer kind {kind!r}")
        return ReluNetwork(layers, tuple(arch["input_shape"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointHeaderError(f"{path}: architecture does not match tensors ({exc})") from exc


def save_tensors(path: PathLike, tensors: Dict[str, np.ndarray], dtype: str = "float64") -> None:
    """Named arrays in the ``PART1`` container, in sorted-name order."""
    if dtype not in ("float32", "float64"):
        raise ValidationError("dtype must be float32 or float64")
    _write_container(path, TENSORS_MAGIC, {"dtype": dtype},
                     [(k, np.asarray(tensors[k])) for k in sorted(tensors)], dtype)


def load_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    return _read_container(path, TENSORS_MAGIC)[1]


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Binary 8-bit PGM preview of a single-channel image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64).squeeze()
    if img.ndim != 2:
        raise ValidationError(f"PGM needs a 2-d image, got {img.shape}")
    px = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())
