"""Training data: the synthetic dynamical-system regression task and an
MNIST embedding through a fixed random convolutional projection.
"""

from __future__ import annotations

import gzip
import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_NDIM = {IDX_IMAGES_MAGIC: 3, IDX_LABELS_MAGIC: 1}

CACHE_MAGIC = "RSDS1"

# fixed projection for the MNIST embedding: two 3x3 stride-2 layers, no bias
CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_CHANNELS = (4, 1)
CONV_STD = 1.0 / 3.0


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    """Header dimensions overflow or are inconsistent with the data."""


class DegenerateTrajectoryError(ArithmeticError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, d)
    targets: np.ndarray  # (n, d)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape != self.targets.shape:
            raise ValueError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} must be equal (n, d) arrays"
            )

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.n


def _synthetic_step(z: np.ndarray, k: int, K: int) -> np.ndarray:
    phase = 5.0 * k * np.pi / K
    return z + K ** -0.5 * np.tanh(np.sin(phase) * z + np.cos(phase))


def simulate_trajectory(x: np.ndarray, k_steps: int) -> np.ndarray:
    """All states z_0..z_K of the generator dynamics, shape (K+1, ..., d)."""
    z = np.asarray(x, dtype=np.float64)
    out = [z]
    for k in range(1, k_steps + 1):
        z = _synthetic_step(z, k, k_steps)
        out.append(z)
    return np.stack(out)


def generate_synthetic(seed: int, n: int, d: int = 10, k_steps: int = 100) -> Dataset:
    """Inputs uniform on [-1, 1]^d pushed through the K-step tanh dynamics;
    targets are the normalised end states."""
    if n < 1 or d < 1 or k_steps < 1:
        raise ValueError("n, d and k_steps must all be >= 1")
    rng = RngStream(seed, 0)
    x = rng.uniform((n, d), -1.0, 1.0)
    z = x
    for k in range(1, k_steps + 1):
        z = _synthetic_step(z, k, k_steps)
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise DegenerateTrajectoryError(f"sample {bad} has ||z_K|| = 0")
    y = z / norms[:, None]
    prov = {"kind": "synthetic", "seed": int(seed), "n": n, "d": d, "k_steps": k_steps}
    return Dataset(x, y, prov)


@dataclass
class IdxArray:
    dims: list[int]
    data: bytes

    def __post_init__(self):
        if len(self.data) != int(np.prod(self.dims, dtype=object)):
            raise IdxDimensionError(f"data length {len(self.data)} does not match dims {self.dims}")

    @property
    def magic(self) -> int:
        return IDX_IMAGES_MAGIC if len(self.dims) == 3 else IDX_LABELS_MAGIC

    def to_numpy(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8).reshape(self.dims)


def load_idx(raw: bytes) -> IdxArray:
    """Parse an unsigned-byte IDX file (images 0x803 or labels 0x801)."""
    if len(raw) < 4:
        raise IdxTruncatedError("file shorter than the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in _IDX_NDIM:
        raise IdxMagicError(f"unsupported IDX magic 0x{magic:08x}")
    ndim = _IDX_NDIM[magic]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError("file ends inside the dimension header")
    dims = list(struct.unpack(f">{ndim}I", raw[4:header]))
    size = 1
    for n in dims:
        size *= n
    if size > sys.maxsize:
        raise IdxDimensionError(f"dimensions {dims} overflow the addressable size")
    payload = raw[header:]
    if len(payload) < size:
        raise IdxTruncatedError(f"payload has {len(payload)} bytes, dims {dims} need {size}")
    if len(payload) > size:
        raise IdxDimensionError(f"{len(payload) - size} trailing bytes after payload of dims {dims}")
    return IdxArray(dims, bytes(payload))


def serialize_idx(arr: IdxArray) -> bytes:
    return struct.pack(">I", arr.magic) + struct.pack(f">{len(arr.dims)}I", *arr.dims) + arr.data


def read_idx_file(path) -> IdxArray:
    """Read an IDX file from disk, transparently gunzipping ``.gz`` content."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return load_idx(raw)


def _conv2d(x: np.ndarray, kernels: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation. x: (n, c_in, H, W); kernels: (c_out, c_in, k, k)."""
    k = kernels.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,ocij->nohw", win, kernels, optimize=True)


def projection_kernels(seed: int) -> list[np.ndarray]:
    rng = RngStream(seed, 1)
    c_in = 1
    kernels = []
    for i, c_out in enumerate(CONV_CHANNELS):
        kernels.append(rng.child(i).normal((c_out, c_in, CONV_KERNEL, CONV_KERNEL), CONV_STD))
        c_in = c_out
    return kernels


def embed_images(images: np.ndarray, seed: int, d: int = 25) -> np.ndarray:
    """Map (n, 28, 28) uint8 images to (n, d) features via the fixed projection."""
    x = np.asarray(images, dtype=np.float64)[:, None, :, :] / 255.0
    for kern in projection_kernels(seed):
        x = _conv2d(x, kern, CONV_STRIDE)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] < d:
        raise ValueError(f"projection yields {flat.shape[1]} features, fewer than d={d}")
    return np.ascontiguousarray(flat[:, :d])


def embed_mnist(images: IdxArray, labels: IdxArray, seed: int, d: int = 25) -> Dataset:
    if d < 10:
        raise ValueError("d must be at least 10 to hold a one-hot class target")
    if len(images.dims) != 3 or images.dims[1:] != [28, 28]:
        raise ValueError(f"expected 28x28 images, got dims {images.dims}")
    if len(labels.dims) != 1 or labels.dims[0] != images.dims[0]:
        raise ValueError(f"{images.dims[0]} images but labels have dims {labels.dims}")
    lab = labels.to_numpy().astype(np.int64)
    if lab.size and lab.max() > 9:
        raise ValueError("labels must be digits 0-9")
    x = embed_images(images.to_numpy(), seed, d)
    y = np.zeros((lab.size, d))
    y[np.arange(lab.size), lab] = 1.0
    prov = {"kind": "mnist", "seed": int(seed), "n": int(lab.size), "d": d,
            "conv": {"kernel": CONV_KERNEL, "stride": CONV_STRIDE,
                     "channels": list(CONV_CHANNELS), "std": CONV_STD}}
    return Dataset(x, y, prov)


def save_dataset(ds: Dataset, path) -> None:
    """Write the cache container.

    Layout: one UTF-8 line ``RSDS1 <json>\\n`` where the JSON holds the
    provenance plus ``n`` and ``d``; then inputs and targets as
    little-endian float64, row-major, inputs first.
    """
    head = dict(ds.provenance)
    head.update(n=ds.n, d=ds.d)
    line = f"{CACHE_MAGIC} {json.dumps(head, sort_keys=True)}\n".encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(line)
        fh.write(ds.inputs.astype("<f8").tobytes())
        fh.write(ds.targets.astype("<f8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(CACHE_MAGIC.encode() + b" "):
        raise ValueError(f"{path}: not a dataset cache file")
    head = json.loads(raw[len(CACHE_MAGIC) + 1:nl].decode("utf-8"))
    n, d = head.pop("n"), head.pop("d")
    body = raw[nl + 1:]
    if len(body) != 2 * n * d * 8:
        raise ValueError(f"{path}: expected {2 * n * d * 8} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(2, n, d)
    head.update(n=n, d=d)
    return Dataset(arr[0].copy(), arr[1].copy(), head)
