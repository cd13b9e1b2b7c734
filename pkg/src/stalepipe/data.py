"""Deterministic dataset supply: synthetic teacher data, IDX files, batching.

Everything here is a pure function of its seeds. The teacher generator draws
teacher weights first and inputs second from a single stream, so a spec maps
to exactly one dataset byte-for-byte. The batch iterator derives one
permutation per (seed, epoch) and drops the trailing partial batch so every
training step sees a full batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import SeededRng, derive_seed
from .tensor import check_finite


@dataclass
class Dataset:
    inputs: np.ndarray  # N x D float64
    labels: np.ndarray  # N int64 class indices (or N x C float64 targets)

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs ({self.inputs.shape[0]}) and labels ({self.labels.shape[0]}) disagree on N"
            )
        check_finite(self.inputs, "dataset inputs")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class TeacherSpec:
    dims: tuple[int, ...]  # (D, hidden..., C)
    n: int
    seed: int

    def __post_init__(self):
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise ValueError(f"teacher dims must be >= 2 positive entries, got {self.dims}")
        if self.n <= 0:
            raise ValueError("sample count must be positive")


def teacher_params(dims: tuple[int, ...], rng: SeededRng) -> list[np.ndarray]:
    """One weight matrix per consecutive dim pair, scaled by 1/sqrt(fan_in)."""
    params = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(d_in * d_out).reshape(d_in, d_out) / np.sqrt(d_in)
        params.append(w)
    return params


def teacher_logits(params: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Linear chain with tanh between hidden layers, linear output."""
    h = x
    for i, w in enumerate(params):
        h = h @ w
        if i < len(params) - 1:
            h = np.tanh(h)
    return h


def gen_teacher_dataset(spec: TeacherSpec) -> Dataset:
    """Inputs ~ standard normal; labels = argmax of the teacher's logits."""
    rng = SeededRng(spec.seed)
    params = teacher_params(spec.dims, rng)
    x = rng.normal(spec.n * spec.dims[0]).reshape(spec.n, spec.dims[0])
    logits = teacher_logits(params, x)
    labels = np.argmax(logits, axis=1).astype(np.int64)
    return Dataset(inputs=x, labels=labels)


_IDX_DTYPES = {0x08: ("u1", 1), 0x09: ("i1", 1), 0x0B: (">i2", 2), 0x0C: (">i4", 4),
               0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def load_idx(path) -> np.ndarray:
    """Read an IDX file (big-endian header). u8 payloads are scaled to [0, 1] float64."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0 or dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: bad IDX magic {raw[:4].hex()}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    dtype, item = _IDX_DTYPES[dtype_code]
    count = int(np.prod(dims)) if dims else 0
    payload = raw[header_len:]
    if len(payload) != count * item:
        raise ValueError(
            f"{path}: truncated IDX payload: expected {count * item} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float64)
    if dtype_code == 0x08:
        arr = arr / 255.0
    return arr


def save_idx(path, array: np.ndarray) -> None:
    """Write a u8 IDX file (values must already lie in [0, 255])."""
    arr = np.asarray(array)
    data = np.ascontiguousarray(arr, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x08, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack(">I", d))
        f.write(data.tobytes())


def compute_standardization(x: np.ndarray) -> tuple[float, float]:
    mean = float(x.mean())
    std = float(x.std())
    return mean, (std if std > 0 else 1.0)


def standardize(x: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    return (x - mean) / std


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int, epoch: int):
    """Full batches for one epoch under the (seed, epoch) permutation; drop_last."""
    if batch_size <= 0 or batch_size > dataset.n:
        raise ValueError(f"batch size must lie in [1, {dataset.n}], got {batch_size}")
    rng = SeededRng(derive_seed(shuffle_seed, epoch))
    perm = rng.permutation(dataset.n)
    for i in range(dataset.n // batch_size):
        idx = perm[i * batch_size : (i + 1) * batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]


def epoch_stream(dataset: Dataset, batch_size: int, shuffle_seed: int):
    """Endless batch stream cycling epochs 0, 1, 2, ..."""
    epoch = 0
    while True:
        yield from batch_iter(dataset, batch_size, shuffle_seed, epoch)
        epoch += 1
