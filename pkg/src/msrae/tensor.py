"""Dense float32 tensors, seeded randomness, and the MSRT binary container.

All numeric data in this package flows through plain ``numpy.ndarray``
values in row-major layout: model data is float32, while reductions and
dot products accumulate in float64 before casting back.  Tensors are
treated as values (copied, never aliased across module boundaries), so
they are safe to move between threads.

Randomness comes from :class:`Rng`, a thin wrapper around numpy's
counter-based Philox generator.  The algorithm is pinned so that a given
seed and call sequence produces the same stream on every platform:

* bit generator: ``numpy.random.Philox`` (4x64 counter-based),
* seeded through ``numpy.random.SeedSequence(entropy, spawn_key)``,
* independent streams are derived with :meth:`Rng.split`, which extends
  the spawn key; a worker owning ``rng.split(i)`` never overlaps with
  ``rng.split(j)`` for ``i != j``.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np

DTYPE = np.float32

# MSRT container constants
_MAGIC = b"MSRT"
_FORMAT_VERSION = 1
_DTYPE_CODE_F32 = 0


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def _shape_report(op: str, *shapes: tuple) -> str:
    return f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}"


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Coerce ``data`` to a contiguous ndarray of the package dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


# --------------------------------------------------------------------- #
# elementwise / reduce                                                   #
# --------------------------------------------------------------------- #

ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "abs")
REDUCE_OPS = ("sum", "mean", "max", "count_greater")


def elementwise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Apply ``op`` positionwise.

    ``add``/``sub``/``mul`` take a second tensor of identical shape or a
    scalar; ``scale`` takes a scalar; ``abs`` is unary.  No broadcasting
    beyond tensor-scalar is performed: a shape mismatch raises
    :class:`ShapeError` with both shapes in the message.
    """
    a = np.asarray(a)
    if op == "abs":
        return np.abs(a)
    if op == "scale":
        if b is None or np.ndim(b) != 0:
            raise ShapeError(f"scale: expected a scalar factor, got {b!r}")
        return (a * a.dtype.type(b)).astype(a.dtype)
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ShapeError(f"{op}: second operand required")
    if np.ndim(b) != 0:
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(_shape_report(op, a.shape, b.shape))
    else:
        b = a.dtype.type(b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def reduce(op: str, a: np.ndarray, threshold: float | None = None):
    """Reduce ``a`` to a scalar with float64 accumulation.

    ``count_greater`` counts elements strictly greater than ``threshold``
    and returns an int; the other ops return a python float.
    """
    a = np.asarray(a)
    if a.size == 0:
        raise ValueError(f"reduce {op!r}: empty tensor")
    if op == "sum":
        return float(np.sum(a, dtype=np.float64))
    if op == "mean":
        return float(np.mean(a, dtype=np.float64))
    if op == "max":
        return float(np.max(a))
    if op == "count_greater":
        if threshold is None:
            raise ValueError("count_greater requires a threshold")
        return int(np.count_nonzero(a > threshold))
    raise ValueError(f"unknown reduce op {op!r}")


# --------------------------------------------------------------------- #
# randomness                                                             #
# --------------------------------------------------------------------- #

SeedLike = Union[int, Sequence[int]]


class Rng:
    """Seeded Philox random stream with documented seed-splitting.

    ``Rng(seed)`` owns the root stream for ``seed``; ``rng.split(k)``
    derives the k-th child stream.  Identical (seed, split path, call
    sequence) yields an identical value stream on every platform.
    """

    def __init__(self, seed: SeedLike, _spawn_key: tuple = ()):
        if isinstance(seed, (int, np.integer)):
            entropy: SeedLike = int(seed)
        else:
            entropy = tuple(int(s) for s in seed)
        self.seed = entropy
        self.spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(entropy=entropy, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, stream: int) -> "Rng":
        """Derive an independent child stream."""
        return Rng(self.seed, self.spawn_key + (int(stream),))

    def normal(self, shape, mean: float = 0.0, stddev: float = 1.0, dtype=DTYPE) -> np.ndarray:
        return gaussian(self, shape, mean, stddev, dtype=dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def shuffled(self, values: Iterable) -> list:
        values = list(values)
        perm = self._gen.permutation(len(values))
        return [values[i] for i in perm]


def gaussian(rng: Rng, shape, mean: float = 0.0, stddev: float = 1.0, dtype=DTYPE) -> np.ndarray:
    """Sample an i.i.d. normal tensor; ``stddev=0`` returns a constant tensor."""
    if stddev < 0:
        raise ValueError(f"gaussian: negative stddev {stddev}")
    shape = tuple(int(s) for s in shape)
    if stddev == 0:
        return np.full(shape, mean, dtype=dtype)
    return rng._gen.normal(mean, stddev, size=shape).astype(dtype)


# --------------------------------------------------------------------- #
# MSRT binary container                                                  #
# --------------------------------------------------------------------- #
#
# Layout (all integers little-endian uint32):
#   magic "MSRT" | format version | dtype code (0 = f32) | rank |
#   rank extents | raw little-endian f32 payload.
# Round-trips are bit-exact: the payload is the tensor's own bytes.


def write_tensor(fp: BinaryIO, arr: np.ndarray) -> int:
    """Append one MSRT record to ``fp``; returns the number of bytes written."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE))
    header = _MAGIC + struct.pack(
        "<III", _FORMAT_VERSION, _DTYPE_CODE_F32, arr.ndim
    ) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes()
    fp.write(header)
    fp.write(payload)
    return len(header) + len(payload)


def read_tensor(fp: BinaryIO) -> np.ndarray:
    """Read one MSRT record from the current position of ``fp``."""
    magic = fp.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad MSRT magic {magic!r}")
    version, dtype_code, rank = struct.unpack("<III", fp.read(12))
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported MSRT version {version}")
    if dtype_code != _DTYPE_CODE_F32:
        raise ValueError(f"unsupported MSRT dtype code {dtype_code}")
    shape = struct.unpack(f"<{rank}I", fp.read(4 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fp.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated MSRT payload")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)
    return np.ascontiguousarray(arr).astype(DTYPE, copy=False)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)
