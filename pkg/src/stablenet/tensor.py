"""Feature/filter containers, vectorization and norms.

Features are rank-3 arrays indexed ``x[i, j, k]`` (row, column, channel) and
filters are rank-4 arrays ``K[r, c, i, j]`` where ``K[:, :, i, j]`` is the
subfilter coupling input channel ``i`` to output channel ``j``.  All indices
are 0-based.  Vectorization is channel-major::

    vec(x)[k*h*w + i*w + j] == x[i, j, k]

which is the 1-based rule ``(k-1)hw + (i-1)w + j`` shifted once, here.

Most operations in the package accept plain ``float64`` ndarrays with an
optional leading batch axis; :class:`Feature` and :class:`Filter` are the
immutable, self-describing forms used at API and file boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError

MAGIC = b"STBL"

__all__ = [
    "Feature",
    "Filter",
    "vectorize",
    "devectorize",
    "norm",
    "to_bytes",
    "from_bytes",
    "save_tensor",
    "load_tensor",
]


def _frozen(arr):
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Feature:
    """An ``height x width x depth`` feature stored in vectorization order."""

    height: int
    width: int
    depth: int
    data: np.ndarray

    def __post_init__(self):
        for name in ("height", "width", "depth"):
            if int(getattr(self, name)) < 1:
                raise ShapeError(f"{name} must be positive")
        data = _frozen(np.ravel(self.data))
        if data.size != self.height * self.width * self.depth:
            raise ShapeError(
                f"data has {data.size} entries, expected "
                f"{self.height}*{self.width}*{self.depth}"
            )
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Feature":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeError(f"feature must be rank 3, got shape {arr.shape}")
        h, w, d = arr.shape
        return cls(h, w, d, vectorize(arr))

    @property
    def shape(self):
        return (self.height, self.width, self.depth)

    def array(self) -> np.ndarray:
        """Return the ``(h, w, d)`` view (read-only)."""
        return devectorize(self.data, self.height, self.width, self.depth)

    def __array__(self, dtype=None, copy=None):
        arr = self.array()
        return arr if dtype is None else arr.astype(dtype)


@dataclass(frozen=True)
class Filter:
    """An ``n x n x d_in x d_out`` convolution filter."""

    n: int
    d_in: int
    d_out: int
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.shape != (self.n, self.n, self.d_in, self.d_out):
            if data.size != self.n * self.n * self.d_in * self.d_out:
                raise ShapeError("filter data size does not match n*n*d_in*d_out")
            data = _frozen(data.reshape(self.n, self.n, self.d_in, self.d_out))
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Filter":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None, None]
        if arr.ndim != 4 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"filter must be n x n x d_in x d_out, got {arr.shape}")
        return cls(arr.shape[0], arr.shape[2], arr.shape[3], arr)

    @property
    def shape(self):
        return self.data.shape

    def subfilter(self, i: int, j: int) -> np.ndarray:
        """The ``n x n`` block acting from input channel i to output channel j."""
        return self.data[:, :, i, j]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def vectorize(x) -> np.ndarray:
    """Flatten a feature (or a batch ``(..., h, w, d)``) in channel-major order."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 3:
        raise ShapeError(f"expected (..., h, w, d), got shape {arr.shape}")
    moved = np.moveaxis(arr, -1, -3)
    return moved.reshape(arr.shape[:-3] + (-1,))


def devectorize(v, h: int, w: int, d: int) -> np.ndarray:
    """Inverse of :func:`vectorize`; accepts a leading batch axis."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != h * w * d:
        raise ShapeError(f"vector length {v.shape[-1]} != {h}*{w}*{d}")
    arr = v.reshape(v.shape[:-1] + (d, h, w))
    return np.moveaxis(arr, -3, -1)


def norm(v, kind: str = "l2", p: float | None = None) -> float:
    """Entrywise norms.

    ``kind`` is one of ``l1``, ``l2``, ``linf``, ``frobenius`` or ``lpp``; the
    latter is the entrywise p-norm ``(sum |v|^p)^(1/p)`` and needs ``p >= 1``.
    Features are treated entrywise, so ``frobenius`` and ``l2`` coincide.
    """
    a = np.abs(np.asarray(v, dtype=np.float64)).ravel()
    if kind in ("l2", "frobenius"):
        return float(np.sqrt(np.dot(a, a)))
    if kind == "l1":
        return float(a.sum())
    if kind == "linf":
        return float(a.max()) if a.size else 0.0
    if kind == "lpp":
        if p is None or p < 1:
            raise ValueError("lpp norm requires p >= 1")
        if np.isinf(p):
            return float(a.max()) if a.size else 0.0
        return float(np.sum(a**p) ** (1.0 / p))
    raise ValueError(f"unknown norm kind {kind!r}")


# Binary layout: b"STBL", uint32 rank, rank * uint64 dims (natural order),
# then float64 payload.  For rank >= 3 the payload follows the vectorization
# convention generalised to trailing axes: last axis outermost, then the
# remaining trailing axes in reverse, then rows, then columns.


def _storage_perm(rank):
    if rank < 3:
        return tuple(range(rank))
    return tuple(range(rank - 1, 1, -1)) + (0, 1)


def to_bytes(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 4:
        raise ShapeError("tensors above rank 4 are not supported")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(np.transpose(arr, _storage_perm(arr.ndim)))
    return header + payload.astype("<f8").tobytes()


def from_bytes(buf: bytes, offset: int = 0):
    """Decode one tensor; returns ``(array, next_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("not an STBL tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if rank > 4:
        raise ShapeError(f"unsupported rank {rank}")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset + 8)
    start = offset + 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=start)
    perm = _storage_perm(rank)
    stored = flat.reshape([dims[p] for p in perm])
    arr = np.transpose(stored, np.argsort(perm)).astype(np.float64)
    return arr, start + 8 * count


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(to_bytes(np.asarray(arr)))


def load_tensor(path) -> np.ndarray:
    arr, _ = from_bytes(Path(path).read_bytes())
    return arr
