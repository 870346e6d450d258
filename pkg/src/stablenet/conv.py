"""Channel-wise and 2D convolutions, their matrix form and adjoint.

The "convolution" here is a centred cross-correlation.  For a filter of odd
size ``n`` the window covers offsets ``-r..r`` with ``r = (n-1)/2``; for even
``n`` it covers ``-(n/2 - 1)..n/2``, i.e. it leans towards larger indices::

    n = 3:  [i-1, i, i+1]          n = 2:  [i, i+1]
    n = 4:  [i-1, i, i+1, i+2]

Both cases are ``offsets = arange(n) - (n - 1) // 2``.  With stride ``a`` the
window for output ``i`` (0-based) is anchored at input row ``a * i``, and the
output has ``ceil(h / a)`` rows.  Reads outside the image resolve to zero
(:attr:`PaddingMode.ZERO`) or wrap around (:attr:`PaddingMode.PERIODIC`).
"""

from __future__ import annotations

import enum
from functools import lru_cache

import numpy as np

from .errors import ShapeError

__all__ = [
    "PaddingMode",
    "conv_channel",
    "conv2d",
    "conv2d_backward",
    "adjoint_conv",
    "materialize",
    "norm_relation_check",
    "out_size",
]

MAX_DENSE_ENTRIES = 10**8


class PaddingMode(str, enum.Enum):
    ZERO = "zero"
    PERIODIC = "periodic"

    @classmethod
    def parse(cls, value) -> "PaddingMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unsupported padding {value!r}; use 'zero' or 'periodic'"
            ) from None


def out_size(size: int, stride: int) -> int:
    return -(-size // stride)


def offsets(n: int) -> np.ndarray:
    return np.arange(n) - (n - 1) // 2


@lru_cache(maxsize=256)
def _index_map(size: int, n: int, stride: int, pad: PaddingMode) -> np.ndarray:
    """``idx[i, l]`` = input row read by output ``i`` at kernel row ``l``.

    Out-of-range reads under zero padding point at ``size``, a dump slot that
    callers back with a zero row.
    """
    rows = stride * np.arange(out_size(size, stride))[:, None] + offsets(n)[None, :]
    if pad is PaddingMode.PERIODIC:
        rows = rows % size
    else:
        rows = np.where((rows < 0) | (rows >= size), size, rows)
    rows.setflags(write=False)
    return rows


def _check(x, K):
    x = np.asarray(x, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 4 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"filter must be n x n x d_in x d_out, got {K.shape}")
    if x.ndim < 3:
        raise ShapeError(f"feature must be (..., h, w, d), got {x.shape}")
    return x, K


def _pad_dump(x):
    """Append one zero row and column (the dump slot of :func:`_index_map`)."""
    widths = [(0, 0)] * x.ndim
    widths[-3] = (0, 1)
    widths[-2] = (0, 1)
    return np.pad(x, widths)


def _patches(x, n, stride, pad):
    h, w = x.shape[-3], x.shape[-2]
    R = _index_map(h, n, stride, pad)
    C = _index_map(w, n, stride, pad)
    xp = _pad_dump(x)
    # (..., h_out, w_out, n, n, d_in)
    return xp[..., R[:, None, :, None], C[None, :, None, :], :]


def conv2d(x, K, stride: int = 1, pad=PaddingMode.PERIODIC) -> np.ndarray:
    """2D convolution of ``x`` (``(..., h, w, d_in)``) with ``K``.

    Output channel ``j`` is ``sum_i K[:, :, i, j] (x) x[..., i]``; the result
    has shape ``(..., ceil(h/stride), ceil(w/stride), d_out)``.
    """
    x, K = _check(x, K)
    pad = PaddingMode.parse(pad)
    if x.shape[-1] != K.shape[2]:
        raise ShapeError(
            f"input depth {x.shape[-1]} does not match filter d_in {K.shape[2]}"
        )
    if stride < 1:
        raise ValueError("stride must be >= 1")
    P = _patches(x, K.shape[0], stride, pad)
    return np.tensordot(P, K, axes=([-3, -2, -1], [0, 1, 2]))


def adjoint_conv(y, K, pad=PaddingMode.PERIODIC, stride: int = 1,
                 out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Apply the transpose of the convolution matrix of ``K``.

    ``y`` has depth ``d_out``; the result has depth ``d_in`` and spatial size
    ``out_hw`` (required when ``stride > 1`` since ``ceil`` is not invertible).
    """
    y, K = _check(y, K)
    pad = PaddingMode.parse(pad)
    if y.shape[-1] != K.shape[3]:
        raise ShapeError(
            f"input depth {y.shape[-1]} does not match filter d_out {K.shape[3]}"
        )
    n = K.shape[0]
    if out_hw is None:
        if stride != 1:
            raise ValueError("out_hw is required for strided adjoints")
        out_hw = (y.shape[-3], y.shape[-2])
    h, w = out_hw
    R = _index_map(h, n, stride, pad)
    C = _index_map(w, n, stride, pad)
    if R.shape[0] != y.shape[-3] or C.shape[0] != y.shape[-2]:
        raise ShapeError(f"y spatial shape {y.shape[-3:-1]} inconsistent with {out_hw}")
    z = np.zeros(y.shape[:-3] + (h + 1, w + 1, K.shape[2]))
    for l in range(n):
        rows = R[:, l][:, None]
        for k in range(n):
            # each (l, k) map is injective apart from the dump slot
            z[..., rows, C[:, k][None, :], :] += y @ K[l, k].T
    return z[..., :h, :w, :]


def conv2d_backward(x, K, dy, stride: int = 1, pad=PaddingMode.PERIODIC):
    """Gradients of ``<dy, conv2d(x, K)>`` w.r.t. ``x`` and ``K``."""
    x, K = _check(x, K)
    pad = PaddingMode.parse(pad)
    P = _patches(x, K.shape[0], stride, pad)
    lead = P.ndim - 3
    dK = np.tensordot(P, dy, axes=(list(range(lead)), list(range(lead))))
    dx = adjoint_conv(dy, K, pad, stride, out_hw=(x.shape[-3], x.shape[-2]))
    return dx, dK


def conv_channel(x, K, stride: int = 1, pad=PaddingMode.PERIODIC) -> np.ndarray:
    """Channel-wise convolution of a single ``h x w`` slice with ``n x n`` K."""
    x = np.asarray(x, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if x.ndim != 2 or K.ndim != 2:
        raise ShapeError("conv_channel expects 2D slice and 2D kernel")
    return conv2d(x[:, :, None], K[:, :, None, None], stride, pad)[:, :, 0]


@lru_cache(maxsize=1024)
def _taps(h: int, w: int, n: int, stride: int, pad: PaddingMode):
    """Every ``(out_row, out_col, l, k, in_row, in_col)`` tap of the window.

    Enumerated directly from the window definition; zero-padded reads that
    fall outside the image are dropped.
    """
    off = offsets(n)
    taps = []
    for i in range(out_size(h, stride)):
        for j in range(out_size(w, stride)):
            for l in range(n):
                r = stride * i + off[l]
                if pad is PaddingMode.PERIODIC:
                    r %= h
                elif not 0 <= r < h:
                    continue
                for k in range(n):
                    c = stride * j + off[k]
                    if pad is PaddingMode.PERIODIC:
                        c %= w
                    elif not 0 <= c < w:
                        continue
                    taps.append((i, j, l, k, r, c))
    arr = np.array(taps, dtype=np.intp).reshape(-1, 6)
    arr.setflags(write=False)
    return arr


def materialize(K, h: int, w: int, stride: int = 1,
                pad=PaddingMode.PERIODIC) -> np.ndarray:
    """Dense matrix ``A`` with ``vec(conv2d(x, K)) == A @ vec(x)``.

    Built tap by tap from the window definition, independently of the
    gather path in :func:`conv2d`.  Rows are ``(j, i_out, j_out)`` and columns
    ``(i, r, c)`` in vectorization order; block ``(j, i)`` is the matrix of
    the channel-wise convolution with ``K[:, :, i, j]``.
    """
    K = np.asarray(K, dtype=np.float64)
    pad = PaddingMode.parse(pad)
    n, _, d_in, d_out = K.shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    rows, cols = ho * wo * d_out, h * w * d_in
    if rows * cols > MAX_DENSE_ENTRIES:
        raise ValueError(f"refusing to materialize {rows}x{cols} matrix")
    A = np.zeros((rows, cols))
    t = _taps(h, w, n, stride, pad)
    if len(t) == 0:
        return A
    i, j, l, k, r, c = t.T
    # K[l, k, q, p] lands in the (p-th output block, q-th input block)
    row = (np.arange(d_out) * (ho * wo))[None, None, :] + (i * wo + j)[:, None, None]
    col = (np.arange(d_in) * (h * w))[None, :, None] + (r * w + c)[:, None, None]
    # periodic wrap on tiny images can hit one entry twice, hence add.at
    np.add.at(A, (row, col), K[l, k])
    return A


def norm_relation_check(K, h: int, w: int, p: float = 2.0, rtol: float = 1e-12,
                        pad=PaddingMode.PERIODIC):
    """Compare ``||A||_{p,p}^p`` with ``h*w*||K||_{p,p}^p``.

    Only meaningful for periodic padding and stride 1.
    Returns ``(lhs, rhs, agree)``.
    """
    if PaddingMode.parse(pad) is not PaddingMode.PERIODIC:
        raise ValueError("the A/K norm relation holds for periodic padding only")
    if not 1 <= p < np.inf:
        raise ValueError("p must lie in [1, inf)")
    K = np.asarray(K, dtype=np.float64)
    A = materialize(K, h, w, 1, PaddingMode.PERIODIC)
    lhs = float(np.sum(np.abs(A) ** p))
    rhs = float(h * w * np.sum(np.abs(K) ** p))
    agree = bool(abs(lhs - rhs) <= rtol * max(abs(lhs), abs(rhs))) or lhs == rhs
    return lhs, rhs, agree
