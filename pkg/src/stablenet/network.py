"""ResNet-D / ResNet-S classifiers.

Layer schedule for first-block size ``m`` (``N = 3m + 3`` layers)::

    0               convolution            (h1, w1, d0) -> (h1, w1, d1)
    1 .. m          residual
    m+1             2D pooling             -> (h2, w2, d2)
    m+2 .. 2m       residual
    2m+1            2D pooling             -> (h3, w3, d3)
    2m+2 .. 3m      residual
    3m+1            global pooling         -> (d3,)
    3m+2            fully connected        -> (C,)

with ``h_{i+1} = ceil(h_i / 2)``, ``w_{i+1} = ceil(w_i / 2)``, ``d_{i+1} = 2 d_i``.

Biases are per-channel vectors (constant over space).  Parameters live in a
flat :class:`ParamStore` keyed ``"L{n}.<name>"``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conv import PaddingMode, adjoint_conv, conv2d, out_size
from .errors import ConstraintViolation, LayerError, ShapeError
from .layers import (
    BN_EPSILON,
    batch_stats,
    pad_channels,
    pool2,
    pool_global,
    relu,
)
from .tensor import from_bytes, to_bytes

__all__ = [
    "NetworkSpec",
    "LayerInfo",
    "ParamStore",
    "ForwardTrace",
    "layer_resnet_d",
    "layer_resnet_s",
    "layer_pool2d",
    "layer_conv_first",
    "layer_dense",
    "layer_global",
    "forward",
    "forward_cache",
    "predict",
    "save_model",
    "load_model",
]

VARIANTS = ("D", "S")


@dataclass(frozen=True)
class LayerInfo:
    index: int
    kind: str  # conv | res | pool | global | dense
    in_shape: tuple
    out_shape: tuple
    block: int = 0  # 1-based resolution level for conv/res/pool layers


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    m: int
    height: int
    width: int
    in_channels: int
    channels: int
    classes: int
    use_batchnorm: bool = False
    padding: PaddingMode = PaddingMode.PERIODIC
    kernel_size: int = 3

    def __post_init__(self):
        variant = str(self.variant).upper().replace("RESNET-", "").replace("RESNET", "")
        if variant not in VARIANTS:
            raise ValueError(f"variant must be 'D' or 'S', got {self.variant!r}")
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "padding", PaddingMode.parse(self.padding))
        for name in ("m", "height", "width", "in_channels", "channels",
                     "classes", "kernel_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def depth(self) -> int:
        """Number of layers ``N = 3m + 3``."""
        return 3 * self.m + 3

    @property
    def input_shape(self):
        return (self.height, self.width, self.in_channels)

    def block_shapes(self):
        """``[(h1, w1, d1), (h2, w2, d2), (h3, w3, d3)]``."""
        h, w, d = self.height, self.width, self.channels
        shapes = [(h, w, d)]
        for _ in range(2):
            h, w, d = out_size(h, 2), out_size(w, 2), 2 * d
            shapes.append((h, w, d))
        return shapes

    def layers(self) -> list[LayerInfo]:
        m = self.m
        s1, s2, s3 = self.block_shapes()
        out = [LayerInfo(0, "conv", self.input_shape, s1, 1)]
        n = 1
        for block, shape, count in ((1, s1, m), (2, s2, m - 1), (3, s3, m - 1)):
            for _ in range(count):
                out.append(LayerInfo(n, "res", shape, shape, block))
                n += 1
            if block < 3:
                nxt = (s2, s3)[block - 1]
                out.append(LayerInfo(n, "pool", shape, nxt, block))
                n += 1
        out.append(LayerInfo(n, "global", s3, (s3[2],)))
        out.append(LayerInfo(n + 1, "dense", (s3[2],), (self.classes,)))
        assert len(out) == self.depth
        return out

    def to_dict(self):
        d = asdict(self)
        d["padding"] = self.padding.value
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(**d)


@dataclass
class ParamStore:
    """Named parameter arrays plus non-trainable buffers (batch-norm stats)."""

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def get(self, name, default=None):
        return self[name] if name in self else default

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()})

    def names(self):
        return list(self.params)

    def count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class ForwardTrace:
    """Per-state norms (``N + 1`` entries) and optionally the states."""

    l2: np.ndarray
    linf: np.ndarray
    logits: np.ndarray
    features: list | None = None

    def __len__(self):
        return len(self.l2)


# --------------------------------------------------------------- layer maps


def _bias(b):
    return 0.0 if b is None else np.asarray(b, dtype=np.float64)


def layer_conv_first(x, K, b=None, pad=PaddingMode.PERIODIC):
    """``A x + b``."""
    return conv2d(x, K, 1, pad) + _bias(b)


def layer_resnet_d(x, K1, K2, b1=None, b2=None, pad=PaddingMode.PERIODIC):
    """``(x - A2 (A1 x + b1)_+ + b2)_+`` with ``A2 >= 0`` entrywise."""
    K2 = np.asarray(K2, dtype=np.float64)
    if np.any(K2 < 0):
        raise ConstraintViolation("ResNet-D second filter must be nonnegative")
    u = relu(conv2d(x, K1, 1, pad) + _bias(b1))
    return relu(np.asarray(x) - conv2d(u, K2, 1, pad) + _bias(b2))


def layer_resnet_s(x, K, b1=None, b2=None, pad=PaddingMode.PERIODIC):
    """``(x - A^T (A x + b1)_+ + b2)_+``; ``A^T`` is the adjoint convolution."""
    u = relu(conv2d(x, K, 1, pad) + _bias(b1))
    return relu(np.asarray(x) - adjoint_conv(u, K, pad) + _bias(b2))


def layer_pool2d(x, K, b=None, pad=PaddingMode.PERIODIC):
    """``(E(P2(x)) - (A|s=2 x + b)_+)_+`` halving space and doubling depth."""
    x = np.asarray(x, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    skip = pad_channels(pool2(x), K.shape[3])
    return relu(skip - relu(conv2d(x, K, 2, pad) + _bias(b)))


def layer_global(x):
    """``P_g(x_+)``."""
    return pool_global(relu(x))


def layer_dense(x, W, b=None):
    """``W x + b`` with ``W`` of shape ``(C, d)``."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"dense input length {x.shape[-1]} != W columns {W.shape[1]}")
    return x @ W.T + _bias(b)


# ------------------------------------------------------------ forward pass


def _bn_apply(z, P, key, train_mode, cache):
    """Batch norm on ``z`` using params/buffers under ``key``; records cache."""
    if key + ".gamma" in P.params:
        gamma, beta = P.params[key + ".gamma"], P.params[key + ".beta"]
    else:
        gamma, beta = 1.0, 0.0
    if train_mode:
        mu, sigma = batch_stats(z, BN_EPSILON)
    else:
        mu, sigma = P.buffers[key + ".mu"], P.buffers[key + ".sigma"]
    cache[key] = (z, mu, sigma)
    return gamma * (z - mu) / sigma + beta


def _residual(x, spec, P, n, train_mode, cache):
    pad = spec.padding
    bn = spec.use_batchnorm
    pre = f"L{n}."
    if spec.variant == "D":
        K1, K2 = P[pre + "K1"], P[pre + "K2"]
        if np.any(K2 < 0):
            raise ConstraintViolation("ResNet-D second filter must be nonnegative")
    else:
        K1 = K2 = P[pre + "K"]
    a1 = conv2d(x, K1, 1, pad) + P[pre + "b1"]
    if bn:
        a1 = _bn_apply(a1, P, pre + "bn1", train_mode, cache)
    u = relu(a1)
    a2 = conv2d(u, K2, 1, pad) if spec.variant == "D" else adjoint_conv(u, K2, pad)
    if bn:
        a2 = _bn_apply(a2, P, pre + "bn2", train_mode, cache)
    s = x - a2 + P[pre + "b2"]
    cache.update(x=x, a1=a1, u=u, s=s)
    return relu(s)


def _pool(x, spec, P, n, cache):
    K, b = P[f"L{n}.K"], P[f"L{n}.b"]
    q = conv2d(x, K, 2, spec.padding) + b
    s = pad_channels(pool2(x), K.shape[3]) - relu(q)
    cache.update(x=x, q=q, s=s)
    return relu(s)


def forward_cache(spec: NetworkSpec, P: ParamStore, x0, train_mode: bool = False):
    """Run the network on a batch ``(B, h, w, d0)``.

    Returns ``(states, caches)`` where ``states[n]`` is the input of layer
    ``n`` (``states[N]`` are the logits) and ``caches[n]`` holds what the
    backward pass needs.
    """
    x = np.asarray(x0, dtype=np.float64)
    if x.shape[-3:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape[-3:]} != {spec.input_shape}")
    states, caches = [x], []
    for info in spec.layers():
        n, cache = info.index, {"kind": info.kind}
        try:
            if info.kind == "conv":
                cache["x"] = x
                x = layer_conv_first(x, P[f"L{n}.K"], P[f"L{n}.b"], spec.padding)
            elif info.kind == "res":
                x = _residual(x, spec, P, n, train_mode, cache)
            elif info.kind == "pool":
                x = _pool(x, spec, P, n, cache)
            elif info.kind == "global":
                cache["x"] = x
                x = layer_global(x)
            else:
                cache["x"] = x
                x = layer_dense(x, P[f"L{n}.W"], P[f"L{n}.b"])
        except (ShapeError, ConstraintViolation, KeyError, ValueError) as exc:
            raise LayerError(n, info.kind, exc) from exc
        states.append(x)
        caches.append(cache)
    return states, caches


def _sample_norms(x, batched):
    a = np.abs(x)
    if batched:
        flat = a.reshape(a.shape[0], -1)
        return np.sqrt((flat**2).sum(axis=1)), flat.max(axis=1)
    return np.sqrt((a**2).sum()), a.max()


def forward(spec: NetworkSpec, params: ParamStore, x0, record: bool = False,
            train_mode: bool = False):
    """Forward pass returning ``(x_N, trace)``.

    ``x0`` is one feature ``(h, w, d0)`` or a batch ``(B, h, w, d0)``.  The
    trace always carries per-state l2/linf norms; full states only when
    ``record`` is set.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batched = x0.ndim == 4
    xb = x0 if batched else x0[None]
    states, _ = forward_cache(spec, params, xb, train_mode)
    if not batched:
        states = [s[0] for s in states]
    norms = [_sample_norms(s, batched) for s in states]
    trace = ForwardTrace(
        l2=np.array([n[0] for n in norms]),
        linf=np.array([n[1] for n in norms]),
        logits=states[-1],
        features=states if record else None,
    )
    return states[-1], trace


def predict(spec, params, x0):
    logits, _ = forward(spec, params, x0)
    return np.argmax(logits, axis=-1)


# --------------------------------------------------------------- model file
# b"STBN" | version u8 | u32 header length | JSON header | STBL blobs in the
# order listed by the header.

MODEL_MAGIC = b"STBN"
MODEL_VERSION = 1


def save_model(path, spec: NetworkSpec, params: ParamStore) -> None:
    names = list(params.params)
    bufs = list(params.buffers)
    header = json.dumps({"spec": spec.to_dict(), "params": names,
                         "buffers": bufs}, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<BI", MODEL_VERSION, len(header)))
    out.write(header)
    for name in names:
        out.write(to_bytes(params.params[name]))
    for name in bufs:
        out.write(to_bytes(params.buffers[name]))
    Path(path).write_bytes(out.getvalue())


def load_model(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version > MODEL_VERSION:
        raise ValueError(f"model file version {version} is newer than supported")
    header = json.loads(buf[9:9 + hlen])
    offset = 9 + hlen
    P = ParamStore()
    for name in header["params"]:
        P.params[name], offset = from_bytes(buf, offset)
    for name in header["buffers"]:
        P.buffers[name], offset = from_bytes(buf, offset)
    return NetworkSpec.from_dict(header["spec"]), P
