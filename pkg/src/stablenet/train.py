"""Objective, reverse-mode gradients, initialization and mini-batch SGD.

The data term is the cross entropy between the one-hot label and the softmax
of the logits.  Regularizers per layer kind and variant::

                 conv        residual              pooling     dense
    ResNet-D     a|K0|_1     a/2(|K1|^2+|K2|^2)    a/2|K|^2    a|W|_1
    ResNet-S     a/2|K0|^2   a/2|K|^2              a/2|K|^2    a/2|W|^2

The constraint ``K2 >= 0`` of ResNet-D is enforced by projection after each
step rather than through the objective.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .conv import adjoint_conv, conv2d, conv2d_backward
from .errors import ConfigError, NumericalError, ShapeError
from .layers import (
    BN_EPSILON,
    batchnorm_backward,
    pad_channels_adjoint,
    pool2_adjoint,
)
from .network import NetworkSpec, ParamStore, forward_cache

__all__ = [
    "TrainConfig",
    "Dataset",
    "softmax",
    "cross_entropy",
    "regularizer",
    "loss_total",
    "init_params",
    "project",
    "train",
    "accuracy",
    "read_idx",
    "write_idx",
    "load_idx_dataset",
    "make_blobs",
    "normalize",
]

LOG_FLOOR = 1e-12
BN_MOMENTUM = 0.9


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.1
    decay_steps: int = 24_000
    total_steps: int = 70_000
    reg_weight: float = 1e-4
    eval_interval: int = 500
    seed: int = 0
    project_nonneg: bool = True
    project_spectral: bool = False
    project_boundary: bool = False
    record_certificates: bool = False
    norm_method: str = "fft"

    def __post_init__(self):
        if not self.total_steps >= self.decay_steps >= 1:
            raise ConfigError("need total_steps >= decay_steps >= 1")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be nonnegative")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def rate(self, step: int) -> float:
        """Learning rate divided by 10 after every ``decay_steps`` steps."""
        return self.learning_rate * 0.1 ** (step // self.decay_steps)


@dataclass
class Dataset:
    images: np.ndarray  # (B, h, w, d)
    labels: np.ndarray  # (B, C) one-hot
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (B, h, w, d), got {self.images.shape}")
        if self.labels.ndim != 2 or len(self.labels) != len(self.images):
            raise ShapeError("labels must be (B, C) matching the image count")
        if not np.all(self.labels.sum(axis=1) == 1.0):
            raise ValueError("every label row must sum to 1")

    @classmethod
    def from_classes(cls, images, classes, num_classes: int, split="train"):
        classes = np.asarray(classes, dtype=np.int64)
        return cls(images, np.eye(num_classes)[classes], split)

    def __len__(self):
        return len(self.images)

    @property
    def classes(self):
        return np.argmax(self.labels, axis=1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split)


# ---------------------------------------------------------------- objective


def softmax(u):
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(u, v):
    """``-u^T log v`` with ``v`` clamped below at 1e-12."""
    u = np.asarray(u, dtype=np.float64)
    v = np.maximum(np.asarray(v, dtype=np.float64), LOG_FLOOR)
    return -(u * np.log(v)).sum(axis=-1)


def _reg_terms(spec: NetworkSpec):
    """``(name, kind)`` pairs where kind is ``l1`` or ``sq``."""
    terms = []
    for info in spec.layers():
        pre = f"L{info.index}."
        if info.kind == "conv":
            terms.append((pre + "K", "l1" if spec.variant == "D" else "sq"))
        elif info.kind == "res":
            names = ("K1", "K2") if spec.variant == "D" else ("K",)
            terms += [(pre + n, "sq") for n in names]
        elif info.kind == "pool":
            terms.append((pre + "K", "sq"))
        elif info.kind == "dense":
            terms.append((pre + "W", "l1" if spec.variant == "D" else "sq"))
    return terms


def regularizer(spec: NetworkSpec, P: ParamStore, alpha: float):
    """Value and gradients of the weight penalties (subgradient 0 at 0)."""
    value, grads = 0.0, {}
    for name, kind in _reg_terms(spec):
        K = P.params[name]
        if kind == "l1":
            value += alpha * np.abs(K).sum()
            grads[name] = alpha * np.sign(K)
        else:
            value += 0.5 * alpha * np.sum(K * K)
            grads[name] = alpha * K
    return float(value), grads


def _bn_backward(cache_entry, dy, gamma, train_mode):
    z, mu, sigma = cache_entry
    if train_mode:
        return batchnorm_backward(z, dy, gamma, BN_EPSILON)
    axes = tuple(range(z.ndim - 1))
    xhat = (z - mu) / sigma
    return dy * gamma / sigma, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _sum_lead(a):
    return a.sum(axis=tuple(range(a.ndim - 1)))


def backprop(spec: NetworkSpec, P: ParamStore, caches, dlogits, train_mode=False):
    """Reverse pass through the caches of :func:`forward_cache`."""
    pad = spec.padding
    grads = {}
    g = dlogits
    for info, cache in zip(reversed(spec.layers()), reversed(caches)):
        pre = f"L{info.index}."
        x = cache["x"]
        if info.kind == "dense":
            W = P[pre + "W"]
            grads[pre + "W"] = g.T @ x
            grads[pre + "b"] = g.sum(axis=0)
            g = g @ W
        elif info.kind == "global":
            h, w = x.shape[-3], x.shape[-2]
            g = (x > 0) * g[..., None, None, :] / (h * w)
        elif info.kind == "pool":
            K = P[pre + "K"]
            ds = g * (cache["s"] > 0)
            dq = -ds * (cache["q"] > 0)
            dx, grads[pre + "K"] = conv2d_backward(x, K, dq, 2, pad)
            grads[pre + "b"] = _sum_lead(dq)
            skip = pad_channels_adjoint(ds, x.shape[-1])
            g = dx + pool2_adjoint(skip, x.shape[-3], x.shape[-2])
        elif info.kind == "conv":
            dx, grads[pre + "K"] = conv2d_backward(x, P[pre + "K"], g, 1, pad)
            grads[pre + "b"] = _sum_lead(g)
            g = dx
        else:
            g = _residual_backward(spec, P, info.index, cache, g, grads, train_mode)
    return grads


def _residual_backward(spec, P, n, cache, g, grads, train_mode):
    pad, pre = spec.padding, f"L{n}."
    x, u = cache["x"], cache["u"]
    ds = g * (cache["s"] > 0)
    grads[pre + "b2"] = _sum_lead(ds)
    da2 = -ds
    if spec.use_batchnorm:
        da2, _, _ = _bn_backward(cache[pre + "bn2"], da2, 1.0, train_mode)
    if spec.variant == "D":
        K1, K2 = P[pre + "K1"], P[pre + "K2"]
        du, grads[pre + "K2"] = conv2d_backward(u, K2, da2, 1, pad)
    else:
        K1 = P[pre + "K"]
        # <da2, A^T u> = <A da2, u>
        du = conv2d(da2, K1, 1, pad)
        _, dK2 = conv2d_backward(da2, K1, u, 1, pad)
    da1 = du * (cache["a1"] > 0)
    if spec.use_batchnorm:
        gamma = P[pre + "bn1.gamma"]
        da1, grads[pre + "bn1.gamma"], grads[pre + "bn1.beta"] = _bn_backward(
            cache[pre + "bn1"], da1, gamma, train_mode)
    grads[pre + "b1"] = _sum_lead(da1)
    dx, dK1 = conv2d_backward(x, K1, da1, 1, pad)
    if spec.variant == "D":
        grads[pre + "K1"] = dK1
    else:
        grads[pre + "K"] = dK1 + dK2
    return ds + dx


def loss_total(spec: NetworkSpec, P: ParamStore, batch: Dataset,
               alpha: float = 0.0, reduction: str = "sum",
               train_mode: bool = False, return_caches: bool = False):
    """Data term plus regularizers, and gradients for every trainable parameter.

    ``reduction="sum"`` adds the per-example cross entropies; ``"mean"``
    averages them (the regularizers are added once either way).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    states, caches = forward_cache(spec, P, batch.images, train_mode)
    logits = states[-1]
    probs = softmax(logits)
    data = cross_entropy(batch.labels, probs)
    scale = 1.0 / len(batch) if reduction == "mean" else 1.0
    value = scale * float(data.sum())
    # d/dlogits of -y.log softmax; the clamp only matters at 1e-12 and is
    # ignored here
    dlogits = scale * (probs * batch.labels.sum(axis=1, keepdims=True) - batch.labels)
    grads = backprop(spec, P, caches, dlogits, train_mode)
    if alpha:
        rv, rg = regularizer(spec, P, alpha)
        value += rv
        for k, v in rg.items():
            grads[k] = grads[k] + v
    if return_caches:
        return value, grads, (states, caches)
    return value, grads


# ------------------------------------------------------------ initialization


def _truncated_normal(rng, shape, sigma):
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 2 * sigma
    while np.any(bad):
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2 * sigma
    return out


def _filter(rng, n, d_in, d_out, scheme):
    fan_in = n * n * d_in
    shape = (n, n, d_in, d_out)
    if scheme == "variance_scaling":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if scheme == "uniform_scaling":
        r = np.sqrt(3.0 / fan_in)
        return rng.uniform(-r, r, size=shape)
    if scheme == "zeros":
        return np.zeros(shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_params(spec: NetworkSpec, seed: int = 0, scheme: str | None = None) -> ParamStore:
    """Fresh parameters.

    Default: uniform scaling ``U(+-sqrt(3/fan_in))`` for the first convolution,
    variance scaling ``N(0, 2/fan_in)`` for residual and pooling filters, a
    truncated normal with ``sigma = 1/(d3 C)`` (redrawn beyond ``2 sigma``)
    for the dense weights, zero biases and ``gamma = 1, beta = 0``.  Passing
    ``scheme`` forces that filter scheme on every convolution.
    """
    rng = np.random.default_rng(seed)
    n = spec.kernel_size
    P = ParamStore()
    for info in spec.layers():
        pre = f"L{info.index}."
        d_in = info.in_shape[-1]
        if info.kind == "conv":
            P.params[pre + "K"] = _filter(rng, n, d_in, spec.channels,
                                          scheme or "uniform_scaling")
            P.params[pre + "b"] = np.zeros(spec.channels)
        elif info.kind == "res":
            names = ("K1", "K2") if spec.variant == "D" else ("K",)
            for name in names:
                P.params[pre + name] = _filter(rng, n, d_in, d_in,
                                               scheme or "variance_scaling")
            if spec.variant == "D":
                P.params[pre + "K2"] = np.maximum(P.params[pre + "K2"], 0.0)
            P.params[pre + "b1"] = np.zeros(d_in)
            P.params[pre + "b2"] = np.zeros(d_in)
            if spec.use_batchnorm:
                P.params[pre + "bn1.gamma"] = np.ones(d_in)
                P.params[pre + "bn1.beta"] = np.zeros(d_in)
                for bn in ("bn1", "bn2"):
                    P.buffers[f"{pre}{bn}.mu"] = np.zeros(d_in)
                    P.buffers[f"{pre}{bn}.sigma"] = np.ones(d_in)
        elif info.kind == "pool":
            d_out = info.out_shape[-1]
            P.params[pre + "K"] = _filter(rng, n, d_in, d_out,
                                          scheme or "variance_scaling")
            P.params[pre + "b"] = np.zeros(d_out)
        elif info.kind == "dense":
            sigma = 1.0 / (d_in * spec.classes)
            P.params[pre + "W"] = _truncated_normal(rng, (spec.classes, d_in), sigma)
            P.params[pre + "b"] = np.zeros(spec.classes)
    return P


# --------------------------------------------------------------- projection


def _shrink(K, norm, target):
    if norm > target * (1 + 1e-12):
        return K * (target / norm)
    return K


def project(spec: NetworkSpec, P: ParamStore, config: TrainConfig) -> ParamStore:
    """Apply the enabled projections in place and return ``P``.

    ``project_nonneg``: clamp ResNet-D ``K2`` at 0.
    ``project_spectral``: rescale ResNet-S residual filters to ``||A||_2 <= sqrt 2``.
    ``project_boundary``: rescale the first convolution and dense weights to
    norm at most 1 (linf for ResNet-D, l2 for ResNet-S).
    """
    from .certify import SQRT2, operator_norm, opnorm_linf

    for info in spec.layers():
        pre = f"L{info.index}."
        h, w = (info.in_shape + (1, 1))[:2]
        if info.kind == "res":
            if spec.variant == "D" and config.project_nonneg:
                np.maximum(P.params[pre + "K2"], 0.0, out=P.params[pre + "K2"])
            if spec.variant == "S" and config.project_spectral:
                K = P.params[pre + "K"]
                nrm = operator_norm(K, h, w, 1, spec.padding, config.norm_method)
                P.params[pre + "K"] = _shrink(K, nrm, SQRT2)
        elif info.kind == "conv" and config.project_boundary:
            K = P.params[pre + "K"]
            if spec.variant == "D":
                nrm = opnorm_linf(K, spec.padding, h, w)
            else:
                nrm = operator_norm(K, h, w, 1, spec.padding, config.norm_method)
            P.params[pre + "K"] = _shrink(K, nrm, 1.0)
        elif info.kind == "dense" and config.project_boundary:
            W = P.params[pre + "W"]
            nrm = (np.abs(W).sum(axis=1).max() if spec.variant == "D"
                   else np.linalg.norm(W, 2))
            P.params[pre + "W"] = _shrink(W, float(nrm), 1.0)
    return P


# ----------------------------------------------------------------- training


def accuracy(spec, P, data: Dataset, batch: int = 512) -> float:
    from .network import forward

    if len(data) == 0:
        return float("nan")
    hits = 0
    for s in range(0, len(data), batch):
        logits, _ = forward(spec, P, data.images[s:s + batch])
        hits += int((np.argmax(logits, axis=1) == data.classes[s:s + batch]).sum())
    return hits / len(data)


def _update_running_stats(spec, P, caches):
    for info, cache in zip(spec.layers(), caches):
        if info.kind != "res":
            continue
        pre = f"L{info.index}."
        for bn in ("bn1", "bn2"):
            _, mu, sigma = cache[pre + bn]
            key = pre + bn
            P.buffers[key + ".mu"] = BN_MOMENTUM * P.buffers[key + ".mu"] + (1 - BN_MOMENTUM) * mu
            P.buffers[key + ".sigma"] = np.maximum(
                BN_MOMENTUM * P.buffers[key + ".sigma"] + (1 - BN_MOMENTUM) * sigma,
                BN_EPSILON)


def _fmt(v):
    if v is None:
        return ""
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


@dataclass
class History:
    rows: list = field(default_factory=list)

    def to_text(self) -> str:
        cols = ["step", "lr", "loss", "test_accuracy", "c", "a"]
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join(
                _fmt(r.get(k)) for k in cols))
        return "\n".join(lines) + "\n"

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def evaluations(self):
        return [r for r in self.rows if r.get("test_accuracy") is not None]


def train(spec: NetworkSpec, config: TrainConfig, dataset: Dataset,
          test: Dataset | None = None, params: ParamStore | None = None):
    """Mini-batch gradient descent with step decay and projections.

    The data term is averaged over the mini-batch.  Returns ``(params,
    history)``; a NaN/inf loss raises :class:`NumericalError` whose
    ``history`` attribute holds the rows recorded so far.
    """
    from .certify import assemble_certificate

    P = params.copy() if params is not None else init_params(spec, config.seed)
    project(spec, P, config)
    rng = np.random.default_rng([config.seed, 1])
    history = History()
    order = rng.permutation(len(dataset))
    pos = 0
    for step in range(config.total_steps):
        if pos + config.batch_size > len(order):
            order, pos = rng.permutation(len(dataset)), 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        batch = dataset.subset(np.sort(idx))
        value, grads, (_, caches) = loss_total(
            spec, P, batch, config.reg_weight, "mean",
            train_mode=spec.use_batchnorm, return_caches=True)
        if not np.isfinite(value):
            err = NumericalError(f"loss diverged at step {step}", step=step)
            err.history = history
            raise err
        lr = config.rate(step)
        for name, gval in grads.items():
            P.params[name] = P.params[name] - lr * gval
        if spec.use_batchnorm:
            _update_running_stats(spec, P, caches)
        project(spec, P, config)
        row = {"step": step + 1, "lr": lr, "loss": value}
        if (step + 1) % config.eval_interval == 0 or step + 1 == config.total_steps:
            if test is not None:
                row["test_accuracy"] = accuracy(spec, P, test)
            if config.record_certificates:
                cert = assemble_certificate(spec, P, config.norm_method)
                row["c"], row["a"] = cert.growth_constant, cert.sensitivity_constant
        history.rows.append(row)
    return P, history


# ---------------------------------------------------------------- datasets
# IDX: two zero bytes, a dtype code, the rank, rank big-endian uint32 dims,
# then big-endian data.

_IDX_CODES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4",
              0x0D: ">f4", 0x0E: ">f8"}
_IDX_BY_KIND = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_CODES.items()}


def read_idx(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_CODES:
        raise ValueError("not an IDX file")
    rank = buf[3]
    dims = struct.unpack_from(f">{rank}I", buf, 4)
    dtype = np.dtype(_IDX_CODES[buf[2]])
    count = int(np.prod(dims)) if rank else 1
    start = 4 + 4 * rank
    if len(buf) - start < count * dtype.itemsize:
        raise ValueError("IDX payload truncated")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr) -> None:
    arr = np.asarray(arr)
    code = _IDX_BY_KIND.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX code")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_CODES[code]).tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None,
                     split: str = "train", scale: float | None = None) -> Dataset:
    """Images ``(B, h, w)`` or ``(B, h, w, d)`` plus integer labels ``(B,)``."""
    images = read_idx(images_path).astype(np.float64)
    if scale is None and read_idx(images_path).dtype == np.uint8:
        scale = 1.0 / 255.0
    if scale:
        images = images * scale
    labels = read_idx(labels_path).astype(np.int64)
    C = num_classes or int(labels.max()) + 1
    return Dataset.from_classes(images, labels, C, split)


def make_blobs(count: int, size: int = 8, seed: int = 0, noise: float = 0.1,
               long_axis: float = 2.0, short_axis: float = 0.7,
               split: str = "train") -> Dataset:
    """Two-class oriented blobs on a periodic ``size x size`` grid.

    Class 0 blobs are elongated along rows, class 1 along columns; centres
    are uniform on the torus so the label is independent of position.
    """
    rng = np.random.default_rng(seed)
    classes = rng.integers(0, 2, size=count)
    centres = rng.uniform(0, size, size=(count, 2))
    grid = np.arange(size)
    # wrapped distances
    dr = (grid[None, :] - centres[:, :1] + size / 2) % size - size / 2
    dc = (grid[None, :] - centres[:, 1:] + size / 2) % size - size / 2
    s_row = np.where(classes == 0, short_axis, long_axis)[:, None]
    s_col = np.where(classes == 0, long_axis, short_axis)[:, None]
    img = np.exp(-(dr / s_row)[:, :, None] ** 2 / 2 - (dc / s_col)[:, None, :] ** 2 / 2)
    img = img + noise * rng.standard_normal(img.shape)
    return Dataset.from_classes(img[..., None], classes, 2, split)


def normalize(images, mean=None, std=None):
    """Per-channel standardization; returns ``(normalized, mean, std)``."""
    images = np.asarray(images, dtype=np.float64)
    axes = tuple(range(images.ndim - 1))
    if mean is None:
        mean = images.mean(axis=axes)
    if std is None:
        std = np.maximum(images.std(axis=axes), 1e-12)
    return (images - mean) / std, mean, std
