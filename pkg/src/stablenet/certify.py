"""Operator norms and the discrete growth/sensitivity certificates.

Growth:       ||x^N|| <= ||x^0|| + c
Sensitivity:  ||x^N - y^N||_2 <= a ||x^0 - y^0||_2

ResNet-D certifies growth in linf (needs ||A0||_inf, ||W||_inf <= 1 and
K2 >= 0) and sensitivity in l2 with no further hypotheses.  ResNet-S
certifies both in l2 and needs ||A0||_2, ||W||_2 <= 1 and ||A||_2 <= sqrt(2)
in every residual layer; its ``a`` has no residual-layer factors.

Batch norm is folded (eval-mode statistics) before any norm is taken, so the
certificate describes the operator the network actually applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import PaddingMode, adjoint_conv, conv2d, materialize, offsets, out_size
from .errors import ConvergenceError
from .layers import relu
from .network import NetworkSpec, ParamStore, forward

__all__ = [
    "opnorm_l2",
    "opnorm_l2_fft",
    "opnorm_linf",
    "operator_norm",
    "effective_layers",
    "StabilityCertificate",
    "assemble_certificate",
    "verify_growth",
    "verify_sensitivity",
    "check_lemma_nonexpansive",
    "SQRT2",
]

SQRT2 = float(np.sqrt(2.0))
# slack for floating point when comparing a measured norm to a bound
BOUND_RTOL = 1e-9
BOUND_ATOL = 1e-12


def _within(value, bound):
    return value <= bound + BOUND_RTOL * abs(bound) + BOUND_ATOL


# ------------------------------------------------------------ operator norms


def _power_run(K, h, w, stride, pad, tol, max_iter, rng, block):
    d_in = K.shape[2]
    size = h * w * d_in
    p = min(block, size)
    ho, wo = out_size(h, stride), out_size(w, stride)
    Q, _ = np.linalg.qr(rng.standard_normal((size, p)))
    V = Q.T.reshape(p, h, w, d_in)
    lam_prev = None
    lam = 0.0
    for it in range(1, max_iter + 1):
        AV = conv2d(V, K, stride, pad).reshape(p, -1)
        # Rayleigh-Ritz on the block: eigenvalues of V^T A^T A V
        ritz, U = np.linalg.eigh(AV @ AV.T)
        lam = float(ritz[-1])
        if lam <= 0.0:
            return 0.0, it, True
        Z = adjoint_conv(AV.reshape(p, ho, wo, -1), K, pad, stride,
                         out_hw=(h, w)).reshape(p, -1)
        Q, _ = np.linalg.qr((U.T[::-1] @ Z).T)
        V = Q.T.reshape(p, h, w, d_in)
        if lam_prev is not None and abs(lam - lam_prev) <= tol * lam:
            # final quotient with the updated block is never smaller
            AV = conv2d(V, K, stride, pad).reshape(p, -1)
            lam = max(lam, float(np.linalg.eigvalsh(AV @ AV.T)[-1]))
            return float(np.sqrt(lam)), it, True
        lam_prev = lam
    return float(np.sqrt(lam)), max_iter, False


def opnorm_l2(K, h: int, w: int, stride: int = 1, pad=PaddingMode.PERIODIC,
              tol: float = 1e-9, max_iter: int = 5000, seed: int = 0,
              block: int = 6):
    """Largest singular value of the convolution matrix by power iteration.

    Iterates a block of ``block`` vectors on ``A^T A`` using :func:`conv2d`
    and :func:`adjoint_conv` only, with a Rayleigh-Ritz rotation each step so
    that nearly equal top singular values do not stall convergence.  Stops
    when the top Ritz value changes by less than ``tol`` relative.
    A run that does not converge is restarted once from a fresh start
    vector; a second failure raises :class:`ConvergenceError` carrying the
    last estimate.  Returns ``(estimate, iterations)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    K = np.asarray(K, dtype=np.float64)
    pad = PaddingMode.parse(pad)
    if not np.any(K):
        return 0.0, 0
    total = 0
    for attempt in range(2):
        rng = np.random.default_rng([seed, attempt])
        est, its, ok = _power_run(K, h, w, stride, pad, tol, max_iter, rng, block)
        total += its
        if ok:
            return est, total
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations (x2)",
        estimate=est, iterations=total)


def opnorm_l2_fft(K, h: int, w: int):
    """Exact l2 norm for periodic padding and stride 1.

    The matrix is block circulant, so its singular values are those of the
    ``d_out x d_in`` symbols ``sum_{l,k} K[l,k].T exp(2 pi i (o_l u/h + o_k v/w))``.
    """
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    off = offsets(n)
    eu = np.exp(2j * np.pi * np.outer(np.arange(h), off) / h)  # (h, n)
    ev = np.exp(2j * np.pi * np.outer(np.arange(w), off) / w)  # (w, n)
    sym = np.einsum("ul,vk,lkqp->uvpq", eu, ev, K)
    return float(np.linalg.svd(sym, compute_uv=False).max()) if K.size else 0.0


def opnorm_linf(K, pad=PaddingMode.PERIODIC, h: int | None = None,
                w: int | None = None, stride: int = 1) -> float:
    """Exact induced linf norm (max absolute row sum) of the conv matrix.

    Without ``h, w`` this is ``max_j sum_i ||K[:, :, i, j]||_1``, the value
    for periodic padding on images at least as large as the filter.  With
    dimensions, taps that wrap onto the same pixel are combined before the
    absolute value, exactly as in the matrix.
    """
    K = np.asarray(K, dtype=np.float64)
    pad = PaddingMode.parse(pad)
    if h is None or w is None:
        return float(np.abs(K).sum(axis=(0, 1, 2)).max()) if K.size else 0.0
    n, _, d_in, d_out = K.shape
    off = offsets(n)
    best = 0.0
    for i in range(out_size(h, stride)):
        for j in range(out_size(w, stride)):
            acc = np.zeros((h, w, d_in, d_out))
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
                    acc[r, c] += K[l, k]
            best = max(best, float(np.abs(acc).sum(axis=(0, 1, 2)).max()))
    return best


def operator_norm(K, h, w, stride=1, pad=PaddingMode.PERIODIC, method="power",
                  seed=0):
    """l2 operator norm by ``power`` iteration, ``fft`` or ``dense`` SVD."""
    pad = PaddingMode.parse(pad)
    if method == "power":
        return opnorm_l2(K, h, w, stride, pad, seed=seed)[0]
    if method == "fft":
        if pad is not PaddingMode.PERIODIC or stride != 1:
            return operator_norm(K, h, w, stride, pad, "dense")
        return opnorm_l2_fft(K, h, w)
    if method == "dense":
        return float(np.linalg.norm(materialize(K, h, w, stride, pad), 2))
    raise ValueError(f"unknown norm method {method!r}")


# -------------------------------------------------- folded effective layers


def effective_layers(spec: NetworkSpec, P: ParamStore):
    """Per-layer operators with eval-mode batch norm folded in.

    Residual entries hold ``K1`` (applied by conv) and ``K2`` where the
    second map is ``conv(K2)`` for ResNet-D and ``adjoint(K2)`` for ResNet-S,
    plus the effective biases ``b1`` and ``b2``.
    """
    out = []
    for info in spec.layers():
        n, pre = info.index, f"L{info.index}."
        entry = {"index": n, "kind": info.kind, "in_shape": info.in_shape}
        if info.kind in ("conv", "pool"):
            entry.update(K=P[pre + "K"], b=P[pre + "b"])
        elif info.kind == "dense":
            entry.update(W=P[pre + "W"], b=P[pre + "b"])
        elif info.kind == "res":
            if spec.variant == "D":
                K1, K2 = P[pre + "K1"], P[pre + "K2"]
            else:
                K1 = K2 = P[pre + "K"]
            b1, b2 = P[pre + "b1"], P[pre + "b2"]
            if spec.use_batchnorm:
                s1 = P[pre + "bn1.gamma"] / P[pre + "bn1.sigma"]
                b1 = s1 * (b1 - P[pre + "bn1.mu"]) + P[pre + "bn1.beta"]
                K1 = K1 * s1
                s2 = 1.0 / P[pre + "bn2.sigma"]
                b2 = b2 + s2 * P[pre + "bn2.mu"]
                # D: diag(s2) A2 scales output channels; S: diag(s2) A^T
                # is the adjoint of A diag(s2), i.e. scaled input channels
                K2 = K2 * s2 if spec.variant == "D" else K2 * s2[:, None]
            entry.update(K1=K1, K2=K2, b1=b1, b2=b2,
                         symmetric=spec.variant == "S" and np.array_equal(K1, K2))
        out.append(entry)
    return out


def apply_effective_residual(x, entry, variant, pad):
    """Evaluate one folded residual layer (used to check the folding)."""
    u = relu(conv2d(x, entry["K1"], 1, pad) + entry["b1"])
    if variant == "D":
        a2 = conv2d(u, entry["K2"], 1, pad)
    else:
        a2 = adjoint_conv(u, entry["K2"], pad)
    return relu(x - a2 + entry["b2"])


# ---------------------------------------------------------- certificate


@dataclass
class LayerRecord:
    index: int
    kind: str
    norms: dict = field(default_factory=dict)


@dataclass
class StabilityCertificate:
    variant: str
    m: int
    depth: int
    growth_norm: str
    growth_constant: float
    sensitivity_constant: float
    growth_constant_l2: float
    flags: dict
    layers: list
    sensitivity_factors: list
    method: str = "power"
    batchnorm_folded: bool = False

    @property
    def hypotheses_hold(self) -> bool:
        return all(self.flags.values())

    @property
    def c(self):
        return self.growth_constant

    @property
    def a(self):
        return self.sensitivity_constant

    def growth_valid(self) -> bool:
        return self.hypotheses_hold

    def sensitivity_valid(self) -> bool:
        # ResNet-D's l2 product bound needs no hypotheses
        if self.variant == "D":
            return True
        return self.hypotheses_hold

    def to_text(self) -> str:
        status = "unconditional" if self.hypotheses_hold else "conditional"
        lines = [
            "certificate: stability",
            f"variant: ResNet-{self.variant}",
            f"m: {self.m}",
            f"depth: {self.depth}",
            f"norm_method: {self.method}",
            f"batchnorm_folded: {str(self.batchnorm_folded).lower()}",
            f"growth_norm: {self.growth_norm}",
            f"growth_constant_c: {self.growth_constant!r}",
            f"growth_constant_c_l2: {self.growth_constant_l2!r}",
            "sensitivity_norm: l2",
            f"sensitivity_constant_a: {self.sensitivity_constant!r}",
            f"status: {status}",
        ]
        for name, ok in self.flags.items():
            lines.append(f"flag.{name}: {'pass' if ok else 'FAIL'}")
        lines.append("layers:")
        lines.append("  index\tkind\tnorms")
        for rec in self.layers:
            items = " ".join(f"{k}={v!r}" for k, v in rec.norms.items())
            lines.append(f"  {rec.index}\t{rec.kind}\t{items}")
        return "\n".join(lines) + "\n"


def _bias_norms(b, shape):
    """(l2, linf) of a per-channel bias spread over an ``h x w`` feature."""
    b = np.asarray(b, dtype=np.float64)
    if len(shape) == 3 and b.ndim == 1:
        h, w = shape[0], shape[1]
        return float(np.sqrt(h * w) * np.linalg.norm(b)), float(np.abs(b).max(initial=0.0))
    return float(np.linalg.norm(b)), float(np.abs(b).max(initial=0.0))


def assemble_certificate(spec: NetworkSpec, P: ParamStore, method: str = "power",
                         seed: int = 0) -> StabilityCertificate:
    """Compute per-layer norms, the constants ``c`` and ``a`` and the flags.

    Violated hypotheses only set flags; the constants are always reported.
    """
    pad = spec.padding
    records = []
    c_inf = 0.0
    c_l2 = 0.0
    factors = []
    flags = {}
    res_l2_ok = True
    k2_nonneg = True
    symmetric = True
    for entry in effective_layers(spec, P):
        rec = LayerRecord(entry["index"], entry["kind"])
        kind, shape = entry["kind"], entry["in_shape"]
        if kind == "conv":
            h, w = shape[0], shape[1]
            rec.norms["A_l2"] = operator_norm(entry["K"], h, w, 1, pad, method, seed)
            rec.norms["A_linf"] = opnorm_linf(entry["K"], pad, h, w)
            bl2, binf = _bias_norms(entry["b"], spec.block_shapes()[0])
        elif kind == "res":
            h, w = shape[0], shape[1]
            n1 = operator_norm(entry["K1"], h, w, 1, pad, method, seed)
            n2 = operator_norm(entry["K2"], h, w, 1, pad, method, seed)
            rec.norms.update(A1_l2=n1, A2_l2=n2)
            b1l2, _ = _bias_norms(entry["b1"], shape)
            bl2, binf = _bias_norms(entry["b2"], shape)
            if spec.variant == "D":
                k2_nonneg &= bool(np.all(entry["K2"] >= 0))
                factors.append(1.0 + n1 * n2)
                c_inf += binf
                c_l2 += bl2
            else:
                symmetric &= bool(entry["symmetric"])
                res_l2_ok &= _within(n1, SQRT2) and _within(n2, SQRT2)
                c_l2 += SQRT2 * b1l2 + bl2
            rec.norms.update(b1_l2=b1l2, b2_l2=bl2, b2_linf=binf)
        elif kind == "pool":
            h, w = shape[0], shape[1]
            n = operator_norm(entry["K"], h, w, 2, pad, method, seed)
            rec.norms["A_l2"] = n
            rec.norms["A_linf"] = opnorm_linf(entry["K"], pad, h, w, 2)
            factors.append(1.0 + n)
        elif kind == "dense":
            W = np.asarray(entry["W"], dtype=np.float64)
            rec.norms["W_l2"] = float(np.linalg.norm(W, 2))
            rec.norms["W_linf"] = float(np.abs(W).sum(axis=1).max())
            bl2, binf = _bias_norms(entry["b"], (W.shape[0],))
        if kind in ("conv", "dense"):
            rec.norms.update(b_l2=bl2, b_linf=binf)
            c_inf += binf
            c_l2 += bl2
        records.append(rec)

    first, last = records[0].norms, records[-1].norms
    if spec.variant == "D":
        flags["first_conv_linf_le_1"] = _within(first["A_linf"], 1.0)
        flags["dense_linf_le_1"] = _within(last["W_linf"], 1.0)
        flags["K2_nonnegative"] = k2_nonneg
        # l2 sensitivity: every layer contributes its Lipschitz factor
        factors = [first["A_l2"]] + factors + [last["W_l2"]]
        growth_norm, growth_c = "linf", c_inf
    else:
        flags["first_conv_l2_le_1"] = _within(first["A_l2"], 1.0)
        flags["dense_l2_le_1"] = _within(last["W_l2"], 1.0)
        flags["residual_l2_le_sqrt2"] = res_l2_ok
        flags["residual_symmetric"] = symmetric
        growth_norm, growth_c = "l2", c_l2
    a = 1.0
    for f in factors:
        a *= f
    return StabilityCertificate(
        variant=spec.variant, m=spec.m, depth=spec.depth,
        growth_norm=growth_norm, growth_constant=float(growth_c),
        sensitivity_constant=float(a), growth_constant_l2=float(c_l2),
        flags=flags, layers=records, sensitivity_factors=factors,
        method=method, batchnorm_folded=spec.use_batchnorm)


# ------------------------------------------------------------ verification


@dataclass
class VerifyReport:
    kind: str
    norm: str
    bound_constant: float
    skipped: bool = False
    diagnostic: str = ""
    entries: list = field(default_factory=list)

    @property
    def violations(self):
        return [e for e in self.entries if not e["ok"]]

    @property
    def ok(self) -> bool:
        return not self.skipped and not self.violations

    @property
    def min_slack(self):
        return min((e["slack"] for e in self.entries), default=float("inf"))

    def to_text(self) -> str:
        lines = [f"check: {self.kind}", f"norm: {self.norm}",
                 f"constant: {self.bound_constant!r}",
                 f"skipped: {str(self.skipped).lower()}"]
        if self.diagnostic:
            lines.append(f"diagnostic: {self.diagnostic}")
        lines.append(f"cases: {len(self.entries)}")
        lines.append(f"violations: {len(self.violations)}")
        lines.append(f"min_slack: {self.min_slack!r}")
        for e in self.violations:
            lines.append(f"violation: {e}")
        return "\n".join(lines) + "\n"


def _vnorm(x, kind):
    x = np.asarray(x).ravel()
    return float(np.abs(x).max(initial=0.0)) if kind == "linf" else float(np.linalg.norm(x))


def verify_growth(spec, P, inputs, certificate=None, force=False):
    """Check ``||x^N|| <= ||x^0|| + c`` on every input.

    When a hypothesis flag fails the campaign is skipped with a diagnostic
    unless ``force`` is set.
    """
    cert = certificate or assemble_certificate(spec, P)
    rep = VerifyReport("growth", cert.growth_norm, cert.growth_constant)
    if not cert.growth_valid() and not force:
        failed = [k for k, v in cert.flags.items() if not v]
        rep.skipped = True
        rep.diagnostic = "hypotheses not satisfied: " + ", ".join(failed)
        return rep
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    out, trace = forward(spec, P, X)
    for i in range(len(X)):
        lhs = _vnorm(out[i], cert.growth_norm)
        rhs = _vnorm(X[i], cert.growth_norm) + cert.growth_constant
        ok = _within(lhs, rhs)
        e = {"index": i, "value": lhs, "bound": rhs, "slack": rhs - lhs, "ok": ok}
        if not ok:
            layer_norms = trace.linf if cert.growth_norm == "linf" else trace.l2
            e["trace"] = layer_norms[:, i].tolist()
        rep.entries.append(e)
    return rep


def verify_sensitivity(spec, P, pairs, certificate=None, force=False):
    """Check ``||x^N - y^N||_2 <= a ||x^0 - y^0||_2`` on input pairs."""
    cert = certificate or assemble_certificate(spec, P)
    rep = VerifyReport("sensitivity", "l2", cert.sensitivity_constant)
    if not cert.sensitivity_valid() and not force:
        failed = [k for k, v in cert.flags.items() if not v]
        rep.skipped = True
        rep.diagnostic = "hypotheses not satisfied: " + ", ".join(failed)
        return rep
    pairs = list(pairs)
    if not pairs:
        return rep
    X = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    Y = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    ox, _ = forward(spec, P, X)
    oy, _ = forward(spec, P, Y)
    a = cert.sensitivity_constant
    for i in range(len(pairs)):
        num = _vnorm(ox[i] - oy[i], "l2")
        den = _vnorm(X[i] - Y[i], "l2")
        bound = a * den
        ratio = num / den if den > 0 else 0.0
        rep.entries.append({"index": i, "value": num, "bound": bound,
                            "ratio": ratio, "slack": bound - num,
                            "ok": _within(num, bound)})
    return rep


@dataclass
class LemmaReport:
    operator_norm: float
    applicable: bool
    trials: int
    max_ratio: float
    violations: int
    witness: tuple | None = None

    @property
    def ok(self) -> bool:
        return not self.applicable or self.violations == 0


def check_lemma_nonexpansive(A, b=None, trials: int = 1000, seed: int = 0,
                             scale: float = 1.0, batch: int = 20000):
    """Sample ``||F(x) - F(y)||_2 / ||x - y||_2`` for ``F(x) = x - A^T relu(Ax + b)``.

    ``A`` is a dense matrix (a scalar is read as 1x1) or ``(K, (h, w))`` with
    periodic padding.  Violations are only counted as failures when
    ``||A||_2 <= sqrt(2)``; otherwise the report just carries the largest
    observed ratio and a witness pair.
    """
    rng = np.random.default_rng(seed)
    if isinstance(A, tuple):
        K, (h, w) = A
        K = np.asarray(K, dtype=np.float64)
        shape = (h, w, K.shape[2])

        def F(x):
            return x - adjoint_conv(relu(conv2d(x, K) + bias), K)

        opn = opnorm_l2_fft(K, h, w)
    else:
        M = np.atleast_2d(np.asarray(A, dtype=np.float64))
        shape = (M.shape[1],)

        def F(x):
            return x - relu(x @ M.T + bias) @ M

        opn = float(np.linalg.norm(M, 2))
    bias = 0.0 if b is None else np.asarray(b, dtype=np.float64)
    applicable = _within(opn, SQRT2)
    max_ratio, violations, witness = 0.0, 0, None
    done = 0
    while done < trials:
        k = min(batch, trials - done)
        x = scale * rng.standard_normal((k,) + shape)
        y = scale * rng.standard_normal((k,) + shape)
        axes = tuple(range(1, x.ndim))
        num = np.sqrt(((F(x) - F(y)) ** 2).sum(axis=axes))
        den = np.sqrt(((x - y) ** 2).sum(axis=axes))
        ratio = num / den
        bad = num > den * (1 + BOUND_RTOL) + BOUND_ATOL
        violations += int(bad.sum())
        j = int(np.argmax(ratio))
        if ratio[j] > max_ratio:
            max_ratio = float(ratio[j])
            if bad[j]:
                witness = (x[j].copy(), y[j].copy())
        done += k
    return LemmaReport(opn, applicable, trials, max_ratio, violations, witness)
