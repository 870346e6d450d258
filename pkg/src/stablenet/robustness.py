"""Additive input noise and accuracy / output-shift evaluation.

Two perturbations ``x -> x + eta``:

* unstructured: ``eta ~ N(0, sigma^2)`` i.i.d. per entry, seeded;
* structured:   ``eta = eps * x0`` for a fixed image ``x0``.

Noise is added to network inputs as given, i.e. after any normalization,
so the measured output shift can be compared exactly with ``a ||eta||_2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import forward

__all__ = ["NoiseSpec", "corrupt", "evaluate_under_noise", "NoiseTable"]


@dataclass(frozen=True)
class NoiseSpec:
    kind: str  # "unstructured" | "structured"
    level: float
    pattern: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("unstructured", "structured"):
            raise ValueError("noise kind must be 'unstructured' or 'structured'")
        if self.kind == "unstructured" and self.level < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kind == "structured":
            if self.pattern is None:
                raise ValueError("structured noise needs a pattern image")
            object.__setattr__(self, "pattern", np.asarray(self.pattern, dtype=np.float64))

    @classmethod
    def unstructured(cls, sigma, seed=0) -> "NoiseSpec":
        return cls("unstructured", float(sigma), None, seed)

    @classmethod
    def structured(cls, eps, pattern, seed=0) -> "NoiseSpec":
        return cls("structured", float(eps), pattern, seed)

    def label(self) -> str:
        return f"{self.kind}:{self.level:g}"


def noise_for(shape, spec: NoiseSpec):
    """The perturbation ``eta`` for inputs of ``shape`` (a batch or one image)."""
    if spec.kind == "unstructured":
        if spec.level == 0:
            return np.zeros(shape)
        rng = np.random.default_rng(spec.seed)
        return spec.level * rng.standard_normal(shape)
    pat = spec.pattern
    if pat.shape != tuple(shape[-pat.ndim:]):
        raise ValueError(f"pattern shape {pat.shape} does not match inputs {shape}")
    return np.broadcast_to(spec.level * pat, shape).copy()


def corrupt(x, spec: NoiseSpec):
    """``x + eta``; accepts one image or a batch."""
    x = np.asarray(x, dtype=np.float64)
    return x + noise_for(x.shape, spec)


@dataclass
class NoiseRow:
    kind: str
    level: float
    accuracy: float
    mean_shift: float
    max_shift: float
    mean_bound: float
    min_slack: float
    violations: int
    certified: bool


@dataclass
class NoiseTable:
    clean_accuracy: float
    sensitivity_constant: float
    certified: bool
    rows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.certified or all(r.violations == 0 for r in self.rows)

    def row(self, kind, level):
        for r in self.rows:
            if r.kind == kind and r.level == level:
                return r
        raise KeyError((kind, level))

    def to_text(self) -> str:
        cols = ["noise", "level", "accuracy", "mean_shift", "max_shift",
                "mean_bound", "min_slack", "violations", "certified"]
        lines = [f"# clean_accuracy\t{self.clean_accuracy!r}",
                 f"# sensitivity_constant\t{self.sensitivity_constant!r}",
                 "\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join([r.kind, repr(r.level), repr(r.accuracy),
                                    repr(r.mean_shift), repr(r.max_shift),
                                    repr(r.mean_bound), repr(r.min_slack),
                                    str(r.violations), str(r.certified).lower()]))
        return "\n".join(lines) + "\n"


class BoundViolation(AssertionError):
    pass


def evaluate_under_noise(spec, params, dataset, noise_list, certificate=None,
                         strict: bool = True) -> NoiseTable:
    """Accuracy and output shift under each noise setting.

    For every corrupted image the logit shift ``||x^N - y^N||_2`` is compared
    with ``a ||eta||_2``.  When the certificate's hypotheses hold a single
    violation raises :class:`BoundViolation` (``strict``) or is counted.
    """
    from .certify import BOUND_ATOL, BOUND_RTOL, assemble_certificate

    cert = certificate or assemble_certificate(spec, params)
    a = cert.sensitivity_constant
    certified = cert.sensitivity_valid()
    X = dataset.images
    y = dataset.classes
    clean, _ = forward(spec, params, X)
    clean_acc = float(np.mean(np.argmax(clean, axis=1) == y))
    table = NoiseTable(clean_acc, a, certified)
    for ns in noise_list:
        eta = noise_for(X.shape, ns)
        noisy, _ = forward(spec, params, X + eta)
        shift = np.linalg.norm((noisy - clean).reshape(len(X), -1), axis=1)
        bound = a * np.linalg.norm(eta.reshape(len(X), -1), axis=1)
        bad = shift > bound * (1 + BOUND_RTOL) + BOUND_ATOL
        row = NoiseRow(ns.kind, ns.level,
                       float(np.mean(np.argmax(noisy, axis=1) == y)),
                       float(shift.mean()), float(shift.max()), float(bound.mean()),
                       float((bound - shift).min()), int(bad.sum()), certified)
        table.rows.append(row)
        if strict and certified and row.violations:
            raise BoundViolation(
                f"{row.violations} outputs exceed a*||eta|| under {ns.label()}")
    return table
