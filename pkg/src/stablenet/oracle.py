"""Brute-force dense-matrix checks of the convolution operators.

Every check compares the fast gather/scatter path against the matrix built
entry by entry in :func:`stablenet.conv.materialize`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .conv import (
    PaddingMode,
    adjoint_conv,
    conv2d,
    materialize,
    norm_relation_check,
    out_size,
)
from .tensor import devectorize, vectorize

__all__ = ["OracleReport", "run_oracle_suite", "shape_grid"]


def shape_grid(max_hw=8, max_d=3):
    """``(h, w, d_in, d_out, n, stride, pad)`` for every supported small shape."""
    sizes = range(1, max_hw + 1)
    depths = range(1, max_d + 1)
    return itertools.product(sizes, sizes, depths, depths, (2, 3), (1, 2),
                             tuple(PaddingMode))


@dataclass
class OracleReport:
    checks: dict = field(default_factory=dict)  # name -> [cases, failures, worst]

    def record(self, name, err, limit):
        entry = self.checks.setdefault(name, [0, 0, 0.0])
        entry[0] += 1
        entry[1] += int(not err <= limit)
        entry[2] = max(entry[2], float(err))

    @property
    def ok(self) -> bool:
        return all(v[1] == 0 for v in self.checks.values())

    def to_text(self) -> str:
        lines = ["check\tcases\tfailures\tworst_error"]
        for name, (n, f, w) in self.checks.items():
            lines.append(f"{name}\t{n}\t{f}\t{w!r}")
        lines.append(f"status: {'pass' if self.ok else 'FAIL'}")
        return "\n".join(lines) + "\n"


def run_oracle_suite(instances: int = 5, seed: int = 0, max_hw: int = 8,
                     max_d: int = 3) -> OracleReport:
    """Matrix equivalence, adjoint and norm-relation checks on a shape grid."""
    rng = np.random.default_rng(seed)
    rep = OracleReport()
    for h, w, di, do, n, s, pad in shape_grid(max_hw, max_d):
        ho, wo = out_size(h, s), out_size(w, s)
        for _ in range(instances):
            K = rng.standard_normal((n, n, di, do))
            x = rng.standard_normal((h, w, di))
            A = materialize(K, h, w, s, pad)
            fast = vectorize(conv2d(x, K, s, pad))
            dense = A @ vectorize(x)
            scale = max(float(np.linalg.norm(dense)), 1e-300)
            rep.record("matrix_equivalence", float(np.linalg.norm(fast - dense)) / scale, 1e-12)
            u = rng.standard_normal(ho * wo * do)
            back = vectorize(adjoint_conv(devectorize(u, ho, wo, do), K, pad, s, (h, w)))
            rep.record("adjoint_matrix", float(np.abs(back - A.T @ u).max()), 1e-10)
        if s == 1 and pad is PaddingMode.PERIODIC and min(h, w) >= n:
            for p in (1.0, 2.0):
                lhs, rhs, _ = norm_relation_check(rng.standard_normal((n, n, di, do)), h, w, p)
                rep.record(f"norm_relation_p{int(p)}", abs(lhs - rhs) / max(rhs, 1e-300), 1e-12)
    return rep
