"""Projected dynamics on the nonnegative orthant and their stability envelopes.

The continuous-time model is the inclusion

    -x'(t) in N(x(t)) + A2(t) sigma(A1(t) x + b1(t)) - b2(t),   x(0) = x0 >= 0

where ``N`` is the normal cone of the nonnegative orthant.  It is integrated
by forward-backward splitting, an explicit step on the force followed by the
projection (ReLU)::

    x_{k+1} = (x_k - tau A2 sigma(A1 x_k + b1) + tau b2)_+

Weights and biases are piecewise-constant :class:`Schedule` objects, so
every integral appearing in a bound is evaluated exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .layers import relu

__all__ = [
    "Schedule",
    "InclusionProblem",
    "Trajectory",
    "step_fb",
    "integrate",
    "hypotheses_check",
    "bound_envelope",
    "gronwall",
    "ENVELOPES",
]

ENVELOPES = ("Growth3_2", "Sensitivity3_2", "GrowthD", "GrowthS", "SensitivityS")


class Schedule:
    """Right-continuous piecewise-constant function of time.

    ``values[j]`` holds on ``[knots[j], knots[j+1])``; the last value extends
    to infinity.  ``knots[0]`` must be 0.
    """

    def __init__(self, knots, values):
        knots = np.asarray(knots, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if knots.ndim != 1 or len(knots) == 0 or knots[0] != 0.0:
            raise ValueError("knots must be a 1-D array starting at 0")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if len(values) != len(knots):
            raise ValueError("need one value per knot")
        self.knots = knots
        self.values = values

    @classmethod
    def constant(cls, value) -> "Schedule":
        return cls([0.0], np.asarray(value, dtype=np.float64)[None])

    @classmethod
    def coerce(cls, value) -> "Schedule":
        return value if isinstance(value, Schedule) else cls.constant(value)

    def segment(self, t: float) -> int:
        return int(np.searchsorted(self.knots, t, side="right")) - 1

    def __call__(self, t: float):
        return self.values[self.segment(t)]

    def map(self, fn) -> "Schedule":
        return Schedule(self.knots, np.array([fn(v) for v in self.values]))

    def integral(self, a: float, b: float) -> float:
        """Exact integral of a scalar schedule over ``[a, b]``."""
        if b < a:
            return -self.integral(b, a)
        edges = np.concatenate(([a], self.knots[(self.knots > a) & (self.knots < b)], [b]))
        return float(sum(self(lo) * (hi - lo) for lo, hi in zip(edges[:-1], edges[1:])))

    def transpose(self) -> "Schedule":
        return Schedule(self.knots, np.swapaxes(self.values, -1, -2))


def _merged_knots(*schedules):
    return np.unique(np.concatenate([s.knots for s in schedules]))


@dataclass
class InclusionProblem:
    A1: Schedule
    A2: Schedule
    b1: Schedule
    b2: Schedule
    x0: np.ndarray
    T: float
    variant: str = "General"
    activation: object = relu

    def __post_init__(self):
        self.A1 = Schedule.coerce(self.A1)
        self.A2 = Schedule.coerce(self.A2)
        self.b1 = Schedule.coerce(self.b1)
        self.b2 = Schedule.coerce(self.b2)
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if self.variant not in ("General", "D", "S"):
            raise ValueError("variant must be General, D or S")
        if np.any(self.x0 < 0):
            raise ValueError("initial state must be elementwise nonnegative")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.variant == "D" and np.any(self.A2.values < 0):
            raise ValueError("variant D needs A2 >= 0 at every knot")

    @classmethod
    def symmetric(cls, A, b1, b2, x0, T, activation=relu) -> "InclusionProblem":
        """The S form: ``A2 = A1^T``."""
        A = Schedule.coerce(np.atleast_2d(A) if not isinstance(A, Schedule) else A)
        return cls(A, A.transpose(), b1, b2, x0, T, "S", activation)

    @property
    def dim(self) -> int:
        return len(self.x0)

    def weights(self, t):
        A1 = np.atleast_2d(self.A1(t))
        A2 = np.atleast_2d(self.A2(t))
        return A1, A2, np.atleast_1d(self.b1(t)), np.atleast_1d(self.b2(t))

    def force(self, t, x):
        """``F(t, x) = A2 sigma(A1 x + b1) - b2``."""
        A1, A2, b1, b2 = self.weights(t)
        return A2 @ self.activation(A1 @ x + b1) - b2

    def knots(self):
        return _merged_knots(self.A1, self.A2, self.b1, self.b2)

    def with_x0(self, x0) -> "InclusionProblem":
        return InclusionProblem(self.A1, self.A2, self.b1, self.b2, x0, self.T,
                                self.variant, self.activation)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (K + 1, d)
    tau: float
    norms: np.ndarray
    envelope: np.ndarray | None = None

    @property
    def final(self):
        return self.states[-1]

    def export(self, bound=None) -> str:
        """Tab-separated ``t, x_1..x_d, norm, bound`` rows."""
        bound = self.envelope if bound is None else bound
        d = self.states.shape[1]
        head = ["t"] + [f"x{i + 1}" for i in range(d)] + ["norm", "bound"]
        lines = ["\t".join(head)]
        for k, t in enumerate(self.times):
            row = [repr(float(t))] + [repr(float(v)) for v in self.states[k]]
            row.append(repr(float(self.norms[k])))
            row.append("" if bound is None else repr(float(bound[k])))
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def step_fb(x, tau, A1, A2, b1, b2, activation=relu):
    """One forward-backward step ``(x - tau A2 sigma(A1 x + b1) + tau b2)_+``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    A1, A2 = np.atleast_2d(A1), np.atleast_2d(A2)
    return relu(x - tau * (A2 @ activation(A1 @ x + b1)) + tau * np.asarray(b2))


def time_grid(T: float, tau: float) -> np.ndarray:
    """``K = ceil(T / tau)`` steps; the last one is shortened to land on T."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    K = max(1, math.ceil(T / tau - 1e-9))
    t = np.minimum(np.arange(K + 1) * tau, T)
    t[-1] = T
    return t


def integrate(problem: InclusionProblem, tau: float, check: bool = False) -> Trajectory:
    """Forward-backward integration on ``[0, T]``.

    Weights are read at the left end of every step.  A NaN or inf state
    raises :class:`NumericalError` with the step index.
    """
    if check:
        rep = hypotheses_check(problem)
        if not rep.passed:
            raise ValueError(f"hypotheses not satisfied: {rep.failures()}")
    times = time_grid(problem.T, tau)
    states = np.empty((len(times), problem.dim))
    x = problem.x0.copy()
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(len(times) - 1):
            dt = times[k + 1] - times[k]
            A1, A2, b1, b2 = problem.weights(times[k])
            x = step_fb(x, dt, A1, A2, b1, b2, problem.activation)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite state at step {k + 1}", step=k + 1)
            states[k + 1] = x
    return Trajectory(times, states, tau, np.linalg.norm(states, axis=1))


# ------------------------------------------------------------ hypotheses


@dataclass
class HypothesisReport:
    activation_contractive: bool
    activation_zero_at_zero: bool
    x0_nonnegative: bool
    variant_ok: bool
    lipschitz_bound: float  # sup over knots of ||A1||_2 ||A2||_2
    knots: np.ndarray
    beta: np.ndarray

    @property
    def passed(self) -> bool:
        return (self.activation_contractive and self.activation_zero_at_zero
                and self.x0_nonnegative and self.variant_ok)

    def failures(self):
        names = ("activation_contractive", "activation_zero_at_zero",
                 "x0_nonnegative", "variant_ok")
        return [n for n in names if not getattr(self, n)]


def _opn(M):
    return float(np.linalg.norm(np.atleast_2d(M), 2))


def hypotheses_check(problem: InclusionProblem, samples: int = 1000,
                     seed: int = 0) -> HypothesisReport:
    """Check the existence hypotheses and report the growth envelope ``beta``.

    ``beta(t) = max(c, ||A2(t)|| ||b1(t)|| + ||b2(t)||)`` with ``c`` the
    supremum of ``||A1|| ||A2||`` over the schedule knots.
    """
    rng = np.random.default_rng(seed)
    s = problem.activation
    x = rng.normal(scale=3.0, size=samples)
    y = rng.normal(scale=3.0, size=samples)
    contractive = bool(np.all(np.abs(s(x) - s(y)) <= np.abs(x - y) * (1 + 1e-12)))
    zero = bool(np.all(s(np.zeros(1)) == 0))
    knots = problem.knots()
    lip, pieces = 0.0, []
    for t in knots:
        A1, A2, b1, b2 = problem.weights(t)
        lip = max(lip, _opn(A1) * _opn(A2))
        pieces.append(_opn(A2) * np.linalg.norm(b1) + np.linalg.norm(b2))
    beta = np.maximum(lip, np.array(pieces))
    variant_ok = True
    if problem.variant == "D":
        variant_ok = bool(np.all(problem.A2.values >= 0))
    elif problem.variant == "S":
        variant_ok = all(np.allclose(problem.weights(t)[1], problem.weights(t)[0].T)
                         for t in knots)
    return HypothesisReport(contractive, zero, bool(np.all(problem.x0 >= 0)),
                            variant_ok, lip, knots, beta)


# ------------------------------------------------------------ envelopes


def _linear_envelope(w0, rate, source, times, breaks):
    """Solve ``w' = rate(t) w + source(t)``, ``w(0) = w0`` exactly at ``times``.

    ``rate`` and ``source`` are callables constant between ``breaks``.
    """
    edges = np.unique(np.concatenate((times, breaks[breaks < times[-1]])))
    out = {}
    w = float(w0)
    out[edges[0]] = w
    for lo, hi in zip(edges[:-1], edges[1:]):
        p, q, dt = rate(lo), source(lo), hi - lo
        if p == 0.0:
            w = w + q * dt
        else:
            e = math.exp(p * dt)
            w = w * e + q * math.expm1(p * dt) / p
        out[hi] = w
    return np.array([out[t] for t in times])


@dataclass
class EnvelopeReport:
    which: str
    times: np.ndarray
    value: np.ndarray
    bound: np.ndarray
    tolerance: float

    @property
    def slack(self):
        return self.bound - self.value

    @property
    def ok(self) -> bool:
        return bool(np.all(self.value <= self.bound + self.tolerance))

    def failures(self):
        bad = np.nonzero(self.value > self.bound + self.tolerance)[0]
        return [{"step": int(k), "t": float(self.times[k]), "value": float(self.value[k]),
                 "bound": float(self.bound[k]), "tolerance": self.tolerance} for k in bad]


def envelope_tolerance(problem, traj) -> float:
    """``max(1e-9, 5 tau * scale)`` with a Lipschitz-type scale."""
    fmax, pmax = 0.0, 0.0
    for t, x in zip(traj.times, traj.states):
        fmax = max(fmax, float(np.linalg.norm(problem.force(t, x))))
    for t in problem.knots():
        A1, A2, _, _ = problem.weights(t)
        pmax = max(pmax, _opn(A1) * _opn(A2))
    scale = max(1.0, problem.T) * fmax * max(1.0, pmax)
    return max(1e-9, 5 * traj.tau * scale)


def bound_envelope(problem: InclusionProblem, trajectory: Trajectory, which: str,
                   other: Trajectory | None = None, other_problem=None) -> EnvelopeReport:
    """Evaluate one stability envelope along a trajectory.

    ``Growth3_2``       ||x0|| e^{int p} + int q(s) e^{int_s^t p} ds,
                        p = ||A1|| ||A2||, q = ||A2|| ||b1|| + ||(b2)_+||
    ``Sensitivity3_2``  ||x0 - y0|| e^{int p}
    ``GrowthD``         ||x0|| + int ||(b2)_+||
    ``GrowthS``         ||x0|| + int ||(-A^T sigma(b1) + b2)_+||
    ``SensitivityS``    ||x0 - y0||

    Sensitivity envelopes need the second trajectory ``other`` (same
    schedules, different initial state).
    """
    if which not in ENVELOPES:
        raise ValueError(f"unknown envelope {which!r}; choose from {ENVELOPES}")
    times = trajectory.times
    breaks = problem.knots()

    def p(t):
        A1, A2, _, _ = problem.weights(t)
        return _opn(A1) * _opn(A2)

    if which.startswith("Sensitivity"):
        if other is None:
            raise ValueError(f"{which} needs a second trajectory")
        value = np.linalg.norm(trajectory.states - other.states, axis=1)
        d0 = value[0]
        if which == "Sensitivity3_2":
            bound = _linear_envelope(d0, p, lambda t: 0.0, times, breaks)
        else:
            bound = np.full(len(times), d0)
    else:
        value = trajectory.norms
        n0 = value[0]
        if which == "Growth3_2":
            def q(t):
                _, A2, b1, b2 = problem.weights(t)
                return _opn(A2) * np.linalg.norm(b1) + np.linalg.norm(relu(b2))
            bound = _linear_envelope(n0, p, q, times, breaks)
        elif which == "GrowthD":
            bound = _linear_envelope(
                n0, lambda t: 0.0,
                lambda t: float(np.linalg.norm(relu(problem.weights(t)[3]))), times, breaks)
        else:
            def qs(t):
                _, A2, b1, b2 = problem.weights(t)
                return float(np.linalg.norm(relu(-A2 @ problem.activation(b1) + b2)))
            bound = _linear_envelope(n0, lambda t: 0.0, qs, times, breaks)
    tol = envelope_tolerance(problem, trajectory)
    if other is not None:
        tol = max(tol, envelope_tolerance(other_problem or problem, other))
    return EnvelopeReport(which, times, value, bound, tol)


# ---------------------------------------------------------------- Gronwall


def gronwall(c: float, f, g, alpha: float, t_grid):
    """Upper bound on ``u`` when ``u(t) <= c + int f u + int g u^alpha``.

    For ``0 <= alpha < 1``::

        u^{1-a} <= c^{1-a} e^{(1-a) int_0^t f}
                   + (1-a) int_0^t g(s) e^{(1-a) int_s^t f} ds

    and for ``alpha = 1`` the linear form ``u <= c exp(int_0^t (f + g))``.
    ``f`` and ``g`` are nonnegative scalar schedules (or constants).
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if alpha > 1:
        raise ValueError("alpha > 1 is not supported")
    if c < 0:
        raise ValueError("c must be nonnegative")
    f, g = Schedule.coerce(f), Schedule.coerce(g)
    if np.any(f.values < 0) or np.any(g.values < 0):
        raise ValueError("f and g must be nonnegative")
    t_grid = np.asarray(t_grid, dtype=np.float64)
    order = np.argsort(t_grid)
    times = np.concatenate(([0.0], t_grid[order]))
    breaks = _merged_knots(f, g)
    if alpha == 1:
        w = _linear_envelope(1.0, lambda t: float(f(t) + g(t)), lambda t: 0.0,
                             np.unique(times), breaks)
        vals = c * w
    else:
        k = 1.0 - alpha
        w = _linear_envelope(c**k, lambda t: k * float(f(t)), lambda t: k * float(g(t)),
                             np.unique(times), breaks)
        vals = np.maximum(w, 0.0) ** (1.0 / k)
    lookup = dict(zip(np.unique(times), vals))
    out = np.empty(len(t_grid))
    out[order] = [lookup[t] for t in t_grid[order]]
    return out
