"""Fixed-step and adaptive explicit integrators for initial value problems."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

Rhs = Callable[[float, np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    """Integration could not proceed (non-finite state or step-size floor)."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


@dataclass
class Ivp:
    rhs: Rhs
    y0: np.ndarray
    t_span: tuple[float, float]

    def __post_init__(self):
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=np.float64))
        t0, t1 = self.t_span
        if not t1 > t0:
            raise ValueError(f"t_span must be increasing, got {self.t_span}")


class Step(NamedTuple):
    t: float
    y: np.ndarray
    dt: float
    err: float
    accepted: bool


@dataclass
class SolverTrace:
    """Record of an integration.

    ``steps[0]`` is the initial state (dt = 0, accepted). Every following
    entry is an attempted step; ``t`` and ``y`` are the state the attempt
    reached, whether or not it was accepted.
    """

    steps: list[Step] = field(default_factory=list)

    @property
    def accepted(self) -> list[Step]:
        return [s for s in self.steps if s.accepted]

    @property
    def step_count_accepted(self) -> int:
        return sum(s.accepted for s in self.steps) - 1

    @property
    def step_count_rejected(self) -> int:
        return sum(not s.accepted for s in self.steps)

    @property
    def t(self) -> np.ndarray:
        return np.array([s.t for s in self.accepted])

    @property
    def y(self) -> np.ndarray:
        return np.array([s.y for s in self.accepted])

    @property
    def y_final(self) -> np.ndarray:
        return self.accepted[-1].y

    def to_csv(self) -> str:
        buf = io.StringIO()
        dim = len(self.steps[0].y)
        writer = csv.writer(buf)
        ycols = ["y"] if dim == 1 else [f"y{i}" for i in range(dim)]
        writer.writerow(["t", *ycols, "dt", "err", "accepted"])
        for s in self.steps:
            writer.writerow([repr(s.t), *(repr(float(v)) for v in s.y), repr(s.dt), repr(s.err), int(s.accepted)])
        return buf.getvalue()


@dataclass
class AdaptiveConfig:
    tol: float = 1e-4
    safety: float = 0.9
    h_init: float = 0.1
    h_min: float = 1e-8
    h_max: float = 1.0
    order: int = 4
    max_growth: float = 5.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0 < self.safety <= 1:
            raise ValueError("safety factor must lie in (0, 1]")
        if not 0 < self.h_min <= self.h_init <= self.h_max:
            raise ValueError("need 0 < h_min <= h_init <= h_max")


def _eval(rhs: Rhs, t: float, y: np.ndarray, step_index: int | None = None) -> np.ndarray:
    dy = np.asarray(rhs(t, y), dtype=np.float64)
    if not np.all(np.isfinite(dy)):
        raise SolverError(f"non-finite right-hand side at t={t}", step_index)
    return dy


def euler_step(rhs: Rhs, t: float, y, h: float) -> np.ndarray:
    if h <= 0:
        raise ValueError("step size must be positive")
    y = np.asarray(y, dtype=np.float64)
    return y + h * _eval(rhs, t, y)


def rk4_step(rhs: Rhs, t: float, y, h: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    k1 = _eval(rhs, t, y)
    k2 = _eval(rhs, t + h / 2, y + h / 2 * k1)
    k3 = _eval(rhs, t + h / 2, y + h / 2 * k2)
    k4 = _eval(rhs, t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


_FIXED = {"euler": euler_step, "rk4": rk4_step}


def integrate_fixed(ivp: Ivp, h: float, method: str = "euler") -> SolverTrace:
    """Integrate with a constant step ``h``; the last step is shortened to land on T.

    Raises :class:`SolverError` carrying the step index when the state
    stops being finite, which is the expected outcome for unstable ``h``.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    try:
        stepper = _FIXED[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}") from None
    t0, t1 = ivp.t_span
    n = (t1 - t0) / h
    n_steps = round(n) if abs(n - round(n)) <= 1e-9 else math.ceil(n)
    y = ivp.y0.copy()
    trace = SolverTrace([Step(t0, y, 0.0, 0.0, True)])
    for j in range(n_steps):
        t = t0 + j * h
        dt = h if j < n_steps - 1 else t1 - t
        try:
            y = stepper(ivp.rhs, t, y, dt)
        except SolverError as exc:
            raise SolverError(str(exc), j) from None
        if not np.all(np.isfinite(y)):
            raise SolverError(f"state became non-finite at step {j}", j)
        trace.steps.append(Step(t1 if j == n_steps - 1 else t0 + (j + 1) * h, y, dt, 0.0, True))
    return trace


# Fehlberg 4(5) tableau
_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])
_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])


class RkfResult(NamedTuple):
    y: np.ndarray
    y_hat: np.ndarray
    err: float
    h_next: float


def next_step_size(h: float, err: float, cfg: AdaptiveConfig) -> float:
    """``k * h * (tol / err) ** (1 / (p + 1))`` clamped to [h_min, h_max].

    A zero error estimate jumps straight to ``h_max``; otherwise growth is
    capped at ``cfg.max_growth`` times the current step.
    """
    if err == 0.0:
        return cfg.h_max
    h_new = cfg.safety * h * (cfg.tol / err) ** (1.0 / (cfg.order + 1))
    h_new = min(h_new, cfg.max_growth * h)
    return min(max(h_new, cfg.h_min), cfg.h_max)


def rkf_step(rhs: Rhs, t: float, y, h: float, cfg: AdaptiveConfig | None = None) -> RkfResult:
    """One embedded Fehlberg 4(5) step.

    Returns the propagated 4th-order solution, the 5th-order reference, the
    max-norm of their difference and the proposed next step size.
    """
    cfg = cfg or AdaptiveConfig()
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    k = []
    for i in range(6):
        yi = y.copy()
        for a, kj in zip(_A[i], k):
            yi = yi + h * a * kj
        k.append(_eval(rhs, t + _C[i] * h, yi))
    ks = np.array(k)
    y4 = y + h * (_B4 @ ks)
    y5 = y + h * (_B5 @ ks)
    err = float(np.max(np.abs(y4 - y5)))
    return RkfResult(y4, y5, err, next_step_size(h, err, cfg))


def integrate_adaptive(ivp: Ivp, cfg: AdaptiveConfig | None = None) -> SolverTrace:
    """Adaptive RKF integration over ``ivp.t_span``.

    Steps whose error estimate exceeds ``cfg.tol`` are recorded as rejected
    and retried with the smaller proposed step. The final step is clipped so
    the last accepted time equals T exactly.
    """
    cfg = cfg or AdaptiveConfig()
    t0, t1 = ivp.t_span
    t, y, h = t0, ivp.y0.copy(), cfg.h_init
    trace = SolverTrace([Step(t0, y, 0.0, 0.0, True)])
    while t < t1:
        clipped = t + h >= t1
        dt = t1 - t if clipped else h
        res = rkf_step(ivp.rhs, t, y, dt, cfg)
        if res.err <= cfg.tol:
            t = t1 if clipped else t + dt
            y = res.y
            trace.steps.append(Step(t, y, dt, res.err, True))
            h = res.h_next
        else:
            trace.steps.append(Step(t + dt, res.y, dt, res.err, False))
            if dt <= cfg.h_min:
                raise SolverError(
                    f"step size floor {cfg.h_min} reached at t={t} with error {res.err:.3e} > tol {cfg.tol}",
                    len(trace.steps) - 1,
                )
            h = res.h_next
    return trace
