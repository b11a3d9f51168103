"""Classical explicit Runge-Kutta integration on analytic ODEs.

This is the numerical ground truth for the block tableaus: integrate a
problem with a known solution at several step sizes and fit the observed
order of the global error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .blocks import EULER_TABLEAU, RK2_TABLEAU, RK4_TABLEAU, Tableau
from .errors import ContractError, DivergenceError

ORACLE_TABLEAUS = {"euler": EULER_TABLEAU, "rk2": RK2_TABLEAU, "rk4": RK4_TABLEAU}


@dataclass
class ODEProblem:
    f: Callable[[np.ndarray, float], np.ndarray]
    y0: np.ndarray
    t_span: tuple
    exact: Optional[Callable[[float], np.ndarray]] = None
    name: str = ""

    def __post_init__(self):
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=np.float64))
        t0, t1 = self.t_span
        if not t1 > t0:
            raise ContractError(f"t_span must satisfy t1 > t0, got {self.t_span}")
        if self.exact is not None and not np.allclose(self.exact(t0), self.y0, rtol=0, atol=1e-12):
            raise ContractError("exact(t0) does not match y0")


@dataclass
class ConvergenceReport:
    scheme: str
    h: list
    errors: list
    order: float
    degenerate: bool = False
    fit_h: list = field(default_factory=list)


def _tableau(scheme) -> Tableau:
    if isinstance(scheme, Tableau):
        return scheme
    try:
        return ORACLE_TABLEAUS[str(getattr(scheme, "value", scheme))]
    except KeyError:
        raise ContractError(f"oracle supports {sorted(ORACLE_TABLEAUS)}, got {scheme!r}") from None


def _n_steps(problem: ODEProblem, h: float) -> int:
    t0, t1 = problem.t_span
    n = int(round((t1 - t0) / h))
    if n < 1 or abs(n * h - (t1 - t0)) > 1e-9 * max(1.0, abs(t1 - t0)):
        raise ContractError(f"step size {h} does not divide the interval {problem.t_span}")
    return n


def rk_step(f, y: np.ndarray, t: float, h: float, tab: Tableau) -> np.ndarray:
    """One non-autonomous explicit RK step: stages at t + alpha_i h."""
    k = []
    for alpha, row in zip(tab.alpha, tab.beta):
        arg = y
        for j, b in enumerate(row):
            if b != 0.0:
                arg = arg + b * k[j]
        k.append(h * np.asarray(f(arg, t + alpha * h), dtype=np.float64))
    out = y
    for g, ki in zip(tab.gamma, k):
        out = out + g * ki
    return out


def integrate(problem: ODEProblem, scheme, h: float):
    """Fixed-step integration over ``problem.t_span``. Returns ``(ts, ys)``."""
    tab = _tableau(scheme)
    n = _n_steps(problem, h)
    t0 = problem.t_span[0]
    ts = t0 + h * np.arange(n + 1)
    ys = np.empty((n + 1,) + problem.y0.shape)
    ys[0] = problem.y0
    y = problem.y0
    for i in range(n):
        y = rk_step(problem.f, y, ts[i], h, tab)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite state at step {i + 1}", step=i + 1)
        ys[i + 1] = y
    return ts, ys


def global_error(problem: ODEProblem, scheme, h: float) -> float:
    """Max-norm distance between the numerical and exact solution at t1."""
    if problem.exact is None:
        raise ContractError("global_error needs a problem with an exact solution")
    _, ys = integrate(problem, scheme, h)
    return float(np.max(np.abs(ys[-1] - problem.exact(problem.t_span[1]))))


def convergence_order(problem: ODEProblem, scheme, h_list: Sequence[float],
                      n_fit: int = 4) -> ConvergenceReport:
    """Least-squares slope of log(error) against log(h) over the ``n_fit`` smallest h."""
    hs = sorted({float(h) for h in h_list}, reverse=True)
    if len(hs) < 4:
        raise ContractError("convergence_order needs at least 4 distinct step sizes")
    errors = [global_error(problem, scheme, h) for h in hs]
    name = str(getattr(scheme, "value", scheme))
    fit_h = hs[-n_fit:]
    fit_e = errors[-n_fit:]
    if min(fit_e) <= 0.0:
        return ConvergenceReport(name, hs, errors, math.nan, degenerate=True, fit_h=fit_h)
    slope = float(np.polyfit(np.log(fit_h), np.log(fit_e), 1)[0])
    return ConvergenceReport(name, hs, errors, slope, fit_h=fit_h)


# -- the fixed test-problem set ----------------------------------------

def decay_problem(t1: float = 1.0) -> ODEProblem:
    """dy/dt = -y, y(0) = 1."""
    return ODEProblem(lambda y, t: -y, np.array([1.0]), (0.0, t1),
                      lambda t: np.array([math.exp(-t)]), name="decay")


def forced_decay_problem(t1: float = 1.0) -> ODEProblem:
    """dy/dt = -y + cos t, y(0) = 1; y = (cos t + sin t)/2 + exp(-t)/2."""
    return ODEProblem(lambda y, t: -y + math.cos(t), np.array([1.0]), (0.0, t1),
                      lambda t: np.array([0.5 * (math.cos(t) + math.sin(t)) + 0.5 * math.exp(-t)]),
                      name="forced")


_ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])


def rotation_problem(t1: float = 1.0) -> ODEProblem:
    """dy/dt = [[0, 1], [-1, 0]] y, y(0) = (1, 0); the norm is conserved."""

    def exact(t):
        c, s = math.cos(t), math.sin(t)
        return np.array([c, -s])

    return ODEProblem(lambda y, t: _ROT @ y, np.array([1.0, 0.0]), (0.0, t1), exact, name="rotation")


def constant_problem(c=1.0, t1: float = 1.0) -> ODEProblem:
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    return ODEProblem(lambda y, t: c, np.zeros_like(c), (0.0, t1), lambda t: c * t, name="constant")


def zero_problem(y0=1.0, t1: float = 1.0) -> ODEProblem:
    y0 = np.atleast_1d(np.asarray(y0, dtype=np.float64))
    return ODEProblem(lambda y, t: np.zeros_like(y), y0, (0.0, t1), lambda t: y0.copy(), name="zero")


PROBLEMS = {
    "decay": decay_problem,
    "forced": forced_decay_problem,
    "rotation": rotation_problem,
}

THEORETICAL_ORDER = {"euler": 1, "rk2": 2, "rk4": 4}
ORDER_BANDS = {"euler": (0.85, 1.15), "rk2": (1.85, 2.15), "rk4": (3.7, 4.3)}
