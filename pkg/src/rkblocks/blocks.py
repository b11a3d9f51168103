"""Residual blocks written as steps of explicit ODE integrators.

Each block receives the input state ``y`` and a callable ``f`` that evaluates
the block's vector field with its (shared) parameters. Integrator
coefficients live in :class:`Tableau`; the classical-integration oracle in
:mod:`rkblocks.oracle` reuses the same tableaus.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

Field = Callable[[Tensor], Tensor]
Coef = Union[float, Tensor]


class Scheme(str, enum.Enum):
    EULER = "euler"
    RK2 = "rk2"
    RK2_G1 = "rk2-g1"
    RK2_LEARN = "rk2-learn"
    RK4 = "rk4"
    RK4_LEARN = "rk4-learn"
    LEAPFROG = "leapfrog"
    MULTISTEP = "multistep"
    DLCL = "dlcl"
    POLYNET = "polynet"


ALL_SCHEMES = tuple(Scheme)


@dataclass(frozen=True)
class Tableau:
    """Explicit Runge-Kutta coefficients. ``beta[i]`` holds beta_ij for j < i."""

    alpha: tuple
    beta: tuple
    gamma: tuple
    order: Optional[int]

    @property
    def stages(self) -> int:
        return len(self.gamma)


EULER_TABLEAU = Tableau((0.0,), ((),), (1.0,), 1)
RK2_TABLEAU = Tableau((0.0, 1.0), ((), (1.0,)), (0.5, 0.5), 2)
# gamma = (1, 1) is not a consistent integrator; kept for the gradient-flow variant.
RK2_GAMMA1_TABLEAU = Tableau((0.0, 1.0), ((), (1.0,)), (1.0, 1.0), None)
RK4_TABLEAU = Tableau(
    (0.0, 0.5, 0.5, 1.0),
    ((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
    (1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0),
    4,
)

_TABLEAUS = {
    Scheme.EULER: EULER_TABLEAU,
    Scheme.RK2: RK2_TABLEAU,
    Scheme.RK2_G1: RK2_GAMMA1_TABLEAU,
    Scheme.RK2_LEARN: RK2_GAMMA1_TABLEAU,
    Scheme.RK4: RK4_TABLEAU,
    Scheme.RK4_LEARN: RK4_TABLEAU,
}

# Field evaluations per block forward pass.
STAGE_COUNTS = {
    Scheme.EULER: 1,
    Scheme.RK2: 2,
    Scheme.RK2_G1: 2,
    Scheme.RK2_LEARN: 2,
    Scheme.RK4: 4,
    Scheme.RK4_LEARN: 4,
    Scheme.POLYNET: 2,
    Scheme.LEAPFROG: 1,
    Scheme.MULTISTEP: 1,
    Scheme.DLCL: 1,
}

LEARNABLE_GAMMA = (Scheme.RK2_LEARN, Scheme.RK4_LEARN)
MULTISTEP_FAMILY = (Scheme.LEAPFROG, Scheme.MULTISTEP, Scheme.DLCL)


def parse_scheme(name) -> Scheme:
    try:
        return Scheme(name)
    except ValueError:
        choices = " | ".join(s.value for s in Scheme)
        raise ConfigError(f"unknown scheme {name!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class BlockScheme:
    kind: Scheme
    h: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_scheme(self.kind))
        if not self.h > 0:
            raise ConfigError("step size h must be positive")

    @property
    def tableau(self) -> Optional[Tableau]:
        return _TABLEAUS.get(self.kind)

    @property
    def stage_count(self) -> int:
        return STAGE_COUNTS[self.kind]


@dataclass
class BlockParams:
    """Everything a block owns: the shared field parameters plus scheme scalars."""

    theta: object
    gamma: Optional[Tensor] = None
    k: Optional[Tensor] = None
    dlcl_weights: Optional[Tensor] = None

    @classmethod
    def create(cls, scheme: Scheme, theta, index: int = 0) -> "BlockParams":
        scheme = parse_scheme(scheme)
        p = cls(theta)
        if scheme in LEARNABLE_GAMMA:
            p.gamma = Tensor(np.ones(STAGE_COUNTS[scheme]), requires_grad=True)
        elif scheme == Scheme.MULTISTEP:
            p.k = Tensor(np.ones(1), requires_grad=True)
        elif scheme == Scheme.DLCL:
            p.dlcl_weights = Tensor(np.ones(index + 1), requires_grad=True)
        return p

    def scheme_tensors(self):
        for name in ("gamma", "k", "dlcl_weights"):
            t = getattr(self, name)
            if t is not None:
                yield name, t


@dataclass
class BlockState:
    """Cross-block memory needed by the multistep-style schemes."""

    y0: Optional[Tensor] = None
    y_prev: Optional[Tensor] = None
    history: list = field(default_factory=list)

    @classmethod
    def start(cls, y0: Tensor) -> "BlockState":
        return cls(y0=y0)


def _times(x: Tensor, c: Coef) -> Tensor:
    if isinstance(c, Tensor):
        return ad.mul(x, c)
    return ad.scale(x, c)


def _stage(f: Field, arg: Tensor, h: float) -> Tensor:
    out = f(arg)
    return out if h == 1.0 else ad.scale(out, h)


# -- single-step schemes --------------------------------------------------

def euler_block(y: Tensor, f: Field, h: float = 1.0) -> Tensor:
    return ad.add(y, _stage(f, y, h))


def rk_block(y: Tensor, f: Field, tableau: Tableau, gamma: Union[None, Sequence[float], Tensor] = None,
             h: float = 1.0) -> Tensor:
    """One explicit RK step with the time argument dropped (autonomous field).

    ``gamma`` overrides the tableau weights; a Tensor makes them learnable.
    """
    weights = tableau.gamma if gamma is None else gamma
    n = tableau.stages
    if len(weights) != n:
        raise ContractError(f"expected {n} combination weights, got {len(weights)}")
    stages = []
    for row in tableau.beta:
        arg = y
        for j, b in enumerate(row):
            if b != 0.0:
                arg = ad.add(arg, ad.scale(stages[j], b))
        stages.append(_stage(f, arg, h))
    out = y
    for i, s in enumerate(stages):
        w = weights[i] if isinstance(weights, Tensor) else float(weights[i])
        out = ad.add(out, _times(s, w))
    return out


def rk2_block(y: Tensor, f: Field, gamma=(0.5, 0.5), h: float = 1.0) -> Tensor:
    """F1 = F(y); F2 = F(y + F1); y + g1*F1 + g2*F2."""
    return rk_block(y, f, RK2_TABLEAU, gamma, h)


def rk4_block(y: Tensor, f: Field, gamma=None, h: float = 1.0) -> Tensor:
    return rk_block(y, f, RK4_TABLEAU, gamma, h)


def polynet_block(y: Tensor, f: Field, h: float = 1.0) -> Tensor:
    """y + F(y) + F(F(y)); the inner call sees F(y), not y + F(y)."""
    f1 = _stage(f, y, h)
    f2 = _stage(f, f1, h)
    return ad.add(ad.add(y, f1), f2)


# -- schemes that look back across blocks --------------------------------

def leapfrog_block(y: Tensor, state: BlockState, f: Field, h: float = 1.0,
                   fallback: bool = True) -> Tensor:
    """y_prev + 2 F(y). Without a previous state the block takes an Euler step."""
    if state.y_prev is None:
        if not fallback:
            raise ContractError("leapfrog block needs the previous block input")
        out = euler_block(y, f, h)
    else:
        out = ad.add(state.y_prev, ad.scale(_stage(f, y, h), 2.0))
    state.y_prev = y
    return out


def multistep_block(y: Tensor, state: BlockState, f: Field, k: Coef, h: float = 1.0,
                    fallback: bool = True) -> Tensor:
    """k*y + (1-k)*y_prev + F(y); the first block falls back to Euler."""
    if state.y_prev is None:
        if not fallback:
            raise ContractError("multistep block needs the previous block input")
        out = euler_block(y, f, h)
    else:
        one_minus_k = ad.sub(1.0, k) if isinstance(k, Tensor) else 1.0 - float(k)
        mixed = ad.add(_times(y, k), _times(state.y_prev, one_minus_k))
        out = ad.add(mixed, _stage(f, y, h))
    state.y_prev = y
    return out


def dlcl_block(y: Tensor, state: BlockState, f: Field, weights, h: float = 1.0) -> Tensor:
    """y0 + sum_l W_l F(y_l) over this and all earlier blocks."""
    if state.y0 is None:
        raise ContractError("DLCL block needs the initial embedding y0 in its state")
    t = len(state.history)
    if len(weights) != t + 1:
        raise ContractError(f"DLCL block {t} needs {t + 1} weights, got {len(weights)}")
    state.history.append(_stage(f, y, h))
    out = state.y0
    for l, fl in enumerate(state.history):
        w = weights[l] if isinstance(weights, Tensor) else float(weights[l])
        out = ad.add(out, _times(fl, w))
    state.y_prev = y
    return out


def apply_block(scheme: BlockScheme, y: Tensor, f: Field, params: BlockParams,
                state: Optional[BlockState] = None) -> Tensor:
    """Dispatch one block of ``scheme`` given its parameters and stack state."""
    kind, h = scheme.kind, scheme.h
    if kind == Scheme.EULER:
        return euler_block(y, f, h)
    if kind == Scheme.RK2:
        return rk2_block(y, f, RK2_TABLEAU.gamma, h)
    if kind == Scheme.RK2_G1:
        return rk2_block(y, f, RK2_GAMMA1_TABLEAU.gamma, h)
    if kind == Scheme.RK4:
        return rk4_block(y, f, None, h)
    if kind in LEARNABLE_GAMMA:
        if params.gamma is None:
            raise ContractError(f"{kind.value} block has no learnable gamma")
        return rk_block(y, f, scheme.tableau, params.gamma, h)
    if kind == Scheme.POLYNET:
        return polynet_block(y, f, h)
    if state is None:
        raise ContractError(f"{kind.value} block needs a BlockState")
    if kind == Scheme.LEAPFROG:
        return leapfrog_block(y, state, f, h)
    if kind == Scheme.MULTISTEP:
        if params.k is None:
            raise ContractError("multistep block has no mixing scalar k")
        return multistep_block(y, state, f, params.k[0], h)
    if kind == Scheme.DLCL:
        if params.dlcl_weights is None:
            raise ContractError("DLCL block has no aggregation weights")
        return dlcl_block(y, state, f, params.dlcl_weights, h)
    raise ContractError(f"unsupported scheme {kind}")


# -- gradient-flow analysis on the scalar surrogate F(y) = a*y ------------

class ScalarSurrogate:
    """Linear field F(y) = a*y with a learnable scalar ``a`` (no layer norm)."""

    def __init__(self, a: float):
        self.a = Tensor(np.array(a), requires_grad=True)
        self.calls = 0

    def __call__(self, y: Tensor) -> Tensor:
        self.calls += 1
        return ad.mul(y, self.a)


_SCALAR_FACTORS = {
    Scheme.EULER: lambda a: 1.0 + a,
    Scheme.RK2: lambda a: 1.0 + a + a * a / 2.0,
    Scheme.RK2_G1: lambda a: (1.0 + a) ** 2,
    Scheme.RK4: lambda a: 1.0 + a + a ** 2 / 2.0 + a ** 3 / 6.0 + a ** 4 / 24.0,
    Scheme.POLYNET: lambda a: 1.0 + a + a * a,
}


def block_gradient_scalar(scheme, a: float, L: int, t: int) -> float:
    """Closed-form d y_L / d y_t for a stack of blocks with F(y) = a*y.

    Per block the RK2 Jacobian is (1 + (1+a)^2) / 2 and the gamma = 1 variant
    gives (1+a)^2; the stack multiplies L - t such factors.
    """
    scheme = parse_scheme(scheme)
    if scheme not in _SCALAR_FACTORS:
        raise ContractError(f"no closed-form gradient factor for scheme {scheme.value}")
    if not abs(a) < 1:
        raise ContractError(f"surrogate slope must satisfy |a| < 1, got {a}")
    if not 0 <= t <= L:
        raise ContractError(f"need 0 <= t <= L, got t={t}, L={L}")
    return _SCALAR_FACTORS[scheme](a) ** (L - t)


def rk2_jacobian_factor(dfy: float, dfz: float, gamma=(0.5, 0.5)) -> float:
    """d y_{k+1} / d y_k for an RK2 block, given F'(y_k) and F'(z_k), z_k = y_k + F(y_k).

    For gamma = (1/2, 1/2) this equals (1 + g)/2 and for gamma = (1, 1) it is
    g, where g = (1 + F'(y_k)) (1 + F'(z_k)).
    """
    g1, g2 = gamma
    return 1.0 + g1 * dfy + g2 * dfz * (1.0 + dfy)


def surrogate_stack(scheme, a: float, L: int, y0: float = 1.0, h: float = 1.0):
    """Run ``L`` blocks of ``scheme`` on the scalar surrogate.

    Returns ``(ys, surrogate)`` where ``ys[t]`` is the input of block t and
    ``ys[L]`` the output; every entry keeps its gradient after backward.
    """
    scheme = BlockScheme(parse_scheme(scheme), h)
    f = ScalarSurrogate(a)
    y = Tensor(np.array([y0]), requires_grad=True)
    ys = [y]
    state = BlockState.start(y)
    for t in range(L):
        params = BlockParams.create(scheme.kind, f, t)
        y = apply_block(scheme, y, f, params, state)
        ys.append(y)
    return ys, f
