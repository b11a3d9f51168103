"""Hard numerical checks: finite-difference gradients, analytic gradient factors, ODE orders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .blocks import ALL_SCHEMES, Scheme, block_gradient_scalar, parse_scheme, surrogate_stack
from .model import ModelConfig, build_model
from .oracle import ORDER_BANDS, PROBLEMS, convergence_order

GRADCHECK_TOL = 1e-4
GRADFACTOR_TOL = 1e-10


@dataclass
class GradcheckResult:
    scheme: str
    max_rel_error: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < GRADCHECK_TOL)


def gradcheck_scheme(scheme, d_model: int = 8, seq: int = 4, depth: int = 2, n_heads: int = 2,
                     seed: int = 0, eps: float = 1e-5, init_std: float = 0.3,
                     granularity: str = "merged", max_coords: Optional[int] = 24) -> GradcheckResult:
    """Finite-difference check of a ``depth``-block stack w.r.t. its input and every parameter.

    Dropout is off. Scheme scalars (gamma, k, DLCL weights) are moved away
    from their initial value of 1 so that they are exercised nontrivially.
    The input and the scheme scalars are checked on every coordinate; each
    field parameter tensor on at most ``max_coords`` random coordinates
    (``None`` checks all of them).
    """
    cfg = ModelConfig(depth=depth, d_model=d_model, n_heads=n_heads, dropout=0.0,
                      scheme=parse_scheme(scheme).value, granularity=granularity,
                      vocab_size=4, max_seq_len=seq, seed=seed, init_std=init_std)
    model = build_model(cfg)
    rng = np.random.default_rng(seed + 1000)
    for blk in model.blocks:
        for _, t in blk.params.scheme_tensors():
            t.data[...] = rng.uniform(0.5, 1.5, size=t.shape)
        # non-trivial LayerNorm affine parameters
        for name, t in blk.theta.named_tensors():
            if name.endswith("gain") or name.endswith("bias"):
                t.data[...] += rng.uniform(-0.3, 0.3, size=t.shape)
    y = Tensor(rng.uniform(-1.0, 1.0, size=(seq, d_model)))
    readout = rng.uniform(-1.0, 1.0, size=(seq, d_model))

    def loss_fn(_):
        out = model.run_blocks(y, train=False)
        return ad.tsum(ad.mul(out, readout))

    worst = finite_diff_check(loss_fn, y, eps)
    n = y.size
    for blk in model.blocks:
        for _, t in blk.params.scheme_tensors():
            worst = max(worst, finite_diff_check(loss_fn, t, eps))
            n += t.size
        for _, t in blk.theta.named_tensors():
            coords = None
            if max_coords is not None and t.size > max_coords:
                coords = rng.choice(t.size, size=max_coords, replace=False)
            worst = max(worst, finite_diff_check(loss_fn, t, eps, coords))
            n += t.size if coords is None else len(coords)
    return GradcheckResult(parse_scheme(scheme).value, worst, n)


def gradcheck_all(**kwargs) -> list:
    return [gradcheck_scheme(s, **kwargs) for s in ALL_SCHEMES]


@dataclass
class GradFactorRow:
    t: int
    rk2_autodiff: float
    rk2_analytic: float
    rk2_g1_autodiff: float
    rk2_g1_analytic: float

    @property
    def ratio(self) -> float:
        return self.rk2_autodiff / self.rk2_g1_autodiff

    @property
    def max_rel_error(self) -> float:
        e1 = abs(self.rk2_autodiff - self.rk2_analytic) / abs(self.rk2_analytic)
        e2 = abs(self.rk2_g1_autodiff - self.rk2_g1_analytic) / abs(self.rk2_g1_analytic)
        return max(e1, e2)


def stack_gradients(scheme, a: float, L: int) -> list:
    """Autodiff d y_L / d y_t for t = 0..L-1 on the scalar surrogate stack."""
    ys, _ = surrogate_stack(scheme, a, L)
    ys[-1].backward()
    return [float(ys[t].grad[0]) for t in range(L)]


def gradfactor_table(a: float, L: int) -> list:
    rk2 = stack_gradients(Scheme.RK2, a, L)
    g1 = stack_gradients(Scheme.RK2_G1, a, L)
    return [GradFactorRow(t, rk2[t], block_gradient_scalar(Scheme.RK2, a, L, t),
                          g1[t], block_gradient_scalar(Scheme.RK2_G1, a, L, t)) for t in range(L)]


@dataclass
class OrderRow:
    scheme: str
    h: float
    error: float
    fitted_order: float

    @property
    def in_band(self) -> bool:
        lo, hi = ORDER_BANDS[self.scheme]
        return lo <= self.fitted_order <= hi


def odecheck(problem: str = "forced", h_list=(0.1, 0.05, 0.025, 0.0125),
             schemes=("euler", "rk2", "rk4")) -> list:
    prob = PROBLEMS[problem]()
    rows = []
    for s in schemes:
        rep = convergence_order(prob, s, h_list)
        rows += [OrderRow(s, h, e, rep.order) for h, e in zip(rep.h, rep.errors)]
    return rows
