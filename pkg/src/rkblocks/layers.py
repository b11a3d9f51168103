"""Pre-norm Transformer sublayers and the vector field F(y) = G(LN(y)).

The ODE blocks never look inside F: they only call ``field(y, theta, kind)``
one or more times per block with a shared parameter set ``theta``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as dc_field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, DimensionError


class FieldKind(str, enum.Enum):
    """What a single ODE block integrates."""

    SAN = "san"
    FFN = "ffn"
    MERGED = "merged"


class FGranularity(str, enum.Enum):
    """How a Transformer layer is carved into ODE blocks.

    PER_SUBLAYER: SAN and FFN are separate ODE blocks, both using the scheme.
    SAN / FFN: only that sublayer is integrated with the scheme; the other
    stays a plain residual (Euler) sublayer.
    MERGED: SAN followed by FFN forms one field F.
    """

    PER_SUBLAYER = "per-sublayer"
    SAN = "san"
    FFN = "ffn"
    MERGED = "merged"


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise DimensionError(f"LayerNorm gain {self.gain.shape} / bias {self.bias.shape} mismatch")
        if self.epsilon <= 0:
            raise ConfigError("LayerNorm epsilon must be positive")

    @classmethod
    def create(cls, d_model: int, epsilon: float = 1e-5) -> "LayerNormParams":
        return cls(Tensor(np.ones(d_model), requires_grad=True),
                   Tensor(np.zeros(d_model), requires_grad=True), epsilon)

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "gain", self.gain
        yield prefix + "bias", self.bias


@dataclass
class AttentionParams:
    qkv_proj: Tensor  # d x 3d
    q_bias: Tensor  # d
    v_bias: Tensor  # d; keys carry no bias (softmax ignores a shift shared by all keys)
    out_proj: Tensor  # d x d
    out_bias: Tensor  # d
    n_heads: int

    def __post_init__(self):
        d = self.qkv_proj.shape[0]
        if self.n_heads <= 0 or d % self.n_heads:
            raise ConfigError(f"d_model={d} is not divisible by n_heads={self.n_heads}")
        if self.qkv_proj.shape != (d, 3 * d) or self.out_proj.shape != (d, d):
            raise DimensionError(
                f"attention projections {self.qkv_proj.shape}, {self.out_proj.shape} inconsistent")

    @property
    def d_model(self) -> int:
        return self.qkv_proj.shape[0]

    @classmethod
    def create(cls, d_model: int, n_heads: int, rng: np.random.Generator,
               std: float = 0.02) -> "AttentionParams":
        if n_heads <= 0 or d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        return cls(
            Tensor(truncated_normal(rng, (d_model, 3 * d_model), std), requires_grad=True),
            Tensor(np.zeros(d_model), requires_grad=True),
            Tensor(np.zeros(d_model), requires_grad=True),
            Tensor(truncated_normal(rng, (d_model, d_model), std), requires_grad=True),
            Tensor(np.zeros(d_model), requires_grad=True),
            n_heads,
        )

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "qkv_proj", self.qkv_proj
        yield prefix + "q_bias", self.q_bias
        yield prefix + "v_bias", self.v_bias
        yield prefix + "out_proj", self.out_proj
        yield prefix + "out_bias", self.out_bias


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d, inner = self.w1.shape
        if self.w2.shape != (inner, d) or self.b1.shape != (inner,) or self.b2.shape != (d,):
            raise DimensionError(f"FFN weights {self.w1.shape}/{self.w2.shape} inconsistent")

    @classmethod
    def create(cls, d_model: int, d_inner: int, rng: np.random.Generator,
               std: float = 0.02) -> "FFNParams":
        return cls(
            Tensor(truncated_normal(rng, (d_model, d_inner), std), requires_grad=True),
            Tensor(np.zeros(d_inner), requires_grad=True),
            Tensor(truncated_normal(rng, (d_inner, d_model), std), requires_grad=True),
            Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "w1", self.w1
        yield prefix + "b1", self.b1
        yield prefix + "w2", self.w2
        yield prefix + "b2", self.b2


@dataclass
class FieldParams:
    """Parameters of one vector field; shared by every stage of a block."""

    kind: FieldKind
    ln_attn: Optional[LayerNormParams] = None
    attn: Optional[AttentionParams] = None
    ln_ffn: Optional[LayerNormParams] = None
    ffn: Optional[FFNParams] = None

    def __post_init__(self):
        self.kind = FieldKind(self.kind)
        has_attn = self.attn is not None and self.ln_attn is not None
        has_ffn = self.ffn is not None and self.ln_ffn is not None
        wanted = {FieldKind.SAN: (True, False), FieldKind.FFN: (False, True),
                  FieldKind.MERGED: (True, True)}[self.kind]
        if (has_attn, has_ffn) != wanted:
            raise ConfigError(f"{self.kind.value} field got attention={has_attn}, ffn={has_ffn}")

    @classmethod
    def create(cls, kind: FieldKind, d_model: int, n_heads: int, d_ffn: int,
               rng: np.random.Generator, std: float = 0.02, ln_eps: float = 1e-5) -> "FieldParams":
        kind = FieldKind(kind)
        kw = {}
        if kind in (FieldKind.SAN, FieldKind.MERGED):
            kw["ln_attn"] = LayerNormParams.create(d_model, ln_eps)
            kw["attn"] = AttentionParams.create(d_model, n_heads, rng, std)
        if kind in (FieldKind.FFN, FieldKind.MERGED):
            kw["ln_ffn"] = LayerNormParams.create(d_model, ln_eps)
            kw["ffn"] = FFNParams.create(d_model, d_ffn, rng, std)
        return cls(kind, **kw)

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        if self.attn is not None:
            yield from self.ln_attn.named_tensors(prefix + "ln_attn.")
            yield from self.attn.named_tensors(prefix + "attn.")
        if self.ffn is not None:
            yield from self.ln_ffn.named_tensors(prefix + "ln_ffn.")
            yield from self.ffn.named_tensors(prefix + "ffn.")


@dataclass
class Dropout:
    """Dropout setting handed down to F. ``rng=None`` or ``p=0`` disables it."""

    p: float = 0.0
    rng: Optional[np.random.Generator] = dc_field(default=None, repr=False)

    @property
    def active(self) -> bool:
        return self.p > 0.0 and self.rng is not None


NO_DROPOUT = Dropout()


# -- sublayers -------------------------------------------------------------

def layer_norm(y: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    d = p.gain.shape[0]
    if y.shape[-1] != d:
        raise DimensionError(f"layer_norm: last axis {y.shape[-1]} != d_model {d}")
    x = y.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + p.epsilon)
    xhat = xc * rstd
    gain = p.gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor._result(xhat * gain + p.bias.data, (y, p.gain, p.bias), backward)


_causal_cache: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    m = _causal_cache.get(t)
    if m is None:
        m = np.triu(np.ones((t, t), dtype=bool), k=1)
        _causal_cache[t] = m
    return m


def self_attention(y: Tensor, p: AttentionParams, causal: bool = True,
                   dropout: Dropout = NO_DROPOUT) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``[batch,] seq, d``."""
    squeeze = y.ndim == 2
    if squeeze:
        y = y.reshape((1,) + y.shape)
    b, t, d = y.shape
    if d != p.d_model:
        raise DimensionError(f"self_attention: input width {d} != d_model {p.d_model}")
    h = p.n_heads
    dh = d // h
    qkv = ad.transpose(ad.matmul(y, p.qkv_proj).reshape(b, t, 3, h, dh), (2, 0, 3, 1, 4))
    q = ad.add(qkv[0], p.q_bias.reshape(h, 1, dh))
    k = qkv[1]
    v = ad.add(qkv[2], p.v_bias.reshape(h, 1, dh))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        scores = ad.masked_fill(scores, _causal_mask(t), -np.inf)
    weights = ad.softmax(scores, axis=-1)
    if dropout.active:
        weights = ad.dropout(weights, dropout.p, dropout.rng)
    ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)).reshape(b, t, d)
    out = ad.add(ad.matmul(ctx, p.out_proj), p.out_bias)
    if squeeze:
        out = out.reshape(t, d)
    return out


def ffn(y: Tensor, p: FFNParams, dropout: Dropout = NO_DROPOUT) -> Tensor:
    """Position-wise w2 . relu(w1 . y + b1) + b2."""
    if y.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"ffn: input width {y.shape[-1]} != {p.w1.shape[0]}")
    hidden = ad.relu(ad.add(ad.matmul(y, p.w1), p.b1))
    if dropout.active:
        hidden = ad.dropout(hidden, dropout.p, dropout.rng)
    return ad.add(ad.matmul(hidden, p.w2), p.b2)


def field(y: Tensor, theta: FieldParams, kind: Optional[FieldKind] = None, *,
          causal: bool = True, dropout: Dropout = NO_DROPOUT) -> Tensor:
    """Evaluate F(y, theta) without the residual connection.

    For the merged field, F(y) = s + ffn(LN(y + s)) with s = attn(LN(y)), so
    that ``y + F(y)`` is exactly a Pre-norm SAN sublayer followed by a
    Pre-norm FFN sublayer.
    """
    kind = theta.kind if kind is None else FieldKind(kind)
    if kind != theta.kind:
        raise ConfigError(f"field kind {kind.value} does not match parameters for {theta.kind.value}")
    if kind == FieldKind.SAN:
        return self_attention(layer_norm(y, theta.ln_attn), theta.attn, causal, dropout)
    if kind == FieldKind.FFN:
        return ffn(layer_norm(y, theta.ln_ffn), theta.ffn, dropout)
    s = self_attention(layer_norm(y, theta.ln_attn), theta.attn, causal, dropout)
    return ad.add(s, ffn(layer_norm(ad.add(y, s), theta.ln_ffn), theta.ffn, dropout))


def prenorm_layer(y: Tensor, theta: FieldParams, causal: bool = True) -> Tensor:
    """Reference two-sublayer Pre-norm layer: residual SAN then residual FFN."""
    y1 = ad.add(y, self_attention(layer_norm(y, theta.ln_attn), theta.attn, causal))
    return ad.add(y1, ffn(layer_norm(y1, theta.ln_ffn), theta.ffn))


def sinusoidal_positions(n_pos: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    out = np.zeros((n_pos, d_model))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return out


# -- loss ------------------------------------------------------------------

def cross_entropy_ls(logits: Tensor, targets, epsilon: float = 0.0,
                     mask: Optional[np.ndarray] = None) -> Tensor:
    """Label-smoothed cross entropy averaged over (unmasked) positions.

    Per position the loss is (1 - eps) * nll(target) + eps * mean_v nll(v).
    """
    v = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise DataError(f"target ids must lie in [0, {v}), got range "
                        f"[{targets.min()}, {targets.max()}]")
    z = logits.data.reshape(-1, v)
    if z.shape[0] != targets.size:
        raise DimensionError(f"{z.shape[0]} logit rows for {targets.size} targets")
    w = np.ones(targets.size) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise DataError("cross_entropy_ls: every position is masked out")
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(targets.size)
    per_pos = -(1.0 - epsilon) * logp[rows, targets] - epsilon * logp.mean(axis=1)
    loss = float((per_pos * w).sum() / total)
    shape = logits.shape

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0 - epsilon
        grad -= epsilon / v
        grad *= (w / total)[:, None] * g
        return (grad.reshape(shape),)

    return Tensor._result(np.array(loss), (logits,), backward)


def count_params(tensors) -> int:
    return int(sum(t.size for t in tensors))
