"""Decoder-only language model whose layers are ODE blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    MULTISTEP_FAMILY,
    BlockParams,
    BlockScheme,
    BlockState,
    Scheme,
    apply_block,
    parse_scheme,
)
from .errors import ConfigError, DataError
from .layers import (
    NO_DROPOUT,
    Dropout,
    FGranularity,
    FieldKind,
    FieldParams,
    LayerNormParams,
    field,
    layer_norm,
    sinusoidal_positions,
    truncated_normal,
)


@dataclass
class ModelConfig:
    depth: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ffn: int = 0  # 0 means 4 * d_model
    dropout: float = 0.1
    scheme: str = "euler"
    granularity: str = "merged"
    vocab_size: int = 16
    max_seq_len: int = 64
    seed: int = 0
    step_size: float = 1.0
    init_std: float = 0.02

    def __post_init__(self):
        self.scheme = parse_scheme(self.scheme).value
        try:
            self.granularity = FGranularity(self.granularity).value
        except ValueError:
            raise ConfigError(f"unknown granularity {self.granularity!r}") from None
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        for name in ("d_model", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.d_ffn < 0:
            raise ConfigError("d_ffn must be positive (or 0 for 4*d_model)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.step_size <= 0 or self.init_std <= 0:
            raise ConfigError("step_size and init_std must be positive")
        if (self.granularity in (FGranularity.SAN.value, FGranularity.FFN.value)
                and Scheme(self.scheme) in MULTISTEP_FAMILY):
            raise ConfigError(f"scheme {self.scheme} needs every sublayer inside the scheme; "
                              f"use granularity merged or per-sublayer")

    @property
    def inner_dim(self) -> int:
        return self.d_ffn or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ODEBlock:
    scheme: BlockScheme
    params: BlockParams

    @property
    def theta(self) -> FieldParams:
        return self.params.theta


def block_layout(granularity, scheme) -> list:
    """(field kind, scheme) pairs making up one Transformer layer."""
    g = FGranularity(granularity)
    s = parse_scheme(scheme)
    if g == FGranularity.MERGED:
        return [(FieldKind.MERGED, s)]
    if g == FGranularity.PER_SUBLAYER:
        return [(FieldKind.SAN, s), (FieldKind.FFN, s)]
    if g == FGranularity.SAN:
        return [(FieldKind.SAN, s), (FieldKind.FFN, Scheme.EULER)]
    return [(FieldKind.SAN, Scheme.EULER), (FieldKind.FFN, s)]


class Model:
    """Embedding -> ODE blocks -> final LayerNorm -> tied output projection."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        init_rng = np.random.default_rng(seeds[0])
        self.dropout_rng = np.random.default_rng(seeds[1])
        d = cfg.d_model
        self.embed = Tensor(truncated_normal(init_rng, (cfg.vocab_size, d), cfg.init_std),
                            requires_grad=True)
        self.positions = sinusoidal_positions(cfg.max_seq_len, d)
        self.blocks: list[ODEBlock] = []
        n_scheme_blocks = 0
        for _ in range(cfg.depth):
            for kind, scheme in block_layout(cfg.granularity, cfg.scheme):
                theta = FieldParams.create(kind, d, cfg.n_heads, cfg.inner_dim, init_rng, cfg.init_std)
                params = BlockParams.create(scheme, theta, n_scheme_blocks)
                if scheme == Scheme(cfg.scheme):
                    n_scheme_blocks += 1
                self.blocks.append(ODEBlock(BlockScheme(scheme, cfg.step_size), params))
        self.final_ln = LayerNormParams.create(d)
        self.block_inputs: list[Tensor] = []

    # -- parameters ----------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        for i, blk in enumerate(self.blocks):
            yield from blk.theta.named_tensors(f"blocks.{i}.")
            for name, t in blk.params.scheme_tensors():
                yield f"blocks.{i}.{name}", t
        yield from self.final_ln.named_tensors("final_ln.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def gammas(self) -> list[float]:
        out = []
        for blk in self.blocks:
            if blk.params.gamma is not None:
                out.extend(float(v) for v in blk.params.gamma.data)
        return out

    # -- forward -------------------------------------------------------
    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        t = ids.shape[1]
        if t > self.cfg.max_seq_len:
            raise DataError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise DataError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        x = ad.scale(ad.embedding(self.embed, ids), math.sqrt(self.cfg.d_model))
        return ad.add(x, self.positions[:t])

    def run_blocks(self, y: Tensor, train: bool = False) -> Tensor:
        drop = Dropout(self.cfg.dropout, self.dropout_rng) if train else NO_DROPOUT
        state = BlockState.start(y)
        self.block_inputs = []
        for blk in self.blocks:
            self.block_inputs.append(y)
            theta = blk.theta

            def f(u, theta=theta):
                return field(u, theta, causal=True, dropout=drop)

            y = apply_block(blk.scheme, y, f, blk.params, state)
        return y

    def forward(self, ids: np.ndarray, train: bool = False) -> Tensor:
        """Logits of shape (batch, seq, vocab)."""
        y = self.run_blocks(self.embed_tokens(ids), train)
        out = layer_norm(y, self.final_ln)
        return ad.matmul(out, ad.transpose(self.embed))

    __call__ = forward


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)
