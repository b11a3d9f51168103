import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rkblocks import autodiff as ad
from rkblocks.autodiff import Tensor, finite_diff_check
from rkblocks.blocks import euler_block
from rkblocks.errors import ConfigError, DataError, DimensionError
from rkblocks.layers import (
    AttentionParams,
    FFNParams,
    FieldKind,
    FieldParams,
    LayerNormParams,
    count_params,
    cross_entropy_ls,
    ffn,
    field,
    layer_norm,
    prenorm_layer,
    self_attention,
)


def rand_field(kind, d=8, heads=2, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    theta = FieldParams.create(kind, d, heads, 4 * d, rng, std)
    for _, t in theta.named_tensors():
        if t.ndim == 1:
            t.data[...] = rng.uniform(-0.3, 0.3, t.shape) + (1.0 if _.endswith("gain") else 0.0)
    return theta


def zero_field(kind, d=8, heads=2):
    theta = FieldParams.create(kind, d, heads, 4 * d, np.random.default_rng(0))
    for _, t in theta.named_tensors():
        t.data[...] = 0.0
    return theta


# -- independent numpy references ----------------------------------------------

def ref_layer_norm(x, gain, bias, eps):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[i] = [(r - mu) / math.sqrt(var + eps) for r in row]
    return out * gain + bias


def ref_attention(x, p: AttentionParams, causal):
    t, d = x.shape
    dh = d // p.n_heads
    w = p.qkv_proj.data
    wq, wk, wv = w[:, :d], w[:, d:2 * d], w[:, 2 * d:]
    heads = []
    for h in range(p.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = x @ wq[:, cols] + p.q_bias.data[cols]
        k = x @ wk[:, cols]
        v = x @ wv[:, cols] + p.v_bias.data[cols]
        out = np.zeros((t, dh))
        for i in range(t):
            visible = range(i + 1) if causal else range(t)
            s = np.array([q[i] @ k[j] / math.sqrt(dh) for j in visible])
            a = np.exp(s - s.max())
            a /= a.sum()
            out[i] = sum(aj * v[j] for aj, j in zip(a, visible))
        heads.append(out)
    return np.concatenate(heads, axis=1) @ p.out_proj.data + p.out_bias.data


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    p = LayerNormParams.create(5)
    out = layer_norm(Tensor(np.full((2, 5), 3.7)), p).data
    assert np.allclose(out, 0.0, atol=1e-12)


def test_layer_norm_zero_gain_returns_bias():
    p = LayerNormParams.create(4)
    p.gain.data[...] = 0.0
    p.bias.data[...] = [1.0, -2.0, 0.5, 3.0]
    out = layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), p).data
    assert np.array_equal(out, np.tile(p.bias.data, (3, 1)))


def test_layer_norm_matches_reference():
    rng = np.random.default_rng(1)
    p = LayerNormParams(Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6)), 1e-5)
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(layer_norm(Tensor(x), p).data, ref_layer_norm(x, p.gain.data, p.bias.data, 1e-5),
                               rtol=1e-12, atol=1e-12)


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.zeros((2, 3))), LayerNormParams.create(4))


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    p = LayerNormParams(Tensor(rng.normal(size=8), requires_grad=True),
                        Tensor(rng.normal(size=8), requires_grad=True))
    x = Tensor(rng.uniform(-1, 1, (4, 8)), requires_grad=True)
    r = rng.uniform(-1, 1, (4, 8))
    loss = lambda _: ad.tsum(ad.mul(layer_norm(x, p), r))
    for t in (x, p.gain, p.bias):
        assert finite_diff_check(loss, t) < 1e-4


# -- attention -------------------------------------------------------------------

def test_attention_single_token_returns_projected_value():
    p = rand_field(FieldKind.SAN).attn
    x = np.random.default_rng(3).normal(size=(1, 8))
    d = 8
    v = x @ p.qkv_proj.data[:, 2 * d:] + p.v_bias.data
    expected = v @ p.out_proj.data + p.out_bias.data
    np.testing.assert_allclose(self_attention(Tensor(x), p).data, expected, rtol=1e-12, atol=1e-12)


def test_attention_zero_qkv_is_uniform_over_visible_positions():
    p = rand_field(FieldKind.SAN).attn
    p.qkv_proj.data[:, : 2 * 8] = 0.0
    p.q_bias.data[...] = 0.0
    x = np.random.default_rng(4).normal(size=(5, 8))
    v = x @ p.qkv_proj.data[:, 16:] + p.v_bias.data
    causal = np.cumsum(v, axis=0) / np.arange(1, 6)[:, None]
    np.testing.assert_allclose(self_attention(Tensor(x), p, causal=True).data,
                               causal @ p.out_proj.data + p.out_bias.data, atol=1e-12)
    full = np.tile(v.mean(axis=0), (5, 1))
    np.testing.assert_allclose(self_attention(Tensor(x), p, causal=False).data,
                               full @ p.out_proj.data + p.out_bias.data, atol=1e-12)


@pytest.mark.parametrize("causal", [True, False])
def test_attention_matches_reference(causal):
    p = rand_field(FieldKind.SAN, seed=5).attn
    x = np.random.default_rng(6).normal(size=(4, 8))
    np.testing.assert_allclose(self_attention(Tensor(x), p, causal).data, ref_attention(x, p, causal),
                               rtol=1e-10, atol=1e-12)


def test_attention_batched_equals_per_sequence():
    p = rand_field(FieldKind.SAN, seed=7).attn
    x = np.random.default_rng(8).normal(size=(3, 4, 8))
    batched = self_attention(Tensor(x), p).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], self_attention(Tensor(x[b]), p).data, rtol=0, atol=1e-14)


def test_attention_heads_must_divide_width():
    with pytest.raises(ConfigError):
        AttentionParams.create(8, 3, np.random.default_rng(0))


def test_attention_gradcheck():
    theta = rand_field(FieldKind.SAN, seed=9)
    rng = np.random.default_rng(10)
    x = Tensor(rng.uniform(-1, 1, (4, 8)), requires_grad=True)
    r = rng.uniform(-1, 1, (4, 8))
    loss = lambda _: ad.tsum(ad.mul(self_attention(x, theta.attn), r))
    for _, t in [("x", x)] + list(theta.attn.named_tensors()):
        assert finite_diff_check(loss, t) < 1e-4


# -- ffn -----------------------------------------------------------------------

def test_ffn_zero_weights_give_zero():
    p = zero_field(FieldKind.FFN).ffn
    assert np.all(ffn(Tensor(np.random.default_rng(0).normal(size=(3, 8))), p).data == 0.0)


def test_ffn_identity_slice_with_zero_output_weights():
    p = rand_field(FieldKind.FFN).ffn
    p.w1.data[...] = 0.0
    p.w1.data[:, :8] = np.eye(8)
    p.w2.data[...] = 0.0
    p.b2.data[...] = 0.0
    assert np.all(ffn(Tensor(np.random.default_rng(1).normal(size=(3, 8))), p).data == 0.0)


def test_ffn_matches_reference_and_gradcheck():
    p = rand_field(FieldKind.FFN, seed=11).ffn
    rng = np.random.default_rng(12)
    x = rng.uniform(-1, 1, (4, 8))
    ref = np.maximum(x @ p.w1.data + p.b1.data, 0.0) @ p.w2.data + p.b2.data
    np.testing.assert_allclose(ffn(Tensor(x), p).data, ref, rtol=1e-12, atol=1e-14)
    xt = Tensor(x, requires_grad=True)
    r = rng.uniform(-1, 1, (4, 8))
    loss = lambda _: ad.tsum(ad.mul(ffn(xt, p), r))
    for _, t in [("x", xt)] + list(p.named_tensors()):
        assert finite_diff_check(loss, t) < 1e-4


def test_ffn_width_mismatch():
    with pytest.raises(DimensionError):
        ffn(Tensor(np.zeros((2, 4))), rand_field(FieldKind.FFN).ffn)


# -- F ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(FieldKind))
def test_zero_parameters_give_zero_field(kind):
    theta = zero_field(kind)
    y = Tensor(np.random.default_rng(0).normal(size=(4, 8)))
    assert np.all(field(y, theta).data == 0.0)


def test_field_granularities_compose_sublayers():
    theta = rand_field(FieldKind.MERGED, seed=13)
    y = np.random.default_rng(14).normal(size=(4, 8))
    s = self_attention(layer_norm(Tensor(y), theta.ln_attn), theta.attn).data
    f = ffn(layer_norm(Tensor(y + s), theta.ln_ffn), theta.ffn).data
    np.testing.assert_allclose(field(Tensor(y), theta).data, s + f, rtol=0, atol=1e-14)


def test_field_kind_mismatch_is_config_error():
    theta = rand_field(FieldKind.SAN)
    with pytest.raises(ConfigError):
        field(Tensor(np.zeros((2, 8))), theta, FieldKind.FFN)
    with pytest.raises(ConfigError):
        FieldParams(FieldKind.MERGED, ln_attn=theta.ln_attn, attn=theta.attn)


@settings(max_examples=20, derandomize=True, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), seq=st.integers(1, 6))
def test_euler_merged_block_equals_vanilla_prenorm_layer(seed, seq):
    theta = rand_field(FieldKind.MERGED, seed=seed)
    y = Tensor(np.random.default_rng(seed + 1).normal(size=(seq, 8)))
    out = euler_block(y, lambda v: field(v, theta))
    ref = prenorm_layer(y, theta)
    assert np.max(np.abs(out.data - ref.data)) <= 1e-12


@pytest.mark.parametrize("kind", list(FieldKind))
def test_field_gradcheck(kind):
    theta = rand_field(kind, seed=15)
    rng = np.random.default_rng(16)
    y = Tensor(rng.uniform(-1, 1, (4, 8)), requires_grad=True)
    r = rng.uniform(-1, 1, (4, 8))
    loss = lambda _: ad.tsum(ad.mul(field(y, theta), r))
    assert finite_diff_check(loss, y) < 1e-4
    for _, t in theta.named_tensors():
        assert finite_diff_check(loss, t) < 1e-4


# -- parameter accounting --------------------------------------------------------

@pytest.mark.parametrize("d", [8, 16, 32])
def test_parameter_accounting(d):
    theta = FieldParams.create(FieldKind.MERGED, d, 4, 4 * d, np.random.default_rng(0))
    attn = dict(theta.attn.named_tensors())
    ffn_p = dict(theta.ffn.named_tensors())
    assert attn["qkv_proj"].size + attn["out_proj"].size == 3 * d * d + d * d
    assert count_params(attn.values()) == 4 * d * d + 3 * d
    assert ffn_p["w1"].size + ffn_p["w2"].size == 2 * d * 4 * d
    assert count_params(ffn_p.values()) == 8 * d * d + 4 * d + d
    assert count_params(t for _, t in theta.named_tensors()) == 12 * d * d + 8 * d + 4 * d


# -- loss ------------------------------------------------------------------------

@pytest.mark.parametrize("v", [3, 16, 100])
def test_uniform_logits_give_log_vocab(v):
    logits = Tensor(np.zeros((5, v)))
    targets = np.arange(5) % v
    assert cross_entropy_ls(logits, targets, 0.0).item() == pytest.approx(math.log(v), abs=1e-12)
    assert cross_entropy_ls(logits, targets, 0.1).item() == pytest.approx(math.log(v), abs=1e-12)


def test_confident_logits_drive_loss_to_zero():
    logits = np.full((2, 4), -50.0)
    logits[[0, 1], [2, 3]] = 50.0
    assert cross_entropy_ls(Tensor(logits), [2, 3], 0.0).item() < 1e-40


def test_smoothed_loss_matches_definition():
    rng = np.random.default_rng(17)
    z = rng.normal(size=(6, 5))
    tgt = rng.integers(0, 5, 6)
    eps = 0.1
    expected = 0.0
    for row, t in zip(z, tgt):
        logp = row - math.log(sum(math.exp(x) for x in row))
        expected += (1 - eps) * -logp[t] + eps * -logp.mean()
    assert cross_entropy_ls(Tensor(z), tgt, eps).item() == pytest.approx(expected / 6, rel=1e-12)


def test_loss_mask_and_gradcheck():
    rng = np.random.default_rng(18)
    z = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    tgt = rng.integers(0, 5, (2, 3))
    mask = np.array([[0, 1, 1], [1, 1, 0]], dtype=float)
    masked = cross_entropy_ls(z, tgt, 0.1, mask).item()
    keep = mask.reshape(-1).astype(bool)
    direct = cross_entropy_ls(Tensor(z.data.reshape(-1, 5)[keep]), tgt.reshape(-1)[keep], 0.1).item()
    assert masked == pytest.approx(direct, rel=1e-12)
    assert finite_diff_check(lambda t: cross_entropy_ls(t, tgt, 0.1, mask), z) < 1e-6


def test_loss_rejects_bad_targets():
    with pytest.raises(DataError):
        cross_entropy_ls(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DataError):
        cross_entropy_ls(Tensor(np.zeros((2, 3))), [0, -1])
    with pytest.raises(DataError):
        cross_entropy_ls(Tensor(np.zeros((2, 3))), [0, 1], mask=np.zeros(2))
