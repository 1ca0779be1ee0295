from __future__ import annotations

import numpy as np
import pytest

from swgformer.blocks import (MODULE_ORDERS, FeedForward, MSConv, MSConvConfig, MultiHeadSelfAttention,
                              SwGBlockConfig, SwGFormerBlock, ff_forward, mhsa_forward, ms_conv_forward,
                              sinusoidal_encoding, swg_former_block_forward)
from swgformer.gradsuite import run_case
from swgformer.numerics import Tensor
from swgformer.numerics import functional as F


def zero_(module):
    for p in module.parameters():
        p.data[:] = 0


def test_ff_zero_weights_is_identity(rng):
    ff = FeedForward(8, 4, 0.05, rng)
    ff.lin2.weight.data[:] = 0
    ff.lin2.bias.data[:] = 0
    x = rng.standard_normal((2, 7, 8))
    np.testing.assert_array_equal(ff_forward(Tensor(x), ff).data, x)
    ff.eval()
    assert ff_forward(Tensor(rng.standard_normal((3, 8))), ff).shape == (3, 8)


def test_ff_half_step(rng):
    ff = FeedForward(4, 2, 0.0, rng)
    x = rng.standard_normal((1, 3, 4))
    inner = ff.lin2(F.swish(ff.lin1(ff.norm(Tensor(x))))).data
    np.testing.assert_allclose(ff(Tensor(x)).data, x + 0.5 * inner, atol=1e-14)


def test_mhsa_zero_value_output_is_identity(rng):
    att = MultiHeadSelfAttention(8, 2, 0.05, rng)
    for lin in (att.v, att.out):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    x = rng.standard_normal((2, 5, 8))
    np.testing.assert_array_equal(mhsa_forward(Tensor(x), att).data, x)
    np.testing.assert_allclose(att.last_attention.sum(-1), 1.0, atol=1e-12)
    assert att.last_attention.shape == (2, 2, 5, 5)


def test_mhsa_two_by_two_oracle(rng):
    att = MultiHeadSelfAttention(2, 1, 0.0, rng)
    x = np.array([[[1.0, -1.0], [0.5, 2.0]]])
    # hand-rolled oracle: layer norm, projections, softmax(QK^T / sqrt(2)) V, output projection
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    ln = (x - mu) / np.sqrt(var + 1e-5)
    q = ln[0] @ att.q.weight.data + att.q.bias.data
    k = ln[0] @ att.k.weight.data + att.k.bias.data
    v = ln[0] @ att.v.weight.data + att.v.bias.data
    s = q @ k.T / np.sqrt(2.0)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    expected = x[0] + (a @ v) @ att.out.weight.data + att.out.bias.data
    np.testing.assert_allclose(att(Tensor(x)).data[0], expected, atol=1e-13)
    np.testing.assert_allclose(att.last_attention[0, 0], a, atol=1e-14)


def test_sinusoidal_encoding():
    pe = sinusoidal_encoding(50, 8)
    assert pe.shape == (50, 8)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(pe[3, 0], np.sin(3.0))
    np.testing.assert_allclose(pe[3, 3], np.cos(3.0 / 10000 ** (2 / 8)))


def test_block_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        SwGBlockConfig(d_model=30, n_heads=8)
    with pytest.raises(ValueError, match="module_order"):
        SwGBlockConfig(module_order=("FF", "MHSA", "SwG", "SwG"))
    with pytest.raises(ValueError):
        SwGBlockConfig(aggregator="edge")


def _block(order, rng, aggregator="conv2d_agg"):
    cfg = SwGBlockConfig(t=5, k=4, aggregator=aggregator, d_model=24, n_heads=4, dropout_rate=0.05,
                         module_order=order)
    return SwGFormerBlock(cfg, 4, 6, rng)


@pytest.mark.parametrize("order", list(MODULE_ORDERS.values()))
def test_block_orders_preserve_shape(order, rng):
    blk = _block(order, rng)
    assert [type(l).__name__ for l in blk.layers] == [
        {"FF": "FeedForward", "MHSA": "MultiHeadSelfAttention", "SwG": "SwGSublayer"}[n] for n in order]
    x = Tensor(rng.standard_normal((10, 4, 6)))
    assert swg_former_block_forward(x, blk).shape == (10, 4, 6)
    assert swg_former_block_forward(Tensor(rng.standard_normal((2, 20, 4, 6))), blk).shape == (2, 20, 4, 6)


@pytest.mark.parametrize("order", list(MODULE_ORDERS.values()))
def test_block_zero_sublayers_reduce_to_layer_norm(order, rng):
    blk = _block(order, rng)
    for layer in blk.layers:
        zero_(layer)
    x = rng.standard_normal((2, 10, 4, 6))
    flat = x.reshape(2, 10, 24)
    expected = (flat - flat.mean(-1, keepdims=True)) / np.sqrt(flat.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(swg_former_block_forward(Tensor(x), blk).data, expected.reshape(x.shape), atol=1e-12)


def test_ms_conv_residual_only_path(rng):
    blk = MSConv(MSConvConfig(3, 3), rng)
    blk.w1.data[...] = 0
    blk.w2.data[...] = 0
    blk.eval()
    x = rng.standard_normal((2, 3, 5, 8))
    expected = x.reshape(2, 3, 5, 4, 2).max(-1)
    np.testing.assert_array_equal(ms_conv_forward(Tensor(x), blk).data, expected)


def test_ms_conv_shapes(rng):
    blk = MSConv(MSConvConfig(7, 16), rng)
    assert blk.proj is not None and blk.w1.data == 1 and blk.w3.data == 1
    assert ms_conv_forward(Tensor(rng.standard_normal((2, 7, 10, 16))), blk).shape == (2, 16, 10, 8)
    with pytest.raises(ValueError, match="even"):
        blk(Tensor(np.zeros((1, 7, 10, 15))))
    with pytest.raises(ValueError):
        MSConv(MSConvConfig(2, 2, pool=(2, 2)), rng)


def test_forward_deterministic_with_seed():
    def run():
        r = np.random.default_rng(7)
        blk = _block(("FF", "MHSA", "SwG", "FF"), r)
        return swg_former_block_forward(Tensor(np.ones((10, 4, 6))), blk).data
    np.testing.assert_array_equal(run(), run())


@pytest.mark.parametrize("name", ["feed_forward", "mhsa", "swg_former_block", "ms_conv"])
def test_block_gradcheck(name):
    res = run_case(name)
    assert res.ok, res
