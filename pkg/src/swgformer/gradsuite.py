"""Finite-difference gradient suites for every differentiable op, block and a reduced model.

Each case builds a small random 64-bit instance and returns a
:class:`GradCheckResult`. Inputs are drawn so that non-smooth points
(pool ties, KNN rank swaps) are far from the probe step.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .blocks import FeedForward, MSConv, MSConvConfig, MultiHeadSelfAttention, SwGBlockConfig, SwGFormerBlock
from .graph import SwGModule, conv2d_agg, baseline_agg, knn_indices, transform_ffn, vertex_update
from .model import ModelConfig, SwGFormer, accdoa_loss
from .numerics import functional as F
from .numerics.gradcheck import GradCheckResult, check_gradients
from .numerics.nn import BatchNorm, Linear
from .numerics.tensor import Parameter, Tensor, concat

OP_TOL = 1e-4
MODEL_TOL = 1e-3


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _proj(rng, shape) -> np.ndarray:
    """Random projection so the scalar loss exercises every output entry differently."""
    return rng.standard_normal(shape)


def _params(module, **extra) -> dict:
    d = dict(module.named_parameters())
    d.update(extra)
    return d


# ---------------------------------------------------------------------------
# op level


def _op_cases() -> dict[str, Callable[[np.random.Generator], GradCheckResult]]:
    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @case("matmul")
    def _(rng):
        a, b = _t(rng, 4, 5), _t(rng, 5, 3)
        w = _proj(rng, (4, 3))
        return check_gradients(lambda: ((a @ b) * w).sum(), {"a": a, "b": b}, name="matmul")

    @case("conv2d_pad1")
    def _(rng):
        x, k, b = _t(rng, 2, 3, 8, 8), _t(rng, 4, 3, 3, 3), _t(rng, 4)
        w = _proj(rng, (2, 4, 8, 8))
        return check_gradients(lambda: (F.conv2d(x, k, b, padding=1) * w).sum(),
                               {"x": x, "kernel": k, "bias": b}, name="conv2d_pad1")

    @case("conv2d_stride2")
    def _(rng):
        x, k = _t(rng, 2, 2, 7, 9), _t(rng, 3, 2, 3, 3)
        w = _proj(rng, (2, 3, 3, 4))
        return check_gradients(lambda: (F.conv2d(x, k, stride=2) * w).sum(), {"x": x, "kernel": k},
                               name="conv2d_stride2")

    @case("conv2d_1xk")
    def _(rng):
        x, k = _t(rng, 6, 1, 5, 4), _t(rng, 1, 1, 1, 4)
        w = _proj(rng, (6, 1, 5, 1))
        return check_gradients(lambda: (F.conv2d(x, k) * w).sum(), {"x": x, "kernel": k}, name="conv2d_1xk")

    @case("max_pool2d")
    def _(rng):
        x = Tensor(rng.permutation(24).reshape(1, 1, 4, 6) * 0.1, requires_grad=True)  # distinct values
        w = _proj(rng, (1, 1, 4, 3))
        return check_gradients(lambda: (F.max_pool2d(x, (1, 2)) * w).sum(), {"x": x}, name="max_pool2d")

    for kind in ("gelu", "swish", "tanh", "sigmoid"):
        @case(kind)
        def _(rng, kind=kind):
            x = _t(rng, 3, 5)
            w = _proj(rng, (3, 5))
            return check_gradients(lambda: (F.activation(x, kind) * w).sum(), {"x": x}, name=kind)

    @case("softmax")
    def _(rng):
        x = _t(rng, 3, 6)
        w = _proj(rng, (3, 6))
        return check_gradients(lambda: (F.softmax(x, axis=-1) * w).sum(), {"x": x}, name="softmax")

    @case("layer_norm")
    def _(rng):
        x, g, b = _t(rng, 4, 6), _t(rng, 6), _t(rng, 6)
        w = _proj(rng, (4, 6))
        return check_gradients(lambda: (F.layer_norm(x, g, b) * w).sum(), {"x": x, "gamma": g, "beta": b},
                               name="layer_norm")

    for training in (True, False):
        name = "batch_norm_train" if training else "batch_norm_eval"

        @case(name)
        def _(rng, training=training, name=name):
            x, g, b = _t(rng, 5, 3, 4), _t(rng, 3), _t(rng, 3)
            rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
            w = _proj(rng, (5, 3, 4))

            def fn():
                # fresh copies so running-stat updates never feed back into the probe
                return (F.batch_norm(x, g, b, rm.copy(), rv.copy(), training, axis=1) * w).sum()
            return check_gradients(fn, {"x": x, "gamma": g, "beta": b}, name=name)

    @case("dropout")
    def _(rng):
        x = _t(rng, 4, 5)
        w = _proj(rng, (4, 5))
        return check_gradients(lambda: (F.dropout(x, 0.3, True, np.random.default_rng(7)) * w).sum(),
                               {"x": x}, name="dropout")

    @case("linear")
    def _(rng):
        x, W, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        w = _proj(rng, (2, 3, 5))
        return check_gradients(lambda: (F.linear(x, W, b) * w).sum(), {"x": x, "W": W, "b": b}, name="linear")

    @case("gather_neighbors")
    def _(rng):
        h = _t(rng, 2, 6, 3)
        idx = knn_indices(h.data, 3)
        w = _proj(rng, (2, 6, 3, 3))
        return check_gradients(lambda: (F.gather_neighbors(h, idx) * w).sum(), {"h": h}, name="gather_neighbors")

    @case("reductions")
    def _(rng):
        x = _t(rng, 3, 4, 5)
        w = _proj(rng, (3, 5))
        return check_gradients(lambda: (x.max(axis=1) * w).sum() + (x.mean(axis=(0, 2)) ** 2).sum()
                               + x.sum(axis=0).sum(), {"x": x}, name="reductions")

    @case("shape_ops")
    def _(rng):
        a, b = _t(rng, 2, 3), _t(rng, 2, 4)
        w = _proj(rng, (7, 2))
        return check_gradients(lambda: (concat([a, b], axis=1).transpose(1, 0) * w)[1:6].sum()
                               + (a.reshape(6) ** 2).sum() / (b * b + 1.0).sum(), {"a": a, "b": b},
                               name="shape_ops")

    @case("mse_loss")
    def _(rng):
        p, t = _t(rng, 3, 4, 3), rng.standard_normal((3, 4, 3))
        return check_gradients(lambda: F.mse_loss(p, t), {"pred": p}, name="mse_loss")

    return cases


# ---------------------------------------------------------------------------
# graph and block level


def _block_cases() -> dict[str, Callable[[np.random.Generator], GradCheckResult]]:
    cases = {}

    for agg in ("conv2d_agg", "max_relative", "sage_mean", "gin_sum"):
        def run(rng, agg=agg):
            h = _t(rng, 2, 8, 4)
            idx = knn_indices(h.data, 3)
            w = _proj(rng, (2, 8, 4))
            tensors = {"h": h}
            if agg == "conv2d_agg":
                kw, kb = _t(rng, 1, 1, 1, 3), _t(rng, 1)
                tensors.update(weight=kw, bias=kb)
                fn = lambda: (conv2d_agg(h, idx, kw, kb) * w).sum()  # noqa: E731
            else:
                eps = Parameter(np.array(0.3))
                if agg == "gin_sum":
                    tensors["eps"] = eps
                fn = lambda: (baseline_agg(h, idx, agg, eps) * w).sum()  # noqa: E731
            return check_gradients(fn, tensors, name=f"agg_{agg}")
        cases[f"agg_{agg}"] = run

    def vu(rng):
        h, g = _t(rng, 8, 5), _t(rng, 8, 5)
        lin, bn = Linear(10, 5, rng), BatchNorm(5, axis=-1)
        w = _proj(rng, (8, 5))
        return check_gradients(lambda: (vertex_update(h, g, lin, bn) * w).sum(), _params(lin, h=h, g=g, **{
            "bn.weight": bn.weight, "bn.bias": bn.bias}), name="vertex_update")
    cases["vertex_update"] = vu

    def tf(rng):
        G, w1, w2 = _t(rng, 8, 5), _t(rng, 5, 20, scale=0.5), _t(rng, 20, 5, scale=0.5)
        w = _proj(rng, (8, 5))
        return check_gradients(lambda: (transform_ffn(G, w1, w2) * w).sum(), {"G": G, "W1": w1, "W2": w2},
                               name="transform_ffn")
    cases["transform_ffn"] = tf

    def ff(rng):
        m = FeedForward(8, 4, 0.0, rng)
        x = _t(rng, 2, 5, 8)
        w = _proj(rng, (2, 5, 8))
        return check_gradients(lambda: (m(x) * w).sum(), _params(m, x=x), name="feed_forward")
    cases["feed_forward"] = ff

    def mhsa(rng):
        m = MultiHeadSelfAttention(8, 2, 0.0, rng)
        x = _t(rng, 2, 5, 8)
        w = _proj(rng, (2, 5, 8))
        return check_gradients(lambda: (m(x) * w).sum(), _params(m, x=x), name="mhsa")
    cases["mhsa"] = mhsa

    for agg in ("conv2d_agg", "max_relative", "sage_mean", "gin_sum"):
        def swg(rng, agg=agg):
            m = SwGModule(5, 4, rng, aggregator=agg)
            x = _t(rng, 1, 10, 4, 3)
            w = _proj(rng, (1, 10, 4, 3))
            return check_gradients(lambda: (m(x) * w).sum(), _params(m, x=x), name=f"swg_module_{agg}")
        cases[f"swg_module_{agg}"] = swg

    def block(rng):
        cfg = SwGBlockConfig(t=5, k=4, d_model=24, n_heads=4, dropout_rate=0.0)
        m = SwGFormerBlock(cfg, 4, 6, rng)
        x = _t(rng, 1, 10, 24)
        w = _proj(rng, (1, 10, 24))
        return check_gradients(lambda: (m(x) * w).sum(), _params(m, x=x), name="swg_former_block")
    cases["swg_former_block"] = block

    def msconv(rng):
        m = MSConv(MSConvConfig(3, 4, dropout_rate=0.0), rng)
        x = _t(rng, 2, 3, 5, 6)
        w = _proj(rng, (2, 4, 5, 3))
        return check_gradients(lambda: (m(x) * w).sum(), _params(m, x=x), name="ms_conv")
    cases["ms_conv"] = msconv

    return cases


def reduced_model_config() -> ModelConfig:
    """T=50, F=16, C=7 input; 1 MS-Conv (7 -> 4 channels, F 16 -> 8) gives d_model 32; 2 blocks."""
    return ModelConfig(n_mels=16, frames=50, label_frames=10, n_msconv=1, msconv_channels=(4,), n_blocks=2,
                       window_group=(5, 25), k=4, n_heads=8, dropout_rate=0.0, n_classes=3)


def model_case(rng: np.random.Generator, max_entries: int = 4) -> GradCheckResult:
    cfg = reduced_model_config()
    m = SwGFormer(cfg, rng)
    x = _t(rng, 1, cfg.frames, cfg.n_mels, cfg.in_channels)
    target = rng.uniform(-0.8, 0.8, (1, cfg.label_frames, cfg.n_classes, 3))
    return check_gradients(lambda: accdoa_loss(m(x), target), _params(m, x=x), tol=MODEL_TOL,
                           max_entries=max_entries, rng=rng, name="reduced_model")


def run_all(seed: int = 0, include_model: bool = True) -> list[GradCheckResult]:
    results = []
    for name, fn in {**_op_cases(), **_block_cases()}.items():
        results.append(fn(np.random.default_rng(seed)))
    if include_model:
        results.append(model_case(np.random.default_rng(seed)))
    return results


OP_CASES = tuple(_op_cases())
BLOCK_CASES = tuple(_block_cases())


def run_case(name: str, seed: int = 0) -> GradCheckResult:
    if name == "reduced_model":
        return model_case(np.random.default_rng(seed))
    table = {**_op_cases(), **_block_cases()}
    return table[name](np.random.default_rng(seed))
