"""Network blocks: macaron feed-forward, MHSA, the SwG-former block and MS-Conv."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import AGGREGATORS, SwGModule
from .numerics import functional as F
from .numerics.nn import BatchNorm, Conv2d, Dropout, LayerNorm, Linear, Module
from .numerics.tensor import Parameter, Tensor

MODULE_ORDERS = {
    "FF-MHSA-SwG-FF": ("FF", "MHSA", "SwG", "FF"),
    "FF-SwG-MHSA-FF": ("FF", "SwG", "MHSA", "FF"),
    "FF-MHSA-FF-SwG": ("FF", "MHSA", "FF", "SwG"),
    "MHSA-FF-SwG-FF": ("MHSA", "FF", "SwG", "FF"),
}


@dataclass
class SwGBlockConfig:
    t: int = 5
    k: int = 24
    aggregator: str = "conv2d_agg"
    d_model: int = 512
    n_heads: int = 8
    ff_ratio: int = 4
    swg_ratio: int = 4
    dropout_rate: float = 0.05
    module_order: tuple = ("FF", "MHSA", "SwG", "FF")

    def __post_init__(self):
        self.module_order = tuple(self.module_order)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if sorted(self.module_order) != ["FF", "FF", "MHSA", "SwG"]:
            raise ValueError(f"module_order must hold FF twice plus MHSA and SwG, got {self.module_order}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")


@dataclass
class MSConvConfig:
    c_in: int
    c_out: int
    pool: tuple = (1, 2)
    dropout_rate: float = 0.05


def sinusoidal_encoding(length: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


class FeedForward(Module):
    """x + 1/2 * Dropout(W2 Dropout(Swish(W1 LN(x))))."""

    def __init__(self, d: int, ratio: int, dropout: float, rng: np.random.Generator, dtype=np.float64):
        self.norm = LayerNorm(d, dtype=dtype)
        self.lin1 = Linear(d, ratio * d, rng, dtype=dtype)
        self.lin2 = Linear(ratio * d, d, rng, dtype=dtype)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.drop(F.swish(self.lin1(self.norm(x))))
        return x + 0.5 * self.drop(self.lin2(y))


def ff_forward(x: Tensor, module: FeedForward) -> Tensor:
    return module(x)


class MultiHeadSelfAttention(Module):
    """Pre-norm scaled dot-product self-attention with a residual connection."""

    def __init__(self, d: int, n_heads: int, dropout: float, rng: np.random.Generator, dtype=np.float64):
        if d % n_heads:
            raise ValueError(f"d_model={d} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.norm = LayerNorm(d, dtype=dtype)
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.out = Linear(d, d, rng, dtype=dtype)
        self.drop = Dropout(dropout, rng)
        self.last_attention: np.ndarray | None = None

    def attend(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        h, dh = self.n_heads, d // self.n_heads

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(dh)))
        attn = F.softmax(scores, axis=-1)
        self.last_attention = attn.data
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return self.out(ctx)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.drop(self.attend(self.norm(x)))


def mhsa_forward(x: Tensor, module: MultiHeadSelfAttention) -> Tensor:
    return module(x)


class SwGSublayer(Module):
    """x + SwG(LN(x)), with the SwG module seeing the sequence as [B, T, F, C]."""

    def __init__(self, cfg: SwGBlockConfig, n_freq: int, n_chan: int, rng: np.random.Generator,
                 dtype=np.float64):
        if n_freq * n_chan != cfg.d_model:
            raise ValueError(f"F*C = {n_freq}*{n_chan} does not equal d_model={cfg.d_model}")
        self.n_freq, self.n_chan = n_freq, n_chan
        self.norm = LayerNorm(cfg.d_model, dtype=dtype)
        self.swg = SwGModule(cfg.t, cfg.k, rng, cfg.aggregator, cfg.swg_ratio, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        y = self.swg(self.norm(x).reshape(B, T, self.n_freq, self.n_chan))
        return x + y.reshape(B, T, d)


class SwGFormerBlock(Module):
    """Sublayers applied in ``cfg.module_order`` followed by a closing LayerNorm.

    Input and output are [B, T, d_model] with d_model = F*C in (F, C) row-major
    order, which is also the vertex numbering used by the SwG sublayer.
    """

    def __init__(self, cfg: SwGBlockConfig, n_freq: int, n_chan: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.cfg = cfg
        layers = []
        for name in cfg.module_order:
            if name == "FF":
                layers.append(FeedForward(cfg.d_model, cfg.ff_ratio, cfg.dropout_rate, rng, dtype))
            elif name == "MHSA":
                layers.append(MultiHeadSelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout_rate, rng, dtype))
            else:
                layers.append(SwGSublayer(cfg, n_freq, n_chan, rng, dtype))
        self.layers = layers
        self.final_norm = LayerNorm(cfg.d_model, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)


def swg_former_block_forward(x: Tensor, block: SwGFormerBlock) -> Tensor:
    """Run ``block`` on [T, F, C] or [B, T, F, C] input, preserving the shape."""
    shape = x.shape
    if x.ndim == 3:
        x = x.reshape(1, *shape)
    B, T, nf, nc = x.shape
    y = block(x.reshape(B, T, nf * nc))
    return y.reshape(shape)


class DualConv(Module):
    """conv -> BN -> Swish -> conv -> BN with 'same' padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, dtype=np.float64):
        pad = kernel // 2
        self.conv1 = Conv2d(c_in, c_out, kernel, rng, padding=pad, bias=False, dtype=dtype)
        self.bn1 = BatchNorm(c_out, axis=1, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, kernel, rng, padding=pad, bias=False, dtype=dtype)
        self.bn2 = BatchNorm(c_out, axis=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(F.swish(self.bn1(self.conv1(x)))))


class MSConv(Module):
    """Multi-scale convolution block on [B, C, T, F]; halves F."""

    def __init__(self, cfg: MSConvConfig, rng: np.random.Generator, dtype=np.float64):
        if tuple(cfg.pool) != (1, 2):
            raise ValueError(f"MS-Conv pool must be (1, 2), got {cfg.pool}")
        self.cfg = cfg
        self.branch3 = DualConv(cfg.c_in, cfg.c_out, 3, rng, dtype)
        self.branch5 = DualConv(cfg.c_in, cfg.c_out, 5, rng, dtype)
        self.proj = Conv2d(cfg.c_in, cfg.c_out, 1, rng, bias=False, dtype=dtype) if cfg.c_in != cfg.c_out else None
        self.w1 = Parameter(np.ones(()), dtype=dtype)
        self.w2 = Parameter(np.ones(()), dtype=dtype)
        self.w3 = Parameter(np.ones(()), dtype=dtype)
        self.drop = Dropout(cfg.dropout_rate, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 2:
            raise ValueError(f"MS-Conv needs an even frequency extent, got F={x.shape[-1]}")
        res = self.proj(x) if self.proj is not None else x
        fused = self.w1 * self.branch3(x) + self.w2 * self.branch5(x) + self.w3 * res
        return self.drop(F.max_pool2d(fused, self.cfg.pool))


def ms_conv_forward(x: Tensor, block: MSConv) -> Tensor:
    return block(x)
