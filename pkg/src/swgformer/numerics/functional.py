"""Differentiable neural-network primitives with hand-written backward rules."""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from .tensor import Tensor, _pair

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._node(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._node(y, (x,), lambda g: (g * (1 - y * y),))


def swish(x: Tensor) -> Tensor:
    s = expit(x.data)
    y = x.data * s
    return Tensor._node(y, (x,), lambda g: (g * (s + y * (1 - s)),))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, 0.5 x (1 + erf(x / sqrt 2))."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    y = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor._node(y.astype(x.dtype, copy=False), (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return Tensor._node(np.log(x.data), (x,), lambda g: (g / x.data,))


ACTIVATIONS = {"gelu": gelu, "swish": swish, "tanh": tanh, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._node(y, (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def _norm_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes: tuple) -> np.ndarray:
    n = int(np.prod([x_hat.shape[a] for a in axes]))
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * x_hat).sum(axis=axes, keepdims=True)
    return inv_std * (g_hat - s1 / n - x_hat * s2 / n)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, n_axes: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing ``n_axes`` axes, then scale and shift."""
    axes = tuple(range(x.ndim - n_axes, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv_std
    y = x_hat * gamma.data + beta.data

    def backward(g):
        g_hat = g * gamma.data
        gx = _norm_backward(g_hat, x_hat, inv_std, axes)
        lead = tuple(range(x.ndim - n_axes))
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._node(y, (x, gamma, beta), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, axis: int = 1, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization along ``axis``; statistics pool every other axis.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, like torch). In eval mode the running
    buffers are used.
    """
    axis = axis % x.ndim
    red = tuple(a for a in range(x.ndim) if a != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    if training:
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        n = x.size // x.shape[axis]
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (n / max(n - 1, 1))
    else:
        mu = running_mean.reshape(bshape)
        xc = x.data - mu
        var = running_var.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv_std
    y = x_hat * gam + bet

    def backward(g):
        g_hat = g * gam
        if training:
            gx = _norm_backward(g_hat, x_hat, inv_std, red)
        else:
            gx = g_hat * inv_std
        return gx, (g * x_hat).sum(axis=red), g.sum(axis=red)

    return Tensor._node(y.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv2d: extent {size} with kernel {k}, stride {stride}, padding {pad} "
            f"gives non-integer output ({span}/{stride} + 1)")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, Ho: int, Wo: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [C*kh*kw, B*Ho*Wo] columns.

    Built one kernel offset at a time so every copy streams along the long
    output-width axis instead of the short kernel axes.
    """
    B, C = xp.shape[:2]
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw].transpose(1, 0, 2, 3)
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw]."""
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    Ho = conv_output_extent(H, kh, sh, ph)
    Wo = conv_output_extent(W, kw, sw, pw)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, Ho, Wo)  # Cin*kh*kw, B*Ho*Wo
    w2 = weight.data.reshape(cout, -1)
    out = np.ascontiguousarray((w2 @ cols).reshape(cout, B, Ho, Wo).transpose(1, 0, 2, 3))
    parents = [x, weight]
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)  # Cout, B*Ho*Wo
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad and sh == sw == 1 and 2 * ph == kh - 1 and 2 * pw == kw - 1:
            # "same" padding: full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - ph, kh - 1 - ph), (kw - 1 - pw, kw - 1 - pw)))
            gcols = _im2col(gp, kh, kw, 1, 1, H, W)  # Cout*kh*kw, B*H*W
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = (flipped @ gcols).reshape(cin, B, H, W).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, kh, kw, B, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._node(out, parents, backward)


def max_pool2d(x: Tensor, window) -> Tensor:
    """Non-overlapping max pooling of [B,C,H,W]; ties route to the first element."""
    ph, pw = window
    B, C, H, W = x.shape
    if H % ph or W % pw:
        raise ValueError(f"max_pool2d: extents ({H}, {W}) not divisible by window ({ph}, {pw})")
    Ho, Wo = H // ph, W // pw
    blocks = x.data.reshape(B, C, Ho, ph, Wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, ph * pw)
    idx = np.argmax(blocks, axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, Ho, Wo, ph * pw), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return Tensor._node(out, (x,), backward)


# ---------------------------------------------------------------------------
# misc


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with ``weight`` stored as [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input feature size {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._node(y.reshape(*lead, weight.shape[1]), parents, backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._node(x.data * keep, (x,), lambda g: (g * keep,))


def gather_neighbors(h: Tensor, idx: np.ndarray) -> Tensor:
    """Gather neighbour feature rows.

    h: [..., n, t] vertex features, idx: [..., n, k] integer vertex ids.
    Returns [..., n, k, t] with out[..., i, j, :] = h[..., idx[..., i, j], :].
    """
    *lead, n, t = h.shape
    k = idx.shape[-1]
    if tuple(idx.shape[:-1]) != (*lead, n):
        raise ValueError(f"neighbour table shape {idx.shape} does not match features {h.shape}")
    M = int(np.prod(lead)) if lead else 1
    h2 = h.data.reshape(M, n, t)
    flat = idx.reshape(M, n * k)
    out = np.take_along_axis(h2, flat[:, :, None], axis=1)
    rows = (flat + (np.arange(M) * n)[:, None]).reshape(-1)

    def backward(g):
        gv = g.reshape(M * n * k, t)
        acc = np.empty((M * n, t), dtype=g.dtype)
        for tau in range(t):
            acc[:, tau] = np.bincount(rows, weights=gv[:, tau], minlength=M * n)
        return (acc.reshape(h.shape),)

    return Tensor._node(out.reshape(*lead, n, k, t), (h,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()
