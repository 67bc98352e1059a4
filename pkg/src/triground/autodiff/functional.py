"""Composite differentiable primitives: normalization, convolution, attention."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, _make, as_tensor, masked_fill, matmul, reshape, transpose


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over zero-size axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over zero-size axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, weight: Optional[Tensor], bias: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty feature axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def backward(g):
        gx_hat = g * weight.data if weight is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        red = tuple(range(g.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make(out.astype(xd.dtype, copy=False), parents, backward, "layer_norm")


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except axis 1 (channels).

    ``x`` is (N, C) or (N, C, ...). In training mode the batch statistics are
    used and the running buffers are updated in place with ``momentum``.
    """
    xd = x.data
    if xd.shape[0] == 0:
        raise ShapeError("batch_norm needs a batch size of at least 1")
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * weight.data.reshape(bshape) + bias.data.reshape(bshape)

    def backward(g):
        gxh = g * weight.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (gxh - gxh.mean(axis=axes, keepdims=True)
                                        - xhat * (gxh * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxh * inv.reshape(bshape)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out.astype(xd.dtype, copy=False), (x, weight, bias), backward, "batch_norm")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = x.shape[:2]
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, kh, kw, ho, wo), strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return view


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. ``x``: (B, Cin, H, W); ``weight``: (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    wd = weight.data
    out = np.einsum("bckluv,ockl->bouv", cols, wd, optimize=True)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        gw = np.einsum("bouv,bckluv->ockl", g, cols, optimize=True) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                        "bouv,oc->bcuv", g, wd[:, :, i, j], optimize=True)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), parents, backward, "conv2d")


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Average pool with kernel = stride = ``factor``; partial edge windows (ceil mode)
    average over the cells they actually cover."""
    if factor == 1:
        return x
    b, c, h, w = x.shape
    ho, wo = -(-h // factor), -(-w // factor)
    rows = np.minimum(np.arange(h) // factor, ho - 1)
    cols = np.minimum(np.arange(w) // factor, wo - 1)
    prow = np.zeros((ho, h), dtype=x.dtype)
    prow[rows, np.arange(h)] = 1
    prow /= prow.sum(axis=1, keepdims=True)
    pcol = np.zeros((wo, w), dtype=x.dtype)
    pcol[cols, np.arange(w)] = 1
    pcol /= pcol.sum(axis=1, keepdims=True)
    out = np.einsum("ih,bchw,jw->bcij", prow, x.data, pcol, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,bcij,jw->bchw", prow, g, pcol, optimize=True),), "avg_pool2d")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head scaled dot-product attention over already-projected inputs.

    ``q``: (..., Lq, D); ``k``, ``v``: (..., Lk, D). ``mask`` is a boolean array
    broadcastable to (..., Lk) where True marks keys that must receive zero weight.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} is not divisible by {heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key length {k.shape[-2]} != value length {v.shape[-2]}")
    dh = d // heads

    def split(t):
        lead = t.shape[:-2]
        t = reshape(t, lead + (t.shape[-2], heads, dh))
        nd = t.ndim
        return transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)))
    scores = scores * (1.0 / np.sqrt(dh))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        # (..., Lk) -> (..., 1, 1, Lk) for the head and query axes
        m = m[..., None, None, :]
        scores = masked_fill(scores, m, -np.inf)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh)
    nd = out.ndim
    out = transpose(out, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return reshape(out, out.shape[:-2] + (d,))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy, numerically stable in the logit."""
    from .tensor import log_sigmoid
    t = as_tensor(target, logits)
    return -(t * log_sigmoid(logits) + (1.0 - t) * log_sigmoid(-logits))
