"""Differentiable kernels built on :class:`~anomseg.numcore.tensor.Tensor`.

Everything here follows the same pattern: compute the forward value with
numpy, then attach a closure that routes the output gradient back to the
inputs. Index arguments (token ids, gather indices, sample points given
as plain arrays) are data, not graph nodes.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import Tensor

ArrayLike = Union[np.ndarray, Tensor]


def _as_array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# normalizations


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax along ``axis``; rows sum to one.

    Logits are max-shifted before exponentiation so magnitudes up to ~1e3
    stay exact. ``temperature`` must be positive; small values sharpen.
    """
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    a = x

    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        dot = (g * out.data).sum(axis=axis, keepdims=True)
        a._ensure_grad()
        a.grad += out.data * (g - dot) / temperature

    out = Tensor._make(data, (a,), "softmax", backward)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    a = x

    def backward():
        if not a.requires_grad:
            return
        g = out.grad
        a._ensure_grad()
        a.grad += g - np.exp(out.data) * g.sum(axis=axis, keepdims=True)

    out = Tensor._make(data, (a,), "log_softmax", backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias must be ({c},), got "
                         f"{gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    a, g_, b_ = x, gain, bias

    def backward():
        g = out.grad
        if g_.requires_grad:
            g_._ensure_grad()
            g_.grad += (g * xhat).reshape(-1, c).sum(axis=0)
        if b_.requires_grad:
            b_._ensure_grad()
            b_.grad += g.reshape(-1, c).sum(axis=0)
        if a.requires_grad:
            dxhat = g * g_.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            a._ensure_grad()
            a.grad += inv * (dxhat - m1 - xhat * m2)

    out = Tensor._make(data, (a, g_, b_), "layer_norm", backward)
    return out


# ---------------------------------------------------------------------------
# structure ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(tensors)

    def backward():
        g = out.grad
        for t, start, stop in zip(parents, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t._ensure_grad()
                t.grad += g[tuple(idx)]

    out = Tensor._make(data, parents, "concat", backward)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of "
                         f"size {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    a = x

    def backward():
        if a.requires_grad:
            a._ensure_grad()
            a.grad[idx] += out.grad

    out = Tensor._make(x.data[idx].copy(), (a,), "narrow", backward)
    return out


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along axis 0; output shape = indices.shape + x.shape[1:].

    Duplicate indices accumulate gradient additively, which also makes
    this the embedding-lookup kernel.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ParameterError("take_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for axis of size {x.shape[0]}")
    a = x

    def backward():
        if a.requires_grad:
            a._ensure_grad()
            np.add.at(a.grad, idx, out.grad)

    out = Tensor._make(x.data[idx], (a,), "take_rows", backward)
    return out


def take_flat(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather scalar entries by flattened index; returns a 1-D tensor."""
    idx = np.asarray(flat_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise ShapeError(f"take_flat: index out of range for size {x.size}")
    a = x

    def backward():
        if a.requires_grad:
            a._ensure_grad()
            np.add.at(a.grad.reshape(-1), idx, out.grad)

    out = Tensor._make(x.data.reshape(-1)[idx], (a,), "take_flat", backward)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return take_rows(table, ids)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, channels last.

    x: [B, H, W, Cin], weight: [kh, kw, Cin, Cout], bias: [Cout] or None.
    Zero padding, integer stride. Output [B, Ho, Wo, Cout].
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and "
                         f"{weight.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} != weight Cin {cin}")
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    b, h, w, _ = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                  # [B,Ho,Wo,Cin,kh,kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))  # [B,Ho,Wo,kh,kw,Cin]
    cols2 = cols.reshape(b * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    data = cols2 @ wmat
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must be ({cout},), got {bias.shape}")
        data = data + bias.data
    data = data.reshape(b, ho, wo, cout)

    a, w_, b_ = x, weight, bias

    def backward():
        g = out.grad.reshape(b * ho * wo, cout)
        if w_.requires_grad:
            w_._ensure_grad()
            w_.grad += (cols2.T @ g).reshape(kh, kw, cin, cout)
        if b_ is not None and b_.requires_grad:
            b_._ensure_grad()
            b_.grad += g.sum(axis=0)
        if a.requires_grad:
            gcols = (g @ wmat.T).reshape(b, ho, wo, kh, kw, cin)
            gxp = np.zeros((b, hp, wp, cin), dtype=out.grad.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, ki:ki + stride * ho:stride,
                        kj:kj + stride * wo:stride] += gcols[:, :, :, ki, kj]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w]
            a._ensure_grad()
            a.grad += gxp

    parents = (a, w_) if bias is None else (a, w_, b_)
    out = Tensor._make(data, parents, "conv2d", backward)
    return out


def adaptive_avg_pool(x: Tensor, out_hw: Tuple[int, int]) -> Tensor:
    """Average pool [B, H, W, C] down to [B, oh, ow, C].

    The target grid must divide the input grid evenly; ragged bins are a
    ShapeError rather than a silent approximation.
    """
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects [B,H,W,C], got {x.shape}")
    bsz, h, w, c = x.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ParameterError(f"pool target must be positive, got {out_hw}")
    if h % oh or w % ow:
        raise ShapeError(f"pool target {out_hw} does not divide grid {(h, w)}")
    fh, fw = h // oh, w // ow
    r = x.reshape((bsz, oh, fh, ow, fw, c))
    return r.mean(axis=(2, 4))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of [B, H, W, C] -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,H,W,C], got {x.shape}")
    return x.mean(axis=(1, 2))


# ---------------------------------------------------------------------------
# coordinate sampling


def bilinear_sample(grid: Tensor, points: ArrayLike) -> Tensor:
    """Sample a feature grid at continuous (row, col) coordinates.

    grid: [H, W, C] with points [P, 2], or batched [B, H, W, C] with
    points [B, P, 2]. Coordinates are in pixel units; values outside the
    grid clamp to the border. Integer coordinates reproduce grid values
    exactly. Differentiable in both the grid and the points (points only
    when passed as a Tensor).
    """
    batched = grid.ndim == 4
    if not batched and grid.ndim != 3:
        raise ShapeError(f"bilinear_sample grid must be 3-D or 4-D, got {grid.shape}")
    pts_t = points if isinstance(points, Tensor) else None
    pts = _as_array(points)
    if batched:
        bsz, h, w, c = grid.shape
        if pts.ndim != 3 or pts.shape[0] != bsz or pts.shape[-1] != 2:
            raise ShapeError(f"points must be [B,P,2] for batched grid, got {pts.shape}")
    else:
        h, w, c = grid.shape
        if pts.ndim != 2 or pts.shape[-1] != 2:
            raise ShapeError(f"points must be [P,2], got {pts.shape}")

    y = np.clip(pts[..., 0], 0.0, h - 1.0)
    x = np.clip(pts[..., 1], 0.0, w - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (y - y0)[..., None]
    wx = (x - x0)[..., None]

    gd = grid.data
    if batched:
        bidx = np.arange(bsz)[:, None]
        g00 = gd[bidx, y0, x0]
        g01 = gd[bidx, y0, x1]
        g10 = gd[bidx, y1, x0]
        g11 = gd[bidx, y1, x1]
    else:
        g00 = gd[y0, x0]
        g01 = gd[y0, x1]
        g10 = gd[y1, x0]
        g11 = gd[y1, x1]

    top = g00 * (1.0 - wx) + g01 * wx
    bot = g10 * (1.0 - wx) + g11 * wx
    data = top * (1.0 - wy) + bot * wy

    a = grid
    parents = (a, pts_t) if pts_t is not None else (a,)

    def backward():
        g = out.grad
        w00 = (1.0 - wy) * (1.0 - wx)
        w01 = (1.0 - wy) * wx
        w10 = wy * (1.0 - wx)
        w11 = wy * wx
        if a.requires_grad:
            a._ensure_grad()
            if batched:
                np.add.at(a.grad, (bidx, y0, x0), g * w00)
                np.add.at(a.grad, (bidx, y0, x1), g * w01)
                np.add.at(a.grad, (bidx, y1, x0), g * w10)
                np.add.at(a.grad, (bidx, y1, x1), g * w11)
            else:
                np.add.at(a.grad, (y0, x0), g * w00)
                np.add.at(a.grad, (y0, x1), g * w01)
                np.add.at(a.grad, (y1, x0), g * w10)
                np.add.at(a.grad, (y1, x1), g * w11)
        if pts_t is not None and pts_t.requires_grad:
            dy = ((bot - top) * g).sum(axis=-1)
            dx = (((g01 - g00) * (1.0 - wy) + (g11 - g10) * wy) * g).sum(axis=-1)
            # clamped coordinates are flat: no gradient past the border
            dy = dy * ((pts[..., 0] > 0.0) & (pts[..., 0] < h - 1.0))
            dx = dx * ((pts[..., 1] > 0.0) & (pts[..., 1] < w - 1.0))
            pts_t._ensure_grad()
            pts_t.grad += np.stack([dy, dx], axis=-1)

    out = Tensor._make(data, parents, "bilinear_sample", backward)
    return out


def upsample_bilinear(x: Tensor, out_hw: Tuple[int, int]) -> Tensor:
    """Bilinearly resize a [H, W] or [H, W, C] tensor to ``out_hw``.

    Uses half-pixel centers, so constant maps stay constant and the
    result is differentiable in the source grid.
    """
    squeeze = x.ndim == 2
    src = x.reshape((x.shape[0], x.shape[1], 1)) if squeeze else x
    h, w = src.shape[0], src.shape[1]
    oh, ow = out_hw
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=-1)
    sampled = bilinear_sample(src, pts)
    res = sampled.reshape((oh, ow, src.shape[2]))
    if squeeze:
        res = res.reshape((oh, ow))
    return res
