"""Composite differentiable ops with hand-written backward rules."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, _result, as_tensor

PROB_EPS = 1e-7


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    x = as_tensor(x)
    out = _softmax_data(x.data, axis)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _result(out, (x,), backward, "softmax")


def scaled_dot_attention(q, k, v) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes, as one graph node.

    Shapes ``(..., N, d)``, ``(..., M, d)``, ``(..., M, e)`` -> ``(..., N, e)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    kt = np.swapaxes(k.data, -1, -2)
    att = _softmax_data((q.data @ kt) * scale, -1)
    out = att @ v.data

    def backward(g):
        gv = np.swapaxes(att, -1, -2) @ g
        gs = g @ np.swapaxes(v.data, -1, -2)
        gs *= att
        gs -= att * gs.sum(axis=-1, keepdims=True)
        gs *= scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return _result(out, (q, k, v), backward, "attention")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def clamp_prob(p) -> Tensor:
    """Clamp probabilities into ``[1e-7, 1 - 1e-7]`` so logs stay finite."""
    p = as_tensor(p)
    inside = (p.data >= PROB_EPS) & (p.data <= 1.0 - PROB_EPS)
    out = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    return _result(out, (p,), lambda g: (g * inside,), "clamp_prob")


def bilinear_sample_hwc(feat, coords) -> Tensor:
    """Batched bilinear sampling with zero padding.

    ``feat`` is ``(B, H, W, C)``; ``coords`` is ``(B, P, 2)`` holding ``(x, y)``
    in continuous grid units where integer values hit cell centres (``x``
    indexes W, ``y`` indexes H). Returns ``(B, P, C)``.
    """
    feat, coords = as_tensor(feat), as_tensor(coords)
    if feat.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2 or feat.shape[0] != coords.shape[0]:
        raise ShapeError(f"bad sampling shapes {feat.shape} / {coords.shape}")
    B, H, W, C = feat.shape
    P = coords.shape[1]
    x = coords.data[..., 0]
    y = coords.data[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    base = (np.arange(B) * (H * W))[:, None]
    corners = []  # (dx, dy, weight, flat index, valid)
    for dx, dy, w in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        idx = base + np.clip(cy, 0, H - 1) * W + np.clip(cx, 0, W - 1)
        corners.append((dx, dy, np.where(valid, w, 0.0), idx, valid))

    rows = B * P
    dtype = feat.data.dtype
    cols = np.stack([c[3].reshape(-1) for c in corners], axis=1).reshape(-1)
    indptr = np.arange(0, 4 * rows + 1, 4)

    def csr(entries):
        data = np.stack([e.reshape(-1) for e in entries], axis=1).astype(dtype, copy=False)
        return sp.csr_matrix((data.reshape(-1), cols, indptr), shape=(rows, B * H * W))

    interp = csr([c[2] for c in corners])
    flat = feat.data.reshape(B * H * W, C)
    out = np.asarray(interp @ flat).reshape(B, P, C)

    def backward(g):
        g2 = g.reshape(rows, C)
        gfeat = np.asarray(interp.T @ g2).reshape(B, H, W, C) if feat.requires_grad else None
        gcoords = None
        if coords.requires_grad:
            # d(weight)/dx and d(weight)/dy per corner, zero outside the map
            v = [c[4] for c in corners]
            ddx = csr([-(1 - wy) * v[0], (1 - wy) * v[1], -wy * v[2], wy * v[3]])
            ddy = csr([-(1 - wx) * v[0], -wx * v[1], (1 - wx) * v[2], wx * v[3]])
            gx = (g2 * np.asarray(ddx @ flat)).sum(axis=1)
            gy = (g2 * np.asarray(ddy @ flat)).sum(axis=1)
            gcoords = np.stack([gx, gy], axis=1).reshape(B, P, 2)
        return gfeat, gcoords

    return _result(out, (feat, coords), backward, "bilinear_sample")


def bilinear_sample(feat, coords) -> Tensor:
    """Sample a ``(C, H, W)`` map at ``(P, 2)`` grid coordinates; returns ``(P, C)``."""
    feat, coords = as_tensor(feat), as_tensor(coords)
    if feat.ndim != 3 or coords.ndim != 2:
        raise ShapeError(f"expected (C,H,W) and (P,2), got {feat.shape} / {coords.shape}")
    C, H, W = feat.shape
    hwc = feat.transpose(1, 2, 0).reshape(1, H, W, C)
    return bilinear_sample_hwc(hwc, coords.reshape(1, -1, 2)).reshape(-1, C)
