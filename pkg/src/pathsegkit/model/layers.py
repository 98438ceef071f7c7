"""Dense numerical kernels: multi-head attention, MLPs, bilinear upsampling.

Every forward returns a cache consumed by the matching backward, which
produces gradients for inputs and weights.  All math is float64.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..errors import ShapeMismatch


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, numerically shifted."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def multihead_attention(
    x_q: np.ndarray,
    x_kv: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """softmax(Q K^T / sqrt(d_h)) V per head, heads concatenated, projected.

    x_q: (a, d) rows attending; x_kv: (b, d) rows attended to.
    wq/wk/wv: (h, d, d_h) per-head projections; wo: (h*d_h, d).
    """
    if x_q.ndim != 2 or x_kv.ndim != 2 or x_q.shape[1] != x_kv.shape[1]:
        raise ShapeMismatch(f"query {x_q.shape} vs key/value {x_kv.shape}")
    h, d, d_h = wq.shape
    if d != x_q.shape[1] or wo.shape != (h * d_h, d):
        raise ShapeMismatch(
            f"projections {wq.shape}/{wo.shape} inconsistent with width {x_q.shape[1]}"
        )
    q = np.einsum("ad,hde->hae", x_q, wq)
    k = np.einsum("bd,hde->hbe", x_kv, wk)
    v = np.einsum("bd,hde->hbe", x_kv, wv)
    scores = np.einsum("hae,hbe->hab", q, k) / math.sqrt(d_h)
    attn = softmax_rows(scores)
    heads = np.einsum("hab,hbe->hae", attn, v)
    concat = heads.transpose(1, 0, 2).reshape(x_q.shape[0], h * d_h)
    out = concat @ wo
    cache = {
        "x_q": x_q, "x_kv": x_kv, "wq": wq, "wk": wk, "wv": wv, "wo": wo,
        "q": q, "k": k, "v": v, "attn": attn, "concat": concat,
    }
    return out, cache


def multihead_attention_backward(d_out: np.ndarray, cache: dict):
    """Gradients of multihead_attention.

    Returns (d_x_q, d_x_kv, d_wq, d_wk, d_wv, d_wo).
    """
    x_q, x_kv = cache["x_q"], cache["x_kv"]
    wq, wk, wv, wo = cache["wq"], cache["wk"], cache["wv"], cache["wo"]
    q, k, v, attn = cache["q"], cache["k"], cache["v"], cache["attn"]
    h, _, d_h = wq.shape
    a = x_q.shape[0]

    d_wo = cache["concat"].T @ d_out
    d_concat = d_out @ wo.T
    d_heads = d_concat.reshape(a, h, d_h).transpose(1, 0, 2)

    d_attn = np.einsum("hae,hbe->hab", d_heads, v)
    d_v = np.einsum("hab,hae->hbe", attn, d_heads)
    # softmax backward: dS = A * (dA - sum(dA * A))
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_scores /= math.sqrt(d_h)
    d_q = np.einsum("hab,hbe->hae", d_scores, k)
    d_k = np.einsum("hab,hae->hbe", d_scores, q)

    d_x_q = np.einsum("hae,hde->ad", d_q, wq)
    d_wq = np.einsum("ad,hae->hde", x_q, d_q)
    d_x_kv = np.einsum("hbe,hde->bd", d_k, wk) + np.einsum("hbe,hde->bd", d_v, wv)
    d_wk = np.einsum("bd,hbe->hde", x_kv, d_k)
    d_wv = np.einsum("bd,hbe->hde", x_kv, d_v)
    return d_x_q, d_x_kv, d_wq, d_wk, d_wv, d_wo


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x  # identity


def activation_backward(d_out: np.ndarray, pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return d_out * (pre > 0)
    return d_out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_backward(d_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    return d_out @ w.T, x.T @ d_out, d_out.sum(axis=0)


def mlp2(x, w1, b1, w2, b2, activation: str):
    """Two-layer MLP with one nonlinearity; returns (out, cache)."""
    pre = linear(x, w1, b1)
    hid = activation_forward(pre, activation)
    out = linear(hid, w2, b2)
    return out, {"x": x, "pre": pre, "hid": hid, "w1": w1, "w2": w2, "act": activation}


def mlp2_backward(d_out, cache):
    d_hid, d_w2, d_b2 = linear_backward(d_out, cache["hid"], cache["w2"])
    d_pre = activation_backward(d_hid, cache["pre"], cache["act"])
    d_x, d_w1, d_b1 = linear_backward(d_pre, cache["x"], cache["w1"])
    return d_x, d_w1, d_b1, d_w2, d_b2


def mlp3(x, w1, b1, w2, b2, w3, b3, activation: str):
    """Three-layer MLP, nonlinearity after the first two layers."""
    pre1 = linear(x, w1, b1)
    h1 = activation_forward(pre1, activation)
    pre2 = linear(h1, w2, b2)
    h2 = activation_forward(pre2, activation)
    out = linear(h2, w3, b3)
    return out, {
        "x": x, "pre1": pre1, "h1": h1, "pre2": pre2, "h2": h2,
        "w1": w1, "w2": w2, "w3": w3, "act": activation,
    }


def mlp3_backward(d_out, cache):
    d_h2, d_w3, d_b3 = linear_backward(d_out, cache["h2"], cache["w3"])
    d_pre2 = activation_backward(d_h2, cache["pre2"], cache["act"])
    d_h1, d_w2, d_b2 = linear_backward(d_pre2, cache["h1"], cache["w2"])
    d_pre1 = activation_backward(d_h1, cache["pre1"], cache["act"])
    d_x, d_w1, d_b1 = linear_backward(d_pre1, cache["x"], cache["w1"])
    return d_x, d_w1, d_b1, d_w2, d_b2, d_w3, d_b3


@lru_cache(maxsize=64)
def upsample_matrix(src: int, dst: int) -> np.ndarray:
    """Row-interpolation matrix U (dst x src) for 1-D bilinear resampling.

    Output coordinate i samples source coordinate (i + 0.5) * src/dst - 0.5,
    clamped at the borders; src == dst yields the identity.
    """
    u = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        x0 = math.floor(x)
        w = x - x0
        lo = min(max(x0, 0), src - 1)
        hi = min(max(x0 + 1, 0), src - 1)
        u[i, lo] += 1.0 - w
        u[i, hi] += w
    u.setflags(write=False)  # cached instance is shared between callers
    return u


def upsample_bilinear(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling of a 2-D grid to out_hw (exactly linear in grid)."""
    ur = upsample_matrix(grid.shape[0], out_hw[0])
    uc = upsample_matrix(grid.shape[1], out_hw[1])
    return ur @ grid @ uc.T


def upsample_bilinear_backward(d_out: np.ndarray, src_hw: tuple[int, int]) -> np.ndarray:
    ur = upsample_matrix(src_hw[0], d_out.shape[0])
    uc = upsample_matrix(src_hw[1], d_out.shape[1])
    return ur.T @ d_out @ uc
