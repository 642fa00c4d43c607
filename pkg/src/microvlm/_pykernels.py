"""Pure-numpy decode kernel: the fallback when the compiled extension is absent.

Semantics are pinned to the compiled kernel: float32 values at every op
boundary, float64 accumulation inside reductions. The two backends agree
to float32 rounding noise, far inside the 1e-5 replay tolerance.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _ln(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    xd = x.astype(np.float64)
    mean = xd.mean()
    centered = xd - mean
    var = (centered**2).mean()
    norm = centered / np.sqrt(var + eps)
    return (norm * gain.astype(np.float64) + bias.astype(np.float64)).astype(np.float32)


def _matvec(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = (x.astype(np.float64) @ w.astype(np.float64)).astype(np.float32)
    return out + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64)
    c = np.sqrt(2.0 / np.pi)
    return (0.5 * xd * (1.0 + np.tanh(c * (xd + 0.044715 * xd**3)))).astype(np.float32)


def layer_decode(
    x,
    g1, b1,
    wq, bq, wk, bk, wv, bv, wo, bo,
    g2, b2,
    w1, bm1, w2, bm2,
    kcache, vcache,
    t, ln_eps, attn_out,
):
    """One transformer layer for a single new position ``t``.

    Writes this position's keys/values into the caches, attends over
    positions ``0..t`` inclusive, stores the per-head attention row in
    ``attn_out`` (flat, heads * (t+1), head-major) and returns the layer
    output row.
    """
    n_heads = kcache.shape[1]
    head_dim = kcache.shape[2]
    inv = 1.0 / np.float32(np.sqrt(head_dim))

    h = _ln(x, g1, b1, ln_eps)
    q = _matvec(h, wq, bq).reshape(n_heads, head_dim)
    kcache[t] = _matvec(h, wk, bk).reshape(n_heads, head_dim)
    vcache[t] = _matvec(h, wv, bv).reshape(n_heads, head_dim)

    keys = kcache[: t + 1]
    vals = vcache[: t + 1]
    scores = np.einsum("hd,thd->ht", q.astype(np.float64), keys.astype(np.float64)).astype(np.float32)
    scores = scores * inv
    s64 = scores.astype(np.float64)
    s64 -= s64.max(axis=1, keepdims=True)
    e = np.exp(s64)
    w = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
    attn_out[: n_heads * (t + 1)] = w.reshape(-1)

    ctx = np.einsum("ht,thd->hd", w.astype(np.float64), vals.astype(np.float64)).astype(np.float32)
    attn_vec = _matvec(ctx.reshape(-1), wo, bo)
    x2 = x + attn_vec

    h2 = _ln(x2, g2, b2, ln_eps)
    u = _gelu(_matvec(h2, w1, bm1))
    return x2 + _matvec(u, w2, bm2)
