"""Shared transformer sublayers built on the numeric primitives.

Each sublayer reads its weights from a ParamStore under a dot-separated
prefix and accumulates gradients back into the same store, so callers only
thread (params, prefix) around.
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    ParamStore,
    attention_bwd,
    attention_fwd,
    dense_bwd,
    dense_fwd,
    glorot_uniform,
    layer_norm_bwd,
    layer_norm_fwd,
    tanh_bwd,
    tanh_fwd,
)


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(..., n, D) -> (..., h, n, D/h)."""
    *lead, n, d = x.shape
    y = x.reshape(*lead, n, n_heads, d // n_heads)
    return np.moveaxis(y, -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(..., h, n, d_k) -> (..., n, h*d_k)."""
    y = np.moveaxis(x, -3, -2)
    *lead, n, h, dk = y.shape
    return np.ascontiguousarray(y).reshape(*lead, n, h * dk)


# ---------------------------------------------------------------------------
# Multi-head attention with learned Q/K/V/O projections
# ---------------------------------------------------------------------------


def init_mha_params(params: ParamStore, rng: np.random.Generator, prefix: str,
                    d_model: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{name}", glorot_uniform(rng, (d_model, d_model)))
    # no key bias: a constant added to every key shifts each query's scores
    # uniformly, so softmax ignores it (the parameter would be dead weight)
    for name in ("bq", "bv", "bo"):
        params.add(f"{prefix}.{name}", np.zeros(d_model))


def mha_fwd(x_q: np.ndarray, x_kv: np.ndarray, params: ParamStore, prefix: str,
            n_heads: int):
    """x_q (..., n, D), x_kv (..., m, D) -> (..., n, D)."""
    q = dense_fwd(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = x_kv @ params[f"{prefix}.wk"]
    v = dense_fwd(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    qh, kh, vh = (split_heads(a, n_heads) for a in (q, k, v))
    out_h, weights = attention_fwd(qh, kh, vh)
    merged = merge_heads(out_h)
    out = dense_fwd(merged, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return out, (x_q, x_kv, qh, kh, vh, weights, merged)


def mha_bwd(grad: np.ndarray, cache, params: ParamStore, prefix: str,
            n_heads: int):
    """Returns (grad_x_q, grad_x_kv); callers add them for self-attention."""
    x_q, x_kv, qh, kh, vh, weights, merged = cache
    g_merged, gw, gb = dense_bwd(grad, merged, params[f"{prefix}.wo"])
    params.accum(f"{prefix}.wo", gw)
    params.accum(f"{prefix}.bo", gb)
    g_out_h = split_heads(g_merged, n_heads)
    gqh, gkh, gvh = attention_bwd(g_out_h, qh, kh, vh, weights)
    gq, gk, gv = merge_heads(gqh), merge_heads(gkh), merge_heads(gvh)

    gx_q, gw, gb = dense_bwd(gq, x_q, params[f"{prefix}.wq"])
    params.accum(f"{prefix}.wq", gw)
    params.accum(f"{prefix}.bq", gb)
    gk2 = gk.reshape(-1, gk.shape[-1])
    params.accum(f"{prefix}.wk", x_kv.reshape(-1, x_kv.shape[-1]).T @ gk2)
    gx_kv = gk @ params[f"{prefix}.wk"].T
    gx_kv2, gw, gb = dense_bwd(gv, x_kv, params[f"{prefix}.wv"])
    params.accum(f"{prefix}.wv", gw)
    params.accum(f"{prefix}.bv", gb)
    return gx_q, gx_kv + gx_kv2


# ---------------------------------------------------------------------------
# Position-wise feed-forward: dense -> tanh -> dense
# ---------------------------------------------------------------------------


def init_ffn_params(params: ParamStore, rng: np.random.Generator, prefix: str,
                    d_model: int, d_hidden: int) -> None:
    params.add(f"{prefix}.w1", glorot_uniform(rng, (d_model, d_hidden)))
    params.add(f"{prefix}.b1", np.zeros(d_hidden))
    params.add(f"{prefix}.w2", glorot_uniform(rng, (d_hidden, d_model)))
    params.add(f"{prefix}.b2", np.zeros(d_model))


def ffn_fwd(x: np.ndarray, params: ParamStore, prefix: str):
    h = dense_fwd(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    a, a_cache = tanh_fwd(h)
    out = dense_fwd(a, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return out, (x, a_cache, a)


def ffn_bwd(grad: np.ndarray, cache, params: ParamStore, prefix: str):
    x, a_cache, a = cache
    ga, gw, gb = dense_bwd(grad, a, params[f"{prefix}.w2"])
    params.accum(f"{prefix}.w2", gw)
    params.accum(f"{prefix}.b2", gb)
    gh = tanh_bwd(ga, a_cache)
    gx, gw, gb = dense_bwd(gh, x, params[f"{prefix}.w1"])
    params.accum(f"{prefix}.w1", gw)
    params.accum(f"{prefix}.b1", gb)
    return gx


# ---------------------------------------------------------------------------
# Layer norm bound to a prefix
# ---------------------------------------------------------------------------


def init_ln_params(params: ParamStore, prefix: str, d: int) -> None:
    params.add(f"{prefix}.gamma", np.ones(d))
    params.add(f"{prefix}.beta", np.zeros(d))


def ln_fwd(x: np.ndarray, params: ParamStore, prefix: str):
    return layer_norm_fwd(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def ln_bwd(grad: np.ndarray, cache, params: ParamStore, prefix: str):
    gx, gg, gb = layer_norm_bwd(grad, cache, params[f"{prefix}.gamma"])
    params.accum(f"{prefix}.gamma", gg)
    params.accum(f"{prefix}.beta", gb)
    return gx
