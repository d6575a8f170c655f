"""The denoising network: decoder blocks with gated cross-task attention.

Each decoder block runs pre-layer-norm residual sublayers in a fixed order:
self-attention over the noisy latent sequence, cross-attention to the
conditioning context, the gated cross-task module, and a feed-forward net.

The cross-task module splits its input into three equal streams (trajectory,
wind, pressure) through separate projections, lets each stream attend to the
concatenation of the other two (single head, learned Q/K/V maps, no output
projection), gates between the original and attended features with a small
MLP, and fuses the streams back with a per-position dense map.

`route_task` implements the training-time gradient routing: while
backpropagating one task's reconstruction loss, the other two decompose
projections act as stop-gradient barriers, so exactly one of the three
projection parameter sets per block receives that component's gradient.
"""

from __future__ import annotations

import numpy as np

from .blocks import (
    ffn_bwd,
    ffn_fwd,
    init_ffn_params,
    init_ln_params,
    init_mha_params,
    ln_bwd,
    ln_fwd,
    mha_bwd,
    mha_fwd,
)
from .config import RunConfig
from .errors import ConfigError
from .numerics import (
    ParamStore,
    attention_bwd,
    attention_fwd,
    dense_bwd,
    dense_fwd,
    glorot_uniform,
    sigmoid_fwd,
    tanh_bwd,
    tanh_fwd,
)

TASKS = ("traj", "wind", "pres")
# task -> normalized attribute channels; L_recon decomposition depends on it
TASK_CHANNELS = {"traj": (0, 1), "wind": (2,), "pres": (3,)}


def init_piga_params(params: ParamStore, rng: np.random.Generator, prefix: str,
                     d_model: int) -> None:
    if d_model % 3:
        raise ConfigError(f"d_model={d_model} must be divisible by 3")
    d_sub = d_model // 3
    for task in TASKS:
        params.add(f"{prefix}.proj_{task}.W", glorot_uniform(rng, (d_model, d_sub)))
        params.add(f"{prefix}.proj_{task}.b", np.zeros(d_sub))
        for name in ("wq", "wk", "wv"):
            params.add(f"{prefix}.attn_{task}.{name}",
                       glorot_uniform(rng, (d_sub, d_sub)))
        for name in ("bq", "bv"):  # key bias is dead under softmax, omitted
            params.add(f"{prefix}.attn_{task}.{name}", np.zeros(d_sub))
        params.add(f"{prefix}.gate_{task}.w1",
                   glorot_uniform(rng, (2 * d_sub, 2 * d_sub)))
        params.add(f"{prefix}.gate_{task}.b1", np.zeros(2 * d_sub))
        params.add(f"{prefix}.gate_{task}.w2",
                   glorot_uniform(rng, (2 * d_sub, d_sub)))
        params.add(f"{prefix}.gate_{task}.b2", np.zeros(d_sub))
    params.add(f"{prefix}.fuse.W", glorot_uniform(rng, (d_model, d_model)))
    params.add(f"{prefix}.fuse.b", np.zeros(d_model))


def piga_fwd(x: np.ndarray, params: ParamStore, prefix: str):
    """x (B, N, D) -> (B, N, D); cache carries every stream intermediate."""
    d_sub = x.shape[-1] // 3
    f = {task: dense_fwd(x, params[f"{prefix}.proj_{task}.W"],
                         params[f"{prefix}.proj_{task}.b"]) for task in TASKS}
    per_task = {}
    fused_in = []
    for task in TASKS:
        others = [o for o in TASKS if o != task]
        kv = np.concatenate([f[o] for o in others], axis=-2)
        q = dense_fwd(f[task], params[f"{prefix}.attn_{task}.wq"],
                      params[f"{prefix}.attn_{task}.bq"])
        k = kv @ params[f"{prefix}.attn_{task}.wk"]
        v = dense_fwd(kv, params[f"{prefix}.attn_{task}.wv"],
                      params[f"{prefix}.attn_{task}.bv"])
        a, weights = attention_fwd(q, k, v)
        cat = np.concatenate([f[task], a], axis=-1)
        h1 = dense_fwd(cat, params[f"{prefix}.gate_{task}.w1"],
                       params[f"{prefix}.gate_{task}.b1"])
        h1a, h1_cache = tanh_fwd(h1)
        h2 = dense_fwd(h1a, params[f"{prefix}.gate_{task}.w2"],
                       params[f"{prefix}.gate_{task}.b2"])
        gate, _ = sigmoid_fwd(h2)
        f_new = (1.0 - gate) * f[task] + gate * a
        per_task[task] = (others, kv, q, k, v, weights, a, cat, h1_cache, h1a, gate)
        fused_in.append(f_new)
    concat_f = np.concatenate(fused_in, axis=-1)
    out = dense_fwd(concat_f, params[f"{prefix}.fuse.W"], params[f"{prefix}.fuse.b"])
    return out, (x, f, per_task, concat_f, d_sub)


def piga_bwd(grad: np.ndarray, cache, params: ParamStore, prefix: str,
             route_task: str | None = None) -> np.ndarray:
    x, f, per_task, concat_f, d_sub = cache
    n = x.shape[-2]
    g_concat, gw, gb = dense_bwd(grad, concat_f, params[f"{prefix}.fuse.W"])
    params.accum(f"{prefix}.fuse.W", gw)
    params.accum(f"{prefix}.fuse.b", gb)

    gf = {task: np.zeros_like(f[task]) for task in TASKS}
    for ti, task in enumerate(TASKS):
        others, kv, q, k, v, weights, a, cat, h1_cache, h1a, gate = per_task[task]
        gfp = g_concat[..., ti * d_sub:(ti + 1) * d_sub]
        # gated fuse: f' = (1-g) f + g a
        g_gate = gfp * (a - f[task])
        gf[task] += gfp * (1.0 - gate)
        ga = gfp * gate
        # gate MLP
        gh2 = g_gate * gate * (1.0 - gate)
        gh1a, gw, gb = dense_bwd(gh2, h1a, params[f"{prefix}.gate_{task}.w2"])
        params.accum(f"{prefix}.gate_{task}.w2", gw)
        params.accum(f"{prefix}.gate_{task}.b2", gb)
        gh1 = tanh_bwd(gh1a, h1_cache)
        gcat, gw, gb = dense_bwd(gh1, cat, params[f"{prefix}.gate_{task}.w1"])
        params.accum(f"{prefix}.gate_{task}.w1", gw)
        params.accum(f"{prefix}.gate_{task}.b1", gb)
        gf[task] += gcat[..., :d_sub]
        ga = ga + gcat[..., d_sub:]
        # cross-task attention
        gq, gk, gv = attention_bwd(ga, q, k, v, weights)
        gfq, gw, gb = dense_bwd(gq, f[task], params[f"{prefix}.attn_{task}.wq"])
        params.accum(f"{prefix}.attn_{task}.wq", gw)
        params.accum(f"{prefix}.attn_{task}.bq", gb)
        gf[task] += gfq
        gk2 = gk.reshape(-1, gk.shape[-1])
        params.accum(f"{prefix}.attn_{task}.wk",
                     kv.reshape(-1, kv.shape[-1]).T @ gk2)
        gkv = gk @ params[f"{prefix}.attn_{task}.wk"].T
        gkv2, gw, gb = dense_bwd(gv, kv, params[f"{prefix}.attn_{task}.wv"])
        params.accum(f"{prefix}.attn_{task}.wv", gw)
        params.accum(f"{prefix}.attn_{task}.bv", gb)
        gkv = gkv + gkv2
        gf[others[0]] += gkv[..., :n, :]
        gf[others[1]] += gkv[..., n:, :]

    gx = np.zeros_like(x)
    for task in TASKS:
        if route_task is not None and task != route_task:
            continue  # stop-gradient barrier at a foreign projection
        gxt, gw, gb = dense_bwd(gf[task], x, params[f"{prefix}.proj_{task}.W"])
        params.accum(f"{prefix}.proj_{task}.W", gw)
        params.accum(f"{prefix}.proj_{task}.b", gb)
        gx += gxt
    return gx


# ---------------------------------------------------------------------------
# Decoder blocks and the full noise predictor
# ---------------------------------------------------------------------------


def init_decoder_params(params: ParamStore, rng: np.random.Generator,
                        cfg: RunConfig) -> None:
    m = cfg.model
    d = m.d_model
    params.add("dec.in_proj.W", glorot_uniform(rng, (m.d_embed, d)))
    params.add("dec.in_proj.b", np.zeros(d))
    params.add("dec.pos", 0.02 * rng.standard_normal((cfg.data.n_fut, d)))
    for i in range(m.k_dec):
        p = f"dec.block{i}"
        init_ln_params(params, f"{p}.ln1", d)
        init_mha_params(params, rng, f"{p}.self_attn", d)
        init_ln_params(params, f"{p}.ln2", d)
        init_mha_params(params, rng, f"{p}.cross_attn", d)
        init_ln_params(params, f"{p}.ln3", d)
        init_piga_params(params, rng, f"{p}.piga", d)
        init_ln_params(params, f"{p}.ln4", d)
        init_ffn_params(params, rng, f"{p}.ffn", d, m.ffn_mult * d)
    params.add("dec.head.W", glorot_uniform(rng, (d, m.d_embed)))
    params.add("dec.head.b", np.zeros(m.d_embed))


def decoder_block_fwd(x: np.ndarray, ctx: np.ndarray, params: ParamStore,
                      prefix: str, cfg: RunConfig, piga_enabled: bool):
    heads = cfg.model.n_heads
    a, ln1_cache = ln_fwd(x, params, f"{prefix}.ln1")
    sa, sa_cache = mha_fwd(a, a, params, f"{prefix}.self_attn", heads)
    x1 = x + sa
    b, ln2_cache = ln_fwd(x1, params, f"{prefix}.ln2")
    ca, ca_cache = mha_fwd(b, ctx, params, f"{prefix}.cross_attn", heads)
    x_cross = x1 + ca
    if piga_enabled:
        c, ln3_cache = ln_fwd(x_cross, params, f"{prefix}.ln3")
        pg, piga_cache = piga_fwd(c, params, f"{prefix}.piga")
        x2 = x_cross + pg
    else:
        # ablation: identity passthrough keeps the block depth constant
        ln3_cache = piga_cache = None
        x2 = x_cross
    d, ln4_cache = ln_fwd(x2, params, f"{prefix}.ln4")
    ff, ffn_cache = ffn_fwd(d, params, f"{prefix}.ffn")
    out = x2 + ff
    return out, (ln1_cache, sa_cache, ln2_cache, ca_cache, ln3_cache,
                 piga_cache, ln4_cache, ffn_cache)


def decoder_block_bwd(grad: np.ndarray, cache, params: ParamStore, prefix: str,
                      cfg: RunConfig, piga_enabled: bool,
                      route_task: str | None = None):
    heads = cfg.model.n_heads
    (ln1_cache, sa_cache, ln2_cache, ca_cache, ln3_cache,
     piga_cache, ln4_cache, ffn_cache) = cache
    gd = ffn_bwd(grad, ffn_cache, params, f"{prefix}.ffn")
    gx2 = grad + ln_bwd(gd, ln4_cache, params, f"{prefix}.ln4")
    if piga_enabled:
        gc = piga_bwd(gx2, piga_cache, params, f"{prefix}.piga", route_task)
        gx_cross = gx2 + ln_bwd(gc, ln3_cache, params, f"{prefix}.ln3")
    else:
        gx_cross = gx2
    gb, g_ctx = mha_bwd(gx_cross, ca_cache, params, f"{prefix}.cross_attn", heads)
    gx1 = gx_cross + ln_bwd(gb, ln2_cache, params, f"{prefix}.ln2")
    gq, gkv = mha_bwd(gx1, sa_cache, params, f"{prefix}.self_attn", heads)
    gx = gx1 + ln_bwd(gq + gkv, ln1_cache, params, f"{prefix}.ln1")
    return gx, g_ctx


def epsilon_fwd(z_t: np.ndarray, ctx: np.ndarray, params: ParamStore,
                cfg: RunConfig, piga_enabled: bool = True):
    """z_t (B, N, D_embed), ctx (B, L, D) -> predicted noise (B, N, D_embed)."""
    x = dense_fwd(z_t, params["dec.in_proj.W"], params["dec.in_proj.b"])
    x = x + params["dec.pos"][:z_t.shape[1]]
    block_caches = []
    for i in range(cfg.model.k_dec):
        x, cache = decoder_block_fwd(x, ctx, params, f"dec.block{i}", cfg,
                                     piga_enabled)
        block_caches.append(cache)
    eps_hat = dense_fwd(x, params["dec.head.W"], params["dec.head.b"])
    return eps_hat, (z_t, block_caches, x)


def epsilon_bwd(grad: np.ndarray, cache, params: ParamStore, cfg: RunConfig,
                piga_enabled: bool = True, route_task: str | None = None):
    """Returns (grad_z_t, grad_ctx)."""
    z_t, block_caches, x_final = cache
    gx, gw, gb = dense_bwd(grad, x_final, params["dec.head.W"])
    params.accum("dec.head.W", gw)
    params.accum("dec.head.b", gb)
    g_ctx_total = None
    for i in reversed(range(cfg.model.k_dec)):
        gx, g_ctx = decoder_block_bwd(gx, block_caches[i], params,
                                      f"dec.block{i}", cfg, piga_enabled,
                                      route_task)
        g_ctx_total = g_ctx if g_ctx_total is None else g_ctx_total + g_ctx
    params.grads["dec.pos"][:grad.shape[1]] += gx.sum(axis=0)
    gz, gw, gb = dense_bwd(gx, z_t, params["dec.in_proj.W"])
    params.accum("dec.in_proj.W", gw)
    params.accum("dec.in_proj.b", gb)
    return gz, g_ctx_total
