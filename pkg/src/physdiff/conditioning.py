"""Conditioning context for the denoiser.

The context token sequence has a fixed layout: one history token (GRU over
the M past observations), one pooled token per environment field (M
historical + N future, patch attention + mean pool, with a learned flag
embedding marking the field's kind), and one sinusoidal timestep token.
Learned position embeddings are added over the L_ctx = M + N + 2 slots and
a small pre-layer-norm Transformer encoder mixes everything.

Ablations replace env tokens with a learned null token; the token count
never changes.  Because only the timestep token depends on t, the base
tokens are built once per window and re-fused cheaply at every reverse
step during sampling.
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
from .errors import ConfigError, DimensionError
from .numerics import (
    ParamStore,
    dense_bwd,
    dense_fwd,
    glorot_uniform,
    gru_cell_bwd,
    gru_cell_fwd,
    orthogonal,
)

GRU_GATE_NAMES = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


def init_conditioning_params(params: ParamStore, rng: np.random.Generator,
                             cfg: RunConfig) -> None:
    m = cfg.model
    d = m.d_model
    # history GRU + projection
    for gate in ("z", "r", "h"):
        params.add(f"enc.gru.w{gate}", glorot_uniform(rng, (4, m.gru_hidden)))
        params.add(f"enc.gru.u{gate}", orthogonal(rng, m.gru_hidden))
        params.add(f"enc.gru.b{gate}", np.zeros(m.gru_hidden))
    params.add("enc.hist_proj.W", glorot_uniform(rng, (m.gru_hidden, d)))
    params.add("enc.hist_proj.b", np.zeros(d))
    # env patch encoder (weights shared between historical and future fields,
    # distinguished by the kind flag embedding)
    patch_dim = cfg.generator.channels * m.patch * m.patch
    params.add("enc.env.embed.W", glorot_uniform(rng, (patch_dim, d)))
    params.add("enc.env.embed.b", np.zeros(d))
    init_ln_params(params, "enc.env.ln1", d)
    init_mha_params(params, rng, "enc.env.attn", d)
    init_ln_params(params, "enc.env.ln2", d)
    init_ffn_params(params, rng, "enc.env.ffn", d, m.ffn_mult * d)
    params.add("enc.env.flag", 0.02 * rng.standard_normal((2, d)))
    params.add("enc.env.null_token", 0.02 * rng.standard_normal(d))
    # fusion encoder
    l_ctx = cfg.data.m_hist + cfg.data.n_fut + 2
    params.add("enc.pos", 0.02 * rng.standard_normal((l_ctx, d)))
    for i in range(m.k_enc):
        init_ln_params(params, f"enc.block{i}.ln1", d)
        init_mha_params(params, rng, f"enc.block{i}.attn", d)
        init_ln_params(params, f"enc.block{i}.ln2", d)
        init_ffn_params(params, rng, f"enc.block{i}.ffn", d, m.ffn_mult * d)


# ---------------------------------------------------------------------------
# History encoder
# ---------------------------------------------------------------------------


def encode_history_fwd(hist: np.ndarray, params: ParamStore):
    """hist (B, M, 4) -> history token (B, 1, D)."""
    if hist.ndim != 3 or hist.shape[1] < 1:
        raise DimensionError(f"encode_history: need (B, M>=1, 4), got {hist.shape}")
    b, m_steps, _ = hist.shape
    gates = {k: params[f"enc.gru.{k}"] for k in GRU_GATE_NAMES}
    h = np.zeros((b, gates["uz"].shape[0]))
    step_caches = []
    for i in range(m_steps):
        h, cache = gru_cell_fwd(hist[:, i], h, gates)
        step_caches.append(cache)
    tok = dense_fwd(h, params["enc.hist_proj.W"], params["enc.hist_proj.b"])
    return tok[:, None, :], (step_caches, h)


def encode_history_bwd(grad: np.ndarray, cache, params: ParamStore) -> None:
    step_caches, h_final = cache
    gates = {k: params[f"enc.gru.{k}"] for k in GRU_GATE_NAMES}
    g_accum = {k: params.grads[f"enc.gru.{k}"] for k in GRU_GATE_NAMES}
    gh, gw, gb = dense_bwd(grad[:, 0, :], h_final, params["enc.hist_proj.W"])
    params.accum("enc.hist_proj.W", gw)
    params.accum("enc.hist_proj.b", gb)
    for cache_i in reversed(step_caches):
        _, gh = gru_cell_bwd(gh, cache_i, gates, g_accum)


# ---------------------------------------------------------------------------
# Environment-field encoder
# ---------------------------------------------------------------------------


def _to_patches(env: np.ndarray, patch: int) -> np.ndarray:
    """(B, F, C, H, W) -> (B, F, n_patches, C*patch*patch)."""
    b, f, c, h, w = env.shape
    if h % patch or w % patch:
        raise ConfigError(f"grid {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    y = env.reshape(b, f, c, hp, patch, wp, patch)
    y = y.transpose(0, 1, 3, 5, 2, 4, 6)
    return np.ascontiguousarray(y).reshape(b, f, hp * wp, c * patch * patch)


def encode_env_fwd(env: np.ndarray, kinds: np.ndarray, params: ParamStore,
                   cfg: RunConfig):
    """env (B, F, C, H, W), kinds (F,) in {0: historical, 1: future} ->
    one pooled token per field, (B, F, D)."""
    n_heads = cfg.model.n_heads
    patches = _to_patches(env, cfg.model.patch)
    tok = dense_fwd(patches, params["enc.env.embed.W"], params["enc.env.embed.b"])
    a, ln1_cache = ln_fwd(tok, params, "enc.env.ln1")
    sa, attn_cache = mha_fwd(a, a, params, "enc.env.attn", n_heads)
    t1 = tok + sa
    b2, ln2_cache = ln_fwd(t1, params, "enc.env.ln2")
    ff, ffn_cache = ffn_fwd(b2, params, "enc.env.ffn")
    t2 = t1 + ff
    pooled = t2.mean(axis=2) + params["enc.env.flag"][kinds]
    return pooled, (patches, ln1_cache, attn_cache, ln2_cache, ffn_cache,
                    t2.shape[2], kinds)


def encode_env_bwd(grad: np.ndarray, cache, params: ParamStore,
                   cfg: RunConfig) -> None:
    patches, ln1_cache, attn_cache, ln2_cache, ffn_cache, n_patches, kinds = cache
    for k in (0, 1):
        sel = kinds == k
        if np.any(sel):
            params.grads["enc.env.flag"][k] += grad[:, sel].sum(axis=(0, 1))
    gt2 = np.broadcast_to(grad[:, :, None, :] / n_patches,
                          grad.shape[:2] + (n_patches, grad.shape[-1]))
    gb2 = ffn_bwd(gt2, ffn_cache, params, "enc.env.ffn")
    gt1 = gt2 + ln_bwd(gb2, ln2_cache, params, "enc.env.ln2")
    gq, gkv = mha_bwd(gt1, attn_cache, params, "enc.env.attn", cfg.model.n_heads)
    gtok = gt1 + ln_bwd(gq + gkv, ln1_cache, params, "enc.env.ln1")
    _, gw, gb = dense_bwd(gtok, patches, params["enc.env.embed.W"])
    params.accum("enc.env.embed.W", gw)
    params.accum("enc.env.embed.b", gb)


# ---------------------------------------------------------------------------
# Timestep embedding (sinusoidal, interleaved sin/cos pairs)
# ---------------------------------------------------------------------------


def timestep_embedding(t, d_model: int, base: float = 10000.0) -> np.ndarray:
    """t scalar or (B,) -> (B, 1, d_model); deterministic, distinct per t."""
    if d_model % 2:
        raise ConfigError(f"timestep embedding needs even d_model, got {d_model}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(d_model // 2)
    freq = base ** (-2.0 * k / d_model)
    angles = t_arr[:, None] * freq[None, :]
    emb = np.empty((t_arr.shape[0], d_model))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb[:, None, :]


# ---------------------------------------------------------------------------
# Context assembly and fusion
# ---------------------------------------------------------------------------


def base_tokens_fwd(hist: np.ndarray, env: np.ndarray, params: ParamStore,
                    cfg: RunConfig):
    """Build the t-independent part of the context: [history, env tokens].

    Ablation flags replace masked env-token slots with the learned null
    token; gradients at masked slots flow to the null token only.
    """
    m_hist = cfg.data.m_hist
    n_fut = cfg.data.n_fut
    if env.shape[1] != m_hist + n_fut:
        raise DimensionError(f"expected {m_hist + n_fut} env fields, "
                             f"got {env.shape[1]}")
    kinds = np.array([0] * m_hist + [1] * n_fut)
    h_tok, hist_cache = encode_history_fwd(hist, params)
    env_toks, env_cache = encode_env_fwd(env, kinds, params, cfg)

    mask = np.zeros(m_hist + n_fut, dtype=bool)
    if not cfg.train.future_env_enabled:
        mask[m_hist:] = True
    if not cfg.train.hist_env_enabled:
        mask[:m_hist] = True
    if mask.any():
        env_toks = env_toks.copy()
        env_toks[:, mask, :] = params["enc.env.null_token"]
    tokens = np.concatenate([h_tok, env_toks], axis=1)
    return tokens, (hist_cache, env_cache, mask)


def base_tokens_bwd(grad: np.ndarray, cache, params: ParamStore,
                    cfg: RunConfig) -> None:
    hist_cache, env_cache, mask = cache
    encode_history_bwd(grad[:, 0:1, :], hist_cache, params)
    g_env = grad[:, 1:, :]
    if mask.any():
        params.grads["enc.env.null_token"] += g_env[:, mask, :].sum(axis=(0, 1))
        g_env = g_env.copy()
        g_env[:, mask, :] = 0.0
    encode_env_bwd(g_env, env_cache, params, cfg)


def context_fuse_fwd(base_tokens: np.ndarray, t, params: ParamStore,
                     cfg: RunConfig):
    """[base tokens, timestep token] + positions -> fused context (B, L, D)."""
    b = base_tokens.shape[0]
    t_tok = timestep_embedding(t, cfg.model.d_model)
    if t_tok.shape[0] == 1 and b > 1:
        t_tok = np.broadcast_to(t_tok, (b, 1, cfg.model.d_model))
    x = np.concatenate([base_tokens, t_tok], axis=1) + params["enc.pos"]
    block_caches = []
    for i in range(cfg.model.k_enc):
        a, ln1_cache = ln_fwd(x, params, f"enc.block{i}.ln1")
        sa, attn_cache = mha_fwd(a, a, params, f"enc.block{i}.attn",
                                 cfg.model.n_heads)
        x = x + sa
        h, ln2_cache = ln_fwd(x, params, f"enc.block{i}.ln2")
        ff, ffn_cache = ffn_fwd(h, params, f"enc.block{i}.ffn")
        x = x + ff
        block_caches.append((ln1_cache, attn_cache, ln2_cache, ffn_cache))
    return x, block_caches


def context_fuse_bwd(grad: np.ndarray, cache, params: ParamStore,
                     cfg: RunConfig) -> np.ndarray:
    """Returns the gradient w.r.t. the base tokens (timestep token has no
    parameters; position embeddings accumulate here)."""
    gx = grad
    for i in reversed(range(cfg.model.k_enc)):
        ln1_cache, attn_cache, ln2_cache, ffn_cache = cache[i]
        gh = ffn_bwd(gx, ffn_cache, params, f"enc.block{i}.ffn")
        gx = gx + ln_bwd(gh, ln2_cache, params, f"enc.block{i}.ln2")
        gq, gkv = mha_bwd(gx, attn_cache, params, f"enc.block{i}.attn",
                          cfg.model.n_heads)
        gx = gx + ln_bwd(gq + gkv, ln1_cache, params, f"enc.block{i}.ln1")
    params.grads["enc.pos"] += gx.sum(axis=0)
    return gx[:, :-1, :]


def build_context_fwd(hist: np.ndarray, env: np.ndarray, t, params: ParamStore,
                      cfg: RunConfig):
    """Full context for a batch: (B, M+N+2, D)."""
    base, base_cache = base_tokens_fwd(hist, env, params, cfg)
    ctx, fuse_cache = context_fuse_fwd(base, t, params, cfg)
    return ctx, (base_cache, fuse_cache)


def build_context_bwd(grad: np.ndarray, cache, params: ParamStore,
                      cfg: RunConfig) -> None:
    base_cache, fuse_cache = cache
    g_base = context_fuse_bwd(grad, fuse_cache, params, cfg)
    base_tokens_bwd(g_base, base_cache, params, cfg)
