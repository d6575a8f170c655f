"""Whole-model wiring: parameters, training pipeline, forecasting.

The training forward runs, for a normalized batch:

    z0 = encode(future);  z_t = noise(z0, t, eps)
    ctx = context(history, env fields, t)
    eps_hat = denoiser(z_t, ctx)
    x0_hat = decode(invert_noising(z_t, t, eps_hat))

and produces the diffusion MSE plus the per-task reconstruction terms.
The backward is split into one pass for the diffusion loss and one per
reconstruction component so gradient routing can gate the task projections;
backward passes are linear in their seeds, so the accumulated sum equals
the gradient of the uncertainty-weighted total (wherever routing allows
flow).
"""

from __future__ import annotations

import numpy as np

from .conditioning import (
    build_context_bwd,
    build_context_fwd,
    context_fuse_fwd,
    init_conditioning_params,
)
from .config import RunConfig
from .data import NormStats, TrackWindow, collate, denormalize_attrs
from .diffusion import (
    NoiseSchedule,
    decode_latent_bwd,
    decode_latent_fwd,
    encode_latent_bwd,
    encode_latent_fwd,
    forward_diffuse,
    init_codec_params,
    predict_x0,
    predict_x0_bwd,
    sample_latents,
)
from .numerics import ParamStore
from .piga import TASK_CHANNELS, TASKS, epsilon_bwd, epsilon_fwd, init_decoder_params


def init_params(cfg: RunConfig, seed: int) -> ParamStore:
    """All learnable weights, deterministically from (config, seed)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    params = ParamStore()
    init_codec_params(params, rng, cfg.model.d_embed)
    init_conditioning_params(params, rng, cfg)
    init_decoder_params(params, rng, cfg)
    params.add("loss.s_diff", np.zeros(1))   # log sigma_diff
    params.add("loss.s_recon", np.zeros(1))  # log sigma_recon
    return params


# ---------------------------------------------------------------------------
# Training pipeline
# ---------------------------------------------------------------------------


def train_forward(params: ParamStore, cfg: RunConfig, sched: NoiseSchedule,
                  batch: dict, t: np.ndarray, eps: np.ndarray) -> dict:
    """Forward pass for one batch with fixed timesteps and noise draws."""
    piga_on = cfg.train.piga_enabled
    z0, enc_cache = encode_latent_fwd(batch["fut"], params)
    z_t = forward_diffuse(z0, t, eps, sched)
    ctx, ctx_cache = build_context_fwd(batch["hist"], batch["env"], t, params, cfg)
    eps_hat, eps_cache = epsilon_fwd(z_t, ctx, params, cfg, piga_on)
    z0_hat = predict_x0(z_t, t, eps_hat, sched)
    x0_hat, dec_cache = decode_latent_fwd(z0_hat, params)

    diff = eps_hat - eps
    loss_diff = float(np.mean(diff * diff))
    recon = {}
    for task in TASKS:
        ch = list(TASK_CHANNELS[task])
        d = x0_hat[..., ch] - batch["fut"][..., ch]
        recon[task] = float(np.mean(d * d))
    return {
        "loss_diff": loss_diff,
        "recon": recon,
        "eps": eps,
        "eps_hat": eps_hat,
        "x0_hat": x0_hat,
        "t": t,
        "caches": (enc_cache, ctx_cache, eps_cache, dec_cache),
        "fut": batch["fut"],
    }


def _backprop_through_encoder(gz_t: np.ndarray, g_ctx: np.ndarray, fwd: dict,
                              params: ParamStore, cfg: RunConfig,
                              sched: NoiseSchedule) -> None:
    enc_cache, ctx_cache, _, _ = fwd["caches"]
    build_context_bwd(g_ctx, ctx_cache, params, cfg)
    abar = sched.alpha_bar[fwd["t"] - 1].reshape(-1, 1, 1)
    encode_latent_bwd(np.sqrt(abar) * gz_t, enc_cache, params)


def backward_diffusion(fwd: dict, params: ParamStore, cfg: RunConfig,
                       sched: NoiseSchedule, coeff: float) -> None:
    """Backward of coeff * mean((eps_hat - eps)^2) through the whole stack."""
    _, _, eps_cache, _ = fwd["caches"]
    diff = fwd["eps_hat"] - fwd["eps"]
    seed = coeff * 2.0 * diff / diff.size
    gz_t, g_ctx = epsilon_bwd(seed, eps_cache, params, cfg,
                              cfg.train.piga_enabled, route_task=None)
    _backprop_through_encoder(gz_t, g_ctx, fwd, params, cfg, sched)


def backward_recon(fwd: dict, params: ParamStore, cfg: RunConfig,
                   sched: NoiseSchedule, coeff: float,
                   task: str | None) -> None:
    """Backward of coeff * (one task's MSE, or all three when task is None).

    With a task given, the foreign decompose projections in every decoder
    block are stop-gradient barriers.
    """
    _, _, eps_cache, dec_cache = fwd["caches"]
    seed = np.zeros_like(fwd["x0_hat"])
    tasks = [task] if task is not None else list(TASKS)
    for name in tasks:
        ch = list(TASK_CHANNELS[name])
        d = fwd["x0_hat"][..., ch] - fwd["fut"][..., ch]
        seed[..., ch] = coeff * 2.0 * d / d.size
    gz0_hat = decode_latent_bwd(seed, dec_cache, params)
    gz_t_direct, g_eps_hat = predict_x0_bwd(gz0_hat, fwd["t"], sched)
    gz_t, g_ctx = epsilon_bwd(g_eps_hat, eps_cache, params, cfg,
                              cfg.train.piga_enabled, route_task=task)
    _backprop_through_encoder(gz_t + gz_t_direct, g_ctx, fwd, params, cfg, sched)


def train_losses_and_backward(params: ParamStore, cfg: RunConfig,
                              sched: NoiseSchedule, batch: dict,
                              t: np.ndarray, eps: np.ndarray) -> dict:
    """Forward + uncertainty-weighted backward; grads accumulate in params."""
    fwd = train_forward(params, cfg, sched, batch, t, eps)
    s_diff = float(params["loss.s_diff"][0])
    s_recon = float(params["loss.s_recon"][0])
    coeff_d = 0.5 * np.exp(-2.0 * s_diff)
    coeff_r = 0.5 * np.exp(-2.0 * s_recon)
    loss_recon = sum(fwd["recon"].values())
    loss_total = coeff_d * fwd["loss_diff"] + coeff_r * loss_recon \
        + s_diff + s_recon

    backward_diffusion(fwd, params, cfg, sched, coeff_d)
    if cfg.train.routing_enabled:
        for task in TASKS:
            backward_recon(fwd, params, cfg, sched, coeff_r, task)
    else:
        backward_recon(fwd, params, cfg, sched, coeff_r, None)
    params.grads["loss.s_diff"] += -2.0 * coeff_d * fwd["loss_diff"] + 1.0
    params.grads["loss.s_recon"] += -2.0 * coeff_r * loss_recon + 1.0

    return {
        "loss_total": float(loss_total),
        "loss_diff": fwd["loss_diff"],
        "loss_traj": fwd["recon"]["traj"],
        "loss_wind": fwd["recon"]["wind"],
        "loss_pres": fwd["recon"]["pres"],
    }


# ---------------------------------------------------------------------------
# Forecasting
# ---------------------------------------------------------------------------


def member_rng(root_seed: int, member: int) -> np.random.Generator:
    """Independent, reproducible noise stream for one ensemble member."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([root_seed, member])))


def _multi_stream_draw(rngs):
    def draw(shape):
        return np.stack([r.standard_normal(shape[1:]) for r in rngs])
    return draw


def sample_normalized(params: ParamStore, cfg: RunConfig, sched: NoiseSchedule,
                      base_tokens: np.ndarray, rngs) -> np.ndarray:
    """Reverse-sample one latent sequence per rng; returns (B, N, 4) normalized.

    base_tokens (B, M+N+1, D) is the t-independent context part per row;
    only the timestep token and the fusion encoder are re-run per step.
    """
    piga_on = cfg.train.piga_enabled

    def eps_fn(z, t):
        ctx, _ = context_fuse_fwd(base_tokens, t, params, cfg)
        eps_hat, _ = epsilon_fwd(z, ctx, params, cfg, piga_on)
        return eps_hat

    shape = (base_tokens.shape[0], cfg.data.n_fut, cfg.model.d_embed)
    z0 = sample_latents(eps_fn, shape, sched, _multi_stream_draw(rngs))
    x0, _ = decode_latent_fwd(z0, params)
    return x0


def window_base_tokens(params: ParamStore, cfg: RunConfig, stats: NormStats,
                       windows: list[TrackWindow]) -> np.ndarray:
    from .conditioning import base_tokens_fwd
    batch = collate(windows, stats)
    tokens, _ = base_tokens_fwd(batch["hist"], batch["env"], params, cfg)
    return tokens


def forecast_window(params: ParamStore, cfg: RunConfig, sched: NoiseSchedule,
                    stats: NormStats, window: TrackWindow,
                    rng: np.random.Generator) -> np.ndarray:
    """Single-draw forecast for one window: (N, 4) denormalized attributes."""
    tokens = window_base_tokens(params, cfg, stats, [window])
    norm = sample_normalized(params, cfg, sched, tokens, [rng])
    return denormalize_attrs(norm, window.x_ref[None], stats)[0]


# ---------------------------------------------------------------------------
# Task-stream feature export (post-gate features from the last block)
# ---------------------------------------------------------------------------


def export_stream_features(params: ParamStore, cfg: RunConfig,
                           sched: NoiseSchedule, stats: NormStats,
                           windows: list[TrackWindow]) -> dict[str, np.ndarray]:
    """Deterministic per-window stream vectors for embedding tools.

    Teacher-forced at t=1 with zero injected noise: z_1 = sqrt(abar_1) z0.
    Returns {task: (n_windows, d_sub)} with post-gate features from the last
    decoder block, mean-pooled over the forecast positions.
    """
    batch = collate(windows, stats)
    z0, _ = encode_latent_fwd(batch["fut"], params)
    t = np.ones(len(windows), dtype=np.int64)
    z_1 = forward_diffuse(z0, t, np.zeros_like(z0), sched)
    ctx, _ = build_context_fwd(batch["hist"], batch["env"], t, params, cfg)
    _, (_, block_caches, _) = epsilon_fwd(z_1, ctx, params, cfg,
                                          cfg.train.piga_enabled)
    piga_cache = block_caches[-1][5]
    if piga_cache is None:
        raise ValueError("feature export requires the gated cross-task module "
                         "(disabled by this ablation)")
    concat_f = piga_cache[3]
    d_sub = piga_cache[4]
    feats = {}
    for i, task in enumerate(TASKS):
        feats[task] = concat_f[..., i * d_sub:(i + 1) * d_sub].mean(axis=1)
    return feats
