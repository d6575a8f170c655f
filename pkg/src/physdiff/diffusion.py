"""Noise schedule, latent codec, and the forward/reverse diffusion algebra.

Timesteps are 1-based (t = 1..T); schedule arrays are indexed with t - 1.
The reverse-step noise scale is sigma_t = sqrt(beta_t) and the injected
noise is forced to zero at t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError, ValidationError
from .numerics import (
    ParamStore,
    conv1d3_bwd,
    conv1d3_fwd,
    dense_bwd,
    dense_fwd,
    glorot_uniform,
    tanh_bwd,
    tanh_fwd,
)

ABAR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02
                   ) -> NoiseSchedule:
    """Linearly spaced betas (inclusive); sigma_t = sqrt(beta_t)."""
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, "
                          f"got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha,
                         alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta))


def _check_t(t, T):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ValidationError(f"timestep {t} outside [1, {T}]")
    return t_arr


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule
                    ) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t may be a scalar or a (B,) array matching z0's leading dimension.
    """
    t_arr = _check_t(t, sched.T)
    abar = sched.alpha_bar[t_arr - 1]
    if t_arr.ndim:  # per-example timestep: broadcast over trailing axes
        abar = abar.reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def reverse_step(z_t: np.ndarray, t: int, eps_hat: np.ndarray,
                 sched: NoiseSchedule, w: np.ndarray | None) -> np.ndarray:
    """One ancestral step from z_t to z_{t-1}; w must be zero (or None) at t=1."""
    _check_t(t, sched.T)
    alpha = sched.alpha[t - 1]
    abar = sched.alpha_bar[t - 1]
    if t == 1:
        if w is not None and np.any(w != 0.0):
            raise ValidationError("reverse_step: noise must be zero at t=1")
        w = None
    # beta_t = 0 means no noise was added at this step, so none is removed
    # (the (1-alpha)/sqrt(1-abar) coefficient is 0/0 in that limit)
    coef = 0.0 if alpha == 1.0 else (1.0 - alpha) / np.sqrt(1.0 - abar)
    mean = (z_t - coef * eps_hat) / np.sqrt(alpha)
    if w is None:
        return mean
    return mean + sched.sigma[t - 1] * w


def predict_x0(z_t: np.ndarray, t, eps_hat: np.ndarray, sched: NoiseSchedule
               ) -> np.ndarray:
    """Invert the forward marginal: z0_hat = (z_t - sqrt(1-abar) eps_hat)/sqrt(abar)."""
    t_arr = _check_t(t, sched.T)
    abar = sched.alpha_bar[t_arr - 1]
    if np.any(abar <= ABAR_FLOOR):
        raise ValidationError(f"predict_x0: alpha_bar at t={t} below {ABAR_FLOOR}")
    if t_arr.ndim:
        abar = abar.reshape((-1,) + (1,) * (z_t.ndim - 1))
    return (z_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def predict_x0_bwd(grad: np.ndarray, t, sched: NoiseSchedule):
    """Gradients of predict_x0 w.r.t. (z_t, eps_hat)."""
    t_arr = np.asarray(t)
    abar = sched.alpha_bar[t_arr - 1]
    if t_arr.ndim:
        abar = abar.reshape((-1,) + (1,) * (grad.ndim - 1))
    grad_zt = grad / np.sqrt(abar)
    grad_eps = -np.sqrt(1.0 - abar) / np.sqrt(abar) * grad
    return grad_zt, grad_eps


def sample_latents(eps_fn, shape: tuple[int, ...], sched: NoiseSchedule,
                   rng_draw) -> np.ndarray:
    """Run the full reverse loop from z_T ~ N(0, I).

    eps_fn(z, t) predicts the noise at step t; rng_draw(shape) supplies
    standard-normal draws (first call is z_T, then one per step T..2, in
    that fixed order so member streams stay reproducible).
    """
    z = rng_draw(shape)
    for t in range(sched.T, 0, -1):
        eps_hat = eps_fn(z, t)
        w = rng_draw(shape) if t > 1 else None
        z = reverse_step(z, t, eps_hat, sched, w)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"sampling diverged at t={t}")
    return z


# ---------------------------------------------------------------------------
# Latent codec: attribute sequences (N, 4) <-> latents (N, D_embed)
# ---------------------------------------------------------------------------
#
# encode: conv1d(k=3, same) -> tanh -> pointwise dense
# decode mirrors it: pointwise dense -> tanh -> conv1d(k=3, same)

N_ATTRS = 4


def init_codec_params(params: ParamStore, rng: np.random.Generator,
                      d_embed: int, prefix: str = "ae") -> None:
    params.add(f"{prefix}.enc_conv.W",
               glorot_uniform(rng, (3, N_ATTRS, d_embed), fan_in=3 * N_ATTRS))
    params.add(f"{prefix}.enc_conv.b", np.zeros(d_embed))
    params.add(f"{prefix}.enc_dense.W", glorot_uniform(rng, (d_embed, d_embed)))
    params.add(f"{prefix}.enc_dense.b", np.zeros(d_embed))
    params.add(f"{prefix}.dec_dense.W", glorot_uniform(rng, (d_embed, d_embed)))
    params.add(f"{prefix}.dec_dense.b", np.zeros(d_embed))
    params.add(f"{prefix}.dec_conv.W",
               glorot_uniform(rng, (3, d_embed, N_ATTRS), fan_in=3 * d_embed))
    params.add(f"{prefix}.dec_conv.b", np.zeros(N_ATTRS))


def encode_latent_fwd(x0: np.ndarray, params: ParamStore, prefix: str = "ae"):
    """x0 (B, N, 4) normalized -> z (B, N, D_embed)."""
    h, xp = conv1d3_fwd(x0, params[f"{prefix}.enc_conv.W"], params[f"{prefix}.enc_conv.b"])
    a, a_cache = tanh_fwd(h)
    z = dense_fwd(a, params[f"{prefix}.enc_dense.W"], params[f"{prefix}.enc_dense.b"])
    return z, (xp, a_cache, a)


def encode_latent_bwd(grad: np.ndarray, cache, params: ParamStore,
                      prefix: str = "ae") -> np.ndarray:
    xp, a_cache, a = cache
    ga, gw, gb = dense_bwd(grad, a, params[f"{prefix}.enc_dense.W"])
    params.accum(f"{prefix}.enc_dense.W", gw)
    params.accum(f"{prefix}.enc_dense.b", gb)
    gh = tanh_bwd(ga, a_cache)
    gx, gw, gb = conv1d3_bwd(gh, xp, params[f"{prefix}.enc_conv.W"])
    params.accum(f"{prefix}.enc_conv.W", gw)
    params.accum(f"{prefix}.enc_conv.b", gb)
    return gx


def decode_latent_fwd(z: np.ndarray, params: ParamStore, prefix: str = "ae"):
    """z (B, N, D_embed) -> x (B, N, 4)."""
    h = dense_fwd(z, params[f"{prefix}.dec_dense.W"], params[f"{prefix}.dec_dense.b"])
    a, a_cache = tanh_fwd(h)
    x, xp = conv1d3_fwd(a, params[f"{prefix}.dec_conv.W"], params[f"{prefix}.dec_conv.b"])
    return x, (z, a_cache, xp)


def decode_latent_bwd(grad: np.ndarray, cache, params: ParamStore,
                      prefix: str = "ae") -> np.ndarray:
    z, a_cache, xp = cache
    ga, gw, gb = conv1d3_bwd(grad, xp, params[f"{prefix}.dec_conv.W"])
    params.accum(f"{prefix}.dec_conv.W", gw)
    params.accum(f"{prefix}.dec_conv.b", gb)
    gh = tanh_bwd(ga, a_cache)
    gz, gw, gb = dense_bwd(gh, z, params[f"{prefix}.dec_dense.W"])
    params.accum(f"{prefix}.dec_dense.W", gw)
    params.accum(f"{prefix}.dec_dense.b", gb)
    return gz
