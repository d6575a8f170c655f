"""Differentiable building blocks with hand-derived backward passes.

The computation graph of the forecaster is fixed, so every operation comes
as a forward/backward pair instead of a general autodiff tape: the forward
returns a cache of exactly the intermediates its backward needs, and the
backward returns input gradients while accumulating parameter gradients at
the call site.  All training math runs in 64-bit floats; `ParamStore.cast`
switches a trained model to 32-bit for faster inference.

Shape convention: operations accept arbitrary leading batch dimensions and
act on the trailing one or two axes, e.g. dense maps (..., d_in) to
(..., d_out) and attention maps (..., n, d) x (..., m, d) to (..., n, d_v).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DivergenceError


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors plus same-shaped gradient accumulators.

    Names are dot-separated paths (e.g. "dec.block0.piga.proj_wind.W") so
    gradient routing and checkpoints can address individual leaves.
    Insertion order is preserved and is part of the checkpoint layout.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.asarray(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values.keys())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accum(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def grad_global_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def clip_grads(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most max_norm."""
        norm = self.grad_global_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, value in self.values.items():
            other.add(name, value.copy())
        return other

    def cast(self, dtype) -> "ParamStore":
        """Return a copy with values cast to dtype (32-bit inference mode)."""
        other = ParamStore()
        for name, value in self.values.items():
            other.values[name] = value.astype(dtype)
            other.grads[name] = np.zeros_like(other.values[name])
        return other


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int | None = None, fan_out: int | None = None) -> np.ndarray:
    """Uniform init in +-sqrt(6/(fan_in+fan_out)); fans default to the last two dims."""
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    if fan_out is None:
        fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float64)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """n x n orthogonal-like matrix via QR of a random normal matrix."""
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    # make the factorization unique so identical seeds give identical matrices
    q *= np.sign(np.diag(r))
    return q.astype(np.float64)


# ---------------------------------------------------------------------------
# Elementwise activations
# ---------------------------------------------------------------------------


def tanh_fwd(x):
    y = np.tanh(x)
    return y, y


def tanh_bwd(grad, y):
    return grad * (1.0 - y * y)


def sigmoid_fwd(x):
    y = 1.0 / (1.0 + np.exp(-x))
    return y, y


def sigmoid_bwd(grad, y):
    return grad * y * (1.0 - y)


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------


def dense_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (..., d_in), w (d_in, d_out), b (d_out,) -> (..., d_out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"dense: input shape {x.shape} does not match weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(
            f"dense: bias shape {b.shape} does not match weight shape {w.shape}")
    return x @ w + b


def dense_bwd(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (grad_x, grad_w, grad_b); parameter grads summed over batch dims."""
    g2 = grad.reshape(-1, grad.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0)
    grad_x = grad @ w.T
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Softmax and scaled-dot-product attention
# ---------------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Scaled dot-product attention.

    q (..., n, d), k (..., m, d), v (..., m, d_v) -> out (..., n, d_v).
    The score scale is 1/sqrt(d).  Cache holds the softmax weights.
    """
    if k.shape[-2] == 0:
        raise DimensionError("attention: key/value sequence is empty")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"attention: query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention: key count {k.shape} does not match value count {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    weights = softmax(scores, axis=-1)
    out = weights @ v
    return out, weights


def attention_bwd(grad: np.ndarray, q, k, v, weights):
    """Backward of attention_fwd; returns (grad_q, grad_k, grad_v)."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    grad_weights = grad @ np.swapaxes(v, -1, -2)
    # softmax backward row-wise over the key axis
    grad_scores = weights * (grad_weights
                             - (weights * grad_weights).sum(axis=-1, keepdims=True))
    grad_q = (grad_scores @ k) * scale
    grad_k = (np.swapaxes(grad_scores, -1, -2) @ q) * scale
    grad_v = np.swapaxes(weights, -1, -2) @ grad
    return grad_q, grad_k, grad_v


# ---------------------------------------------------------------------------
# Layer normalization (population variance per row over the last axis)
# ---------------------------------------------------------------------------


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   eps: float = 1e-5):
    """x (..., d) -> gamma * (x - mean)/sqrt(var + eps) + beta per row."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std)


def layer_norm_bwd(grad: np.ndarray, cache, gamma: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std = cache
    axes = tuple(range(grad.ndim - 1))
    grad_gamma = (grad * xhat).sum(axis=axes)
    grad_beta = grad.sum(axis=axes)
    gx_hat = grad * gamma
    grad_x = inv_std * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------
#
# Gate convention fixed repo-wide:
#   z = sigmoid(x Wz + h Uz + bz)
#   r = sigmoid(x Wr + h Ur + br)
#   c = tanh(x Wh + (r*h) Uh + bh)
#   h' = (1 - z) * h + z * c


def gru_cell_fwd(x: np.ndarray, h: np.ndarray, p: dict):
    """x (B, d_in), h (B, d_h), p holds wz,uz,bz,wr,ur,br,wh,uh,bh."""
    if x.shape[-1] != p["wz"].shape[0] or h.shape[-1] != p["uz"].shape[0]:
        raise DimensionError(
            f"gru_cell: input {x.shape}/state {h.shape} do not match "
            f"weights {p['wz'].shape}/{p['uz'].shape}")
    z = 1.0 / (1.0 + np.exp(-(x @ p["wz"] + h @ p["uz"] + p["bz"])))
    r = 1.0 / (1.0 + np.exp(-(x @ p["wr"] + h @ p["ur"] + p["br"])))
    rh = r * h
    c = np.tanh(x @ p["wh"] + rh @ p["uh"] + p["bh"])
    h_new = (1.0 - z) * h + z * c
    return h_new, (x, h, z, r, rh, c)


def gru_cell_bwd(grad: np.ndarray, cache, p: dict, gp: dict):
    """Accumulates parameter grads into gp; returns (grad_x, grad_h)."""
    x, h, z, r, rh, c = cache
    gz = grad * (c - h)
    gc = grad * z
    gh = grad * (1.0 - z)

    ga_c = gc * (1.0 - c * c)
    gp["wh"] += x.T @ ga_c
    gp["uh"] += rh.T @ ga_c
    gp["bh"] += ga_c.sum(axis=0)
    gx = ga_c @ p["wh"].T
    g_rh = ga_c @ p["uh"].T
    gr = g_rh * h
    gh += g_rh * r

    ga_r = gr * r * (1.0 - r)
    gp["wr"] += x.T @ ga_r
    gp["ur"] += h.T @ ga_r
    gp["br"] += ga_r.sum(axis=0)
    gx += ga_r @ p["wr"].T
    gh += ga_r @ p["ur"].T

    ga_z = gz * z * (1.0 - z)
    gp["wz"] += x.T @ ga_z
    gp["uz"] += h.T @ ga_z
    gp["bz"] += ga_z.sum(axis=0)
    gx += ga_z @ p["wz"].T
    gh += ga_z @ p["uz"].T
    return gx, gh


# ---------------------------------------------------------------------------
# 1-D convolution over time, kernel 3, same padding
# ---------------------------------------------------------------------------


def conv1d3_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x (B, n, c_in), w (3, c_in, c_out), b (c_out,) -> (B, n, c_out)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"conv1d3: input shape {x.shape} does not match kernel shape {w.shape}")
    pad = np.zeros(x.shape[:-2] + (1, x.shape[-1]), dtype=x.dtype)
    xp = np.concatenate([pad, x, pad], axis=-2)
    n = x.shape[-2]
    y = xp[..., 0:n, :] @ w[0] + xp[..., 1:n + 1, :] @ w[1] + xp[..., 2:n + 2, :] @ w[2]
    return y + b, xp


def conv1d3_bwd(grad: np.ndarray, xp: np.ndarray, w: np.ndarray):
    """Returns (grad_x, grad_w, grad_b)."""
    n = grad.shape[-2]
    g2 = grad.reshape(-1, grad.shape[-1])
    grad_w = np.empty_like(w)
    grad_xp = np.zeros_like(xp)
    for k in range(3):
        xk = xp[..., k:k + n, :].reshape(-1, xp.shape[-1])
        grad_w[k] = xk.T @ g2
        grad_xp[..., k:k + n, :] += grad @ w[k].T
    grad_b = g2.sum(axis=0)
    return grad_xp[..., 1:n + 1, :], grad_w, grad_b


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def gradient_check(loss_fn, params: ParamStore, eps: float = 1e-5,
                   n_samples: int | None = None,
                   rng: np.random.Generator | None = None,
                   include: list[str] | None = None) -> float:
    """Compare analytic gradients against central differences.

    loss_fn() must be deterministic, return a scalar, and leave analytic
    gradients in params.grads.  Returns the max over sampled coordinates of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    params.zero_grads()
    loss0 = float(loss_fn())
    if not np.isfinite(loss0):
        raise DivergenceError(f"gradient_check: loss is non-finite ({loss0})")
    analytic = {name: g.copy() for name, g in params.grads.items()}

    names = include if include is not None else params.names()
    coords = [(name, idx) for name in names
              for idx in range(params.values[name].size)]
    if n_samples is not None and n_samples < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in picks]

    worst = 0.0
    for name, idx in coords:
        flat = params.values[name].reshape(-1)
        saved = flat[idx]
        flat[idx] = saved + eps
        loss_plus = float(loss_fn())
        flat[idx] = saved - eps
        loss_minus = float(loss_fn())
        flat[idx] = saved
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise DivergenceError(
                f"gradient_check: non-finite loss while perturbing {name}[{idx}]")
        numeric = (loss_plus - loss_minus) / (2.0 * eps)
        a = analytic[name].reshape(-1)[idx]
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if rel > worst:
            worst = rel
    return worst


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite values in {what}")
    return x
