"""Noise schedules, forward noising, DDPM/DDIM reverse steps, and the
noise-prediction training loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .nets import denoiser_forward

DEFAULT_K = 100
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; alpha_bar has K+1 entries with alpha_bar[0] = 1."""
    K: int
    beta: np.ndarray        # (K,), beta[k-1] is step k
    alpha: np.ndarray       # (K,)
    alpha_bar: np.ndarray   # (K+1,)

    def sigma(self, k):
        """Posterior std of the ancestral step k -> k-1."""
        ab = self.alpha_bar
        var = self.beta[k - 1] * (1.0 - ab[k - 1]) / (1.0 - ab[k])
        return float(np.sqrt(var))


def make_schedule(K=DEFAULT_K, beta_min=DEFAULT_BETA_MIN, beta_max=DEFAULT_BETA_MAX):
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, K, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(K=K, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class SamplerSpec:
    """Reverse-sampler choice: kind is 'ddpm' or 'ddim'; steps is the strictly
    decreasing list of schedule indices to visit (the last DDIM hop goes to 0)."""
    kind: str
    steps: tuple

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        steps = tuple(int(s) for s in self.steps)
        if not steps or any(b >= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"step list must be non-empty and strictly decreasing: {steps}")
        if steps[-1] < 1:
            raise ValueError("step list must end at a positive index")
        object.__setattr__(self, "steps", steps)


def ddim_subsequence(K, K_inf):
    """Evenly spaced trailing step indices: starts at K, K_inf entries,
    spacing K/K_inf (the final hop to the clean sample is handled by the
    sampler stepping to index 0)."""
    if not (1 <= K_inf <= K):
        raise ValueError(f"need 1 <= K_inf <= K, got K_inf={K_inf}, K={K}")
    steps = [int(round(K - i * K / K_inf)) for i in range(K_inf)]
    # de-duplicate after rounding while preserving strict decrease
    out = []
    for s in steps:
        s = max(s, 1)
        if out and s >= out[-1]:
            s = out[-1] - 1
        if s < 1:
            break
        out.append(s)
    return out


def q_sample(x0, k, eps, schedule):
    """Forward noising: sqrt(abar_k) x0 + sqrt(1-abar_k) eps.

    k may be an int or a (B,) array matching leading batch dim of x0.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > schedule.K):
        raise ValueError(f"step index out of range 1..{schedule.K}")
    ab = schedule.alpha_bar[k]
    extra = (1,) * (x0.ndim - k.ndim)
    ab = ab.reshape(k.shape + extra)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def ddpm_step(x_k, eps_hat, k, schedule, noise):
    """One ancestral step k -> k-1. At k=1 the noise term is dropped."""
    if not (1 <= k <= schedule.K):
        raise ValueError(f"k={k} outside 1..{schedule.K}")
    x_k = np.asarray(x_k, dtype=np.float32)
    eps_hat = np.asarray(eps_hat, dtype=np.float32)
    ab = schedule.alpha_bar
    mean = (x_k - (schedule.beta[k - 1] / np.sqrt(1.0 - ab[k])) * eps_hat) \
        / np.sqrt(schedule.alpha[k - 1])
    if k == 1:
        return mean.astype(np.float32)
    return (mean + schedule.sigma(k) * np.asarray(noise, dtype=np.float32)).astype(np.float32)


def ddim_coeffs(schedule, k, k_prev):
    """Deterministic (eta=0) DDIM update coefficients (c_x, c_eps) such that
    x_{k_prev} = c_x * x_k + c_eps * eps_hat."""
    if not (0 <= k_prev < k <= schedule.K):
        raise ValueError(f"need 0 <= k_prev < k <= K, got k={k}, k_prev={k_prev}")
    ab = schedule.alpha_bar
    c_x = np.sqrt(ab[k_prev] / ab[k])
    c_eps = np.sqrt(1.0 - ab[k_prev]) - np.sqrt(ab[k_prev] * (1.0 - ab[k]) / ab[k])
    return np.float32(c_x), np.float32(c_eps)


def ddim_step(x_k, eps_hat, k, k_prev, schedule):
    """Deterministic DDIM step k -> k_prev (eta = 0, no noise)."""
    c_x, c_eps = ddim_coeffs(schedule, k, k_prev)
    x_k = np.asarray(x_k, dtype=np.float32)
    eps_hat = np.asarray(eps_hat, dtype=np.float32)
    return (c_x * x_k + c_eps * eps_hat).astype(np.float32)


def sampler_chain(spec):
    """Yield (k, k_prev) pairs for the configured sampler.

    DDIM pairs consecutive entries of the step list, finishing with a hop to
    index 0. DDPM visits each listed index with its native k -> k-1 update, so
    a truncated list deliberately under-denoises (that is the ablation).
    """
    if spec.kind == "ddim":
        nxt = list(spec.steps[1:]) + [0]
        return list(zip(spec.steps, nxt))
    return [(k, k - 1) for k in spec.steps]


def bc_loss(params, conditions, chunks, schedule, rng, eps_hat_fn=None):
    """Noise-prediction behavior-cloning loss on a batch.

    For each item: k ~ U{1..K}, eps ~ N(0, I), x_k = q_sample(chunk, k, eps),
    loss = mean squared error between eps and the predicted noise. Returns the
    scalar loss Tensor (call .backward() on it to get parameter grads).

    `eps_hat_fn(noisy, ks, conditions)` can replace the denoiser (oracle
    injection in tests).
    """
    chunks = np.asarray(chunks, dtype=np.float32)
    conditions = np.asarray(conditions, dtype=np.float32)
    if chunks.ndim != 3 or chunks.shape[0] == 0:
        raise ValueError(f"need a non-empty (B, h_a, action_dim) batch, got {chunks.shape}")
    B = chunks.shape[0]
    ks = rng.integers(1, schedule.K + 1, size=B)
    eps = rng.standard_normal(chunks.shape).astype(np.float32)
    noisy = q_sample(chunks, ks, eps, schedule)
    if eps_hat_fn is not None:
        eps_hat = eps_hat_fn(noisy, ks, conditions)
    else:
        eps_hat = denoiser_forward(params, noisy, ks, conditions)
    if not isinstance(eps_hat, Tensor):
        eps_hat = Tensor(eps_hat)
    return (eps_hat - Tensor(eps)).square().mean()
