"""Behavior-cloning pretraining of the conditional denoiser on expert data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adam import AdamState, adam_step
from .dataset import sample_batch
from .diffusion import SamplerSpec, bc_loss, ddim_subsequence, make_schedule
from .nets import collect_grads, init_denoiser, params_to_numpy, zero_grads
from .policy import PolicySnapshot
from .quadsim import ACTION_DIM, GOAL_DIM, OBS_DIM


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 10000
    batch: int = 512
    lr: float = 3e-4
    K: int = 100
    h_s: int = 30
    h_a: int = 8
    k_inf: int = 5          # DDIM inference steps baked into the snapshot
    ema_decay: float = 0.999  # weight EMA for the exported snapshot; 0 = off
    lr_min_frac: float = 0.05  # cosine lr decay floor as a fraction of lr
    log_every: int = 100


def pretrain(dataset, cfg=None, seed=0, callback=None):
    """Train the denoiser with the noise-prediction loss.

    Returns (PolicySnapshot with a DDIM-k_inf sampler, loss curve list of
    (step, smoothed loss)). `callback(step, loss)` fires every log_every
    steps.
    """
    cfg = cfg or PretrainConfig()
    rng = np.random.Generator(np.random.Philox(key=seed))
    schedule = make_schedule(cfg.K)
    cond_dim = cfg.h_s * OBS_DIM + GOAL_DIM
    params = init_denoiser(rng, cond_dim, cfg.h_a, ACTION_DIM)
    opt = AdamState.for_params(params)
    # exported weights are an EMA of the trajectory: the denoiser's residual
    # fit error directly attenuates DDIM sample amplitude, and averaging out
    # the SGD noise measurably reduces that bias
    ema = ({k: t.data.copy() for k, t in params.items()}
           if cfg.ema_decay > 0.0 else None)
    curve = []
    recent = []
    for step in range(1, cfg.steps + 1):
        conds, chunks = sample_batch(dataset, cfg.batch, cfg.h_s, cfg.h_a, rng)
        zero_grads(params)
        loss = bc_loss(params, conds, chunks, schedule, rng)
        loss.backward()
        # cosine decay to lr*lr_min_frac: the fixed-lr SGD noise floor is what
        # limits the denoiser's fit error, and that error shows up directly as
        # amplitude/frequency shrinkage of the sampled gait in closed loop
        frac = cfg.lr_min_frac + (1.0 - cfg.lr_min_frac) * 0.5 * (
            1.0 + math.cos(math.pi * step / cfg.steps))
        adam_step(params, collect_grads(params), opt, cfg.lr * frac)
        if ema is not None:
            for k, t in params.items():
                ema[k] += (1.0 - cfg.ema_decay) * (t.data - ema[k])
        recent.append(float(loss.data))
        if step % cfg.log_every == 0 or step == cfg.steps:
            smoothed = float(np.mean(recent))
            recent = []
            curve.append((step, smoothed))
            if callback is not None:
                callback(step, smoothed)
    sampler = SamplerSpec("ddim", ddim_subsequence(cfg.K, cfg.k_inf))
    weights = ({k: a.copy() for k, a in ema.items()} if ema is not None
               else params_to_numpy(params))
    snap = PolicySnapshot(
        weights, schedule, sampler, cfg.h_s, cfg.h_a,
        OBS_DIM, GOAL_DIM, ACTION_DIM,
        dataset.obs_mean.copy(), dataset.obs_std.copy())
    return snap, curve
