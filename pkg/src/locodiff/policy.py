"""Conditional diffusion policy: history conditioning, chunk sampling, and
the execute-first-action receding-horizon controller."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import (NoiseSchedule, SamplerSpec, ddim_coeffs, ddpm_step,
                        make_schedule, sampler_chain)
from .nets import denoiser_forward_np, params_from_numpy, params_to_numpy
from .quadsim import ACTION_DIM, GOAL_DIM, OBS_DIM


@dataclass
class PolicySnapshot:
    """Immutable bundle of everything needed to run the policy.

    `params` is a dict of raw numpy arrays (the graph-free inference path);
    wrap with nets.params_from_numpy for training.
    """
    params: dict
    schedule: NoiseSchedule
    sampler: SamplerSpec
    h_s: int = 30
    h_a: int = 8
    obs_dim: int = OBS_DIM
    goal_dim: int = GOAL_DIM
    action_dim: int = ACTION_DIM
    obs_mean: np.ndarray = field(default_factory=lambda: np.zeros(OBS_DIM, np.float32))
    obs_std: np.ndarray = field(default_factory=lambda: np.ones(OBS_DIM, np.float32))

    def __post_init__(self):
        expect = self.cond_dim + self.h_a * self.action_dim + 16
        got = self.params["lin0.w"].shape[0]
        if got != expect:
            raise ValueError(
                f"denoiser input {got} does not match h_s={self.h_s}, "
                f"h_a={self.h_a} (expected {expect})")

    @property
    def cond_dim(self):
        return self.h_s * self.obs_dim + self.goal_dim

    @property
    def chunk_shape(self):
        return (self.h_a, self.action_dim)

    def with_sampler(self, sampler):
        return PolicySnapshot(self.params, self.schedule, sampler, self.h_s,
                              self.h_a, self.obs_dim, self.goal_dim,
                              self.action_dim, self.obs_mean, self.obs_std)


class ObsHistory:
    """Ring buffer of the last h_s observations; exposes exactly h_s entries,
    front-padded by repeating the first observation of the episode."""

    def __init__(self, h_s, obs_dim=OBS_DIM):
        self.h_s = h_s
        self.obs_dim = obs_dim
        self._buf = np.zeros((h_s, obs_dim), np.float32)
        self._count = 0

    def reset(self):
        self._count = 0

    def push(self, obs):
        obs = np.asarray(obs, dtype=np.float32)
        if obs.shape != (self.obs_dim,):
            raise ValueError(f"obs shape {obs.shape}, expected ({self.obs_dim},)")
        if self._count == 0:
            self._buf[:] = obs
        else:
            self._buf = np.roll(self._buf, -1, axis=0)
            self._buf[-1] = obs
        self._count += 1

    def window(self):
        if self._count == 0:
            raise ValueError("history is empty; push at least one observation")
        return self._buf.copy()


def build_condition(snapshot, history, goal):
    """[normalized obs_{t-h_s+1..t}, goal] of length h_s*obs_dim + goal_dim."""
    win = history.window()
    if win.shape != (snapshot.h_s, snapshot.obs_dim):
        raise ValueError(f"history window {win.shape} does not match snapshot "
                         f"({snapshot.h_s}, {snapshot.obs_dim})")
    norm = (win - snapshot.obs_mean) / snapshot.obs_std
    return np.concatenate([norm.ravel(), goal.vector()]).astype(np.float32)


def sample_chunks(snapshot, conditions, rng):
    """Run the reverse chain for a batch of conditions.

    conditions: (B, cond_dim). Returns (B, h_a, action_dim) clamped to
    [-1, 1]; clamping happens once after the chain so the sampler math stays
    exact.
    """
    conditions = np.asarray(conditions, dtype=np.float32)
    if conditions.ndim != 2 or conditions.shape[1] != snapshot.cond_dim:
        raise ValueError(f"conditions {conditions.shape}, expected "
                         f"(B, {snapshot.cond_dim})")
    B = conditions.shape[0]
    x = rng.standard_normal((B,) + snapshot.chunk_shape).astype(np.float32)
    sched = snapshot.schedule
    for k, k_prev in sampler_chain(snapshot.sampler):
        eps_hat = denoiser_forward_np(snapshot.params, x, k, conditions)
        if snapshot.sampler.kind == "ddim":
            c_x, c_eps = ddim_coeffs(sched, k, k_prev)
            x = c_x * x + c_eps * eps_hat
        else:
            noise = rng.standard_normal(x.shape).astype(np.float32)
            x = ddpm_step(x, eps_hat, k, sched, noise)
    return np.clip(x, -1.0, 1.0)


def sample_action_chunk(snapshot, condition, rng):
    """Single-condition reverse chain -> (h_a, action_dim) chunk."""
    return sample_chunks(snapshot, np.asarray(condition)[None], rng)[0]


def act(snapshot, history, goal, rng):
    """Receding horizon: sample a chunk, execute only its first row."""
    cond = build_condition(snapshot, history, goal)
    return sample_action_chunk(snapshot, cond, rng)[0]


# ---------------------------------------------------------------------------
# persistence: checkpoint + JSON sidecar
# ---------------------------------------------------------------------------

def save_snapshot(snapshot, path):
    """Write `<path>` (weights) and `<path>.json` (dims, sampler, schedule,
    normalization)."""
    arrays = dict(snapshot.params)
    save_checkpoint(arrays, path)
    side = {
        "h_s": snapshot.h_s, "h_a": snapshot.h_a,
        "obs_dim": snapshot.obs_dim, "goal_dim": snapshot.goal_dim,
        "action_dim": snapshot.action_dim,
        "sampler": {"kind": snapshot.sampler.kind,
                    "steps": list(snapshot.sampler.steps)},
        "schedule": {"K": snapshot.schedule.K,
                     "beta_min": float(snapshot.schedule.beta[0]),
                     "beta_max": float(snapshot.schedule.beta[-1])},
        "obs_mean": snapshot.obs_mean.tolist(),
        "obs_std": snapshot.obs_std.tolist(),
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(side, f, indent=1, sort_keys=True)


def load_snapshot(path):
    params = load_checkpoint(path)
    with open(str(path) + ".json") as f:
        side = json.load(f)
    schedule = make_schedule(side["schedule"]["K"], side["schedule"]["beta_min"],
                             side["schedule"]["beta_max"])
    sampler = SamplerSpec(side["sampler"]["kind"], tuple(side["sampler"]["steps"]))
    return PolicySnapshot(
        params, schedule, sampler, side["h_s"], side["h_a"], side["obs_dim"],
        side["goal_dim"], side["action_dim"],
        np.asarray(side["obs_mean"], np.float32),
        np.asarray(side["obs_std"], np.float32))
