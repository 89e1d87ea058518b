"""Expert demonstration collection and the on-disk dataset format.

Datasets are flat binary files ("DMLD"): a JSON meta header carrying dims,
dt, gait names, and normalization statistics, followed by per-episode
float32 blocks. Observation normalization statistics are computed at
collection time over every included step.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .quadsim import (ACTION_DIM, GAITS, GOAL_DIM, OBS_DIM, EnvConfig,
                      QuadEnv, build_expert_table, command_speed,
                      expert_action, expert_freq, observe, sample_goal)

MAGIC = b"DMLD"
VERSION = 1
STD_FLOOR = 1e-6


class DatasetError(ValueError):
    pass


@dataclass
class Episode:
    obs: np.ndarray       # (T, 18)
    goal: np.ndarray      # (T, 7), constant rows within an episode
    action: np.ndarray    # (T, 4)
    seed: int = 0
    randomization: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.obs.shape[0]
        if not (self.goal.shape == (T, GOAL_DIM) and self.action.shape == (T, ACTION_DIM)
                and self.obs.shape == (T, OBS_DIM)):
            raise DatasetError(
                f"inconsistent episode arrays: obs {self.obs.shape}, "
                f"goal {self.goal.shape}, action {self.action.shape}")

    @property
    def T(self):
        return self.obs.shape[0]


@dataclass
class Dataset:
    episodes: list
    obs_mean: np.ndarray      # (18,)
    obs_std: np.ndarray       # (18,), floored at STD_FLOOR
    action_low: np.ndarray    # (4,)
    action_high: np.ndarray   # (4,)
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return sum(ep.T for ep in self.episodes)

    def normalize_obs(self, obs):
        return ((np.asarray(obs, dtype=np.float32) - self.obs_mean)
                / self.obs_std).astype(np.float32)

    def gait_counts(self):
        counts = dict.fromkeys(GAITS, 0)
        for ep in self.episodes:
            counts[GAITS[int(np.argmax(ep.goal[0, 3:]))]] += 1
        return counts


def compute_stats(episodes):
    """Per-dim obs mean/std over all steps, plus action bounds."""
    if not episodes:
        return (np.zeros(OBS_DIM, np.float32), np.ones(OBS_DIM, np.float32),
                -np.ones(ACTION_DIM, np.float32), np.ones(ACTION_DIM, np.float32))
    obs = np.concatenate([ep.obs for ep in episodes])
    act = np.concatenate([ep.action for ep in episodes])
    mean = obs.mean(axis=0, dtype=np.float64).astype(np.float32)
    std = np.maximum(obs.std(axis=0, dtype=np.float64), STD_FLOOR).astype(np.float32)
    return mean, std, act.min(axis=0), act.max(axis=0)


def rollout_expert(cfg, table, goal, seed, env_index=0, T=500, randomize=True,
                   action_noise=0.0, amp_walk_std=0.0, amp_walk_tau=1.0,
                   amp_scale_std=0.0, amp_scale_mu=0.0):
    """Roll a scripted expert for up to T steps; returns (Episode, fell).

    With action_noise > 0, the executed command is the expert action plus
    i.i.d. Gaussian noise while the *clean* expert action is recorded as the
    imitation label.  The perturbed rollout visits a tube around the nominal
    gait manifold, so the cloned policy gets supervision on how to steer back
    toward it instead of only seeing on-manifold states.

    amp_walk_std > 0 additionally scales the *executed* stroke amplitude by a
    slowly varying log-scale Ornstein-Uhlenbeck factor (correlation time
    amp_walk_tau seconds).  This produces sustained histories at the wrong
    stroke amplitude whose labels command the nominal one — without it a
    cloned policy copies whatever amplitude its own history shows and
    collapses to standing in closed loop, because any self-consistent
    amplitude is a fixed point of pure imitation.

    amp_scale_std > 0 draws one extra log-scale factor per episode and holds
    it for the whole rollout.  With it the history's amplitude carries no
    information about the label's amplitude at all, so the goal is the only
    usable predictor of the commanded stroke — the strongest defense against
    the amplitude-copying fixed point.

    amp_scale_mu shifts the per-episode log-scale's mean.  A negative value
    centers the executed stroke *below* nominal while labels stay nominal, so
    the residual history->amplitude mapping the net learns acquires a gain
    above one ("whatever stroke you have been running, command slightly
    more").  In closed loop that gain cancels the deterministic sampler's
    amplitude shrinkage, pinning the self-consistent operating point at the
    nominal stroke instead of below it.
    """
    env = QuadEnv(cfg, seed=seed, env_index=env_index)
    env.reset(goal, randomize=randomize)
    nrng = np.random.Generator(np.random.Philox(key=np.uint64(seed) << np.uint64(20)
                                                | np.uint64(env_index + 1)))
    obs = observe(env.state)
    obs_log = np.empty((T, OBS_DIM), np.float32)
    act_log = np.empty((T, ACTION_DIM), np.float32)
    speed = command_speed(goal)
    amp = table.amplitude(goal.gait_name, speed)
    freq = expert_freq(goal)
    theta = 0.0
    z = 0.0                    # OU log amplitude-scale state
    z0 = amp_scale_mu + (amp_scale_std * nrng.standard_normal()
                         if amp_scale_std > 0.0 else 0.0)
    ou_a = cfg.dt / amp_walk_tau
    ou_b = amp_walk_std * math.sqrt(2.0 * cfg.dt / amp_walk_tau)
    fell = False
    t = 0
    for t in range(T):
        a = expert_action(theta, goal, amp, freq, table)
        obs_log[t] = obs
        act_log[t] = a
        if amp_walk_std > 0.0 or amp_scale_std > 0.0 or amp_scale_mu != 0.0:
            if amp_walk_std > 0.0:
                z += -ou_a * z + ou_b * nrng.standard_normal()
            a = expert_action(theta, goal, amp * math.exp(z0 + z), freq, table)
        if action_noise > 0.0:
            a = np.clip(a + nrng.normal(0.0, action_noise, a.shape), -1.0, 1.0)
        theta += freq * cfg.dt
        obs, _, fell, done = env.step(a)
        if done:
            t += 1
            break
    else:
        t = T
    goal_log = np.tile(goal.vector(), (t, 1)).astype(np.float32)
    rand = {"Kp": env.plant.Kp, "Kd": env.plant.Kd,
            "drive_scale": env.plant.drive_scale,
            "noise_scale": env.plant.noise_scale}
    return Episode(obs_log[:t], goal_log, act_log[:t], seed=seed,
                   randomization=rand), fell


def collect(cfg=None, n_traj=300, T=500, seed=0, table=None,
            action_noise=0.05, amp_walk_std=0.25, amp_walk_tau=1.0,
            amp_scale_std=0.3, amp_scale_mu=-0.2):
    """Collect n_traj expert episodes with per-episode goal + randomization.

    Episodes where the expert falls are discarded and resampled with a fresh
    sub-seed; the discard count lands in meta["discarded"].  action_noise and
    the amp_walk parameters shape the exploration applied during execution
    (see rollout_expert); labels stay clean.
    """
    cfg = cfg or EnvConfig()
    if table is None:
        table = build_expert_table(cfg)
    episodes = []
    discarded = 0
    for i in range(n_traj):
        for attempt in range(50):
            sub = seed * 1_000_003 + i * 64 + attempt
            grng = np.random.Generator(np.random.Philox(key=sub))
            goal = sample_goal(grng)
            ep, fell = rollout_expert(cfg, table, goal, seed=sub, T=T,
                                      action_noise=action_noise,
                                      amp_walk_std=amp_walk_std,
                                      amp_walk_tau=amp_walk_tau,
                                      amp_scale_std=amp_scale_std,
                                      amp_scale_mu=amp_scale_mu)
            if not fell and ep.T == T:
                episodes.append(ep)
                break
            discarded += 1
        else:
            raise DatasetError(f"episode {i}: expert kept falling after 50 attempts")
    mean, std, lo, hi = compute_stats(episodes)
    meta = {"dims": {"obs": OBS_DIM, "goal": GOAL_DIM, "action": ACTION_DIM},
            "dt": cfg.dt, "gaits": list(GAITS), "seed": seed,
            "n_traj": n_traj, "T": T, "discarded": discarded,
            "action_noise": action_noise, "amp_walk_std": amp_walk_std,
            "amp_walk_tau": amp_walk_tau, "amp_scale_std": amp_scale_std,
            "amp_scale_mu": amp_scale_mu}
    return Dataset(episodes, mean, std, lo, hi, meta)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def write_dataset(d, path):
    meta = dict(d.meta)
    meta["normalization"] = {
        "obs_mean": d.obs_mean.tolist(), "obs_std": d.obs_std.tolist(),
        "action_low": d.action_low.tolist(), "action_high": d.action_high.tolist(),
    }
    meta["episodes"] = [{"seed": ep.seed, "randomization": ep.randomization}
                        for ep in d.episodes]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for ep in d.episodes:
            f.write(struct.pack("<I", ep.T))
            for arr in (ep.obs, ep.goal, ep.action):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DatasetError(f"bad magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported version {version} at offset 4")
    (meta_len,) = struct.unpack_from("<I", blob, 8)
    off = 12
    if off + meta_len > len(blob):
        raise DatasetError(f"truncated meta block at offset {off}")
    try:
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DatasetError(f"malformed meta JSON at offset {off}: {e}") from e
    off += meta_len
    norm = meta.pop("normalization")
    per_ep = meta.pop("episodes")
    episodes = []
    n = len(blob)
    while off < n:
        if off + 4 > n:
            raise DatasetError(f"truncated episode header at offset {off}")
        (T,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays = []
        for name, dim in (("obs", OBS_DIM), ("goal", GOAL_DIM), ("action", ACTION_DIM)):
            end = off + 4 * T * dim
            if end > n:
                raise DatasetError(f"truncated {name} block at offset {off}")
            arrays.append(np.frombuffer(blob[off:end], dtype="<f4").reshape(T, dim).copy())
            off = end
        rec = per_ep[len(episodes)] if len(episodes) < len(per_ep) else {}
        episodes.append(Episode(*arrays, seed=rec.get("seed", 0),
                                randomization=rec.get("randomization", {})))
    if len(episodes) != len(per_ep):
        raise DatasetError(
            f"episode count mismatch: meta says {len(per_ep)}, found {len(episodes)}")
    return Dataset(
        episodes,
        np.asarray(norm["obs_mean"], np.float32),
        np.asarray(norm["obs_std"], np.float32),
        np.asarray(norm["action_low"], np.float32),
        np.asarray(norm["action_high"], np.float32),
        meta,
    )


def dataset_checksum(d):
    """SHA-256 over the canonical binary payload (episode arrays + stats)."""
    h = hashlib.sha256()
    for arr in (d.obs_mean, d.obs_std, d.action_low, d.action_high):
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for ep in d.episodes:
        for arr in (ep.obs, ep.goal, ep.action):
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _anchor_index(d, h_a):
    """Cumulative valid-anchor counts; anchor t of an episode means the chunk
    action[t : t+h_a] with history ending at obs[t]."""
    counts = np.array([max(ep.T - h_a + 1, 0) for ep in d.episodes])
    if counts.sum() == 0:
        raise DatasetError("no episode long enough for the requested chunk window")
    return np.concatenate([[0], np.cumsum(counts)])


def window_condition(d, ep, t, h_s):
    """Flattened normalized obs history ending at t (front-padded with the
    first observation) plus the goal row."""
    lo = max(t - h_s + 1, 0)
    win = ep.obs[lo:t + 1]
    if win.shape[0] < h_s:
        pad = np.tile(ep.obs[0], (h_s - win.shape[0], 1))
        win = np.concatenate([pad, win])
    return np.concatenate([d.normalize_obs(win).ravel(), ep.goal[t]]).astype(np.float32)


def sample_batch(d, batch, h_s, h_a, rng):
    """Uniform (episode, anchor) windows -> (conditions (B, h_s*18+7),
    chunks (B, h_a, 4)). Conditions are normalized; chunks are raw actions."""
    if not d.episodes:
        raise DatasetError("empty dataset")
    cum = _anchor_index(d, h_a)
    flat = rng.integers(0, cum[-1], size=batch)
    ep_idx = np.searchsorted(cum, flat, side="right") - 1
    ts = flat - cum[ep_idx]
    conds = np.empty((batch, h_s * OBS_DIM + GOAL_DIM), np.float32)
    chunks = np.empty((batch, h_a, ACTION_DIM), np.float32)
    for b in range(batch):
        ep = d.episodes[ep_idx[b]]
        t = int(ts[b])
        conds[b] = window_condition(d, ep, t, h_s)
        chunks[b] = ep.action[t:t + h_a]
    return conds, chunks
