"""PPO finetuning of the diffusion policy on the two-layer MDP.

Each environment step expands into K' denoising transitions; every
transition draws x^k ~ N(DDIM-mean, sigma^2 I) so the chain has a proper
Gaussian likelihood. The environment-step advantage (GAE over env steps) is
broadcast to all K' transitions of that step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .adam import AdamState, adam_step
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .diffusion import ddim_coeffs, sampler_chain
from .nets import (collect_grads, critic_forward, denoiser_forward,
                   denoiser_forward_np, init_critic, params_from_numpy,
                   params_to_numpy, zero_grads)
from .policy import ObsHistory, PolicySnapshot, build_condition
from .quadsim import GAITS, EnvConfig, Goal, QuadEnv, observe, sample_goal


@dataclass(frozen=True)
class FinetuneConfig:
    gamma: float = 0.9
    lam: float = 0.95
    k_inf: int = 5            # must equal the policy's DDIM step-list length
    lr: float = 1e-5
    sigma: float = 0.04       # fixed sampling std at every chain step
    clip: float = 0.2
    epochs: int = 4
    n_envs: int = 16
    rollout_len: int = 256    # env steps per iteration per env
    iters: int = 50
    minibatch: int = 512      # chain transitions per policy minibatch
    critic_lr: float = 3e-4
    switch_lo: int = 100      # transition-curriculum switch window
    switch_hi: int = 400
    horizon: int = 500
    checkpoint_every: int = 10


def flatten_index(t, k, K):
    """Two-layer MDP time index: t*K + (K - k - 1)."""
    if not 0 <= k < K:
        raise ValueError(f"denoising step k={k} outside 0..{K - 1}")
    if t < 0:
        raise ValueError(f"negative env step {t}")
    return t * K + (K - k - 1)


@dataclass
class ChainTransition:
    t: int
    k: int                   # schedule index of this chain step
    k_prev: int
    cond_row: int            # index into the rollout's condition matrix
    x_in: np.ndarray         # (h_a, action_dim)
    x_out: np.ndarray
    mean: np.ndarray
    sigma: float
    logp: float
    reward: float = 0.0      # attached only at the chain-terminal step
    done: bool = False


def gaussian_logp(x, mean, sigma):
    """Diagonal-Gaussian log density of x under N(mean, sigma^2 I)."""
    d = x.size
    return float(-0.5 * np.sum((x - mean) ** 2, dtype=np.float64) / sigma ** 2
                 - d * math.log(sigma) - 0.5 * d * math.log(2 * math.pi))


def chain_sample(snapshot, conditions, sigma, rng, record=True):
    """Run the noisy DDIM chain for a batch of conditions.

    Returns (final chunks pre-clamp, per-item list of per-step records
    (k, k_prev, x_in, x_out, mean, logp)). sigma=0 reproduces deterministic
    DDIM exactly.
    """
    B = conditions.shape[0]
    x = rng.standard_normal((B,) + snapshot.chunk_shape).astype(np.float32)
    steps = [] if record else None
    for k, k_prev in sampler_chain(snapshot.sampler):
        eps_hat = denoiser_forward_np(snapshot.params, x, k, conditions)
        c_x, c_eps = ddim_coeffs(snapshot.schedule, k, k_prev)
        mean = c_x * x + c_eps * eps_hat
        if sigma > 0:
            x_new = mean + sigma * rng.standard_normal(mean.shape).astype(np.float32)
        else:
            x_new = mean
        if record:
            steps.append((k, k_prev, x, x_new, mean))
        x = x_new
    return x, steps


class _EnvSlot:
    """One parallel environment with its episode bookkeeping."""

    def __init__(self, cfg, ft, seed, index, h_s=30):
        self.env = QuadEnv(cfg, seed=seed, env_index=index)
        self.hist = ObsHistory(h_s)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, index, 0x5107)))
        self.ft = ft
        self.reset()

    def reset(self):
        self.goal = sample_goal(self.rng)
        self.switch_step = int(self.rng.integers(self.ft.switch_lo, self.ft.switch_hi + 1))
        self.switched = False
        self.fell_after_switch = False
        self.t = 0
        self.env.reset(self.goal)
        self.hist = ObsHistory(self.hist.h_s)
        self.hist.push(observe(self.env.state))

    def maybe_switch(self):
        if not self.switched and self.t == self.switch_step:
            other = [g for g in range(len(GAITS)) if g != self.goal.gait_index]
            gait = int(self.rng.choice(other))
            self.goal = Goal.structured(self.goal.vx, self.goal.vy, self.goal.wz, gait)
            self.env.set_goal(self.goal)
            self.switched = True


def chain_rollout(snapshot, critic, slots, ft, rng):
    """Collect rollout_len env steps from every slot.

    Returns (conditions (N,547), env-step arrays (rewards, dones, values,
    bootstrap values), transitions list, episode stats).
    """
    B = len(slots)
    conds_log, rewards, dones = [], [], []
    transitions = []
    stats = {"episodes": 0, "falls": 0, "switch_episodes": 0,
             "switch_success": 0, "reward_sum": 0.0, "steps": 0}
    critic_np = critic if isinstance(next(iter(critic.values())), np.ndarray) \
        else params_to_numpy(critic)
    for step in range(ft.rollout_len):
        for s in slots:
            s.maybe_switch()
        conds = np.stack([build_condition(snapshot, s.hist, s.goal) for s in slots])
        chunks, steps_rec = chain_sample(snapshot, conds, ft.sigma, rng)
        row0 = len(conds_log)
        conds_log.append(conds)
        r_step = np.zeros(B, np.float32)
        d_step = np.zeros(B, bool)
        for i, s in enumerate(slots):
            action = np.clip(chunks[i], -1.0, 1.0)[0]
            obs, r, fell, done = s.env.step(action)
            s.hist.push(obs)
            s.t += 1
            r_step[i] = r
            d_step[i] = done
            chain = []
            for ci, (k, k_prev, x_in, x_out, mean) in enumerate(steps_rec):
                tr = ChainTransition(
                    t=stats["steps"], k=k, k_prev=k_prev, cond_row=row0 * B + i,
                    x_in=x_in[i].copy(), x_out=x_out[i].copy(),
                    mean=mean[i].copy(), sigma=ft.sigma,
                    logp=gaussian_logp(x_out[i], mean[i], ft.sigma))
                chain.append(tr)
            chain[-1].reward = float(r)
            chain[-1].done = bool(done)
            transitions.extend(chain)
            stats["reward_sum"] += float(r)
            if done:
                stats["episodes"] += 1
                if fell:
                    stats["falls"] += 1
                if s.switched:
                    stats["switch_episodes"] += 1
                    if not fell:
                        stats["switch_success"] += 1
                s.reset()
        rewards.append(r_step)
        dones.append(d_step)
        stats["steps"] += 1
    conds_log = np.concatenate(conds_log)              # (rollout_len*B, 547)
    values = _critic_values(critic_np, conds_log)
    boot_conds = np.stack([build_condition(snapshot, s.hist, s.goal) for s in slots])
    boot_values = _critic_values(critic_np, boot_conds)
    return (conds_log, np.stack(rewards), np.stack(dones),
            values.reshape(ft.rollout_len, B), boot_values, transitions, stats)


def _critic_values(critic_np, conds):
    h = np.maximum(conds @ critic_np["lin0.w"] + critic_np["lin0.b"], 0.0)
    h = np.maximum(h @ critic_np["lin1.w"] + critic_np["lin1.b"], 0.0)
    return (h @ critic_np["out.w"] + critic_np["out.b"]).ravel()


def gae(rewards, values, dones, next_values, gamma=0.9, lam=0.95):
    """Advantages and returns over env steps (arrays shaped (T, B) or (T,)).

    next_values supplies V(s_{T}) per env for bootstrap; V after a done is
    masked inside the recursion.
    """
    rewards = np.asarray(rewards, np.float64)
    values = np.asarray(values, np.float64)
    dones = np.asarray(dones, bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError(f"shape mismatch: r {rewards.shape}, V {values.shape}, "
                         f"dones {dones.shape}")
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
        next_values = np.atleast_1d(next_values)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    nxt = np.asarray(next_values, np.float64)
    gae_acc = np.zeros(rewards.shape[1])
    for t in range(T - 1, -1, -1):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt * mask - values[t]
        gae_acc = delta + gamma * lam * mask * gae_acc
        adv[t] = gae_acc
        nxt = values[t]
    ret = adv + values
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def ppo_update(transitions, advantages, conds, returns, params, critic,
               opt_p, opt_c, schedule, ft, rng):
    """One PPO pass: epochs x minibatches of chain transitions, plus critic
    regression on env-step returns. Advantages arrive already broadcast per
    transition and are normalized here. Returns loss statistics."""
    n = len(transitions)
    adv = np.asarray(advantages, np.float64)
    adv = ((adv - adv.mean()) / (adv.std() + 1e-8)).astype(np.float32)
    x_in = np.stack([tr.x_in for tr in transitions])
    x_out = np.stack([tr.x_out for tr in transitions])
    mean_old = np.stack([tr.mean for tr in transitions])
    ks = np.array([tr.k for tr in transitions])
    kps = np.array([tr.k_prev for tr in transitions])
    cond_rows = np.array([tr.cond_row for tr in transitions])
    coeffs = {(k, kp): ddim_coeffs(schedule, k, kp)
              for k, kp in zip(ks, kps)}
    cx_all = np.array([coeffs[(k, kp)][0] for k, kp in zip(ks, kps)], np.float32)
    ce_all = np.array([coeffs[(k, kp)][1] for k, kp in zip(ks, kps)], np.float32)
    sigma2 = ft.sigma ** 2
    # log pi_old without the sigma constants (they cancel in the ratio)
    logp_old = (-0.5 / sigma2) * np.sum((x_out - mean_old) ** 2, axis=(1, 2))
    stats = {"policy_loss": 0.0, "critic_loss": 0.0, "clip_frac": 0.0,
             "dropped": 0, "updates": 0, "critic_updates": 0}
    d = x_out.shape[1] * x_out.shape[2]
    for _ in range(ft.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, ft.minibatch):
            idx = order[lo:lo + ft.minibatch]
            eps_hat = denoiser_forward(params, x_in[idx], ks[idx], conds[cond_rows[idx]])
            shape = (-1, 1, 1)
            mean = Tensor(cx_all[idx].reshape(shape) * x_in[idx]) \
                + Tensor(ce_all[idx].reshape(shape)) * eps_hat
            diff = Tensor(x_out[idx]) - mean
            logp_new = diff.square().reshape(len(idx), d).sum(axis=1) \
                * np.float32(-0.5 / sigma2)
            ratio = (logp_new - Tensor(logp_old[idx].astype(np.float32))).exp()
            rr = ratio.data
            finite = np.isfinite(rr)
            if not finite.all():
                stats["dropped"] += int((~finite).sum())
            a = np.where(finite, adv[idx], 0.0).astype(np.float32)
            unclipped = ratio * Tensor(a)
            clipped = ratio.clip(1.0 - ft.clip, 1.0 + ft.clip) * Tensor(a)
            surrogate = unclipped.minimum(clipped).mean() * np.float32(-1.0)
            zero_grads(params)
            surrogate.backward()
            adam_step(params, collect_grads(params), opt_p, ft.lr, grad_clip=1.0)
            stats["policy_loss"] += float(surrogate.data)
            stats["clip_frac"] += float(np.mean(
                (np.abs(rr - 1.0) > ft.clip)[finite])) if finite.any() else 0.0
            stats["updates"] += 1
        # critic pass over env steps
        m = conds.shape[0]
        corder = rng.permutation(m)
        for lo in range(0, m, ft.minibatch):
            idx = corder[lo:lo + ft.minibatch]
            v = critic_forward(critic, conds[idx])
            loss = (v - Tensor(returns[idx].astype(np.float32))).square().mean()
            zero_grads(critic)
            loss.backward()
            adam_step(critic, collect_grads(critic), opt_c, ft.critic_lr,
                      grad_clip=1.0)
            stats["critic_loss"] += float(loss.data)
            stats["critic_updates"] += 1
    for key in ("policy_loss", "clip_frac"):
        stats[key] /= max(stats["updates"], 1)
    stats["critic_loss"] /= max(stats["critic_updates"], 1)
    return stats


def finetune(snapshot, cfg=None, ft=None, seed=0, out_dir=None, log=print):
    """PPO finetuning with the mid-episode gait-switch curriculum.

    Returns (finetuned PolicySnapshot, curve rows). Curve rows:
    (iteration, mean reward per env step, fall rate, switch success rate).
    """
    cfg = cfg or EnvConfig()
    ft = ft or FinetuneConfig()
    if len(snapshot.sampler.steps) != ft.k_inf:
        raise ValueError(f"policy sampler has {len(snapshot.sampler.steps)} steps, "
                         f"config expects K'={ft.k_inf}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xf17e)))
    params = params_from_numpy(snapshot.params)
    critic = init_critic(np.random.default_rng(seed + 1), snapshot.cond_dim)
    opt_p = AdamState.for_params(params)
    opt_c = AdamState.for_params(critic)
    slots = [_EnvSlot(cfg, ft, seed, i, h_s=snapshot.h_s) for i in range(ft.n_envs)]
    curve = []
    reward_hist = []
    for it in range(1, ft.iters + 1):
        live = snapshot.with_sampler(snapshot.sampler)
        live.params = params_to_numpy(params)
        live.obs_mean = snapshot.obs_mean
        conds, rewards, dones, values, boot, transitions, stats = \
            chain_rollout(live, critic, slots, ft, rng)
        adv, ret = gae(rewards, values, dones, boot, ft.gamma, ft.lam)
        adv_flat = adv.reshape(-1)          # (rollout_len*B,) matching cond rows
        ret_flat = ret.reshape(-1)
        per_tr_adv = np.array([adv_flat[tr.cond_row] for tr in transitions])
        up = ppo_update(transitions, per_tr_adv, conds, ret_flat, params,
                        critic, opt_p, opt_c, snapshot.schedule, ft, rng)
        mean_r = stats["reward_sum"] / max(stats["steps"] * ft.n_envs, 1)
        fall_rate = stats["falls"] / max(stats["episodes"], 1)
        sw = stats["switch_success"] / max(stats["switch_episodes"], 1)
        curve.append((it, mean_r, fall_rate, sw))
        reward_hist.append(mean_r)
        if log:
            log(f"iter {it}: reward {mean_r:.4f} falls {fall_rate:.2f} "
                f"switch_ok {sw:.2f} ploss {up['policy_loss']:.4f} "
                f"closs {up['critic_loss']:.3f} clip {up['clip_frac']:.2f}")
        if _collapsed(reward_hist):
            raise RuntimeError(
                f"reward collapse at iteration {it}: {reward_hist[-20:]}")
        if out_dir and it % ft.checkpoint_every == 0:
            save_checkpoint(params_to_numpy(params), f"{out_dir}/finetune_{it}.dmck")
    out = snapshot.with_sampler(snapshot.sampler)
    out.params = params_to_numpy(params)
    return out, curve


def _collapsed(hist, window=20):
    """Sustained collapse: last `window` iterations all below the starting
    level by more than 3 sigma of the early segment."""
    if len(hist) < window + 5:
        return False
    early = np.asarray(hist[:5])
    floor = early.mean() - 3 * max(early.std(), 0.05)
    return all(h < floor for h in hist[-window:])


def write_curve(curve, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "mean_reward", "fall_rate", "switch_success"])
        for row in curve:
            w.writerow(row)
