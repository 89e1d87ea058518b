"""Evaluation harness: stability/tracking rollouts, gait-transition trials,
sampler comparison, latency benchmark, and horizon ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .policy import ObsHistory, build_condition, sample_chunks
from .quadsim import (GAITS, EnvConfig, Goal, QuadEnv, ScriptedExpert,
                      observe, sample_goal)

TRANSIENT_STEPS = 50  # 1 s settling window excluded from tracking error


@dataclass
class EvalReport:
    per_gait: dict                 # gait -> {stability, tracking_mse, trials}
    stability: float               # aggregate %
    tracking_mse: float            # aggregate, non-fallen steps
    trials: int
    seed: int
    meta: dict = field(default_factory=dict)
    trial_log: list = field(default_factory=list)

    def recompute_stability(self):
        """Aggregate % straight from the per-trial log (audit path)."""
        ok = sum(1 for t in self.trial_log if not t["fell"])
        return 100.0 * ok / max(len(self.trial_log), 1)


def snapshot_checksum(snapshot):
    h = hashlib.sha256()
    for name in sorted(snapshot.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(snapshot.params[name], dtype="<f4").tobytes())
    return h.hexdigest()


def _track_sq(state, goal):
    return ((state.vx - goal.vx) ** 2 + (state.vy - goal.vy) ** 2
            + 0.5 * (state.wz - goal.wz) ** 2)


def policy_rollouts(snapshot, goals, cfg=None, seed=0, T=500, env_offset=0,
                    switch_at=None, switch_goals=None):
    """Roll B trials in lockstep with batched denoiser calls.

    goals: list of B Goals. switch_at (per-trial step index) and switch_goals
    swap the goal mid-episode for transition trials. Returns (fell (B,),
    tracking mse (B,), steps survived (B,)).
    """
    cfg = cfg or EnvConfig()
    B = len(goals)
    envs = [QuadEnv(cfg, seed=seed, env_index=env_offset + i) for i in range(B)]
    hists = [ObsHistory(snapshot.h_s) for _ in range(B)]
    goals = list(goals)
    for env, h, g in zip(envs, hists, goals):
        env.reset(g)
        h.push(observe(env.state))
    rng = np.random.default_rng(np.random.SeedSequence((seed, env_offset, 0x9e37)))
    fell = np.zeros(B, bool)
    done = np.zeros(B, bool)
    steps = np.zeros(B, int)
    sq_sum = np.zeros(B)
    sq_n = np.zeros(B, int)
    for t in range(T):
        if switch_at is not None:
            for i in range(B):
                if t == switch_at[i]:
                    goals[i] = switch_goals[i]
                    envs[i].set_goal(switch_goals[i])
        conds = np.stack([build_condition(snapshot, hists[i], goals[i])
                          for i in range(B)])
        chunks = sample_chunks(snapshot, conds, rng)
        for i in range(B):
            if done[i]:
                continue
            obs, _, f, d = envs[i].step(chunks[i, 0])
            hists[i].push(obs)
            steps[i] += 1
            settle = TRANSIENT_STEPS if switch_at is None else switch_at[i] + TRANSIENT_STEPS
            if t >= settle:
                sq_sum[i] += _track_sq(envs[i].state, goals[i])
                sq_n[i] += 1
            if f:
                fell[i] = True
            if d:
                done[i] = True
    mse = np.where(sq_n > 0, sq_sum / np.maximum(sq_n, 1), 0.0)
    return fell, mse, steps


def expert_rollout(table, goal, cfg=None, seed=0, env_index=0, T=500,
                   switch_at=None, switch_goal=None):
    """Single scripted-expert trial; the expert re-targets phase offsets
    instantly on a goal switch (the transition ceiling)."""
    cfg = cfg or EnvConfig()
    env = QuadEnv(cfg, seed=seed, env_index=env_index)
    expert = ScriptedExpert(table, cfg)
    g = goal
    env.reset(g)
    fell = False
    sq_sum, sq_n = 0.0, 0
    for t in range(T):
        if switch_at is not None and t == switch_at:
            old = g
            g = switch_goal
            env.set_goal(g)
            expert.notify_switch(old, g)
        _, _, f, d = env.step(expert.action(g))
        settle = TRANSIENT_STEPS if switch_at is None else switch_at + TRANSIENT_STEPS
        if t >= settle:
            sq_sum += _track_sq(env.state, g)
            sq_n += 1
        if f:
            fell = True
        if d:
            break
    return fell, sq_sum / max(sq_n, 1)


def eval_stability(policy, cfg=None, trials=100, T=500, seed=0, batch=25):
    """Per-gait stability % and tracking MSE over `trials` rollouts per gait.

    policy: a PolicySnapshot, or an ExpertTable (scripted-expert baseline).
    """
    cfg = cfg or EnvConfig()
    grng = np.random.default_rng(np.random.SeedSequence((seed, 0xe7a1)))
    per_gait = {}
    log = []
    is_snapshot = hasattr(policy, "params")
    for gi, gait in enumerate(GAITS):
        goals = [sample_goal(grng, gait=gait) for _ in range(trials)]
        fell = np.zeros(trials, bool)
        mse = np.zeros(trials)
        if is_snapshot:
            for lo in range(0, trials, batch):
                hi = min(lo + batch, trials)
                f, m, _ = policy_rollouts(policy, goals[lo:hi], cfg, seed=seed,
                                          T=T, env_offset=gi * trials + lo)
                fell[lo:hi] = f
                mse[lo:hi] = m
        else:
            for i, g in enumerate(goals):
                fell[i], mse[i] = expert_rollout(policy, g, cfg, seed=seed,
                                                 env_index=gi * trials + i, T=T)
        ok = ~fell
        per_gait[gait] = {
            "stability": 100.0 * ok.mean(),
            "tracking_mse": float(mse[ok].mean()) if ok.any() else float("nan"),
            "trials": trials,
        }
        for i in range(trials):
            log.append({"gait": gait, "trial": i, "fell": bool(fell[i]),
                        "tracking_mse": float(mse[i]),
                        "goal": [goals[i].vx, goals[i].vy, goals[i].wz]})
    agg_stab = float(np.mean([r["stability"] for r in per_gait.values()]))
    agg_mse = float(np.mean([r["tracking_mse"] for r in per_gait.values()]))
    return EvalReport(per_gait, agg_stab, agg_mse, trials * len(GAITS), seed,
                      meta={"T": T, "transient_steps": TRANSIENT_STEPS},
                      trial_log=log)


def _transition_goals(rng, speed, trials):
    """(goal A, goal B, switch step) per trial; B's gait always differs."""
    out = []
    for _ in range(trials):
        a, b = rng.choice(len(GAITS), size=2, replace=False)
        heading = rng.uniform(0, 2 * np.pi)
        vx = float(speed * np.cos(heading))
        vy = float(np.clip(speed * np.sin(heading), -0.6, 0.6))
        ga = Goal.structured(vx, vy, 0.0, int(a))
        gb = Goal.structured(vx, vy, 0.0, int(b))
        out.append((ga, gb, 150))  # switch after 3 s of a 10 s trial
    return out


def eval_transition(policy, cfg=None, speed=1.0, trials=100, T=500, seed=0,
                    batch=25):
    """Gait A for 3 s, switch to B != A, 7 more seconds; success = no fall."""
    cfg = cfg or EnvConfig()
    rng = np.random.default_rng(np.random.SeedSequence((seed, int(speed * 1000), 0x7a)))
    cases = _transition_goals(rng, speed, trials)
    fell = np.zeros(trials, bool)
    if hasattr(policy, "params"):
        for lo in range(0, trials, batch):
            hi = min(lo + batch, trials)
            sub = cases[lo:hi]
            f, _, _ = policy_rollouts(
                policy, [c[0] for c in sub], cfg, seed=seed, T=T,
                env_offset=1000 + lo,
                switch_at=[c[2] for c in sub], switch_goals=[c[1] for c in sub])
            fell[lo:hi] = f
    else:
        for i, (ga, gb, sw) in enumerate(cases):
            fell[i], _ = expert_rollout(policy, ga, cfg, seed=seed,
                                        env_index=1000 + i, T=T,
                                        switch_at=sw, switch_goal=gb)
    log = [{"trial": i, "from": c[0].gait_name, "to": c[1].gait_name,
            "fell": bool(fell[i])} for i, c in enumerate(cases)]
    return 100.0 * float((~fell).mean()), log


def compare_samplers(snapshot, specs, cfg=None, trials=50, T=500, seed=0):
    """Stability and per-action-sample wall time for each SamplerSpec, sharing
    one denoiser."""
    cfg = cfg or EnvConfig()
    before = snapshot_checksum(snapshot)
    rows = []
    cond = np.zeros((1, snapshot.cond_dim), np.float32)
    for spec in specs:
        snap = snapshot.with_sampler(spec)
        report = eval_stability(snap, cfg, trials=trials, T=T, seed=seed)
        rng = np.random.default_rng(0)
        times = []
        for _ in range(20):
            t0 = time.perf_counter()
            sample_chunks(snap, cond, rng)
            times.append(time.perf_counter() - t0)
        rows.append({"kind": spec.kind, "steps": len(spec.steps),
                     "stability": report.stability,
                     "tracking_mse": report.tracking_mse,
                     "sample_time_s": float(np.median(times))})
    assert snapshot_checksum(snapshot) == before, "eval mutated the policy"
    return rows


def bench_latency(snapshot, n=1000, deadline_s=0.020, seed=0):
    """End-to-end act() latency on realistic conditions."""
    from .policy import act
    rng = np.random.default_rng(seed)
    hist = ObsHistory(snapshot.h_s)
    goal = Goal.structured(0.5, 0.0, 0.0, "trot")
    hist.push(rng.standard_normal(snapshot.obs_dim).astype(np.float32))
    for _ in range(50):  # warm-up
        act(snapshot, hist, goal, rng)
    times = np.empty(n)
    for i in range(n):
        hist.push(rng.standard_normal(snapshot.obs_dim).astype(np.float32))
        t0 = time.perf_counter()
        act(snapshot, hist, goal, rng)
        times[i] = time.perf_counter() - t0
    return {"median_s": float(np.median(times)),
            "p99_s": float(np.percentile(times, 99)),
            "miss_pct": 100.0 * float((times > deadline_s).mean()),
            "n": n}


def ablate_horizons(dataset, grid=((1, 1), (1, 8), (8, 1), (8, 8), (30, 1), (30, 8)),
                    cfg=None, steps=2000, trials=20, seed=0):
    """Retrain at each (h_s, h_a) grid point (reduced budget) and evaluate."""
    from .pretrain import PretrainConfig, pretrain
    cfg = cfg or EnvConfig()
    rows = []
    for h_s, h_a in grid:
        snap, _ = pretrain(dataset, PretrainConfig(steps=steps, h_s=h_s, h_a=h_a),
                           seed=seed)
        rep = eval_stability(snap, cfg, trials=trials, seed=seed)
        rows.append({"h_s": h_s, "h_a": h_a, "stability": rep.stability,
                     "tracking_mse": rep.tracking_mse})
    return rows


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

def write_report(report, path_base):
    """Write <base>.json, <base>.csv, and <base>.trials.jsonl."""
    payload = {"per_gait": report.per_gait, "stability": report.stability,
               "tracking_mse": report.tracking_mse, "trials": report.trials,
               "seed": report.seed, "meta": report.meta}
    with open(path_base + ".json", "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    with open(path_base + ".csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gait", "stability_pct", "tracking_mse", "trials"])
        for gait, row in report.per_gait.items():
            w.writerow([gait, row["stability"], row["tracking_mse"], row["trials"]])
        w.writerow(["aggregate", report.stability, report.tracking_mse, report.trials])
    with open(path_base + ".trials.jsonl", "w") as f:
        for rec in report.trial_log:
            f.write(json.dumps(rec) + "\n")
