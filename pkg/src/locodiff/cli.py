"""Command-line pipeline: data generation, pretraining, finetuning,
evaluation, benchmarks, and an interactive language-driven simulator REPL."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import collect, read_dataset, write_dataset
from .diffusion import SamplerSpec, ddim_subsequence
from .dppo import FinetuneConfig, finetune, write_curve
from .evalbench import (ablate_horizons, bench_latency, compare_samplers,
                        eval_stability, eval_transition, write_report)
from .language import (Embedder, gait_accuracy, gen_instructions,
                       export_instructions, encode_goal, heldout_pairs,
                       train_projection)
from .policy import load_snapshot, save_snapshot
from .pretrain import PretrainConfig, pretrain
from .quadsim import EnvConfig, Goal, QuadEnv, ScriptedExpert, \
    build_expert_table, gait_coherence, leg_phase, observe


class ConfigError(ValueError):
    pass


LANG_DEFAULTS = {"n_instructions": 1000, "steps": 3000, "lr": 3e-4,
                 "batch": 64, "patience": 5}
EVAL_DEFAULTS = {"trials": 100, "T": 500, "batch": 25}


def _section_defaults():
    return {
        "env": {f.name: f.default for f in dataclasses.fields(EnvConfig)},
        "pretrain": {f.name: f.default for f in dataclasses.fields(PretrainConfig)},
        "finetune": {f.name: f.default for f in dataclasses.fields(FinetuneConfig)},
        "language": dict(LANG_DEFAULTS),
        "eval": dict(EVAL_DEFAULTS),
    }


def load_config(path=None):
    """Merge a JSON config over defaults, rejecting unknown sections/keys."""
    cfg = _section_defaults()
    if path is None:
        return cfg
    try:
        with open(path) as f:
            user = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    for section, body in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r} "
                              f"(expected one of {sorted(cfg)})")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, val in body.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {section}.{key!r} "
                                  f"(expected one of {sorted(cfg[section])})")
            cfg[section][key] = tuple(val) if isinstance(val, list) else val
    return cfg


def env_config(cfg):
    return EnvConfig(**cfg["env"])


def _version_string():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


def write_manifest(out_dir, args, cfg, t0):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"version": _version_string(), "seed": args.seed,
                "command": args.cmd, "config": cfg,
                "wall_time_s": round(time.time() - t0, 3)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    env_cfg = env_config(cfg)
    d = collect(env_cfg, n_traj=args.n_traj, T=args.episode_len, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "expert.dmld")
    write_dataset(d, path)
    print(f"wrote {path}: {len(d.episodes)} episodes, {d.n_steps} steps, "
          f"{d.meta['discarded']} discarded; gaits {d.gait_counts()}")


def cmd_dataset_inspect(args, cfg):
    d = read_dataset(args.data)
    print(json.dumps(d.meta, indent=1, sort_keys=True))
    print("gait episode counts:", d.gait_counts())
    print("obs mean:", np.array2string(d.obs_mean, precision=3))
    print("obs std:", np.array2string(d.obs_std, precision=3))


def cmd_pretrain(args, cfg):
    d = read_dataset(args.data)
    pc = PretrainConfig(**cfg["pretrain"])
    snap, curve = pretrain(d, pc, seed=args.seed,
                           callback=lambda s, l: print(f"step {s}: loss {l:.4f}"))
    os.makedirs(args.out, exist_ok=True)
    save_snapshot(snap, os.path.join(args.out, "pretrained.dmck"))
    with open(os.path.join(args.out, "pretrain_curve.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows(curve)
    print(f"wrote {args.out}/pretrained.dmck (final loss {curve[-1][1]:.4f})")


def cmd_finetune(args, cfg):
    snap = load_snapshot(args.snapshot)
    ft = FinetuneConfig(**cfg["finetune"])
    os.makedirs(args.out, exist_ok=True)
    tuned, curve = finetune(snap, env_config(cfg), ft, seed=args.seed,
                            out_dir=args.out)
    save_snapshot(tuned, os.path.join(args.out, "finetuned.dmck"))
    write_curve(curve, os.path.join(args.out, "finetune_curve.csv"))
    print(f"wrote {args.out}/finetuned.dmck")


def cmd_eval(args, cfg):
    snap = load_snapshot(args.snapshot)
    ev = cfg["eval"]
    rep = eval_stability(snap, env_config(cfg), trials=ev["trials"], T=ev["T"],
                         seed=args.seed, batch=ev["batch"])
    os.makedirs(args.out, exist_ok=True)
    write_report(rep, os.path.join(args.out, "eval"))
    for gait, row in rep.per_gait.items():
        print(f"{gait:6s} stability {row['stability']:6.2f}%  "
              f"tracking {row['tracking_mse']:.4f}")
    print(f"aggregate stability {rep.stability:.2f}% tracking {rep.tracking_mse:.4f}")


def cmd_transition_eval(args, cfg):
    snap = load_snapshot(args.snapshot)
    ev = cfg["eval"]
    os.makedirs(args.out, exist_ok=True)
    results = {}
    for speed in args.speeds:
        rate, log = eval_transition(snap, env_config(cfg), speed=speed,
                                    trials=ev["trials"], T=ev["T"], seed=args.seed)
        results[speed] = rate
        with open(os.path.join(args.out, f"transition_{speed}.jsonl"), "w") as f:
            for rec in log:
                f.write(json.dumps(rec) + "\n")
        print(f"speed {speed}: success {rate:.1f}%")
    with open(os.path.join(args.out, "transition.json"), "w") as f:
        json.dump(results, f, indent=1)


def cmd_compare_samplers(args, cfg):
    snap = load_snapshot(args.snapshot)
    K = snap.schedule.K
    specs = [SamplerSpec("ddpm", tuple(range(K, 0, -1))),
             SamplerSpec("ddpm", tuple(range(K, K - 5, -1))),
             SamplerSpec("ddim", tuple(ddim_subsequence(K, 5)))]
    rows = compare_samplers(snap, specs, env_config(cfg),
                            trials=cfg["eval"]["trials"] // 2, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "samplers.json"), "w") as f:
        json.dump(rows, f, indent=1)
    for r in rows:
        print(f"{r['kind']}-{r['steps']:3d}: stability {r['stability']:6.2f}% "
              f"sample {1000 * r['sample_time_s']:.2f} ms")


def cmd_bench_latency(args, cfg):
    snap = load_snapshot(args.snapshot)
    res = bench_latency(snap, n=1000, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "latency.json"), "w") as f:
        json.dump(res, f, indent=1)
    print(f"median {1000 * res['median_s']:.2f} ms  p99 "
          f"{1000 * res['p99_s']:.2f} ms  miss {res['miss_pct']:.2f}%")


def cmd_ablate_horizons(args, cfg):
    d = read_dataset(args.data)
    rows = ablate_horizons(d, cfg=env_config(cfg), seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "horizons.json"), "w") as f:
        json.dump(rows, f, indent=1)
    for r in rows:
        print(f"h_s={r['h_s']:2d} h_a={r['h_a']:2d}: stability "
              f"{r['stability']:6.2f}% tracking {r['tracking_mse']:.4f}")


def cmd_lang_train(args, cfg):
    lc = cfg["language"]
    pairs = gen_instructions(lc["n_instructions"], seed=args.seed)
    params, history = train_projection(
        pairs, seed=args.seed, steps=lc["steps"], lr=lc["lr"],
        batch=lc["batch"], patience=lc["patience"])
    test = [p for p in pairs if p.split == "test"]
    acc = gait_accuracy(params, test)
    held = gait_accuracy(params, heldout_pairs())
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint({k: t.data for k, t in params.items()},
                    os.path.join(args.out, "projection.dmck"))
    export_instructions(pairs, os.path.join(args.out, "instructions.jsonl"))
    with open(os.path.join(args.out, "lang_report.json"), "w") as f:
        json.dump({"test_accuracy": acc, "heldout_accuracy": held,
                   "train_pairs": sum(p.split == "train" for p in pairs)}, f, indent=1)
    print(f"test accuracy {acc:.3f}, held-out phrasing accuracy {held:.3f}")


def cmd_repl(args, cfg):
    snap = load_snapshot(args.snapshot)
    if args.lang:
        from .nets import params_from_numpy
        proj = params_from_numpy(load_checkpoint(args.lang))
    else:
        print("training language projection (no --lang given)...")
        pairs = gen_instructions(1000, seed=args.seed)
        proj, _ = train_projection(pairs, seed=args.seed)
    env_cfg = env_config(cfg)
    env = QuadEnv(env_cfg, seed=args.seed)
    from .policy import ObsHistory, act
    hist = ObsHistory(snap.h_s)
    goal = Goal.structured(0.0, 0.0, 0.0, "trot")
    env.reset(goal)
    hist.push(observe(env.state))
    rng = np.random.default_rng(args.seed)
    total_steps, falls = 0, 0
    print("commands: free text goal | stop | run N | quit")
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        if text == "quit":
            break
        seconds = 2
        if text == "stop":
            goal = Goal.structured(0.0, 0.0, 0.0, goal.gait_index)
        elif text.startswith("run"):
            try:
                seconds = int(text.split()[1])
            except (IndexError, ValueError):
                print("usage: run N")
                continue
        else:
            goal = encode_goal(text, proj)
            print(f"goal: gait={goal.gait_name} v=({goal.vx:+.2f}, "
                  f"{goal.vy:+.2f}, {goal.wz:+.2f})")
        env.set_goal(goal)
        for sec in range(seconds):
            for _ in range(50):
                obs, _, fell, done = env.step(act(snap, hist, goal, rng))
                hist.push(obs)
                total_steps += 1
                if done:
                    falls += int(fell)
                    env.reset(goal)
                    hist = ObsHistory(snap.h_s)
                    obs = observe(env.state)
                    hist.push(obs)
            st = env.state
            psi, amp = leg_phase(st.q - st.q_center, st.qd,
                                 np.sqrt(env_cfg.Kp))
            C = gait_coherence(psi, amp, goal.gait_name)
            print(f"  t+{sec + 1}s C={C:.2f} v=({st.vx:+.2f}, {st.vy:+.2f}, "
                  f"{st.wz:+.2f}) tilt=({st.roll:+.2f}, {st.pitch:+.2f})")
    print(f"summary: {total_steps} steps, {falls} falls")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="locodiff",
                                description="diffusion-policy locomotion lab")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, data=False, snapshot=False):
        sp.add_argument("--config", default=None, help="JSON run config")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")
        if data:
            sp.add_argument("--data", required=True, help="DMLD dataset path")
        if snapshot:
            sp.add_argument("--snapshot", required=True, help="policy checkpoint")
        return sp

    sp = common(sub.add_parser("gen-data"))
    sp.add_argument("--n-traj", type=int, default=300)
    sp.add_argument("--episode-len", type=int, default=500)
    common(sub.add_parser("dataset-inspect"), data=True)
    common(sub.add_parser("pretrain"), data=True)
    common(sub.add_parser("finetune"), snapshot=True)
    common(sub.add_parser("eval"), snapshot=True)
    sp = common(sub.add_parser("transition-eval"), snapshot=True)
    sp.add_argument("--speeds", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    common(sub.add_parser("compare-samplers"), snapshot=True)
    common(sub.add_parser("bench-latency"), snapshot=True)
    common(sub.add_parser("ablate-horizons"), data=True)
    common(sub.add_parser("lang-train"))
    sp = common(sub.add_parser("repl"), snapshot=True)
    sp.add_argument("--lang", default=None, help="projection checkpoint")
    return p


HANDLERS = {
    "gen-data": cmd_gen_data,
    "dataset-inspect": cmd_dataset_inspect,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "transition-eval": cmd_transition_eval,
    "compare-samplers": cmd_compare_samplers,
    "bench-latency": cmd_bench_latency,
    "ablate-horizons": cmd_ablate_horizons,
    "lang-train": cmd_lang_train,
    "repl": cmd_repl,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    t0 = time.time()
    try:
        cfg = load_config(args.config)
        for attr in ("data", "snapshot"):
            path = getattr(args, attr, None)
            if path and not os.path.exists(path):
                raise ConfigError(f"--{attr} path does not exist: {path}")
        HANDLERS[args.cmd](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    if args.cmd != "repl":
        write_manifest(args.out, args, cfg, t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
