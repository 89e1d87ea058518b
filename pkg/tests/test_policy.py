"""Conditioning, chunk-sampling, and snapshot persistence tests."""

import numpy as np
import pytest

from locodiff.diffusion import SamplerSpec, ddim_subsequence, make_schedule
from locodiff.nets import init_denoiser, params_to_numpy
from locodiff.policy import (ObsHistory, PolicySnapshot, act, build_condition,
                             load_snapshot, sample_action_chunk,
                             sample_chunks, save_snapshot)
from locodiff.quadsim import GOAL_DIM, OBS_DIM, Goal


def make_snapshot(h_s=30, h_a=8, kind="ddim", rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    cond_dim = h_s * OBS_DIM + GOAL_DIM
    params = params_to_numpy(init_denoiser(rng, cond_dim, h_a, 4))
    schedule = make_schedule()
    sampler = SamplerSpec(kind, tuple(ddim_subsequence(100, 5)) if kind == "ddim"
                          else tuple(range(100, 0, -1)))
    return PolicySnapshot(params, schedule, sampler, h_s=h_s, h_a=h_a)


GOAL = Goal.structured(0.5, 0.0, 0.0, "trot")


class TestObsHistory:
    def test_padding_repeats_first(self):
        h = ObsHistory(5, obs_dim=3)
        h.push(np.array([1.0, 2.0, 3.0], np.float32))
        win = h.window()
        assert win.shape == (5, 3)
        assert np.all(win == [1.0, 2.0, 3.0])

    def test_rolls_in_order(self):
        h = ObsHistory(3, obs_dim=1)
        for v in (1, 2, 3, 4):
            h.push(np.array([v], np.float32))
        np.testing.assert_array_equal(h.window().ravel(), [2, 3, 4])

    def test_replay_log_match(self):
        # after h_s pushes the window equals the raw last-h_s slice
        rng = np.random.default_rng(0)
        log = rng.standard_normal((40, OBS_DIM)).astype(np.float32)
        h = ObsHistory(30)
        for row in log:
            h.push(row)
        np.testing.assert_array_equal(h.window(), log[-30:])

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            ObsHistory(3, obs_dim=2).window()

    def test_shape_check(self):
        with pytest.raises(ValueError):
            ObsHistory(3, obs_dim=2).push(np.zeros(5, np.float32))


class TestCondition:
    def test_length_invariant(self):
        for h_s, h_a in ((1, 1), (8, 8), (30, 8)):
            snap = make_snapshot(h_s=h_s, h_a=h_a)
            h = ObsHistory(h_s)
            h.push(np.zeros(OBS_DIM, np.float32))
            cond = build_condition(snap, h, GOAL)
            assert cond.shape == (h_s * OBS_DIM + GOAL_DIM,)

    def test_fresh_episode_padding_then_goal(self):
        snap = make_snapshot(h_s=4, h_a=2)
        h = ObsHistory(4)
        obs = np.arange(OBS_DIM, dtype=np.float32)
        h.push(obs)
        cond = build_condition(snap, h, GOAL)
        want = np.tile((obs - snap.obs_mean) / snap.obs_std, 4)
        np.testing.assert_allclose(cond[:-GOAL_DIM], want, atol=1e-6)
        np.testing.assert_allclose(cond[-GOAL_DIM:], GOAL.vector())

    def test_hs1(self):
        snap = make_snapshot(h_s=1, h_a=1)
        h = ObsHistory(1)
        obs = np.ones(OBS_DIM, np.float32)
        h.push(obs)
        cond = build_condition(snap, h, GOAL)
        np.testing.assert_allclose(cond, np.concatenate([obs, GOAL.vector()]))

    def test_mismatched_history_rejected(self):
        snap = make_snapshot(h_s=30)
        h = ObsHistory(8)
        h.push(np.zeros(OBS_DIM, np.float32))
        with pytest.raises(ValueError):
            build_condition(snap, h, GOAL)


class TestSampling:
    def test_deterministic_given_seed(self):
        snap = make_snapshot()
        cond = np.zeros(snap.cond_dim, np.float32)
        a = sample_action_chunk(snap, cond, np.random.default_rng(5))
        b = sample_action_chunk(snap, cond, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_zero_denoiser_ddim_scaling(self):
        # eps_hat == 0 collapses the chain to sqrt(abar-ratio) * x_K, pre-clamp
        snap = make_snapshot()
        for name in snap.params:
            snap.params[name] = np.zeros_like(snap.params[name])
        rng = np.random.default_rng(0)
        x_K = np.random.default_rng(0).standard_normal((1, 8, 4)).astype(np.float32)
        out = sample_chunks(snap, np.zeros((1, snap.cond_dim), np.float32), rng)
        s = snap.schedule
        scale = np.sqrt(s.alpha_bar[0] / s.alpha_bar[100])
        want = np.clip(scale * x_K, -1, 1)
        np.testing.assert_allclose(out, want, atol=1e-4)

    def test_actions_clamped(self):
        snap = make_snapshot(rng_seed=3)
        rng = np.random.default_rng(1)
        out = sample_chunks(snap, rng.standard_normal((8, snap.cond_dim))
                            .astype(np.float32), rng)
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_act_is_first_row(self):
        snap = make_snapshot()
        h = ObsHistory(30)
        h.push(np.zeros(OBS_DIM, np.float32))
        chunk = sample_action_chunk(snap, build_condition(snap, h, GOAL),
                                    np.random.default_rng(7))
        a = act(snap, h, GOAL, np.random.default_rng(7))
        np.testing.assert_array_equal(a, chunk[0])

    def test_condition_dim_checked(self):
        snap = make_snapshot()
        with pytest.raises(ValueError):
            sample_chunks(snap, np.zeros((2, 10), np.float32),
                          np.random.default_rng(0))

    def test_ddpm_kind_runs(self):
        snap = make_snapshot(kind="ddpm")
        out = sample_chunks(snap, np.zeros((1, snap.cond_dim), np.float32),
                            np.random.default_rng(0))
        assert out.shape == (1, 8, 4)


class TestSnapshotIO:
    def test_roundtrip(self, tmp_path):
        snap = make_snapshot()
        snap.obs_mean = np.random.default_rng(0).standard_normal(OBS_DIM).astype(np.float32)
        path = str(tmp_path / "p.dmck")
        save_snapshot(snap, path)
        back = load_snapshot(path)
        assert back.h_s == snap.h_s and back.h_a == snap.h_a
        assert back.sampler == snap.sampler
        np.testing.assert_array_equal(back.obs_mean, snap.obs_mean)
        for k in snap.params:
            np.testing.assert_array_equal(back.params[k], snap.params[k])
        cond = np.zeros((1, snap.cond_dim), np.float32)
        np.testing.assert_array_equal(
            sample_chunks(snap, cond, np.random.default_rng(1)),
            sample_chunks(back, cond, np.random.default_rng(1)))

    def test_param_dim_validation(self):
        snap = make_snapshot()
        with pytest.raises(ValueError):
            PolicySnapshot(snap.params, snap.schedule, snap.sampler, h_s=10)
