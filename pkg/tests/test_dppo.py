"""Two-layer-MDP machinery: flatten index, chain likelihoods, GAE, PPO."""

import numpy as np
import pytest

from locodiff.diffusion import SamplerSpec, ddim_subsequence, make_schedule
from locodiff.dppo import (FinetuneConfig, chain_sample, flatten_index, gae,
                           gaussian_logp)
from locodiff.nets import init_denoiser, params_to_numpy
from locodiff.policy import PolicySnapshot, sample_chunks
from locodiff.quadsim import GOAL_DIM, OBS_DIM


def make_snapshot(seed=0):
    rng = np.random.default_rng(seed)
    cond_dim = 30 * OBS_DIM + GOAL_DIM
    params = params_to_numpy(init_denoiser(rng, cond_dim, 8, 4))
    return PolicySnapshot(params, make_schedule(),
                          SamplerSpec("ddim", tuple(ddim_subsequence(100, 5))))


class TestFlattenIndex:
    def test_cited_examples(self):
        assert flatten_index(0, 4, 5) == 0
        assert flatten_index(0, 0, 5) == 4
        assert flatten_index(3, 2, 5) == 17

    def test_bijection_exhaustive(self):
        for K in range(1, 11):
            seen = set()
            for t in range(100):
                for k in range(K):
                    seen.add(flatten_index(t, k, K))
            assert seen == set(range(100 * K))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            flatten_index(0, 5, 5)
        with pytest.raises(ValueError):
            flatten_index(-1, 0, 5)


class TestChainLikelihood:
    def test_sigma_zero_equals_ddim(self):
        snap = make_snapshot()
        conds = np.random.default_rng(1).standard_normal(
            (3, snap.cond_dim)).astype(np.float32)
        x, _ = chain_sample(snap, conds, sigma=0.0, rng=np.random.default_rng(2))
        want = sample_chunks(snap, conds, np.random.default_rng(2))
        np.testing.assert_allclose(np.clip(x, -1, 1), want, atol=1e-6)

    def test_five_transitions_per_env_step(self):
        snap = make_snapshot()
        conds = np.zeros((2, snap.cond_dim), np.float32)
        _, steps = chain_sample(snap, conds, 0.04, np.random.default_rng(0))
        assert len(steps) == 5
        ks = [k for k, _, _, _, _ in steps]
        assert ks == [100, 80, 60, 40, 20]

    def test_density_recomputation_oracle(self):
        # stored log-probs equal an independent scipy evaluation
        from scipy.stats import norm
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 4)).astype(np.float32)
        mean = rng.standard_normal((8, 4)).astype(np.float32)
        sigma = 0.04
        want = norm.logpdf(x.astype(np.float64), mean, sigma).sum()
        assert gaussian_logp(x, mean, sigma) == pytest.approx(want, rel=1e-6)

    def test_chain_logp_additivity(self):
        # full-chain log density == sum of per-step Gaussian terms, to 1e-6
        rng = np.random.default_rng(4)
        sigma = 0.04
        parts, total = [], 0.0
        for _ in range(5):
            x = rng.standard_normal((8, 4)).astype(np.float32)
            m = rng.standard_normal((8, 4)).astype(np.float32)
            lp = gaussian_logp(x, m, sigma)
            parts.append(lp)
            total += lp
        assert abs(sum(parts) - total) < 1e-6


class TestGAE:
    def test_single_terminal_step(self):
        adv, ret = gae([1.0], [0.0], [True], 0.0)
        np.testing.assert_allclose(adv, [1.0])
        np.testing.assert_allclose(ret, [1.0])

    def test_two_step_recursion(self):
        adv, _ = gae([1.0, 1.0], [0.0, 0.0], [False, True], 0.0,
                     gamma=0.9, lam=0.95)
        np.testing.assert_allclose(adv, [1.0 + 0.9 * 0.95, 1.0], rtol=1e-12)

    def test_gamma_zero(self):
        r = np.array([0.5, -1.0, 2.0])
        v = np.array([0.1, 0.2, 0.3])
        adv, _ = gae(r, v, [False, False, True], 0.0, gamma=0.0)
        np.testing.assert_allclose(adv, r - v, rtol=1e-12)

    def test_bootstrap_value_used(self):
        adv, _ = gae([0.0], [0.0], [False], 2.0, gamma=0.9, lam=0.95)
        np.testing.assert_allclose(adv, [1.8], rtol=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(0)
        T, B = 20, 3
        r = rng.standard_normal((T, B))
        v = rng.standard_normal((T, B))
        d = rng.random((T, B)) < 0.1
        nv = rng.standard_normal(B)
        adv, ret = gae(r, v, d, nv)
        for b in range(B):
            a1, r1 = gae(r[:, b], v[:, b], d[:, b], nv[b])
            np.testing.assert_allclose(adv[:, b], a1, rtol=1e-10)
            np.testing.assert_allclose(ret[:, b], r1, rtol=1e-10)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0], [False, True], 0.0)

    def test_normalization_preserves_argmax(self):
        rng = np.random.default_rng(1)
        adv = rng.standard_normal(50)
        norm = (adv - adv.mean()) / (adv.std() + 1e-8)
        assert np.argmax(adv) == np.argmax(norm)


class TestPPOSurrogate:
    def test_clip_arithmetic(self):
        # rho=2, A>0, clip 0.2 -> clipped branch contributes 1.2*A
        rho, A, clip = 2.0, 1.5, 0.2
        contrib = min(rho * A, np.clip(rho, 1 - clip, 1 + clip) * A)
        assert contrib == pytest.approx(1.2 * A)

    def test_rho_one_zero_mean_advantage(self):
        A = np.random.default_rng(0).standard_normal(100)
        A = (A - A.mean()) / A.std()
        surr = -np.mean(np.minimum(1.0 * A, 1.0 * A))
        assert abs(surr) < 1e-12

    def test_config_invariants(self):
        ft = FinetuneConfig()
        assert ft.sigma > 0
        assert ft.gamma == 0.9 and ft.lam == 0.95
        assert ft.k_inf == 5 and ft.lr == 1e-5
