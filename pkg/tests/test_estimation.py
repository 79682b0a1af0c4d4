import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fixtures import random_fixture, random_params
from hsmmrec.dataset import from_dense
from hsmmrec.estimation import (EmOptions, PriorSpec, StructuralError, SuffStats, backward, batch_posteriors,
                                e_step, em_fit, expectation, fit_nbd, forward, log_likelihood, log_prior, m_step,
                                nbd_score)
from hsmmrec.model import HsmmParams, sample_dataset, validate
from oracles import brute_force_posteriors, period_logpmf

POSTERIOR_KEYS = ("gamma", "occupancy", "xi", "initial", "coverage")


class TestLattice:
    def test_single_period_closed_form(self):
        rng = np.random.default_rng(0)
        params = random_params(rng, 2, 1, 3)
        x = np.array([[[1, 0, 2]]])
        ds = from_dense(x)
        want = np.logaddexp.reduce([np.log(params.pi[k]) + period_logpmf(x[0, 0], k, 1, params) for k in range(2)])
        assert log_likelihood(ds, params)[1] == pytest.approx(want, abs=1e-12)
        post = e_step(ds, 0, params)
        w = np.array([params.pi[k] * np.exp(period_logpmf(x[0, 0], k, 1, params)) for k in range(2)])
        np.testing.assert_allclose(post.occupancy[0], w / w.sum(), atol=1e-12)

    def test_uninformative_emissions_give_prior(self):
        rng = np.random.default_rng(1)
        base = random_params(rng, 3, 2, 4)
        same = base.replace(theta=np.tile(base.theta[0], (3, 1)), r=np.full((3, 2), 1.3), p=np.full((3, 2), 0.4))
        ds = from_dense(rng.poisson(1.0, (1, 1, 4)))
        post = e_step(ds, 0, same)
        prior = same.pi * same.dur[:, 0]
        np.testing.assert_allclose(post.gamma[0, :, 0], prior / prior.sum(), atol=1e-12)

    def test_alpha_impossible_cells(self):
        params, x, ds = random_fixture(4, max_T=5)
        lat = forward(ds, 0, params)
        for t in range(ds.T):
            for d in range(t + 2, params.M + 1):
                assert np.all(lat.log_alpha[t, :, d - 1] == -np.inf)
        assert not np.any(np.isnan(lat.log_alpha))

    def test_backward_boundary_is_identity(self):
        params, x, ds = random_fixture(7, max_T=4)
        lat = backward(ds, 0, params)
        np.testing.assert_array_equal(lat.log_beta[-1], 0.0)

    def test_two_period_backward_hand_trace(self):
        rng = np.random.default_rng(2)
        params = random_params(rng, 2, 1, 2)
        x = np.array([[[1, 1], [0, 2]]])
        lat = backward(from_dense(x), 0, params)
        # the lattice leaves out the multinomial coefficient, which is log 1 for x = (0, 2)
        for i in range(2):
            j = 1 - i
            want = np.log(params.trans[i, j] * params.dur[j, 0]) + period_logpmf(x[0, 1], j, 1, params)
            assert lat.log_beta[0, i, 0] == pytest.approx(want, abs=1e-12)

    def test_forced_alternation(self):
        params = HsmmParams([0.5, 0.5], [[0, 1], [1, 0]], [[1.0], [1.0]], [[0.99, 0.01], [0.01, 0.99]],
                            [[2.0], [2.0]], [[0.5], [0.5]])
        x = np.array([[[5, 0], [0, 0], [0, 0], [0, 0]]])
        post = e_step(from_dense(x), 0, params)
        states = post.occupancy.argmax(axis=1)
        assert states.tolist() == [0, 1, 0, 1]
        assert post.occupancy.max(axis=1).min() > 0.99


class TestPosteriorsAgainstEnumeration:
    @pytest.mark.parametrize("seed", range(12))
    def test_match_oracle(self, seed):
        params, x, ds = random_fixture(100 + seed)
        oracle = brute_force_posteriors(x[0], params)
        post = e_step(ds, 0, params)
        assert log_likelihood(ds, params)[1] == pytest.approx(oracle["loglik"], abs=1e-9)
        for key in POSTERIOR_KEYS:
            np.testing.assert_allclose(getattr(post, key), oracle[key], atol=1e-9, err_msg=key)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31))
    def test_probability_invariants(self, seed):
        params, x, ds = random_fixture(seed, max_T=7, users=3)
        post = batch_posteriors(ds, params)
        np.testing.assert_allclose(post.occupancy.sum(axis=-1), 1.0, atol=1e-9)
        assert post.gamma.sum(axis=(-2, -1)).max() <= 1 + 1e-9
        for arr in (post.gamma, post.occupancy, post.xi, post.initial):
            if arr.size:
                    assert arr.min() >= 0 and arr.max() <= 1 + 1e-12
        if not params.allow_self_transition:
            assert np.all(post.xi[..., np.arange(params.K), np.arange(params.K)] == 0)

    def test_batched_equals_per_user(self):
        params, x, ds = random_fixture(55, users=4)
        batch = batch_posteriors(ds, params)
        for u in range(4):
            one = e_step(ds, u, params)
            for key in POSTERIOR_KEYS:
                np.testing.assert_allclose(getattr(batch, key)[u], getattr(one, key), atol=1e-14)


class TestMStep:
    def _stats(self, K, M, n_items, initial):
        return SuffStats(np.asarray(initial, float), np.zeros((K, K)), np.zeros((K, M)), np.zeros((K, n_items)),
                         np.array([0.0, 3.0]), np.ones((2, K, M)), 0.0, np.zeros(1))

    def test_initial_hand_value(self):
        params = random_params(np.random.default_rng(0), 2, 1, 3)
        new, _ = m_step(self._stats(2, 1, 3, [1.0, 0.0]), PriorSpec(100), params)
        np.testing.assert_allclose(new.pi, [50 / 99, 49 / 99], atol=1e-12)

    def test_uniform_initial_gives_uniform_pi(self):
        params = random_params(np.random.default_rng(0), 4, 1, 3)
        new, _ = m_step(self._stats(4, 1, 3, [5.0] * 4), PriorSpec(100), params)
        np.testing.assert_allclose(new.pi, 0.25, atol=1e-15)

    @pytest.mark.parametrize("n_items", [5, 500])
    def test_unvisited_state_theta_is_uniform(self, n_items):
        params = random_params(np.random.default_rng(0), 2, 1, n_items)
        new, diag = m_step(self._stats(2, 1, n_items, [1.0, 1.0]), PriorSpec(100), params)
        np.testing.assert_allclose(new.theta, 1.0 / n_items, atol=1e-15)

    def test_outputs_are_legal(self):
        rng = np.random.default_rng(3)
        params = random_params(rng, 3, 3, 300)
        ds = from_dense(rng.poisson(0.01, (10, 6, 300)))
        new, diag = m_step(expectation(ds, params), PriorSpec(100), params)
        assert validate(new) == []
        assert diag.clipped["theta"] > 0

    def test_transition_rows_skip_diagonal(self):
        rng = np.random.default_rng(4)
        params = random_params(rng, 3, 2, 4)
        ds = from_dense(rng.poisson(1.0, (5, 6, 4)))
        stats_ = expectation(ds, params)
        new, _ = m_step(stats_, PriorSpec(100), params)
        assert np.all(np.diag(new.trans) == 0)
        j = 0
        num = stats_.trans[j, 1:] + 100 / 3 - 1
        np.testing.assert_allclose(new.trans[j, 1:], num / num.sum(), atol=1e-12)

    def test_log_prior_uses_off_diagonal_for_zero_diagonal(self):
        params = random_params(np.random.default_rng(5), 3, 2, 4)
        want = stats.dirichlet.logpdf(params.pi, np.full(3, 100 / 3))
        for j in range(3):
            want += stats.dirichlet.logpdf(np.delete(params.trans[j], j), np.full(2, 100 / 3))
            want += stats.dirichlet.logpdf(params.dur[j], np.full(2, 50.0))
            want += stats.dirichlet.logpdf(params.theta[j], np.full(4, 25.0))
        assert log_prior(params, PriorSpec(100)) == pytest.approx(want, rel=1e-12)


class TestFitNbd:
    def test_all_zero_is_degenerate(self):
        fit = fit_nbd(np.zeros(10))
        assert fit.at_boundary and fit.p < 1e-11 and fit.method == "degenerate"

    def test_point_mass_matches_mean(self):
        fit = fit_nbd([4.0], [3.0])
        assert fit.r * fit.p / (1 - fit.p) == pytest.approx(4.0, abs=1e-6)
        assert fit.at_boundary

    def test_weighted_equals_repeated(self):
        a = fit_nbd([0, 1, 5, 9], [2, 1, 3, 1])
        b = fit_nbd([0, 0, 1, 5, 5, 5, 9])
        assert a.r == pytest.approx(b.r, rel=1e-9) and a.p == pytest.approx(b.p, rel=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_score_root_and_matches_brentq(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.negative_binomial(rng.uniform(0.5, 6), rng.uniform(0.2, 0.8), size=400).astype(float)
        w = rng.uniform(0.1, 1.0, size=400)
        fit = fit_nbd(n, w)
        assert fit.converged and not fit.at_boundary
        assert abs(nbd_score(fit.r, n, w)) < 1e-6 * w.sum()
        from oracles import _nb_fit_brentq
        r_ref, p_ref = _nb_fit_brentq(n, w)
        assert fit.r == pytest.approx(r_ref, rel=1e-6) and fit.p == pytest.approx(p_ref, rel=1e-6)

    def test_rejects_empty_weight(self):
        with pytest.raises(ValueError):
            fit_nbd([1, 2], [0, 0])


class TestEmFit:
    def test_structural_impossibility(self):
        ds = from_dense(np.ones((2, 5, 2), dtype=int))
        with pytest.raises(StructuralError):
            em_fit(ds, 1, 3)

    def test_monotone_trace(self):
        rng = np.random.default_rng(6)
        truth = random_params(rng, 3, 2, 6, r=(2, 4), p=(0.4, 0.7))
        ds, _ = sample_dataset(truth, 40, 8, seed=1)
        _, rep = em_fit(ds, 3, 2, options=EmOptions(max_iterations=40, rel_tol=1e-12))
        assert np.diff(rep.trace).min() >= -1e-8
        assert len(rep.log_lines()) == len(rep.trace) + 1

    def test_iteration_cap_warns(self, caplog):
        ds = from_dense(np.random.default_rng(0).poisson(1.0, (5, 4, 3)))
        _, rep = em_fit(ds, 2, 2, options=EmOptions(max_iterations=1))
        assert not rep.converged
        assert "not converged" in caplog.text

    def test_true_init_is_near_fixed_point(self):
        rng = np.random.default_rng(8)
        truth = random_params(rng, 2, 2, 5, r=(2, 4), p=(0.4, 0.7))
        ds, _ = sample_dataset(truth, 400, 6, seed=2)
        _, rep = em_fit(ds, 2, 2, options=EmOptions(max_iterations=5, rel_tol=1e-12), init=truth)
        gain = rep.trace[-1] - rep.trace[0]
        assert 0 <= gain < 1e-2 * abs(rep.trace[0])

    def test_reproducible(self):
        ds = from_dense(np.random.default_rng(0).poisson(1.0, (6, 5, 3)))
        a, ra = em_fit(ds, 2, 2, options=EmOptions(max_iterations=5, seed=3))
        b, rb = em_fit(ds, 2, 2, options=EmOptions(max_iterations=5, seed=3))
        assert a.allclose(b) and ra.trace == rb.trace

    def test_shared_nbd_mode(self):
        ds = from_dense(np.random.default_rng(0).poisson(1.0, (6, 5, 3)))
        params, _ = em_fit(ds, 2, 3, options=EmOptions(max_iterations=3, share_nbd=True))
        assert np.all(params.r == params.r[:, :1])
