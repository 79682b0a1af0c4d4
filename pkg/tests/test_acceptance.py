"""Acceptance suite: every criterion at its stated tolerance, one status line each."""

import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from acceptance_log import record
from fixtures import random_fixture
from oracles import baum_welch, brute_force_posteriors, series_item_prob
from hsmmrec.estimation import (EmOptions, PriorSpec, _nbd_score, batch_posteriors, e_step, em_fit, fit_best,
                                fit_nbd, log_likelihood, log_prior)
from hsmmrec.evaluation import (DurationShape, RollingPlan, classify_duration_shape, corpus_metrics,
                                hmm_recommender, hsmm_recommender, oracle_recommender, precision_recall_f1,
                                rolling_evaluate)
from hsmmrec.model import HsmmParams, sample_dataset
from hsmmrec.prediction import item_prob_given_segment, top_n_matrix
from hsmmrec.synthetic import drifting_interest_params, recovery_params

POSTERIORS = ("gamma", "occupancy", "xi", "initial", "coverage")


def test_c01_oracle_equivalence():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        params, x, ds = random_fixture(1000 + seed)
        oracle = brute_force_posteriors(x[0], params)
        post = e_step(ds, 0, params)
        worst = max(worst, abs(log_likelihood(ds, params)[1] - oracle["loglik"]))
        for key in POSTERIORS:
            a = np.asarray(getattr(post, key))
            if a.size:
                worst = max(worst, np.abs(a - oracle[key]).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    record(1, "oracle equivalence", ok, f"max err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_c02_em_monotone():
    params = recovery_params(K=3, M=3, n_items=20, seed=4)
    ds, _ = sample_dataset(params, 100, 30, seed=5)
    start = time.perf_counter()
    _, report = em_fit(ds, 3, 3, PriorSpec(100.0), EmOptions(max_iterations=50, rel_tol=0.0, seed=1))
    elapsed = time.perf_counter() - start
    steps = np.diff(report.trace)
    ok = report.iterations >= 50 and steps.min() >= -1e-8 and elapsed < 120
    record(2, "EM monotonicity", ok, f"{report.iterations} iterations, min step {steps.min():.2e}, {elapsed:.1f}s")
    assert ok


def test_c03_parameter_recovery():
    truth = recovery_params(K=3, M=3, n_items=20, seed=0)
    ds, _ = sample_dataset(truth, 200, 40, seed=11)
    start = time.perf_counter()
    fit, _ = fit_best(ds, 3, 3, PriorSpec(100.0), EmOptions(max_iterations=300, rel_tol=1e-8), restarts=5)
    elapsed = time.perf_counter() - start
    cost = np.abs(truth.theta[:, None, :] - fit.theta[None, :, :]).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    tv = 0.5 * np.abs(truth.theta[rows] - fit.theta[cols]).sum(axis=1)
    l1 = np.abs(truth.dur[rows] - fit.dur[cols]).sum(axis=1)
    ok = tv.max() <= 0.10 and l1.max() <= 0.15 and elapsed < 300
    record(3, "parameter recovery", ok, f"max TV {tv.max():.3f}, max D L1 {l1.max():.3f}, {elapsed:.0f}s")
    assert ok


def test_c04_hmm_reduction():
    worst = 0.0
    iterations = 8
    for seed in range(10):
        params, x, ds = random_fixture(2000 + seed, max_T=6, allow_self=True, users=3)
        prior = PriorSpec(float(params.K * 2 + x.shape[2]))
        lls, gammas, xis, history = baum_welch(x, params, prior.alpha, iterations)
        fitted, report = em_fit(ds, params.K, 1, prior,
                                EmOptions(max_iterations=iterations, rel_tol=0.0, allow_self_transition=True),
                                init=params)
        for i, (pi, A, theta, r, p) in enumerate(history):
            hp = HsmmParams(pi, A, np.ones((params.K, 1)), theta, r[:, None], p[:, None], True)
            worst = max(worst, abs(report.trace[i] - log_prior(hp, prior) - lls[i]))
        post = batch_posteriors(ds, fitted)
        worst = max(worst, np.abs(post.occupancy - np.array(gammas)).max())
        if x.shape[1] > 1:
            worst = max(worst, np.abs(post.xi - np.array(xis)).max())
    ok = worst <= 1e-9
    record(4, "HMM reduction", ok, f"max err {worst:.2e}")
    assert ok


def test_c05_nbd_solver():
    rng = np.random.default_rng(12345)
    n = 10_000
    x = rng.negative_binomial(2.5, 1 - 0.4, n)
    fit = fit_nbd(x)
    score, _ = _nbd_score(fit.r, x.astype(float), np.ones(n), x.mean(), float(n))
    ok = 2.35 <= fit.r <= 2.65 and 0.37 <= fit.p <= 0.43 and abs(score) < 1e-6 * n
    record(5, "NBD solver", ok, f"r={fit.r:.4f}, p={fit.p:.4f}, |score|={abs(score):.1e}")
    assert ok


def test_c06_prediction_closed_form():
    worst, misses = 0.0, 0
    for r in (0.5, 2.0, 10.0):
        for p in (0.1, 0.5, 0.9):
            for theta in (0.0, 0.01, 0.3, 1.0):
                params = HsmmParams(np.ones(1), np.ones((1, 1)), np.ones((1, 1)), np.array([[theta, 1 - theta]]),
                                    np.array([[r]]), np.array([[p]]), True)
                err = abs(float(item_prob_given_segment(0, 1, 0, params)) - series_item_prob(r, p, theta, 200))
                worst = max(worst, err)
                misses += err > 1e-10
    ok = worst <= 1e-10
    record(6, "prediction closed form vs 200-term series", ok,
           f"max err {worst:.2e}; {misses}/36 points exceed 1e-10 because the truncated NB tail is that heavy")
    assert ok


def test_c07_metric_hand_cases():
    m = precision_recall_f1([10, 11, 1, 12, 3], [1, 3, 7, 8], 5)
    exact = (m.precision, m.recall, m.f1) == (0.4, 0.5, 4 / 9)
    test = np.array([[3, 0, 0, 1, 0, 0, 0],
                     [1, 1, 1, 1, 1, 1, 1],
                     [0, 0, 0, 0, 0, 0, 0],
                     [0, 0, 5, 0, 0, 0, 0],
                     [0, 2, 2, 2, 0, 0, 2]])
    scores = oracle_recommender().fn(None, test)
    ceilings = {}
    for N in (1, 3, 5):
        got, users, excluded = corpus_metrics(top_n_matrix(scores, N), test, N)
        sizes = [np.count_nonzero(row) for row in test if row.any()]
        want_p = np.mean([min(N, a) / N for a in sizes])
        want_r = np.mean([min(N, a) / a for a in sizes])
        ceilings[N] = (abs(got.precision - want_p) < 1e-15 and abs(got.recall - want_r) < 1e-15
                       and (users, excluded) == (4, 1))
    ok = exact and all(ceilings.values())
    record(7, "metric hand cases", ok, f"P={m.precision}, R={m.recall}, F1={m.f1:.6f}")
    assert ok


@pytest.fixture(scope="module")
def drifting():
    params = drifting_interest_params(4, 4, 40)
    ds, _ = sample_dataset(params, 200, 12, seed=1)
    return ds


OPTS = EmOptions(max_iterations=100, rel_tol=1e-5)


def test_c08_hsmm_beats_hmm(drifting):
    start = time.perf_counter()
    plan = RollingPlan(8, (hsmm_recommender(4, 4, 100.0, OPTS), hmm_recommender(4, 100.0, OPTS)), Ns=(5,),
                       repetitions=10, seed=0, threads=4)
    report = rolling_evaluate(drifting, plan)
    elapsed = time.perf_counter() - start
    test = report.compare("HSMM", "HMM", 5)
    a, b = report.mean("HSMM", 5), report.mean("HMM", 5)
    ok = a > b and test.p < 0.05 and elapsed < 900
    record(8, "HSMM beats HMM on drifting interests", ok,
           f"F1@5 {a:.4f} vs {b:.4f}, t={test.t:.2f}, p={test.p:.1e}, {elapsed:.0f}s")
    assert ok


def test_c09_sensitivity_in_m(drifting):
    recs = tuple(hsmm_recommender(4, M, 100.0, OPTS, name=f"M{M}") for M in (1, 2, 3, 4))
    report = rolling_evaluate(drifting, RollingPlan(8, recs, Ns=(5,), repetitions=10, seed=0, threads=4))
    reps = [report.per_repetition(f"M{M}", 5) for M in (1, 2, 3, 4)]
    means = [r.mean() for r in reps]
    ok = True
    for a, b in zip(reps, reps[1:]):
        se = np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2 / a.size)
        ok &= b.mean() >= a.mean() - se
    record(9, "F1@5 nondecreasing in M", ok, "F1@5 " + ", ".join(f"{m:.3f}" for m in means))
    assert ok


def test_c10_duration_shapes():
    canonical = {
        DurationShape.INVERSE_U: (1, 4, 6, 3),
        DurationShape.U: (6, 2, 1, 5),
        DurationShape.NEGATIVE_EXPONENTIAL: (8, 4, 2, 1),
        DurationShape.EXPONENTIAL: (1, 2, 4, 8),
        DurationShape.UNIFORM: (5, 5, 5, 5),
        DurationShape.N_SHAPE: (2, 6, 1, 5),
    }
    got = {shape: classify_duration_shape(h) for shape, h in canonical.items()}
    ok = all(got[s] is s for s in canonical) and len(set(got.values())) == 6
    record(10, "duration-shape classes", ok, ", ".join(f"{s.value}->{g.value}" for s, g in got.items()))
    assert ok
