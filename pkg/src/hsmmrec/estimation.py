"""Forward-backward inference and MAP-EM training for the duration HSMM.

The lattice is kept in log space. With ``seg`` the segment log emissions of
:func:`hsmmrec.model.segment_log_emissions`, the recursions are::

    enter[0, k]       = log pi[k]
    alpha[t, k, d]    = enter[t-d+1, k] + log D[k, d] + seg[t, k, d]
    end[t, j]         = logsumexp_d alpha[t, j, d]
    enter[t+1, k]     = logsumexp_j end[t, j] + log A[j, k]

``alpha[t, k, d]`` is the joint log-probability that a ``(k, d)`` segment ends
at ``t`` together with the observations up to ``t``. ``beta[t, k]`` is the
log-probability of the observations after ``t`` given that a state-``k``
segment ends at ``t``. A sequence must end on a segment boundary at ``T-1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import digamma, gammaln, polygamma

from .dataset import PeriodizedDataset
from .model import (P_EPS, HsmmParams, log_multinomial_coefficients, period_log_emissions,
                    segment_log_emissions, validate)

logger = logging.getLogger(__name__)

R_MIN, R_MAX = 1e-4, 1e4


class NumericalFailure(FloatingPointError):
    pass


class StructuralError(ValueError):
    """No legal segmentation exists for the requested configuration."""


class DegeneracyError(ValueError):
    pass


def _lse(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


# ---------------------------------------------------------------------------
# lattice


@dataclass
class Lattice:
    """Forward/backward quantities; leading axis is the user when batched."""

    log_alpha: np.ndarray  # (..., T, K, M)
    log_enter: np.ndarray  # (..., T, K)
    log_end: np.ndarray  # (..., T, K)
    log_beta: np.ndarray | None = None  # (..., T, K, M); constant over the last axis
    log_start_beta: np.ndarray | None = None  # (..., T, K)
    loglik: np.ndarray | float = 0.0

    @property
    def shift(self):
        """Per-period conditioning constants: logsumexp of alpha over (k, d)."""
        return _lse(self.log_end, axis=-1)


def _forward(seg: np.ndarray, params: HsmmParams):
    U, T, K, M = seg.shape
    log_pi, log_A, log_D = _log(params.pi), _log(params.trans), _log(params.dur)
    alpha = np.full((U, T, K, M), -np.inf)
    enter = np.full((U, T, K), -np.inf)
    end = np.full((U, T, K), -np.inf)
    enter[:, 0] = log_pi
    for t in range(T):
        for d in range(1, min(M, t + 1) + 1):
            alpha[:, t, :, d - 1] = enter[:, t - d + 1] + log_D[:, d - 1] + seg[:, t, :, d - 1]
        end[:, t] = _lse(alpha[:, t], axis=-1)
        if t + 1 < T:
            enter[:, t + 1] = _lse(end[:, t, :, None] + log_A[None], axis=1)
    return alpha, enter, end, _lse(end[:, T - 1], axis=-1)


def _backward(seg: np.ndarray, params: HsmmParams):
    U, T, K, M = seg.shape
    log_A, log_D = _log(params.trans), _log(params.dur)
    beta_end = np.full((U, T, K), -np.inf)
    start_beta = np.full((U, T, K), -np.inf)
    beta_end[:, T - 1] = 0.0
    for t in range(T - 1, -1, -1):
        dmax = min(M, T - t)
        terms = np.stack([log_D[:, d - 1] + seg[:, t + d - 1, :, d - 1] + beta_end[:, t + d - 1]
                          for d in range(1, dmax + 1)], axis=-1)
        start_beta[:, t] = _lse(terms, axis=-1)
        if t > 0:
            beta_end[:, t - 1] = _lse(log_A[None] + start_beta[:, t, None, :], axis=2)
    return beta_end, start_beta


def _check_user_loglik(loglik, users):
    bad = ~np.isfinite(loglik)
    if np.any(bad):
        u = int(np.asarray(users)[np.flatnonzero(bad)[0]])
        raise NumericalFailure(f"user {u}: observations have zero probability under the model")


def _seg(ds, params, users=None, include_coefficient=False):
    return segment_log_emissions(period_log_emissions(ds, params, include_coefficient, users))


def forward(ds: PeriodizedDataset, u: int, params: HsmmParams) -> Lattice:
    """Forward pass for user ``u`` (alpha part of the lattice and its log-likelihood).

    The log-likelihood excludes the multinomial coefficient; see
    :func:`log_likelihood` for the full value.
    """
    alpha, enter, end, ll = _forward(_seg(ds, params, [u]), params)
    return Lattice(alpha[0], enter[0], end[0], loglik=float(ll[0]))


def backward(ds: PeriodizedDataset, u: int, params: HsmmParams, lattice: Lattice | None = None) -> Lattice:
    """Complete ``lattice`` (or a fresh forward pass) with the backward quantities."""
    seg = _seg(ds, params, [u])
    if lattice is None:
        alpha, enter, end, ll = _forward(seg, params)
        lattice = Lattice(alpha[0], enter[0], end[0], loglik=float(ll[0]))
    beta_end, start_beta = _backward(seg, params)
    lattice.log_beta = np.broadcast_to(beta_end[0][:, :, None], lattice.log_alpha.shape).copy()
    lattice.log_start_beta = start_beta[0]
    return lattice


# ---------------------------------------------------------------------------
# posteriors


@dataclass
class Posteriors:
    """Smoothed posteriors; leading axis is the user when batched.

    ``gamma[t, k, d-1]``: a ``(k, d)`` segment ends at ``t``.
    ``occupancy[t, k]``: the state at ``t`` is ``k``.
    ``xi[t, j, k]``: a ``j`` segment ends at ``t`` and a ``k`` segment starts at ``t+1``.
    ``initial[k]``: the first segment has state ``k``.
    ``coverage[t, k, d-1]``: period ``t`` lies inside a ``(k, d)`` segment.
    """

    gamma: np.ndarray
    occupancy: np.ndarray
    xi: np.ndarray
    initial: np.ndarray
    coverage: np.ndarray
    loglik: np.ndarray | float


def _posteriors(seg, params, users):
    alpha, enter, end, ll = _forward(seg, params)
    _check_user_loglik(ll, users)
    beta_end, start_beta = _backward(seg, params)
    U, T, K, M = seg.shape
    llb = ll[:, None, None]
    with np.errstate(invalid="raise"):
        gamma = np.exp(alpha + beta_end[..., None] - ll[:, None, None, None])
        log_A = _log(params.trans)
        xi = np.exp(end[:, :-1, :, None] + log_A[None, None] + start_beta[:, 1:, None, :] - llb[..., None])
        initial = np.exp(_log(params.pi)[None] + start_beta[:, 0] - ll[:, None])
    coverage = np.zeros_like(gamma)
    for d in range(1, M + 1):
        for o in range(d):
            coverage[:, :T - o, :, d - 1] += gamma[:, o:, :, d - 1]
    occupancy = coverage.sum(axis=-1)
    post = Posteriors(gamma, occupancy, xi, initial, coverage, ll)
    if not all(np.all(np.isfinite(a)) for a in (gamma, xi, initial)):
        raise NumericalFailure(f"non-finite posterior for users {list(users)}")
    return post, Lattice(alpha, enter, end, np.broadcast_to(beta_end[..., None], alpha.shape),
                         start_beta, ll)


def e_step(ds: PeriodizedDataset, u: int, params: HsmmParams) -> Posteriors:
    """Smoothed segment, occupancy and transition posteriors of user ``u``."""
    post, _ = _posteriors(_seg(ds, params, [u]), params, [u])
    return Posteriors(post.gamma[0], post.occupancy[0], post.xi[0], post.initial[0], post.coverage[0],
                      float(post.loglik[0]))


def batch_posteriors(ds: PeriodizedDataset, params: HsmmParams, users=None) -> Posteriors:
    """Posteriors for many users at once (all users by default)."""
    users = np.arange(ds.n_users) if users is None else np.asarray(users)
    post, _ = _posteriors(_seg(ds, params, users), params, users)
    return post


def log_likelihood(ds: PeriodizedDataset, params: HsmmParams) -> tuple[np.ndarray, float]:
    """Per-user and total log-likelihood, multinomial coefficient included."""
    out = np.empty(ds.n_users)
    for users in _chunks(ds.n_users, 512):
        _, _, _, ll = _forward(_seg(ds, params, users, include_coefficient=True), params)
        out[users] = ll
    return out, float(out.sum())


def _chunks(n, size):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


# ---------------------------------------------------------------------------
# sufficient statistics


@dataclass
class SuffStats:
    """Posterior-weighted counts accumulated over users (in user order)."""

    initial: np.ndarray  # (K,)
    trans: np.ndarray  # (K, K)
    dur: np.ndarray  # (K, M)
    items: np.ndarray  # (K, |I|)
    nbd_values: np.ndarray  # distinct N values
    nbd_weights: np.ndarray  # (n_values, K, M)
    loglik: float  # without multinomial coefficients
    loglik_per_user: np.ndarray


def expectation(ds: PeriodizedDataset, params: HsmmParams, chunk_size=256) -> SuffStats:
    """E-step over all users, reduced into :class:`SuffStats`."""
    K, M = params.K, params.M
    totals = ds.totals.ravel()
    values, inverse = np.unique(totals, return_inverse=True)
    stats = SuffStats(np.zeros(K), np.zeros((K, K)), np.zeros((K, M)), np.zeros((K, ds.n_items)),
                      values, np.zeros((len(values), K, M)), 0.0, np.zeros(ds.n_users))
    T = ds.T
    for users in _chunks(ds.n_users, chunk_size):
        post, _ = _posteriors(_seg(ds, params, users), params, users)
        rows = (users[:, None] * T + np.arange(T)[None, :]).ravel()
        stats.initial += post.initial.sum(axis=0)
        stats.trans += post.xi.sum(axis=(0, 1))
        stats.dur += post.gamma.sum(axis=(0, 1))
        stats.items += np.asarray(ds.counts[rows].T @ post.occupancy.reshape(-1, K)).T
        onehot = sp.csr_matrix((np.ones(len(rows)), (inverse[rows], np.arange(len(rows)))),
                               shape=(len(values), len(rows)))
        stats.nbd_weights += (onehot @ post.coverage.reshape(len(rows), K * M)).reshape(-1, K, M)
        stats.loglik_per_user[users] = post.loglik
    stats.loglik = float(stats.loglik_per_user.sum())
    return stats


# ---------------------------------------------------------------------------
# M-step


@dataclass(frozen=True)
class PriorSpec:
    """Symmetric Dirichlet priors with total concentration ``alpha`` per family."""

    alpha: float = 100.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha_prior must be positive")


@dataclass(frozen=True)
class EmOptions:
    max_iterations: int = 200
    rel_tol: float = 1e-6
    seed: int = 0
    init_scheme: str = "dirichlet-random"
    theta_floor: float = 1e-12
    allow_self_transition: bool = False
    share_nbd: bool = False
    chunk_size: int = 256

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tol >= 0:
            raise ValueError("rel_tol must be >= 0 (0 runs every iteration)")
        if self.init_scheme not in ("dirichlet-random", "kmeans-free-random"):
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")


@dataclass
class NbdFit:
    r: float
    p: float
    iterations: int = 0
    converged: bool = True
    at_boundary: bool = False
    method: str = "newton"
    message: str = ""


def _nbd_score(r, values, weights, mean, total):
    s = np.dot(weights, digamma(r + values) - digamma(r)) - total * np.log1p(mean / r)
    ds = np.dot(weights, polygamma(1, r + values) - polygamma(1, r)) + total * (1.0 / r - 1.0 / (r + mean))
    return s, ds


def fit_nbd(values, weights=None, r_bounds=(R_MIN, R_MAX), tol=1e-8, max_iter=100) -> NbdFit:
    """Weighted maximum-likelihood NB(r, p) fit.

    ``p`` is profiled out as ``mean / (mean + r)`` and ``r`` solves the
    digamma score equation by Newton's method from the moment estimate,
    safeguarded by a shrinking bracket (bisection when a step leaves it).
    """
    values = np.asarray(values, dtype=float)
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float)
    keep = weights > 0
    values, weights = values[keep], weights[keep]
    total = weights.sum()
    if total <= 0:
        raise ValueError("fit_nbd needs positive total weight")
    mean = float(np.dot(weights, values) / total)
    r_lo, r_hi = r_bounds
    if mean <= 0:
        return NbdFit(r_lo, P_EPS, 0, True, True, "degenerate", "all observations are zero")
    var = float(np.dot(weights, (values - mean) ** 2) / total)

    def finish(r, it, converged, boundary, method, message=""):
        p = min(max(mean / (mean + r), P_EPS), 1 - P_EPS)
        return NbdFit(float(r), float(p), it, converged, boundary, method, message)

    f_hi, _ = _nbd_score(r_hi, values, weights, mean, total)
    if f_hi >= 0:
        return finish(r_hi, 0, True, True, "clamp", "no overdispersion; r clamped at upper bound")
    f_lo, _ = _nbd_score(r_lo, values, weights, mean, total)
    if f_lo <= 0:
        return finish(r_lo, 0, True, True, "clamp", "r clamped at lower bound")

    lo, hi = r_lo, r_hi
    r = mean * mean / max(var - mean, 1e-12)
    r = min(max(r, lo * 10), hi / 10)
    method = "newton"
    for it in range(1, max_iter + 1):
        f, df = _nbd_score(r, values, weights, mean, total)
        if f > 0:
            lo = r
        else:
            hi = r
        step_ok = df < 0 and np.isfinite(f)
        r_new = r - f / df if step_ok else np.nan
        if not (lo < r_new < hi):
            r_new = np.sqrt(lo * hi)
            method = "newton+bisection"
        if abs(r_new - r) < tol * (1.0 + r):
            return finish(r_new, it, True, False, method)
        r = r_new
    # fall back to the moment estimate when the iteration cap is hit
    r_mom = min(max(mean * mean / max(var - mean, 1e-12), r_lo), r_hi)
    return finish(r_mom, max_iter, False, False, "moments", "Newton did not converge")


def nbd_score(r, values, weights=None) -> float:
    """Profile score dL/dr at ``r`` with ``p = mean / (mean + r)``."""
    values = np.asarray(values, dtype=float)
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float)
    total = weights.sum()
    return float(_nbd_score(r, values, weights, np.dot(weights, values) / total, total)[0])


@dataclass
class MStepDiagnostics:
    clipped: dict = field(default_factory=dict)
    floored: dict = field(default_factory=dict)
    uniform_rows: dict = field(default_factory=dict)
    nbd: dict = field(default_factory=dict)

    @property
    def newton_failures(self) -> int:
        return sum(not f.converged for f in self.nbd.values())


def _map_rows(name, numerators, mask, floor, diag: MStepDiagnostics):
    num = np.where(mask, numerators, 0.0)
    if not np.all(np.isfinite(num)):
        raise DegeneracyError(f"{name}: non-finite expected counts")
    negative = (num < 0) & mask
    num[negative] = 0.0
    sums = num.sum(axis=1)
    empty = sums <= 0
    num[empty] = mask[empty]
    rows = num / num.sum(axis=1, keepdims=True)
    low = mask & (rows < floor)
    rows = np.where(low, floor, rows)
    rows = rows / rows.sum(axis=1, keepdims=True)
    diag.clipped[name] = int(negative.sum())
    diag.floored[name] = int(low.sum())
    diag.uniform_rows[name] = np.flatnonzero(empty).tolist()
    return rows


def m_step(stats: SuffStats, prior: PriorSpec, params: HsmmParams, options: EmOptions = EmOptions()
           ) -> tuple[HsmmParams, MStepDiagnostics]:
    """MAP update of every parameter family from accumulated posteriors.

    Each family uses symmetric Dirichlet pseudo-counts (``alpha / n - 1``).
    Negative numerators are clipped to zero, a row with no mass falls back to
    uniform, and every row is floored at ``theta_floor`` and renormalized.
    Off-diagonal transition rows are normalized over ``k != j``.
    """
    K, M, n_items = params.K, params.M, params.n_items
    a, floor = prior.alpha, options.theta_floor
    diag = MStepDiagnostics()
    pi = _map_rows("pi", (stats.initial + a / K - 1)[None], np.ones((1, K), bool), floor, diag)[0]
    mask = np.ones((K, K), bool) if params.allow_self_transition else ~np.eye(K, dtype=bool)
    trans = _map_rows("trans", stats.trans + a / K - 1, mask, floor, diag)
    dur = _map_rows("dur", stats.dur + a / M - 1, np.ones((K, M), bool), floor, diag)
    theta = _map_rows("theta", stats.items + a / n_items - 1, np.ones((K, n_items), bool), floor, diag)

    r, p = params.r.copy(), params.p.copy()
    w = stats.nbd_weights
    for k in range(K):
        groups = [list(range(M))] if options.share_nbd else [[d] for d in range(M)]
        for g in groups:
            weights = w[:, k, g].sum(axis=1)
            if weights.sum() < 1e-10:
                continue
            fit = fit_nbd(stats.nbd_values, weights)
            r[k, g], p[k, g] = fit.r, fit.p
            for d in g:
                diag.nbd[(k, d + 1)] = fit
    return params.replace(pi=pi, trans=trans, dur=dur, theta=theta, r=r, p=p), diag


def _dirichlet_logpdf(x, conc):
    n = x.shape[-1]
    if n <= 1:
        return 0.0
    return float(gammaln(n * conc) - n * gammaln(conc) + (conc - 1) * np.sum(np.log(x)))


def log_prior(params: HsmmParams, prior: PriorSpec) -> float:
    """Log density of the Dirichlet priors at ``params``."""
    a, K, M, n_items = prior.alpha, params.K, params.M, params.n_items
    out = _dirichlet_logpdf(params.pi, a / K)
    for j in range(K):
        row = params.trans[j] if params.allow_self_transition else np.delete(params.trans[j], j)
        out += _dirichlet_logpdf(row, a / K)
        out += _dirichlet_logpdf(params.dur[j], a / M)
        out += _dirichlet_logpdf(params.theta[j], a / n_items)
    return out


# ---------------------------------------------------------------------------
# EM driver


@dataclass
class FitReport:
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    newton_failures: list = field(default_factory=list)
    newton: dict = field(default_factory=dict)
    floored: list = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.trace[-1]

    def log_lines(self) -> list[str]:
        out = ["iteration,penalized_loglik,delta,newton_failures"]
        for i, v in enumerate(self.trace):
            delta = v - self.trace[i - 1] if i else float("nan")
            fails = self.newton_failures[i] if i < len(self.newton_failures) else 0
            out.append(f"{i},{v!r},{delta!r},{fails}")
        return out


def initial_params(ds: PeriodizedDataset, K: int, M: int, options: EmOptions = EmOptions()) -> HsmmParams:
    """Seeded random start: Dirichlet(1) rows, ``r = 1`` and mean-matched ``p``."""
    rng = np.random.default_rng(options.seed)
    pi = rng.dirichlet(np.ones(K))
    if options.allow_self_transition:
        trans = rng.dirichlet(np.ones(K), size=K)
    else:
        trans = np.zeros((K, K))
        for j in range(K):
            trans[j, np.arange(K) != j] = rng.dirichlet(np.ones(K - 1)) if K > 1 else []
    dur = rng.dirichlet(np.ones(M), size=K)
    if options.init_scheme == "kmeans-free-random":
        # random soft assignment of periods to states, then smoothed item frequencies
        resp = rng.dirichlet(np.ones(K), size=ds.counts.shape[0])
        theta = np.asarray(ds.counts.T @ resp).T + 1.0
        theta /= theta.sum(axis=1, keepdims=True)
    else:
        theta = rng.dirichlet(np.ones(ds.n_items), size=K)
    mean = ds.totals.mean() if ds.totals.size else 0.0
    p = np.full((K, M), min(max(mean / (mean + 1.0), 1e-6), 1 - 1e-6))
    return HsmmParams(pi, trans, dur, theta, np.ones((K, M)), p, options.allow_self_transition)


def check_structure(K: int, M: int, T: int, allow_self_transition: bool) -> None:
    if K < 1 or M < 1:
        raise StructuralError(f"need K >= 1 and M >= 1 (got K={K}, M={M})")
    if K == 1 and not allow_self_transition and T > M:
        raise StructuralError(
            f"K=1 without self-transitions cannot cover T={T} periods with durations <= M={M}")


def em_fit(ds: PeriodizedDataset, K: int, M: int, prior: PriorSpec = PriorSpec(),
           options: EmOptions = EmOptions(), init: HsmmParams | None = None) -> tuple[HsmmParams, FitReport]:
    """MAP-EM. Stops when the penalized log-likelihood moves by less than ``rel_tol`` (relative)."""
    if ds.n_users == 0:
        raise ValueError("cannot fit an empty dataset")
    check_structure(K, M, ds.T, options.allow_self_transition)
    params = init if init is not None else initial_params(ds, K, M, options)
    problems = validate(params)
    if problems:
        raise ValueError("invalid initial parameters: " + "; ".join(problems))
    coef = float(log_multinomial_coefficients(ds).sum())
    report = FitReport()

    def evaluate(p):
        stats = expectation(ds, p, options.chunk_size)
        value = stats.loglik + coef + log_prior(p, prior)
        if not np.isfinite(value):
            raise NumericalFailure(f"non-finite penalized log-likelihood at iteration {len(report.trace)}")
        report.trace.append(value)
        return stats

    stats = evaluate(params)
    report.newton_failures.append(0)
    for it in range(options.max_iterations):
        params, diag = m_step(stats, prior, params, options)
        stats = evaluate(params)
        report.newton_failures.append(diag.newton_failures)
        report.newton = diag.nbd
        report.floored.append(diag.floored)
        report.iterations = it + 1
        prev, cur = report.trace[-2], report.trace[-1]
        if options.rel_tol > 0 and abs(cur - prev) < options.rel_tol * abs(cur):
            report.converged = True
            break
    if not report.converged:
        logger.warning("em_fit: not converged after %d iterations", options.max_iterations)
    return params, report


def fit_best(ds: PeriodizedDataset, K: int, M: int, prior: PriorSpec = PriorSpec(),
             options: EmOptions = EmOptions(), restarts: int = 1) -> tuple[HsmmParams, FitReport]:
    """Best of ``restarts`` seeded runs by final penalized log-likelihood."""
    best = None
    for i in range(restarts):
        opts = EmOptions(**{**options.__dict__, "seed": options.seed + i})
        fit = em_fit(ds, K, M, prior, opts)
        if best is None or fit[1].final > best[1].final:
            best = fit
    return best
