"""Independent reference implementations used only by the tests.

Nothing here imports the inference code: emissions come from scipy.stats and
posteriors from exhaustive enumeration or a textbook scaled Baum-Welch.
"""

import itertools

import numpy as np
from scipy import optimize, stats
from scipy.special import digamma


def dense_counts(ds):
    return ds.counts.toarray().reshape(ds.n_users, ds.T, ds.n_items)


def period_logpmf(x, k, d, params):
    """log NB(N) + log Multinomial(x) for one period under a (k, d) segment."""
    n = int(x.sum())
    out = stats.nbinom.logpmf(n, params.r[k, d - 1], 1 - params.p[k, d - 1])
    if n:
        out += stats.multinomial.logpmf(x, n, params.theta[k])
    return float(out)


def compositions(T, M):
    if T == 0:
        yield ()
        return
    for d in range(1, min(M, T) + 1):
        for rest in compositions(T - d, M):
            yield (d,) + rest


def enumerate_segmentations(x, params):
    """Yield (segments, log weight) for every legal segmentation of one user.

    ``x`` is the dense ``(T, |I|)`` count array; segments are ``(k, d, end)``.
    """
    T = x.shape[0]
    K = params.K
    with np.errstate(divide="ignore"):
        lpi, lA, lD = np.log(params.pi), np.log(params.trans), np.log(params.dur)
    for durs in compositions(T, params.M):
        for states in itertools.product(range(K), repeat=len(durs)):
            if not params.allow_self_transition and any(a == b for a, b in zip(states, states[1:])):
                continue
            w = lpi[states[0]]
            for a, b in zip(states, states[1:]):
                w += lA[a, b]
            segs, t = [], 0
            for k, d in zip(states, durs):
                w += lD[k, d - 1]
                for tau in range(t, t + d):
                    w += period_logpmf(x[tau], k, d, params)
                segs.append((k, d, t + d - 1))
                t += d
            if np.isfinite(w):
                yield segs, w


def brute_force_posteriors(x, params):
    """Log-likelihood (with coefficient) and all posteriors by enumeration."""
    T, K, M = x.shape[0], params.K, params.M
    items = list(enumerate_segmentations(x, params))
    logw = np.array([w for _, w in items])
    ll = np.logaddexp.reduce(logw)
    probs = np.exp(logw - ll)
    gamma = np.zeros((T, K, M))
    occ = np.zeros((T, K))
    xi = np.zeros((max(T - 1, 0), K, K))
    initial = np.zeros(K)
    coverage = np.zeros((T, K, M))
    for (segs, _), pr in zip(items, probs):
        initial[segs[0][0]] += pr
        for idx, (k, d, end) in enumerate(segs):
            gamma[end, k, d - 1] += pr
            for tau in range(end - d + 1, end + 1):
                occ[tau, k] += pr
                coverage[tau, k, d - 1] += pr
            if idx + 1 < len(segs):
                xi[end, k, segs[idx + 1][0]] += pr
    return {"loglik": float(ll), "gamma": gamma, "occupancy": occ, "xi": xi, "initial": initial,
            "coverage": coverage}


# ---------------------------------------------------------------------------
# textbook HMM (M = 1, self-transitions allowed), probability space with scaling


def hmm_emission_probs(x, params):
    T = x.shape[0]
    B = np.empty((T, params.K))
    for t in range(T):
        for k in range(params.K):
            B[t, k] = np.exp(period_logpmf(x[t], k, 1, params))
    return B


def scaled_forward_backward(B, pi, A):
    T, K = B.shape
    alpha = np.zeros((T, K))
    c = np.zeros(T)
    alpha[0] = pi * B[0]
    c[0] = alpha[0].sum()
    alpha[0] /= c[0]
    for t in range(1, T):
        alpha[t] = (alpha[t - 1] @ A) * B[t]
        c[t] = alpha[t].sum()
        alpha[t] /= c[t]
    beta = np.ones((T, K))
    for t in range(T - 2, -1, -1):
        beta[t] = (A @ (B[t + 1] * beta[t + 1])) / c[t + 1]
    gamma = alpha * beta
    xi = np.zeros((T - 1, K, K))
    for t in range(T - 1):
        xi[t] = alpha[t][:, None] * A * (B[t + 1] * beta[t + 1])[None, :] / c[t + 1]
    return gamma, xi, np.log(c).sum()


def _nb_fit_brentq(values, weights):
    total = weights.sum()
    m = np.dot(weights, values) / total

    def score(r):
        return np.dot(weights, digamma(r + values) - digamma(r)) + total * np.log(r / (r + m))

    lo, hi = 1e-4, 1e4
    if score(hi) >= 0:
        r = hi
    elif score(lo) <= 0:
        r = lo
    else:
        r = optimize.brentq(score, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    return r, m / (m + r)


def baum_welch(xs, params, alpha_prior, iterations, floor=1e-12):
    """MAP Baum-Welch on dense per-user count arrays ``xs`` (U, T, |I|).

    Returns per-iteration total log-likelihood (with coefficient), the
    posteriors of the final E-step, and the parameter history.
    """
    K, n_items = params.K, params.theta.shape[1]
    pi, A, theta = params.pi.copy(), params.trans.copy(), params.theta.copy()
    r, p = params.r[:, 0].copy(), params.p[:, 0].copy()
    lls, history = [], []

    def rows(num):
        num = np.maximum(num, 0.0)
        out = num / num.sum(axis=-1, keepdims=True)
        out = np.maximum(out, floor)
        return out / out.sum(axis=-1, keepdims=True)

    for _ in range(iterations + 1):
        from types import SimpleNamespace
        cur = SimpleNamespace(K=K, M=1, pi=pi, trans=A, dur=np.ones((K, 1)), theta=theta,
                              r=r[:, None], p=p[:, None], allow_self_transition=True)
        ll = 0.0
        g0 = np.zeros(K)
        xsum = np.zeros((K, K))
        item = np.zeros((K, n_items))
        gammas, xis = [], []
        Ns, Ws = [], []
        for x in xs:
            B = hmm_emission_probs(x, cur)
            gamma, xi, l = scaled_forward_backward(B, pi, A)
            ll += l
            g0 += gamma[0]
            xsum += xi.sum(axis=0)
            item += gamma.T @ x
            gammas.append(gamma)
            xis.append(xi)
            Ns.append(x.sum(axis=1))
            Ws.append(gamma)
        lls.append(ll)
        history.append((pi.copy(), A.copy(), theta.copy(), r.copy(), p.copy()))
        if len(lls) == iterations + 1:
            break
        a = alpha_prior
        pi = rows(g0 + a / K - 1)
        A = rows(xsum + a / K - 1)
        theta = rows(item + a / n_items - 1)
        N = np.concatenate(Ns).astype(float)
        W = np.concatenate(Ws)
        for k in range(K):
            r[k], p[k] = _nb_fit_brentq(N, W[:, k])
        p = np.clip(p, 1e-12, 1 - 1e-12)
    return lls, gammas, xis, history


# ---------------------------------------------------------------------------
# next-period prediction


def censored_covering_oracle(x, params):
    """Exact predictive ``P(covering segment of period T = (k, d, end))`` by enumeration.

    Enumerates every segment sequence whose last segment starts at or before
    ``T`` and ends at or after ``T``; that segment only emits its in-training
    periods. Returns a dict keyed by ``(k, d, end)``.
    """
    T, K, M = x.shape[0], params.K, params.M
    with np.errstate(divide="ignore"):
        lpi, lA, lD = np.log(params.pi), np.log(params.trans), np.log(params.dur)
    out = {}
    for start in range(T + 1):
        for durs in compositions(start, M):
            for states in itertools.product(range(K), repeat=len(durs) + 1):
                if not params.allow_self_transition and any(a == b for a, b in zip(states, states[1:])):
                    continue
                w = lpi[states[0]]
                for a, b in zip(states, states[1:]):
                    w += lA[a, b]
                t = 0
                for k, d in zip(states, durs):
                    w += lD[k, d - 1]
                    for tau in range(t, t + d):
                        w += period_logpmf(x[tau], k, d, params)
                    t += d
                k = states[-1]
                for d in range(T - start + 1, M + 1):
                    wd = w + lD[k, d - 1]
                    for tau in range(start, T):
                        wd += period_logpmf(x[tau], k, d, params)
                    key = (k, d, start + d - 1)
                    out[key] = np.logaddexp(out.get(key, -np.inf), wd)
    keys = list(out)
    logw = np.array([out[k] for k in keys])
    probs = np.exp(logw - np.logaddexp.reduce(logw))
    return dict(zip(keys, probs))


def series_item_prob(r, p, theta, n_max=200):
    """``sum_n NB(n) (1 - (1 - theta)^n)`` truncated at ``n_max``."""
    n = np.arange(n_max + 1)
    return float(np.sum(stats.nbinom.pmf(n, r, 1 - p) * (1 - (1 - theta) ** n)))
