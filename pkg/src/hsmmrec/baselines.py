"""Comparison recommenders: UB, tIB, Katz-CWT, pLSA and link analysis.

All scorers take user x item count matrices (dense or scipy sparse) and
return a dense ``(U, |I|)`` score matrix; higher is better. The HMM
comparison is ``em_fit(..., M=1, allow_self_transition=True)`` and lives in
:mod:`hsmmrec.estimation`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


def _dense(m) -> np.ndarray:
    return m.toarray().astype(float) if sp.issparse(m) else np.asarray(m, dtype=float)


# ---------------------------------------------------------------------------
# user-based CF


def user_similarity(R: np.ndarray) -> np.ndarray:
    """Pearson similarity between user count vectors.

    Each pair is compared on the union of items either user consumed, after
    mean-centering over that union. Pairs with no co-consumed item get 0, as
    do pairs where either centered vector has zero variance.
    """
    R = _dense(R)
    U = R.shape[0]
    S = np.zeros((U, U))
    nz = R > 0
    for a in range(U):
        for b in range(a + 1, U):
            if not np.any(nz[a] & nz[b]):
                continue
            union = nz[a] | nz[b]
            x, y = R[a, union], R[b, union]
            x, y = x - x.mean(), y - y.mean()
            den = np.sqrt(np.dot(x, x) * np.dot(y, y))
            if den > 0:
                S[a, b] = S[b, a] = np.dot(x, y) / den
    for a in range(U):
        if nz[a].any():
            S[a, a] = 1.0
    return S


def ub_scores(R, u: int | None = None, neighbors: int = 50, similarity: np.ndarray | None = None) -> np.ndarray:
    """Similarity-weighted sum of the counts of the ``neighbors`` most similar users.

    Only positively correlated neighbors contribute. Returns one row for ``u``
    or the full matrix when ``u`` is None.
    """
    R = _dense(R)
    S = user_similarity(R) if similarity is None else similarity
    users = range(R.shape[0]) if u is None else [u]
    out = np.zeros((len(users), R.shape[1]))
    for row, v in enumerate(users):
        sims = S[v].copy()
        sims[v] = 0.0
        cand = np.flatnonzero(sims > 0)
        cand = cand[np.lexsort((cand, -sims[cand]))][:neighbors]
        if cand.size:
            out[row] = sims[cand] @ R[cand]
    return out[0] if u is not None else out


# ---------------------------------------------------------------------------
# temporal item-based CF


def item_similarity(R: np.ndarray) -> np.ndarray:
    """Pearson correlation between item columns over all users (0 for constant columns)."""
    R = _dense(R)
    X = R - R.mean(axis=0, keepdims=True)
    norms = np.sqrt((X * X).sum(axis=0))
    S = X.T @ X
    den = np.outer(norms, norms)
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.where(den > 0, S / den, 0.0)
    return S


def tib_scores(slices, u: int | None = None, tib_lambda: float = 0.5, similarity: np.ndarray | None = None
               ) -> np.ndarray:
    """Time-decayed item-based CF prediction.

    ``slices`` is a sequence of per-period user x item count matrices (oldest
    first). ``r_uj`` is the user's total count of item ``j`` and ``t_uj`` the age in
    periods of its most recent consumption, so ``f = exp(-lambda * age)``.
    Only positively similar items act as neighbors. Items with a zero
    denominator are NaN (undefined, not ranked).
    """
    if tib_lambda < 0:
        raise ValueError("tib_lambda must be >= 0")
    slices = [_dense(s) for s in slices]
    T = len(slices)
    R = np.sum(slices, axis=0)
    S = item_similarity(R) if similarity is None else similarity
    Spos = np.where(S > 0, S, 0.0)
    np.fill_diagonal(Spos, 0.0)
    last = np.full(R.shape, -1)
    for t, s in enumerate(slices):
        last[s > 0] = t
    age = np.where(last >= 0, T - 1 - last, 0)
    decay = np.where(R > 0, np.exp(-tib_lambda * age), 0.0)
    users = range(R.shape[0]) if u is None else [u]
    out = np.full((len(users), R.shape[1]), np.nan)
    for row, v in enumerate(users):
        f = decay[v]
        num = (R[v] * f) @ Spos
        den = f @ Spos
        ok = den > 0
        out[row, ok] = num[ok] / den[ok]
    return out[0] if u is not None else out


# ---------------------------------------------------------------------------
# Katz with a collapsed weighted tensor


@dataclass(frozen=True)
class DecaySpec:
    kc_theta: float = 0.5
    kc_beta: float = 0.001
    tib_lambda: float = 0.5
    rank_k: int = 10

    def __post_init__(self):
        if not 0 < self.kc_theta < 1:
            raise ValueError("kc_theta must lie in (0, 1)")
        if self.rank_k < 1:
            raise ValueError("rank_k must be >= 1")


def collapse_slices(slices, kc_theta: float) -> np.ndarray:
    """Decay-weighted sum of period slices (the newest gets weight 1)."""
    T = len(slices)
    return sum((1.0 - kc_theta) ** (T - 1 - t) * _dense(s) for t, s in enumerate(slices))


@dataclass
class KatzResult:
    scores: np.ndarray
    singular_values: np.ndarray
    rank: int
    diagnostics: list = field(default_factory=list)


def kc_scores(slices, spec: DecaySpec = DecaySpec()) -> KatzResult:
    """Truncated-SVD Katz scores ``U_k Psi V_k^T`` of the decay-collapsed matrix.

    ``Psi`` has diagonal entries ``beta s / (1 - beta^2 s^2)``.
    """
    A = collapse_slices(slices, spec.kc_theta)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    diagnostics = []
    k = spec.rank_k
    if k > rank:
        diagnostics.append(f"rank_k={k} exceeds matrix rank {rank}; reduced")
        k = rank
    b = spec.kc_beta
    psi = b * s[:k] / (1.0 - (b * s[:k]) ** 2)
    scores = (U[:, :k] * psi) @ Vt[:k]
    return KatzResult(scores, s[:k], k, diagnostics)


# ---------------------------------------------------------------------------
# pLSA aspect model


@dataclass
class ClusterModel:
    p_item_given_z: np.ndarray  # (Z, |I|)
    p_z_given_user: np.ndarray  # (U, Z)
    loglik_trace: list = field(default_factory=list)


def plsa_fit(R, z: int, seed: int = 0, iterations: int = 100, tol: float = 1e-8) -> ClusterModel:
    """EM for ``P(u, i) = P(u) sum_z P(z|u) P(i|z)`` on co-occurrence counts."""
    R = sp.csr_matrix(R, dtype=float)
    if z < 1:
        raise ValueError("z must be >= 1")
    if R.nnz == 0:
        raise ValueError("plsa_fit needs a non-empty matrix")
    U, n_items = R.shape
    rng = np.random.default_rng(seed)
    piz = rng.dirichlet(np.ones(n_items), size=z)
    pzu = rng.dirichlet(np.ones(z), size=U)
    coo = R.tocoo()
    rows, cols, n = coo.row, coo.col, coo.data
    trace = []
    for _ in range(iterations):
        joint = pzu[rows] * piz[:, cols].T  # (nnz, Z)
        mix = joint.sum(axis=1)
        trace.append(float(np.dot(n, np.log(mix))))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-1]):
            break
        resp = joint * (n / mix)[:, None]
        new_piz = np.zeros((z, n_items))
        new_pzu = np.zeros((U, z))
        np.add.at(new_piz.T, cols, resp)
        np.add.at(new_pzu, rows, resp)
        piz = new_piz / new_piz.sum(axis=1, keepdims=True)
        active = new_pzu.sum(axis=1) > 0
        new_pzu[~active] = 1.0
        pzu = new_pzu / new_pzu.sum(axis=1, keepdims=True)
    return ClusterModel(piz, pzu, trace)


def plsa_scores(model: ClusterModel, u: int | None = None) -> np.ndarray:
    """``P(i|u) = sum_z P(i|z) P(z|u)``."""
    pzu = model.p_z_given_user if u is None else model.p_z_given_user[u]
    return pzu @ model.p_item_given_z


# ---------------------------------------------------------------------------
# link analysis


@dataclass
class LinkScores:
    PR: np.ndarray  # (|I|, U)
    CR: np.ndarray  # (U, U)
    Y: float
    iterations: int
    converged: bool

    @property
    def scores(self) -> np.ndarray:
        return self.PR.T


def la_scores(R, Y: float = 1.0, iterations: int = 100, tol: float = 1e-9) -> LinkScores:
    """HITS-style representativeness iteration.

    ``PR = A^T CR`` and ``CR = B PR + CR0``, with ``b_uj = a_uj / (sum_j a_uj)^Y``.
    ``CR0`` is the identity (each user's column starts at that user). CR
    columns are rescaled to unit max-norm every sweep.
    """
    if Y < 0:
        raise ValueError("Y must be >= 0")
    A = _dense(R)
    U = A.shape[0]
    act = A.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        B = np.where(act[:, None] > 0, A / np.power(np.where(act > 0, act, 1.0), Y)[:, None], 0.0)
    CR0 = np.eye(U)
    CR = CR0.copy()
    PR = A.T @ CR
    converged = False
    it = 0
    for it in range(1, iterations + 1):
        PR = A.T @ CR
        new = B @ PR + CR0
        new = new / np.maximum(np.abs(new).max(axis=0, keepdims=True), 1e-300)
        change = np.abs(new - CR).max() / max(np.abs(new).max(), 1e-300)
        CR = new
        if change < tol:
            converged = True
            break
    PR = A.T @ CR
    if not converged:
        logger.info("la_scores: no convergence after %d sweeps", iterations)
    return LinkScores(PR, CR, Y, it, converged)
