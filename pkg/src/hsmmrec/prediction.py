"""Next-period consumption probabilities and top-N lists.

For the first period after training (index ``T``), the segment covering it
ends at ``s = T + o`` (``o = 0..M-1``) and has duration ``d >= o + 1``. Its
predecessor therefore ended at ``tau = T + o - d``, which lies in
``[T-M, T-1]`` (``tau = -1`` means the covering segment is the user's first).
The covering-segment weight is ``D[k, d] * sum_i A[i, k] g(tau, i)``, where
``g`` is the boundary posterior of a segment ending at ``tau``.

Boundary modes:

``exact`` (default)
    The right-censored predictive distribution. It weights each covering
    hypothesis by the forward mass at ``tau`` and by the likelihood of the
    training periods ``tau+1..T-1`` that already fall inside the covering
    segment. The weights sum to one.
``smoothed``
    ``g`` is the smoothed segment-end posterior from the full training data.
    Mass is not renormalized; probabilities are clipped to [0, 1]. Because the
    training lattice closes a segment at ``T-1``, this weighting always
    favors a fresh segment starting at ``T``.
``filtered``
    ``g`` is the forward segment-end posterior, normalized at each ``tau``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import PeriodizedDataset
from .estimation import _forward, _lse, _posteriors, _seg
from .model import HsmmParams, period_log_emissions

logger = logging.getLogger(__name__)

MODES = ("exact", "smoothed", "filtered")
POLICIES = ("all-items", "exclude-train-consumed")
MASS_TOL = 1e-6


@dataclass
class BoundaryPosterior:
    """Training-side posteriors needed for prediction, for one user or a batch.

    ``gamma[..., j, i, d'-1]`` is the boundary weight of an ``(i, d')`` segment
    ending at ``tau = T - M + j``; rows with ``tau < 0`` are zero. In ``exact``
    mode, ``log_end[..., j, i]`` and ``log_partial[..., j, k, d-1]`` hold the
    forward mass and the in-training emission of the covering segment instead.
    """

    T: int
    mode: str
    gamma: np.ndarray
    log_end: np.ndarray | None = None
    log_partial: np.ndarray | None = None
    log_pi: np.ndarray | None = None

    def __getitem__(self, u) -> "BoundaryPosterior":
        pick = (lambda a: None if a is None else a[u])
        return BoundaryPosterior(self.T, self.mode, self.gamma[u], pick(self.log_end),
                                 pick(self.log_partial), self.log_pi)


def boundary_posteriors(ds: PeriodizedDataset, params: HsmmParams, mode="exact", users=None
                        ) -> BoundaryPosterior:
    """Batched boundary posteriors (all users by default)."""
    if mode not in MODES:
        raise ValueError(f"unknown boundary mode {mode!r}; expected one of {MODES}")
    users = np.arange(ds.n_users) if users is None else np.asarray(users)
    T, K, M = ds.T, params.K, params.M
    seg = _seg(ds, params, users)
    U = len(users)
    taus = np.arange(T - M, T)
    valid = taus >= 0
    gamma = np.zeros((U, M, K, M))
    if mode == "smoothed":
        post, _ = _posteriors(seg, params, users)
        gamma[:, valid] = post.gamma[:, taus[valid]]
        return BoundaryPosterior(T, mode, gamma)
    alpha, _, end, _ = _forward(seg, params)
    if mode == "filtered":
        norm = _lse(end, axis=-1)
        gamma[:, valid] = np.exp(alpha[:, taus[valid]] - norm[:, taus[valid], None, None])
        return BoundaryPosterior(T, mode, gamma)

    pe = period_log_emissions(ds, params, users=users)
    per = pe.nbd + pe.mult[:, :, :, None]  # (U, T, K, M)
    # log_partial[j]: emission of periods tau+1..T-1 under (k, d) with tau = T - M + j
    tail = np.concatenate([np.zeros((U, 1, K, M)), np.cumsum(per[:, ::-1], axis=1)], axis=1)
    log_partial = np.zeros((U, M, K, M))
    log_end = np.full((U, M, K), -np.inf)
    for j, tau in enumerate(taus):
        if tau < -1:
            continue
        log_partial[:, j] = tail[:, T - 1 - tau]
        if tau >= 0:
            log_end[:, j] = end[:, tau]
    return BoundaryPosterior(T, mode, gamma, log_end, log_partial, np.log(params.pi))


def covering_segment_probs(boundary: BoundaryPosterior, params: HsmmParams) -> np.ndarray:
    """Covering-segment table ``[..., o, k, d-1]`` for the segment ending at ``T + o``.

    Entries with ``d < o + 1`` are zero.
    """
    T, K, M = boundary.T, params.K, params.M
    batch = boundary.gamma.shape[:-3]
    if boundary.gamma.shape[-3:] != (M, K, M):
        raise ValueError(f"boundary posterior shape {boundary.gamma.shape} does not match K={K}, M={M}")
    A, D = params.trans, params.dur
    out = np.zeros(batch + (M, K, M))
    if boundary.mode == "exact":
        with np.errstate(divide="ignore"):
            log_A, log_D = np.log(A), np.log(D)
        logw = np.full(batch + (M, K, M), -np.inf)
        for o in range(M):
            for d in range(o + 1, M + 1):
                tau = T + o - d
                j = M + o - d
                if tau >= 0:
                    enter = _lse(boundary.log_end[..., j, :, None] + log_A, axis=-2)
                elif tau == -1:
                    enter = np.broadcast_to(boundary.log_pi, batch + (K,))
                else:
                    continue
                logw[..., o, :, d - 1] = enter + log_D[:, d - 1] + boundary.log_partial[..., j, :, d - 1]
        flat = logw.reshape(batch + (-1,))
        return np.exp(logw - _lse(flat, axis=-1)[(...,) + (None,) * 3])

    g = boundary.gamma.sum(axis=-1)  # (..., M, K): segment of state i ends at tau
    for o in range(M):
        for d in range(o + 1, M + 1):
            tau = T + o - d
            if tau >= 0:
                out[..., o, :, d - 1] = (g[..., M + o - d, :] @ A) * D[:, d - 1]
            elif tau == -1:
                out[..., o, :, d - 1] = params.pi * D[:, d - 1]
    return out


def item_prob_given_segment(k, d, i, params: HsmmParams):
    """P(item i consumed in a period of a (k, d) segment), marginalizing the NB count."""
    r, p = params.r[k, d - 1], params.p[k, d - 1]
    theta = np.asarray(params.theta[k, i], dtype=float)
    return -np.expm1(r * (np.log1p(-p) - np.log1p(-p * (1.0 - theta))))


def item_prob_table(params: HsmmParams) -> np.ndarray:
    """``(K, M, |I|)`` table of :func:`item_prob_given_segment`."""
    r, p = params.r[:, :, None], params.p[:, :, None]
    theta = params.theta[:, None, :]
    return -np.expm1(r * (np.log1p(-p) - np.log1p(-p * (1.0 - theta))))


@dataclass
class PredictionVector:
    probs: np.ndarray  # (..., |I|)
    mass: np.ndarray | float  # total covering mass per user
    clipped: bool = False


def consumption_probs(cover: np.ndarray, params: HsmmParams) -> PredictionVector:
    """Mix per-segment item probabilities by the covering-segment table."""
    weights = cover.sum(axis=-3)  # (..., K, M)
    probs = np.einsum("...km,kmi->...i", weights, item_prob_table(params))
    mass = weights.sum(axis=(-2, -1))
    off = np.abs(mass - 1.0) > MASS_TOL
    clipped = False
    if np.any(off):
        logger.debug("covering mass deviates from 1 for %d user(s)", int(np.sum(off)))
        clipped = bool(np.any((probs > 1) | (probs < 0)))
        probs = np.clip(probs, 0.0, 1.0)
    return PredictionVector(probs, mass, clipped)


def predict(ds: PeriodizedDataset, params: HsmmParams, mode="exact", users=None) -> PredictionVector:
    """Consumption probabilities for the period after the training data, ``(U, |I|)``."""
    b = boundary_posteriors(ds, params, mode, users)
    return consumption_probs(covering_segment_probs(b, params), params)


@dataclass
class RecommendationList:
    user: int
    items: np.ndarray
    scores: np.ndarray
    policy: str = "all-items"
    diagnostics: list = field(default_factory=list)


def top_n(scores, n: int, policy="all-items", consumed=None, user=-1) -> RecommendationList:
    """Rank items by score (descending), ties by ascending index; NaN scores are skipped."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    scores = np.asarray(scores, dtype=float)
    diagnostics = []
    if n > scores.shape[0]:
        diagnostics.append(f"n={n} exceeds the {scores.shape[0]} available items")
    candidates = ~np.isnan(scores)
    if policy == "exclude-train-consumed" and consumed is not None:
        candidates[np.asarray(consumed, dtype=int)] = False
    idx = np.flatnonzero(candidates)
    order = idx[np.lexsort((idx, -scores[idx]))][:n]
    return RecommendationList(user, order, scores[order], policy, diagnostics)


def top_n_matrix(scores: np.ndarray, n: int, exclude=None) -> list[np.ndarray]:
    """Row-wise :func:`top_n` for a ``(U, |I|)`` score matrix.

    ``exclude`` is an optional boolean mask of the same shape.
    """
    scores = np.array(scores, dtype=float)
    invalid = np.isnan(scores)
    if exclude is not None:
        invalid |= np.asarray(exclude, dtype=bool)
    key = np.where(invalid, np.inf, -scores)
    order = np.argsort(key, axis=1, kind="stable")[:, :n]
    n_valid = (~invalid).sum(axis=1)
    return [row[:min(n, int(v))] for row, v in zip(order, n_valid)]


def write_predictions(path, lists, ds: PeriodizedDataset) -> None:
    """Dump ``user_id,item_id,probability,rank`` rows (rank is 1-based)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("user_id", "item_id", "probability", "rank"))
        for rec in lists:
            for rank, (i, s) in enumerate(zip(rec.items, rec.scores), start=1):
                w.writerow((ds.users[rec.user], ds.items[i], repr(float(s)), rank))
