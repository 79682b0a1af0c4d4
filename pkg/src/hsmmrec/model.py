"""Explicit-duration HSMM parameters, emission densities and sampling.

A user's timeline ``0..T-1`` is partitioned into segments. Each segment has a
state ``k`` and a duration ``d`` in ``1..M``. The first segment's state is
drawn from ``pi``, later ones from ``trans[previous]``, and durations from
``dur[k]``. Within a ``(k, d)`` segment, every period draws its total count
``N ~ NB(r[k, d], p[k, d])`` and then its items ``~ Multinomial(N, theta[k])``.

Array index ``d - 1`` stores duration ``d`` throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .dataset import PeriodGrid, PeriodizedDataset

ROW_TOL = 1e-12
P_EPS = 1e-12
MODEL_SCHEMA_VERSION = 1


class ParameterDomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HsmmParams:
    pi: np.ndarray
    trans: np.ndarray
    dur: np.ndarray
    theta: np.ndarray
    r: np.ndarray
    p: np.ndarray
    allow_self_transition: bool = False

    def __post_init__(self):
        for name in ("pi", "trans", "dur", "theta", "r", "p"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def M(self) -> int:
        return self.dur.shape[1]

    @property
    def n_items(self) -> int:
        return self.theta.shape[1]

    def replace(self, **changes) -> "HsmmParams":
        kw = {n: getattr(self, n) for n in ("pi", "trans", "dur", "theta", "r", "p",
                                               "allow_self_transition")}
        kw.update(changes)
        return HsmmParams(**kw)

    def allclose(self, other: "HsmmParams", atol=0.0, rtol=0.0) -> bool:
        return self.allow_self_transition == other.allow_self_transition and all(
            getattr(self, n).shape == getattr(other, n).shape
            and np.allclose(getattr(self, n), getattr(other, n), atol=atol, rtol=rtol)
            for n in ("pi", "trans", "dur", "theta", "r", "p"))


def validate(params: HsmmParams) -> list[str]:
    """Every violated parameter invariant, with its magnitude. Never raises."""
    out = []
    K, M = params.pi.shape[0], params.dur.shape[1] if params.dur.ndim == 2 else 0
    expected = {"pi": (K,), "trans": (K, K), "dur": (K, M), "theta": (K, params.theta.shape[-1]),
                "r": (K, M), "p": (K, M)}
    for name, shape in expected.items():
        arr = getattr(params, name)
        if arr.shape != shape:
            out.append(f"{name}: shape {arr.shape}, expected {shape}")
        elif not np.all(np.isfinite(arr)):
            out.append(f"{name}: {int(np.sum(~np.isfinite(arr)))} non-finite entries")
    if out:
        return out
    if K < 1 or (K < 2 and not params.allow_self_transition):
        out.append(f"K={K}: need K >= 2 without self-transitions")
    if M < 1:
        out.append("M must be >= 1")

    def simplex(name, rows):
        rows = np.atleast_2d(rows)
        if np.any(rows < 0):
            out.append(f"{name}: {int(np.sum(rows < 0))} negative entries (min {rows.min():.3g})")
        for idx, s in enumerate(rows.sum(axis=1)):
            if abs(s - 1.0) > ROW_TOL:
                label = name if rows.shape[0] == 1 else f"{name} row {idx}"
                out.append(f"{label}: sums to {s!r} (off by {s - 1.0:.3g})")

    simplex("pi", params.pi[None, :])
    simplex("trans", params.trans)
    simplex("dur", params.dur)
    simplex("theta", params.theta)
    if not params.allow_self_transition:
        diag = np.diag(params.trans)
        for k in np.flatnonzero(diag != 0):
            out.append(f"trans[{k},{k}] = {diag[k]:.3g} but self-transitions are disallowed")
    if np.any(params.r <= 0):
        out.append(f"r: {int(np.sum(params.r <= 0))} entries <= 0 (min {params.r.min():.3g})")
    bad_p = (params.p <= P_EPS) | (params.p >= 1 - P_EPS)
    if np.any(bad_p):
        out.append(f"p: {int(bad_p.sum())} entries outside ({P_EPS}, 1-{P_EPS})")
    return out


# ---------------------------------------------------------------------------
# densities


def nbd_log_pmf(n, r, p):
    """log NB(n; r, p) = log[Gamma(n+r) / (n! Gamma(r)) p^n (1-p)^r]. Broadcasts."""
    n, r, p = np.asarray(n), np.asarray(r, dtype=float), np.asarray(p, dtype=float)
    if np.any(r <= 0) or np.any((p <= 0) | (p >= 1)):
        raise ParameterDomainError("nbd_log_pmf needs r > 0 and 0 < p < 1")
    if np.any(n < 0):
        raise ParameterDomainError("nbd_log_pmf needs n >= 0")
    out = gammaln(n + r) - gammaln(n + 1.0) - gammaln(r) + n * np.log(p) + r * np.log1p(-p)
    return out if out.ndim else float(out)


def multinomial_log_pmf(x, theta_row, include_coefficient=False) -> float:
    """Multinomial log-probability of the count vector ``x`` (dense or sparse).

    Without the coefficient this is ``sum_i x_i log theta_i``. An item with
    ``theta_i = 0`` and ``x_i > 0`` gives ``-inf``.
    """
    theta_row = np.asarray(theta_row, dtype=float)
    if sp.issparse(x):
        x = x.tocsr()
        if x.shape[-1] != theta_row.shape[0]:
            raise ValueError(f"count vector has {x.shape[-1]} items, theta has {theta_row.shape[0]}")
        idx, vals = x.indices, x.data.astype(float)
    else:
        x = np.asarray(x).ravel()
        if x.shape[0] != theta_row.shape[0]:
            raise ValueError(f"count vector has {x.shape[0]} items, theta has {theta_row.shape[0]}")
        idx = np.flatnonzero(x)
        vals = x[idx].astype(float)
    with np.errstate(divide="ignore"):
        out = float(np.sum(vals * np.log(theta_row[idx])))
    if include_coefficient:
        out += float(gammaln(vals.sum() + 1.0) - gammaln(vals + 1.0).sum())
    return out


def log_multinomial_coefficients(ds: PeriodizedDataset) -> np.ndarray:
    """log N!/prod(x_i!) per (user, period), shape ``(U, T)``."""
    c = ds.counts.tocsr()
    per_entry = c.copy().astype(float)
    per_entry.data = gammaln(per_entry.data + 1.0)
    out = gammaln(ds.totals.ravel() + 1.0) - np.asarray(per_entry.sum(axis=1)).ravel()
    return out.reshape(ds.n_users, ds.T)


class PeriodEmissions(NamedTuple):
    """Per-period log emission terms for all users."""

    nbd: np.ndarray  # (U, T, K, M): log NB(N_u^t; r[k, d], p[k, d])
    mult: np.ndarray  # (U, T, K): sum_i x_i log theta[k, i] (+ coefficient if requested)


def period_log_emissions(ds: PeriodizedDataset, params: HsmmParams, include_coefficient=False,
                         users=None) -> PeriodEmissions:
    if ds.n_items != params.n_items:
        raise ValueError(f"dataset has {ds.n_items} items, model has {params.n_items}")
    totals = ds.totals
    counts = ds.counts
    if users is not None:
        users = np.atleast_1d(users)
        totals = totals[users]
        rows = (users[:, None] * ds.T + np.arange(ds.T)[None, :]).ravel()
        counts = counts[rows]
    U, T = totals.shape
    nbd = nbd_log_pmf(totals[:, :, None, None], params.r[None, None], params.p[None, None])
    with np.errstate(divide="ignore"):
        log_theta = np.log(params.theta)
    mult = _sparse_times_log(counts, log_theta).reshape(U, T, params.K)
    if include_coefficient:
        coef = log_multinomial_coefficients(ds)
        if users is not None:
            coef = coef[users]
        mult = mult + coef[:, :, None]
    return PeriodEmissions(np.asarray(nbd, dtype=float), mult)


def _sparse_times_log(counts: sp.csr_matrix, log_theta: np.ndarray) -> np.ndarray:
    """``counts @ log_theta.T`` where only stored (positive) entries contribute."""
    counts = counts.tocsr()
    out = np.zeros((counts.shape[0], log_theta.shape[0]))
    if counts.nnz == 0:
        return out
    rows = np.repeat(np.arange(counts.shape[0]), np.diff(counts.indptr))
    contrib = counts.data[:, None] * log_theta[:, counts.indices].T
    np.add.at(out, rows, contrib)
    return out


def segment_log_emissions(pe: PeriodEmissions) -> np.ndarray:
    """Log emission of every segment, ``(U, T, K, M)``.

    Entry ``[u, t, k, d-1]`` is the log-probability of the observations in
    periods ``t-d+1..t`` under a ``(k, d)`` segment, or ``-inf`` when the
    segment would start before period 0.
    """
    U, T, K, M = pe.nbd.shape
    per = pe.nbd + pe.mult[:, :, :, None]
    out = np.full((U, T, K, M), -np.inf)
    for d in range(1, M + 1):
        if d > T:
            break
        acc = np.zeros((U, T - d + 1, K))
        for o in range(d):
            acc = acc + per[:, o:T - d + 1 + o, :, d - 1]
        out[:, d - 1:, :, d - 1] = acc
    return out


@dataclass(frozen=True)
class SegmentLabel:
    """A latent segment: ``state`` for ``duration`` periods ending at ``end_period`` (0-based).

    ``drawn_duration`` differs from ``duration`` only for a final segment the
    sampler truncated at the end of the timeline.
    """

    state: int
    duration: int
    end_period: int
    drawn_duration: int | None = None

    @property
    def start_period(self) -> int:
        return self.end_period - self.duration + 1

    @property
    def param_duration(self) -> int:
        return self.drawn_duration or self.duration


def segment_emission_log_prob(ds: PeriodizedDataset, u: int, segment: SegmentLabel, params: HsmmParams,
                              include_coefficient=False) -> float:
    """Log emission of one user's observations inside ``segment``.

    Every period in the segment uses the NBD parameters of ``(state, duration)``.
    """
    if segment.start_period < 0 or segment.end_period >= ds.T:
        raise ValueError(f"segment {segment} outside [0, {ds.T})")
    k, d = segment.state, segment.param_duration
    user = ds.user_counts(u)
    totals = ds.totals[u]
    out = 0.0
    for t in range(segment.start_period, segment.end_period + 1):
        out += nbd_log_pmf(int(totals[t]), params.r[k, d - 1], params.p[k, d - 1])
        out += multinomial_log_pmf(user[t], params.theta[k], include_coefficient)
    return out


# ---------------------------------------------------------------------------
# sampling


def sample_dataset(params: HsmmParams, num_users: int, T: int, seed: int, item_count: int | None = None,
                   grid: PeriodGrid | None = None) -> tuple[PeriodizedDataset, list[list[SegmentLabel]]]:
    """Forward-simulate the generative process.

    Each user gets an independent stream seeded by ``(seed, user index)``. The
    last segment is truncated at ``T`` but keeps the NBD parameters of its drawn
    duration.
    """
    problems = validate(params)
    if problems:
        raise ParameterDomainError("; ".join(problems))
    if item_count is not None and item_count != params.n_items:
        raise ValueError(f"item_count={item_count} but theta has {params.n_items} columns")
    K, M, n_items = params.K, params.M, params.n_items
    rows, cols, vals = [], [], []
    traces = []
    for u in range(num_users):
        rng = np.random.default_rng([seed, u])
        trace = []
        t = 0
        k = int(rng.choice(K, p=params.pi))
        while t < T:
            d = int(rng.choice(M, p=params.dur[k])) + 1
            length = min(d, T - t)
            trace.append(SegmentLabel(k, length, t + length - 1, d if length < d else None))
            r, p = params.r[k, d - 1], params.p[k, d - 1]
            for tau in range(t, t + length):
                # numpy counts failures before r successes: NB(r, 1 - p) in its parameterization
                n = int(rng.negative_binomial(r, 1.0 - p))
                if n:
                    x = rng.multinomial(n, params.theta[k])
                    nz = np.flatnonzero(x)
                    rows.extend([u * T + tau] * len(nz))
                    cols.extend(nz.tolist())
                    vals.extend(x[nz].tolist())
            t += length
            k = int(rng.choice(K, p=params.trans[k]))
        traces.append(trace)
    counts = sp.csr_matrix((np.asarray(vals, dtype=np.int64), (rows, cols)), shape=(num_users * T, n_items))
    grid = grid or PeriodGrid("days", 0, T, 30)
    ds = PeriodizedDataset(tuple(f"u{u}" for u in range(num_users)), tuple(f"i{i}" for i in range(n_items)),
                           grid, counts)
    return ds, traces


# ---------------------------------------------------------------------------
# persistence


@dataclass
class TrainingMetadata:
    seed: int | None = None
    iterations: int = 0
    final_log_likelihood: float | None = None
    extra: dict = field(default_factory=dict)


def model_to_dict(params: HsmmParams, item_vocabulary, metadata: TrainingMetadata | None = None) -> dict:
    metadata = metadata or TrainingMetadata()
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "K": params.K, "M": params.M,
        "item_vocabulary": list(item_vocabulary),
        "pi": params.pi.tolist(), "trans": params.trans.tolist(), "dur": params.dur.tolist(),
        "theta": params.theta.tolist(), "r": params.r.tolist(), "p": params.p.tolist(),
        "allow_self_transition": params.allow_self_transition,
        "training_metadata": {"seed": metadata.seed, "iterations": metadata.iterations,
                              "final_log_likelihood": metadata.final_log_likelihood, **metadata.extra},
    }


def save_model(path, params: HsmmParams, item_vocabulary, metadata: TrainingMetadata | None = None) -> None:
    # json writes floats with repr, which round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(params, item_vocabulary, metadata), fh)


def load_model(path) -> tuple[HsmmParams, list[str], TrainingMetadata]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema {doc.get('schema_version')!r}")
    params = HsmmParams(*(np.array(doc[n], dtype=float) for n in ("pi", "trans", "dur", "theta", "r", "p")),
                        allow_self_transition=bool(doc["allow_self_transition"]))
    if (params.K, params.M) != (doc["K"], doc["M"]):
        raise ValueError("model file K/M disagree with array shapes")
    meta = dict(doc.get("training_metadata") or {})
    md = TrainingMetadata(meta.pop("seed", None), meta.pop("iterations", 0),
                          meta.pop("final_log_likelihood", None), meta)
    return params, list(doc["item_vocabulary"]), md
