"""Rolling-window evaluation, significance tests and post-hoc model analyses."""

from __future__ import annotations

import csv
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import baselines
from .dataset import PeriodizedDataset
from .estimation import EmOptions, PriorSpec, batch_posteriors, em_fit
from .model import HsmmParams
from .prediction import POLICIES, predict, top_n_matrix

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float


def precision_recall_f1(recommended, actual, n: int | None = None) -> Metrics | None:
    """Top-N precision, recall and F1 for one user.

    ``n`` defaults to the length of ``recommended``. Returns None when
    ``actual`` is empty (recall undefined; the user is skipped).
    """
    actual = set(int(i) for i in actual)
    recommended = [int(i) for i in recommended]
    n = len(recommended) if n is None else n
    if n < 1:
        raise ValueError("N must be >= 1")
    if not actual:
        return None
    hits = len(actual.intersection(recommended))
    # 2PR/(P+R) rewritten as a single division keeps hand cases exact
    return Metrics(hits / n, hits / len(actual), 2 * hits / (n + len(actual)))


def corpus_metrics(lists: Sequence, test: np.ndarray, n: int) -> tuple[Metrics | None, int, int]:
    """Mean metrics over users with test activity.

    Returns ``(metrics, evaluated users, excluded users)``.
    """
    per = []
    excluded = 0
    for u, rec in enumerate(lists):
        m = precision_recall_f1(rec, np.flatnonzero(test[u]), n)
        if m is None:
            excluded += 1
        else:
            per.append((m.precision, m.recall, m.f1))
    if not per:
        return None, 0, excluded
    mean = np.mean(per, axis=0)
    return Metrics(*map(float, mean)), len(per), excluded


# ---------------------------------------------------------------------------
# recommenders


ScoreFn = Callable[[PeriodizedDataset, int], np.ndarray]


@dataclass
class Recommender:
    """A named scorer ``fn(train, seed) -> (U, |I|)`` scores.

    ``stochastic`` scorers are re-run for every repetition; the others are
    computed once per round. ``peeks`` marks the test-reading oracle, whose
    ``fn`` receives the test matrix as its seed argument.
    """

    name: str
    fn: Callable
    stochastic: bool = False
    peeks: bool = False


def hsmm_recommender(K: int, M: int, alpha: float = 100.0, options: EmOptions = EmOptions(), mode="exact",
                     name="HSMM") -> Recommender:
    def fn(train, seed):
        opts = EmOptions(**{**options.__dict__, "seed": seed})
        params, _ = em_fit(train, K, M, PriorSpec(alpha), opts)
        return predict(train, params, mode).probs
    return Recommender(name, fn, stochastic=True)


def hmm_recommender(K: int, alpha: float = 100.0, options: EmOptions = EmOptions(), name="HMM") -> Recommender:
    """The HMM comparison: one-period stays with self-transitions allowed."""
    opts = EmOptions(**{**options.__dict__, "allow_self_transition": True})
    return hsmm_recommender(K, 1, alpha, opts, name=name)


def oracle_recommender() -> Recommender:
    """Ranks the test-period items first (by count); an upper bound for any honest method."""
    return Recommender("ORACLE", lambda train, test: np.asarray(test, dtype=float), peeks=True)


def _slices(train):
    return [train.period(t) for t in range(train.T)]


BASELINE_NAMES = ("UB", "tIB", "KC", "pLSA", "LA", "HMM")


def baseline_recommender(name: str, K: int = 10, **hp) -> Recommender:
    """Comparison scorer by name; hyperparameters pass through as keywords."""
    if name == "UB":
        return Recommender(name, lambda tr, s: baselines.ub_scores(tr.aggregate(), neighbors=hp.get("neighbors", 50)))
    if name == "tIB":
        return Recommender(name, lambda tr, s: baselines.tib_scores(_slices(tr), tib_lambda=hp.get("tib_lambda", 0.5)))
    if name == "KC":
        spec = baselines.DecaySpec(kc_theta=hp.get("kc_theta", 0.5), kc_beta=hp.get("kc_beta", 0.001),
                                   rank_k=hp.get("rank_k", 10))
        return Recommender(name, lambda tr, s: baselines.kc_scores(_slices(tr), spec).scores)
    if name == "pLSA":
        z = hp.get("z", K)
        return Recommender(name, lambda tr, s: baselines.plsa_scores(baselines.plsa_fit(tr.aggregate(), z, seed=s)),
                           stochastic=True)
    if name == "LA":
        return Recommender(name, lambda tr, s: baselines.la_scores(tr.aggregate(), Y=hp.get("Y", 1.0)).scores)
    if name == "HMM":
        return hmm_recommender(K, hp.get("alpha", 100.0), hp.get("options", EmOptions()))
    raise KeyError(f"unknown baseline {name!r}; valid names: {', '.join(BASELINE_NAMES)}")


# ---------------------------------------------------------------------------
# rolling harness


@dataclass(frozen=True)
class RollingPlan:
    n: int
    recommenders: tuple = ()
    Ns: tuple = (5, 10)
    repetitions: int = 10
    rounds: int | None = None
    policy: str = "all-items"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("train window n must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if any(N < 1 for N in self.Ns):
            raise ValueError("every N must be >= 1")

    def n_rounds(self, T: int) -> int:
        rounds = T - self.n if self.rounds is None else self.rounds
        if rounds < 1 or self.n + rounds > T:
            raise ValueError(f"plan with n={self.n} and {rounds} round(s) does not fit T={T}")
        return rounds


@dataclass(frozen=True)
class RoundResult:
    round: int
    repetition: int
    recommender: str
    N: int
    precision: float
    recall: float
    f1: float
    users: int
    excluded: int


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False
    message: str = ""


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    Zero-variance differences are flagged as degenerate: p is 1 when the
    constant difference is 0 and 0 otherwise.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_t_test needs two equal-length series of length >= 2")
    d = a - b
    df = d.size - 1
    if np.ptp(d) == 0:
        if d[0] == 0:
            return TTestResult(0.0, 1.0, df, True, "identical series")
        return TTestResult(float(np.copysign(np.inf, d[0])), 0.0, df, True,
                           "constant nonzero difference with zero variance")
    res = stats.ttest_rel(a, b)
    return TTestResult(float(res.statistic), float(res.pvalue), df)


@dataclass
class EvalReport:
    results: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    repetitions: int = 1

    def recommenders(self) -> list[str]:
        return list(dict.fromkeys(r.recommender for r in self.results))

    def Ns(self) -> list[int]:
        return sorted({r.N for r in self.results})

    def _select(self, name, N):
        return [r for r in self.results if r.recommender == name and r.N == N]

    def mean(self, name: str, N: int, metric="f1") -> float:
        """Arithmetic mean over every (round, repetition) value."""
        vals = [getattr(r, metric) for r in self._select(name, N)]
        return float(np.mean(vals)) if vals else float("nan")

    def per_repetition(self, name: str, N: int, metric="f1") -> np.ndarray:
        """Round-averaged metric for each repetition."""
        rows = self._select(name, N)
        reps = sorted({r.repetition for r in rows})
        return np.array([np.mean([getattr(r, metric) for r in rows if r.repetition == k]) for k in reps])

    def per_round(self, name: str, N: int, metric="f1") -> dict:
        rows = self._select(name, N)
        rounds = sorted({r.round for r in rows})
        return {k: float(np.mean([getattr(r, metric) for r in rows if r.round == k])) for k in rounds}

    def compare(self, a: str, b: str, N: int, metric="f1") -> TTestResult:
        return paired_t_test(self.per_repetition(a, N, metric), self.per_repetition(b, N, metric))

    def write_rounds(self, path) -> None:
        """``round,recommender,N,precision,recall,f1`` with metrics averaged over repetitions."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("round", "recommender", "N", "precision", "recall", "f1"))
            for name in self.recommenders():
                for N in self.Ns():
                    cols = [self.per_round(name, N, m) for m in ("precision", "recall", "f1")]
                    for rnd in cols[0]:
                        w.writerow((rnd, name, N) + tuple(repr(c[rnd]) for c in cols))

    def summary_table(self, metric_names=("precision", "recall", "f1")) -> str:
        """Plain-text table of mean metrics per recommender.

        In every column the best value is starred by its paired t-test
        against the runner-up: ``*`` p<0.1, ``**`` p<0.05, ``***`` p<0.001.
        """
        names = self.recommenders()
        cols = [(m, N) for N in self.Ns() for m in metric_names]
        header = ["method"] + [f"{m[0].upper()}@{N}" for m, N in cols]
        cells = {name: [f"{self.mean(name, N, m):.4f}" for m, N in cols] for name in names}
        honest = [nm for nm in names if nm != "ORACLE"]
        if len(honest) >= 2 and self.repetitions >= 2:
            for c, (m, N) in enumerate(cols):
                ranked = sorted(honest, key=lambda nm: -self.mean(nm, N, m))
                test = self.compare(ranked[0], ranked[1], N, m)
                stars = "***" if test.p < 0.001 else "**" if test.p < 0.05 else "*" if test.p < 0.1 else ""
                cells[ranked[0]][c] += stars
        widths = [max(len(header[0]), *(len(n) for n in names))] + [
            max(len(header[c + 1]), *(len(cells[n][c]) for n in names)) for c in range(len(cols))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        for name in names:
            lines.append("  ".join(v.ljust(w) for v, w in zip([name] + cells[name], widths)))
        return "\n".join(lines)


def _score_round(ds, plan, rec, rho, seed):
    train = ds.window(rho, rho + plan.n)
    test = ds.period(rho + plan.n).toarray()
    scores = rec.fn(train, test if rec.peeks else seed)
    exclude = train.aggregate().toarray() > 0 if plan.policy == "exclude-train-consumed" else None
    out = []
    for N in plan.Ns:
        m, users, excluded = corpus_metrics(top_n_matrix(scores, N, exclude), test, N)
        if m is not None:
            out.append((N, m, users, excluded))
    return out


def rolling_evaluate(ds: PeriodizedDataset, plan: RollingPlan) -> EvalReport:
    """Train on periods ``[rho, rho+n)``, test on ``rho+n``, for every round and repetition.

    Repetition ``k`` seeds stochastic recommenders with ``plan.seed + k``.
    Deterministic recommenders are scored once per round and their result is
    shared across repetitions.
    """
    rounds = plan.n_rounds(ds.T)
    report = EvalReport(repetitions=plan.repetitions)
    if ds.n_items and any(N > ds.n_items for N in plan.Ns):
        report.diagnostics.append(f"some N exceeds the {ds.n_items} available items; P@N still divides by N")
    jobs = []
    for rec in plan.recommenders:
        reps = range(plan.repetitions) if rec.stochastic else [None]
        for k in reps:
            for rho in range(rounds):
                jobs.append((rec, rho, k))

    def run(job):
        rec, rho, k = job
        return _score_round(ds, plan, rec, rho, plan.seed + (k or 0))

    if plan.threads > 1:
        with ThreadPoolExecutor(plan.threads) as pool:
            outputs = list(pool.map(run, jobs))
    else:
        outputs = [run(j) for j in jobs]

    skipped = set()
    for (rec, rho, k), out in zip(jobs, outputs):
        if not out:
            skipped.add(rho)
            continue
        for rep in (range(plan.repetitions) if k is None else [k]):
            for N, m, users, excluded in out:
                report.results.append(RoundResult(rho, rep, rec.name, N, m.precision, m.recall, m.f1,
                                                  users, excluded))
    for rho in sorted(skipped):
        msg = f"round {rho}: no users active in the test period; skipped"
        report.diagnostics.append(msg)
        logger.info(msg)
    return report


def grid_search(ds: PeriodizedDataset, n: int, make: Callable[..., Recommender], grid: dict,
                N: int = 5, validation_round: int = 0, seed: int = 0) -> tuple[dict, float]:
    """Pick the hyperparameters maximizing F1@N on one validation round.

    ``grid`` maps keyword names to candidate lists; ``make(**kw)`` builds a recommender.
    """
    keys = list(grid)
    best, best_f1 = None, -np.inf
    for combo in np.array(np.meshgrid(*[np.asarray(grid[k], dtype=object) for k in keys],
                                      indexing="ij")).reshape(len(keys), -1).T:
        kw = dict(zip(keys, combo))
        plan = RollingPlan(n, (make(**kw),), (N,), 1, rounds=1, seed=seed)
        sub = ds.window(validation_round, validation_round + n + 1)
        f1 = rolling_evaluate(sub, plan).mean(plan.recommenders[0].name, N)
        if f1 > best_f1:
            best, best_f1 = kw, f1
    return best, float(best_f1)


# ---------------------------------------------------------------------------
# analyses


class DurationShape(str, enum.Enum):
    INVERSE_U = "inverse-U"
    U = "U"
    NEGATIVE_EXPONENTIAL = "negative-exponential"
    EXPONENTIAL = "exponential"
    UNIFORM = "uniform"
    N_SHAPE = "N-shape"


def classify_duration_shape(hist, epsilon: float = 0.02) -> DurationShape:
    """Qualitative shape of a duration histogram.

    Differences of the normalized histogram within ``epsilon`` count as flat
    and are ignored when reading the sign pattern.
    """
    h = np.asarray(hist, dtype=float)
    if h.ndim != 1 or h.size < 2:
        raise ValueError("duration shape needs a histogram of length >= 2")
    if np.any(h < 0) or h.sum() <= 0:
        raise ValueError("histogram must be nonnegative and not all zero")
    diff = np.diff(h / h.sum())
    signs = np.sign(np.where(np.abs(diff) <= epsilon, 0.0, diff))
    signs = signs[signs != 0]
    if signs.size == 0:
        return DurationShape.UNIFORM
    if np.all(signs < 0):
        return DurationShape.NEGATIVE_EXPONENTIAL
    if np.all(signs > 0):
        return DurationShape.EXPONENTIAL
    runs = signs[np.r_[True, signs[1:] != signs[:-1]]]
    if runs.tolist() == [1, -1]:
        return DurationShape.INVERSE_U
    if runs.tolist() == [-1, 1]:
        return DurationShape.U
    return DurationShape.N_SHAPE


def duration_histograms(ds: PeriodizedDataset, params: HsmmParams, soft: bool = False) -> np.ndarray:
    """Per-user histogram of stay lengths, ``(U, L)``.

    Hard mode (default) labels each period with its most probable covering
    ``(state, duration)`` and counts each run of equal labels as one stay of
    that duration. With self-transitions allowed, runs of the same state are
    merged and the run length is the stay (``L = T``). Soft mode sums the
    expected number of segments of each duration.
    """
    post = batch_posteriors(ds, params)
    U, T = ds.n_users, ds.T
    if soft:
        return post.gamma.sum(axis=(1, 2))
    if params.allow_self_transition:
        states = post.occupancy.argmax(axis=2)
        hist = np.zeros((U, T))
        for u in range(U):
            run = 1
            for t in range(1, T + 1):
                if t < T and states[u, t] == states[u, t - 1]:
                    run += 1
                else:
                    hist[u, run - 1] += 1
                    run = 1
        return hist
    flat = post.coverage.reshape(U, T, -1).argmax(axis=2)
    hist = np.zeros((U, params.M))
    M = params.M
    for u in range(U):
        for t in range(T):
            if t == 0 or flat[u, t] != flat[u, t - 1]:
                hist[u, flat[u, t] % M] += 1
    return hist


def shape_counts(hists: np.ndarray, epsilon: float = 0.02) -> dict:
    """How many users fall in each duration-shape class."""
    out = {s.value: 0 for s in DurationShape}
    for h in hists:
        if h.sum() > 0 and h.size >= 2:
            out[classify_duration_shape(h, epsilon).value] += 1
    return out


def states_per_user(occupancy: np.ndarray, threshold: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Distinct states visited per user, and the histogram of those counts.

    ``occupancy`` is ``(U, T, K)``. By default a state counts if it is the
    argmax in at least one period; with ``threshold`` it counts if its
    occupancy exceeds the threshold in some period.
    """
    U, T, K = occupancy.shape
    if threshold is None:
        arg = occupancy.argmax(axis=2)
        visited = np.zeros((U, K), dtype=bool)
        visited[np.repeat(np.arange(U), T), arg.ravel()] = True
    else:
        visited = occupancy.max(axis=1) > threshold
    per_user = visited.sum(axis=1)
    return per_user, np.bincount(per_user, minlength=K + 1)


@dataclass
class StateTimeline:
    states: np.ndarray  # selected state ids, most populated first
    counts: np.ndarray  # (len(states), T) users per state per period
    totals: np.ndarray  # (T,) users assigned in each period


def state_timeline(occupancy: np.ndarray, top_j: int, active=None) -> StateTimeline:
    """Users per argmax state per period for the ``top_j`` most populated states.

    ``active`` is an optional ``(U, T)`` mask restricting which (user, period)
    cells are counted.
    """
    U, T, K = occupancy.shape
    arg = occupancy.argmax(axis=2)
    mask = np.ones((U, T), dtype=bool) if active is None else np.asarray(active, dtype=bool)
    counts = np.zeros((K, T), dtype=np.int64)
    for t in range(T):
        counts[:, t] = np.bincount(arg[mask[:, t], t], minlength=K)
    order = np.lexsort((np.arange(K), -counts.sum(axis=1)))[:top_j]
    return StateTimeline(order, counts[order], counts.sum(axis=0))


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
