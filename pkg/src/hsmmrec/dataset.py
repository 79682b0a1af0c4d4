"""Event ingestion, calendar periodization and activity filtering.

Raw interaction events are aggregated into per-(user, period) item-count
vectors. Periods are indexed ``0..T-1`` internally; the row of user ``u`` in
period ``t`` of the sparse count matrix is ``u * T + t``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

EVENT_COLUMNS = ("user_id", "item_id", "timestamp", "count")
REQUIRED_COLUMNS = EVENT_COLUMNS[:3]
SECONDS_PER_DAY = 86400
INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1


class EventFormatError(ValueError):
    """Malformed event file; carries the 1-based line number and field."""

    def __init__(self, message, line=None, field=None):
        super().__init__(message)
        self.line = line
        self.field = field


class GridSpanError(ValueError):
    pass


@dataclass(frozen=True)
class RawEvent:
    user_key: str
    item_key: str
    timestamp: int
    count: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if not INT64_MIN <= self.timestamp <= INT64_MAX:
            raise ValueError(f"timestamp {self.timestamp} outside int64 range")


def _month_index(ts: int) -> int:
    d = datetime.fromtimestamp(ts, tz=timezone.utc)
    return d.year * 12 + (d.month - 1)


def _month_start(index: int) -> int:
    year, month0 = divmod(index, 12)
    return int(datetime(year, month0 + 1, 1, tzinfo=timezone.utc).timestamp())


@dataclass(frozen=True)
class PeriodGrid:
    """Partition of time into ``T`` consecutive periods starting at ``origin``.

    ``mode`` is ``"month"`` (UTC calendar months; ``origin`` must be a month
    start) or ``"days"`` (fixed blocks of ``days`` days).
    """

    mode: str
    origin: int
    T: int
    days: int = 30

    def __post_init__(self):
        if self.mode not in ("month", "days"):
            raise ValueError(f"unknown grid mode {self.mode!r}")
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.mode == "days" and self.days < 1:
            raise ValueError("days must be positive")
        if self.mode == "month" and _month_start(_month_index(self.origin)) != self.origin:
            raise ValueError("month grids must start on a UTC month boundary")

    @classmethod
    def covering(cls, timestamps: Iterable[int], mode="month", days=30) -> "PeriodGrid":
        """Smallest grid of the given mode spanning all ``timestamps``."""
        ts = list(timestamps)
        if not ts:
            raise ValueError("cannot infer a grid from no timestamps")
        lo, hi = min(ts), max(ts)
        if mode == "month":
            origin = _month_start(_month_index(lo))
            return cls("month", origin, _month_index(hi) - _month_index(lo) + 1)
        width = days * SECONDS_PER_DAY
        return cls("days", lo, (hi - lo) // width + 1, days)

    def period_of(self, ts: int) -> int:
        """0-based period index of ``ts``; raises GridSpanError if outside."""
        if self.mode == "month":
            idx = _month_index(ts) - _month_index(self.origin) if ts >= self.origin else -1
        else:
            idx = (ts - self.origin) // (self.days * SECONDS_PER_DAY)
        if not 0 <= idx < self.T:
            raise GridSpanError(f"timestamp {ts} falls outside the grid span")
        return int(idx)

    def period_start(self, t: int) -> int:
        if self.mode == "month":
            return _month_start(_month_index(self.origin) + t)
        return self.origin + t * self.days * SECONDS_PER_DAY

    def shifted(self, start: int, T: int) -> "PeriodGrid":
        return PeriodGrid(self.mode, self.period_start(start), T, self.days)


@dataclass(frozen=True)
class PeriodizedDataset:
    """Per-(user, period) sparse item counts.

    Attributes:
        users: user keys, index = user id.
        items: item keys (the vocabulary), index = item id.
        grid: the period grid.
        counts: CSR matrix of shape ``(U * T, |I|)``; row ``u * T + t``.
    """

    users: tuple
    items: tuple
    grid: PeriodGrid
    counts: sp.csr_matrix

    def __post_init__(self):
        shape = (len(self.users) * self.grid.T, len(self.items))
        if self.counts.shape != shape:
            raise ValueError(f"counts shape {self.counts.shape} != {shape}")
        if self.counts.nnz and self.counts.data.min() <= 0:
            raise ValueError("sparse entries must be positive")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def T(self) -> int:
        return self.grid.T

    @property
    def totals(self) -> np.ndarray:
        """N_u^t as a ``(U, T)`` integer array."""
        return np.asarray(self.counts.sum(axis=1)).ravel().astype(np.int64).reshape(self.n_users, self.T)

    def user_counts(self, u: int) -> sp.csr_matrix:
        """``(T, |I|)`` counts of one user."""
        return self.counts[u * self.T:(u + 1) * self.T]

    def period(self, t: int) -> sp.csr_matrix:
        """``(U, |I|)`` counts of one period."""
        return self.counts[np.arange(self.n_users) * self.T + t]

    def aggregate(self, start=0, stop=None) -> sp.csr_matrix:
        """User x item counts summed over periods ``[start, stop)``."""
        stop = self.T if stop is None else stop
        out = sp.csr_matrix((self.n_users, self.n_items), dtype=self.counts.dtype)
        for t in range(start, stop):
            out = out + self.period(t)
        return out.tocsr()

    def window(self, start: int, stop: int) -> "PeriodizedDataset":
        """Dataset restricted to periods ``[start, stop)`` (same users/items)."""
        if not 0 <= start < stop <= self.T:
            raise ValueError(f"bad window [{start}, {stop}) for T={self.T}")
        rows = (np.arange(self.n_users)[:, None] * self.T + np.arange(start, stop)[None, :]).ravel()
        return PeriodizedDataset(self.users, self.items, self.grid.shifted(start, stop - start),
                                 self.counts[rows].tocsr())

    def equals(self, other: "PeriodizedDataset") -> bool:
        return (self.users == other.users and self.items == other.items and self.grid == other.grid
                and (self.counts != other.counts).nnz == 0)


def parse_events(stream, delimiter=",") -> list[RawEvent]:
    """Read a header-bearing delimited event file.

    ``stream`` is a path, a text stream or a binary stream (decoded as UTF-8).
    The ``count`` column is optional and defaults to 1.
    """
    if isinstance(stream, (str, Path)):
        with open(stream, encoding="utf-8", newline="") as fh:
            return parse_events(fh, delimiter)
    if isinstance(stream, (io.BufferedIOBase, io.RawIOBase)) or hasattr(stream, "mode") and "b" in stream.mode:
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")

    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EventFormatError("empty event file: missing header", line=1) from None
    unknown = [h for h in header if h not in EVENT_COLUMNS]
    missing = [h for h in REQUIRED_COLUMNS if h not in header]
    if unknown or missing or len(set(header)) != len(header):
        raise EventFormatError(
            f"bad header {header}; expected columns {', '.join(EVENT_COLUMNS)} (count optional)", line=1)
    col = {name: header.index(name) for name in header}

    events = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise EventFormatError(f"line {line_no}: expected {len(header)} fields, got {len(row)}",
                                   line=line_no)
        user, item = row[col["user_id"]].strip(), row[col["item_id"]].strip()
        for name, value in (("user_id", user), ("item_id", item)):
            if not value:
                raise EventFormatError(f"line {line_no}: empty {name}", line=line_no, field=name)
        try:
            ts = int(row[col["timestamp"]].strip())
        except ValueError:
            raise EventFormatError(f"line {line_no}: field timestamp is not an integer",
                                   line=line_no, field="timestamp") from None
        count = 1
        if "count" in col:
            try:
                count = int(row[col["count"]].strip())
            except ValueError:
                count = 0
            if count < 1:
                raise EventFormatError(f"line {line_no}: field count must be a positive integer",
                                       line=line_no, field="count")
        try:
            events.append(RawEvent(user, item, ts, count))
        except ValueError as exc:
            raise EventFormatError(f"line {line_no}: {exc}", line=line_no, field="timestamp") from None
    return events


def write_events(path, events: Sequence[RawEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for e in events:
            w.writerow((e.user_key, e.item_key, e.timestamp, e.count))


def periodize(events: Sequence[RawEvent], grid: PeriodGrid | None = None, mode="month",
              days=30) -> PeriodizedDataset:
    """Sum event counts into per-(user, period, item) cells.

    Users and items are indexed in order of first appearance. When ``grid`` is
    omitted the smallest grid of ``mode`` covering the events is used.
    """
    if grid is None:
        if not events:
            raise ValueError("a grid is required when there are no events")
        grid = PeriodGrid.covering((e.timestamp for e in events), mode, days)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    rows, cols, vals = [], [], []
    for e in events:
        t = grid.period_of(e.timestamp)
        u = users.setdefault(e.user_key, len(users))
        i = items.setdefault(e.item_key, len(items))
        rows.append(u * grid.T + t)
        cols.append(i)
        vals.append(e.count)
    # coo -> csr sums duplicates
    counts = sp.coo_matrix((np.asarray(vals, dtype=np.int64), (rows, cols)),
                           shape=(len(users) * grid.T, len(items))).tocsr()
    counts.sum_duplicates()
    return PeriodizedDataset(tuple(users), tuple(items), grid, counts)


@dataclass(frozen=True)
class FilterCriteria:
    min_events_per_item: int = 0
    min_events_per_user: int = 0
    distinct: bool = False

    def __post_init__(self):
        if self.min_events_per_item < 0 or self.min_events_per_user < 0:
            raise ValueError("filter thresholds must be nonnegative")


@dataclass
class FilterReport:
    items_removed: int
    users_removed: int
    cascade: bool
    """True when a second pass with the same thresholds would remove more."""


def _activity(agg: sp.csr_matrix, axis: int, distinct: bool) -> np.ndarray:
    m = (agg > 0).astype(np.int64) if distinct else agg
    return np.asarray(m.sum(axis=axis)).ravel()


def filter_activity(ds: PeriodizedDataset, c: FilterCriteria) -> tuple[PeriodizedDataset, FilterReport]:
    """One pass: drop rare items, then users that fall below the user threshold.

    With ``c.distinct`` the thresholds count distinct counterparts (users per
    item, items per user) instead of total events.
    """
    agg = ds.aggregate()
    keep_items = np.flatnonzero(_activity(agg, 0, c.distinct) >= c.min_events_per_item)
    agg = agg[:, keep_items]
    keep_users = np.flatnonzero(_activity(agg, 1, c.distinct) >= c.min_events_per_user)
    agg = agg[keep_users]

    rows = (keep_users[:, None] * ds.T + np.arange(ds.T)[None, :]).ravel()
    counts = ds.counts[rows][:, keep_items].tocsr()
    counts.eliminate_zeros()
    out = PeriodizedDataset(tuple(ds.users[u] for u in keep_users),
                            tuple(ds.items[i] for i in keep_items), ds.grid, counts)

    cascade = bool(len(keep_users) and len(keep_items)) and (
        np.any(_activity(agg, 0, c.distinct) < c.min_events_per_item)
        or np.any(_activity(agg, 1, c.distinct) < c.min_events_per_user))
    report = FilterReport(ds.n_items - len(keep_items), ds.n_users - len(keep_users), bool(cascade))
    if report.cascade:
        logger.info("filter_activity: a second pass would remove more rows")
    return out, report


def summary(ds: PeriodizedDataset) -> dict:
    """Table-style size summary of a dataset."""
    fmt = "%Y-%m-%d"
    start = datetime.fromtimestamp(ds.grid.origin, tz=timezone.utc).strftime(fmt)
    end = datetime.fromtimestamp(ds.grid.period_start(ds.T - 1), tz=timezone.utc).strftime(fmt)
    return {"users": ds.n_users, "items": ds.n_items, "interactions": int(ds.counts.sum()),
            "periods": ds.T, "start": start, "last_period": end}


SNAPSHOT_VERSION = 1


def save_dataset(path, ds: PeriodizedDataset) -> None:
    """Write a lossless ``.npz`` snapshot."""
    c = ds.counts
    np.savez_compressed(
        path, schema_version=SNAPSHOT_VERSION,
        users=np.array(ds.users, dtype=str), items=np.array(ds.items, dtype=str),
        grid=np.array([ds.grid.origin, ds.grid.T, ds.grid.days], dtype=np.int64),
        grid_mode=np.array(ds.grid.mode), data=c.data, indices=c.indices, indptr=c.indptr,
        shape=np.array(c.shape, dtype=np.int64))


def load_dataset(path) -> PeriodizedDataset:
    with np.load(path, allow_pickle=False) as z:
        if int(z["schema_version"]) != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {int(z['schema_version'])}")
        origin, T, days = (int(v) for v in z["grid"])
        grid = PeriodGrid(str(z["grid_mode"]), origin, T, days)
        counts = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=tuple(z["shape"]))
        return PeriodizedDataset(tuple(str(u) for u in z["users"]), tuple(str(i) for i in z["items"]),
                                 grid, counts)


def from_dense(counts: np.ndarray, grid: PeriodGrid | None = None, users=None, items=None) -> PeriodizedDataset:
    """Build a dataset from a dense ``(U, T, |I|)`` count array (handy for fixtures)."""
    counts = np.asarray(counts)
    U, T, n_items = counts.shape
    grid = grid or PeriodGrid("days", 0, T, 30)
    users = tuple(users) if users is not None else tuple(f"u{u}" for u in range(U))
    items = tuple(items) if items is not None else tuple(f"i{i}" for i in range(n_items))
    m = sp.csr_matrix(counts.reshape(U * T, n_items).astype(np.int64))
    m.eliminate_zeros()
    return PeriodizedDataset(users, items, grid, m)
