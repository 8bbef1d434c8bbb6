"""Series ingestion, splitting, dual-origin sampling and synthetic data.

Index conventions: a training segment ``s`` of length ``L`` admits origin
``t`` (0-based position of the last observation in the lookback window) when
the older window ``s[t-T:t]`` and the newer target ``s[t+1:t+h+1]`` both fit,
i.e. ``T <= t <= L - 1 - h``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

TEST_LENGTH = 18
VALIDATION_LENGTH = 18


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    id: str
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def n(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other):
        return isinstance(other, TimeSeries) and self.id == other.id and np.array_equal(self.values, other.values)

    __hash__ = None


def _validate(series_id: str, values: Sequence[float], positions: Sequence[int]) -> None:
    for pos, v in zip(positions, values):
        if not np.isfinite(v) or v <= 0.0:
            raise IngestError(f"series {series_id!r} position {pos}: value {v!r} is not positive")


def _parse_float(series_id, pos, cell) -> float:
    try:
        return float(cell)
    except ValueError:
        raise IngestError(f"series {series_id!r} position {pos}: non-numeric value {cell!r}") from None


def read_m4_horizontal(path) -> List[TimeSeries]:
    """One series per row: id followed by values; trailing empty cells trimmed.

    A header row (as in the official M4 files) is detected and skipped.
    """
    out, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            while row and row[-1] == "":
                row.pop()
            if not row:
                continue
            if lineno == 1 and len(row) > 1:
                try:
                    float(row[1])
                except ValueError:
                    continue  # header
            sid = row[0]
            if sid in seen:
                raise IngestError(f"duplicate series id {sid!r} (line {lineno})")
            seen.add(sid)
            cells = row[1:]
            if "" in cells:
                raise IngestError(f"series {sid!r} position {cells.index('')}: missing value inside series")
            values = [_parse_float(sid, i, c) for i, c in enumerate(cells)]
            _validate(sid, values, range(len(values)))
            out.append(TimeSeries(sid, np.array(values)))
    return out


def read_long(path) -> List[TimeSeries]:
    """Canonical long CSV with header series_id,t_index,value."""
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_long(fh)


def _parse_long(fh) -> List[TimeSeries]:
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["series_id", "t_index", "value"]:
        raise IngestError(f"expected header series_id,t_index,value; got {reader.fieldnames}")
    rows: Dict[str, Dict[int, float]] = {}
    order: List[str] = []
    for r in reader:
        sid = r["series_id"]
        try:
            t = int(r["t_index"])
        except ValueError:
            raise IngestError(f"series {sid!r}: bad t_index {r['t_index']!r}") from None
        v = _parse_float(sid, t, r["value"])
        if sid not in rows:
            rows[sid] = {}
            order.append(sid)
        if t in rows[sid]:
            raise IngestError(f"series {sid!r}: duplicate t_index {t}")
        rows[sid][t] = v
    out = []
    for sid in order:
        idx = sorted(rows[sid])
        if idx != list(range(len(idx))):
            raise IngestError(f"series {sid!r}: t_index must run 0..n-1 without gaps")
        values = [rows[sid][t] for t in idx]
        _validate(sid, values, idx)
        out.append(TimeSeries(sid, np.array(values)))
    return out


def ingest(path, fmt: str) -> List[TimeSeries]:
    if fmt in ("m4", "m4-horizontal-csv"):
        return read_m4_horizontal(path)
    if fmt in ("long", "canonical-long-csv"):
        return read_long(path)
    raise IngestError(f"unknown format {fmt!r}")


def to_long_csv(series: Iterable[TimeSeries]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series_id", "t_index", "value"])
    for s in series:
        for t, v in enumerate(s.values):
            w.writerow([s.id, t, repr(float(v))])
    return buf.getvalue()


def write_long(path, series: Iterable[TimeSeries]) -> None:
    Path(path).write_text(to_long_csv(series), encoding="utf-8")


# splitting -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    test_length: int = TEST_LENGTH
    validation_length: int = VALIDATION_LENGTH


class Split(NamedTuple):
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split(series: TimeSeries, spec: SplitSpec = SplitSpec(), final_fit: bool = False) -> Split:
    """Contiguous (train, validation, test); with ``final_fit`` validation joins train."""
    v = series.values
    n_test, n_val = spec.test_length, spec.validation_length
    if series.n <= n_test + n_val:
        raise ValueError(f"series {series.id!r} of length {series.n} is too short to split")
    test = v[series.n - n_test :]
    if final_fit:
        return Split(v[: series.n - n_test], v[:0], test)
    return Split(v[: series.n - n_test - n_val], v[series.n - n_test - n_val : series.n - n_test], test)


# dual-origin samples -------------------------------------------------------


@dataclass(frozen=True)
class DualOriginSample:
    series_id: str
    origin: int
    x_t: np.ndarray
    y_t: np.ndarray
    x_tm1: np.ndarray
    y_tm1: np.ndarray

    @property
    def insample(self) -> np.ndarray:
        """Window whose one-step differences scale the losses (the origin-t lookback)."""
        return self.x_t


class DualOriginBatch(NamedTuple):
    series_index: np.ndarray
    origin: np.ndarray
    x_t: np.ndarray
    y_t: np.ndarray
    x_tm1: np.ndarray
    y_tm1: np.ndarray
    scale: np.ndarray


def make_sample(series_id: str, segment: np.ndarray, t: int, lookback: int, horizon: int) -> DualOriginSample:
    if t < lookback or t > segment.size - 1 - horizon:
        raise ValueError(f"origin {t} invalid for segment of length {segment.size}")
    return DualOriginSample(
        series_id,
        t,
        segment[t - lookback + 1 : t + 1],
        segment[t + 1 : t + horizon + 1],
        segment[t - lookback : t],
        segment[t : t + horizon],
    )


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 512
    origin_range: int = 120
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.origin_range < 1:
            raise ValueError("batch_size and origin_range must be positive")


class Sampler:
    """Draws batches: series uniformly, then an origin uniformly from its range.

    The range is the ``origin_range`` most recent valid origins of each
    training segment. Origins whose lookback window is constant are dropped.
    """

    def __init__(self, ids: Sequence[str], segments: Sequence[np.ndarray], lookback: int, horizon: int,
                 config: SamplerConfig):
        self.lookback, self.horizon, self.config = lookback, horizon, config
        self.rng = np.random.default_rng(config.seed)
        self.ids: List[str] = []
        self.segments: List[np.ndarray] = []
        self.origins: List[np.ndarray] = []
        self.excluded: List[str] = []
        for sid, seg in zip(ids, segments):
            seg = np.asarray(seg, dtype=np.float64)
            last = seg.size - 1 - horizon
            first = max(lookback, last - config.origin_range + 1)
            cand = np.arange(first, last + 1)
            if cand.size:
                windows = np.stack([seg[t - lookback + 1 : t + 1] for t in cand])
                flat = np.all(np.diff(windows, axis=1) == 0.0, axis=1)
                if flat.any():
                    log.info("series %s: %d origins rejected (constant lookback window)", sid, int(flat.sum()))
                cand = cand[~flat]
            if cand.size == 0:
                log.warning("series %s excluded from sampling: no valid origin", sid)
                self.excluded.append(sid)
                continue
            self.ids.append(sid)
            self.segments.append(seg)
            self.origins.append(cand)
        if not self.ids:
            raise ValueError("no series has a valid forecasting origin")
        # matrix form for vectorized draws
        self._counts = np.array([o.size for o in self.origins])
        width = int(self._counts.max())
        self._origin_table = np.zeros((len(self.origins), width), dtype=np.int64)
        for i, o in enumerate(self.origins):
            self._origin_table[i, : o.size] = o
        self._max_len = max(s.size for s in self.segments)
        self._padded = np.zeros((len(self.segments), self._max_len))
        for i, s in enumerate(self.segments):
            self._padded[i, : s.size] = s

    @classmethod
    def from_series(cls, series: Sequence[TimeSeries], lookback: int, horizon: int, config: SamplerConfig,
                    split_spec: SplitSpec = SplitSpec(), final_fit: bool = False) -> "Sampler":
        ids, segs = [], []
        for s in series:
            try:
                parts = split(s, split_spec, final_fit=final_fit)
            except ValueError as exc:
                log.warning("%s", exc)
                continue
            ids.append(s.id)
            segs.append(parts.train)
        return cls(ids, segs, lookback, horizon, config)

    def max_index_used(self) -> Dict[str, int]:
        """Per series, the latest position any sample window can touch."""
        return {sid: int(o.max()) + self.horizon for sid, o in zip(self.ids, self.origins)}

    def draw(self) -> DualOriginBatch:
        B = self.config.batch_size
        si = self.rng.integers(0, len(self.ids), size=B)
        pick = self.rng.integers(0, self._counts[si])
        t = self._origin_table[si, pick]
        T, h = self.lookback, self.horizon
        rows = self._padded[si]
        idx_x = t[:, None] + np.arange(-T + 1, 1)[None, :]
        idx_y = t[:, None] + np.arange(1, h + 1)[None, :]
        r = np.arange(B)[:, None]
        x_t = rows[r, idx_x]
        scale = np.mean(np.diff(x_t, axis=1) ** 2, axis=1)
        return DualOriginBatch(si, t, x_t, rows[r, idx_y], rows[r, idx_x - 1], rows[r, idx_y - 1], scale)

    def sample_batch(self) -> List[DualOriginSample]:
        b = self.draw()
        return [
            DualOriginSample(self.ids[i], int(t), xt, yt, xo, yo)
            for i, t, xt, yt, xo, yo in zip(b.series_index, b.origin, b.x_t, b.y_t, b.x_tm1, b.y_tm1)
        ]


# synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_series: int = 200
    length: int = 120
    level: Tuple[float, float] = (100.0, 1000.0)
    trend: Tuple[float, float] = (-0.004, 0.008)  # per-step growth, relative to level
    seasonal: Tuple[float, float] = (0.0, 0.25)  # amplitude relative to level
    ar_coef: Tuple[float, float] = (0.2, 0.8)
    noise: Tuple[float, float] = (0.02, 0.08)  # innovation sd relative to level
    period: int = 12


def synthesize(spec: SynthSpec = SynthSpec(), seed: int = 0) -> List[TimeSeries]:
    """Positive monthly series: level + trend + seasonal(12) + AR(1) noise."""
    rng = np.random.default_rng(seed)
    out = []
    t = np.arange(spec.length)
    for i in range(spec.n_series):
        while True:
            level = rng.uniform(*spec.level)
            slope = rng.uniform(*spec.trend) * level
            amp = rng.uniform(*spec.seasonal) * level
            phase = rng.uniform(0.0, 2 * np.pi)
            phi = rng.uniform(*spec.ar_coef)
            sd = rng.uniform(*spec.noise) * level
            eps = rng.normal(0.0, sd, size=spec.length)
            noise = np.empty(spec.length)
            noise[0] = eps[0] / np.sqrt(1.0 - phi * phi)
            for k in range(1, spec.length):
                noise[k] = phi * noise[k - 1] + eps[k]
            values = level + slope * t + amp * np.sin(2 * np.pi * t / spec.period + phase) + noise
            if np.all(values > 0.0):
                break
        out.append(TimeSeries(f"S{i + 1}", values))
    return out
