"""Rolling-origin evaluation, sMAPE/sMAPC scoring and the MCB rank test.

The test window holds the last 18 observations. Origin ``o`` (1-based) ends
the model input just before test position ``o`` and targets test positions
``o .. o + h - 1``; with h = 6 the 13 origins tile the window exactly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import TEST_LENGTH, TimeSeries
from .gradcore import ContractError
from .losses import smapc, smape

log = logging.getLogger(__name__)

HORIZON = 6
N_ORIGINS = TEST_LENGTH - HORIZON + 1  # 13

PANEL_COLUMNS = ("method", "series_id", "origin", "step", "forecast")


def origin_targets(n_origins: int = N_ORIGINS, horizon: int = HORIZON) -> List[range]:
    """0-based test positions each origin forecasts."""
    return [range(o, o + horizon) for o in range(n_origins)]


@dataclass
class ForecastPanel:
    """Per series, an (origins, horizon) matrix of forecasts."""

    method: str
    forecasts: Dict[str, np.ndarray] = field(default_factory=dict)
    excluded: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.forecasts)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PANEL_COLUMNS)
            for sid, mat in self.forecasts.items():
                for o, row in enumerate(mat, start=1):
                    for i, v in enumerate(row, start=1):
                        w.writerow([self.method, sid, o, i, repr(float(v))])


def read_panels(path) -> Dict[str, ForecastPanel]:
    """Forecast CSV (method, series_id, origin, step, forecast); several methods allowed."""
    cells: Dict[str, Dict[str, Dict[tuple, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PANEL_COLUMNS:
            raise ContractError(f"forecast CSV header must be {','.join(PANEL_COLUMNS)}")
        for r in reader:
            cells.setdefault(r["method"], {}).setdefault(r["series_id"], {})[
                (int(r["origin"]), int(r["step"]))
            ] = float(r["forecast"])
    out = {}
    for method, by_series in cells.items():
        panel = ForecastPanel(method)
        for sid, c in by_series.items():
            n_o = max(k[0] for k in c)
            h = max(k[1] for k in c)
            if len(c) != n_o * h:
                raise ContractError(f"{method}/{sid}: incomplete panel")
            mat = np.empty((n_o, h))
            for (o, i), v in c.items():
                mat[o - 1, i - 1] = v
            panel.forecasts[sid] = mat
        out[method] = panel
    return out


def roll_forecasts(
    forecaster: Callable[[np.ndarray], np.ndarray],
    series: Sequence[TimeSeries],
    lookback: int,
    method: str = "model",
    horizon: int = HORIZON,
    window: int = TEST_LENGTH,
) -> ForecastPanel:
    """Forecast every origin of the last ``window`` observations of each series.

    ``forecaster`` maps a (batch, lookback) array of actual histories to a
    (batch, horizon) array. To evaluate on the validation window pass series
    with their test window removed.
    """
    n_origins = window - horizon + 1
    panel = ForecastPanel(method)
    ids, inputs = [], []
    for s in series:
        start = s.n - window
        if start < lookback:
            log.warning("series %s excluded: %d observations before the window, lookback %d", s.id, start, lookback)
            panel.excluded.append(s.id)
            continue
        ids.append(s.id)
        inputs.extend(s.values[start + o - lookback : start + o] for o in range(n_origins))
    if ids:
        preds = np.asarray(forecaster(np.stack(inputs)), dtype=np.float64)
        preds = preds.reshape(len(ids), n_origins, horizon)
        for sid, mat in zip(ids, preds):
            panel.forecasts[sid] = mat
    return panel


def actual_panel(series: Sequence[TimeSeries], horizon: int = HORIZON, window: int = TEST_LENGTH) -> Dict[str, np.ndarray]:
    """Actuals laid out like a ForecastPanel."""
    out = {}
    for s in series:
        w = s.values[s.n - window :]
        out[s.id] = np.stack([w[o : o + horizon] for o in range(window - horizon + 1)])
    return out


def seasonal_naive(history: np.ndarray, horizon: int = HORIZON, period: int = 12) -> np.ndarray:
    """Forecast each period with the value one season earlier."""
    history = np.atleast_2d(history)
    if history.shape[1] < period:
        raise ContractError(f"seasonal naive needs {period} observations")
    season = history[:, -period:]
    return season[:, np.arange(horizon) % period]


# scoring ---------------------------------------------------------------------


@dataclass
class ScoreTable:
    """Per-series mean sMAPE over origins and mean sMAPC over adjacent origin pairs."""

    method: str
    smape: Dict[str, float] = field(default_factory=dict)
    smapc: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_smape(self) -> float:
        return float(np.mean(list(self.smape.values())))

    @property
    def mean_smapc(self) -> float:
        return float(np.mean(list(self.smapc.values())))


def series_scores(forecasts: np.ndarray, actuals: np.ndarray):
    """(mean sMAPE, mean sMAPC) for one series' (origins, horizon) panel."""
    if forecasts.shape != actuals.shape or forecasts.shape[0] < 2:
        raise ContractError(f"panel shape {forecasts.shape} vs actuals {actuals.shape}")
    acc = np.mean([smape(f, a) for f, a in zip(forecasts, actuals)])
    stab = np.mean([smapc(forecasts[o + 1], forecasts[o]) for o in range(forecasts.shape[0] - 1)])
    return float(acc), float(stab)


def score(panel: ForecastPanel, actuals: Mapping[str, np.ndarray]) -> ScoreTable:
    table = ScoreTable(panel.method)
    for sid in sorted(panel.forecasts):
        if sid not in actuals:
            raise ContractError(f"no actuals for series {sid!r}")
        table.smape[sid], table.smapc[sid] = series_scores(panel.forecasts[sid], actuals[sid])
    return table


SCORE_COLUMNS = ("method", "series_id", "smape", "smapc")


def write_scores(path, tables: Sequence[ScoreTable]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for t in tables:
            for sid in t.smape:
                w.writerow([t.method, sid, repr(t.smape[sid]), repr(t.smapc[sid])])


def read_scores(path) -> List[ScoreTable]:
    tables: Dict[str, ScoreTable] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            t = tables.setdefault(r["method"], ScoreTable(r["method"]))
            t.smape[r["series_id"]] = float(r["smape"])
            t.smapc[r["series_id"]] = float(r["smapc"])
    return list(tables.values())


def write_summary(path, tables: Sequence[ScoreTable]) -> None:
    """Dataset-level means, one row per method."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n_series", "smape", "smapc"])
        for t in tables:
            w.writerow([t.method, len(t.smape), f"{t.mean_smape:.4f}", f"{t.mean_smapc:.4f}"])


# MCB -------------------------------------------------------------------------

# Two-tailed Nemenyi critical values q_alpha (studentized range / sqrt 2,
# infinite df) for k = 2..50 methods.
_Q_05 = (
    1.9599639845400534, 2.343700586378409, 2.569031772546482, 2.7277743708703763,
    2.8497054196100016, 2.9483200175296744, 3.030878449614413, 3.1017303413033805,
    3.163683577053373, 3.2186536073291525, 3.268003924466142, 3.31273859335082,
    3.3536177518523043, 3.391230283765257, 3.4260413793706097, 3.4584247073473247,
    3.4886847993791976, 3.517073008691811, 3.5437991315177815, 3.5690400299507057,
    3.592946136984789, 3.615646437226711, 3.6372523316885754, 3.6578606730719927,
    3.677556175853078, 3.6964133491850126, 3.7144980613753007, 3.731868816886574,
    3.748577806830984, 3.764671779385487, 3.7801927658407517, 3.7951786900139757,
    3.80966388274652, 3.8236795186394383, 3.8372539886763444, 3.850413219673014,
    3.8631809493800437, 3.875578964405133, 3.8876273068086244, 3.8993444541804494,
    3.910747477168915, 3.921852177756593, 3.9326732110311977, 3.9432241927535268,
    3.953517794658965, 3.9635658291288536, 3.9733793246191746, 3.982968593027793,
    3.9923432900094076,
)
_Q_10 = (
    1.6448536269514722, 2.0522927304967755, 2.2913414968880566, 2.4595157642714183,
    2.588520601922348, 2.6927321009677594, 2.779883608152978, 2.8546064311980253,
    2.9198888400615384, 2.9777682512648735, 3.0296941831785844, 3.0767334682691447,
    3.1196933331372936, 3.1591988189088367, 3.195743433019599, 3.229723400908194,
    3.2614614896472762, 3.2912239865997983, 3.319233059548415, 3.345675924520792,
    3.370711759647854, 3.394476997162631, 3.4170894284200886, 3.438651426836807,
    3.459252506195393, 3.4789713718072317, 3.4978775802253232, 3.516032893596636,
    3.533492393480018, 3.5503054034813597, 3.566516258659407, 3.582164951165392,
    3.597287675189471, 3.611917289430665, 3.6260837115830333, 3.639814256450602,
    3.653133927058664, 3.6660656663658435, 3.678630575786863, 3.6908481056258964,
    3.7027362216309503, 3.7143115511630382, 3.7255895118930953, 3.736584425466359,
    3.7473096181864274, 3.757777510452376, 3.7679996964187743, 3.7779870151295794,
    3.7877496141945874,
)
CRITICAL_VALUES = {0.05: _Q_05, 0.10: _Q_10}


def critical_value(k: int, alpha: float = 0.05) -> float:
    try:
        table = CRITICAL_VALUES[alpha]
    except KeyError:
        raise ContractError(f"alpha must be one of {sorted(CRITICAL_VALUES)}") from None
    if not 2 <= k <= len(table) + 1:
        raise ContractError(f"critical values tabulated for 2..{len(table) + 1} methods, got {k}")
    return table[k - 2]


@dataclass
class McbResult:
    methods: List[str]
    avg_rank: np.ndarray
    half_width: float
    significant: np.ndarray  # [a, b] True when the intervals of a and b do not overlap

    @property
    def lower(self) -> np.ndarray:
        return self.avg_rank - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.avg_rank + self.half_width

    @property
    def best(self) -> int:
        return int(np.argmin(self.avg_rank))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "avg_rank", "lower", "upper", "differs_from_best"])
            b = self.best
            for i, m in enumerate(self.methods):
                w.writerow([m, repr(float(self.avg_rank[i])), repr(float(self.lower[i])),
                            repr(float(self.upper[i])), bool(self.significant[b, i])])


def mcb(scores: np.ndarray, methods: Sequence[str], alpha: float = 0.05) -> McbResult:
    """Multiple comparisons with the best on a (methods, series) score matrix; lower is better.

    Intervals are avg_rank +/- 0.5 * q_alpha * sqrt(k (k + 1) / (6 N)); two methods
    differ significantly when their intervals do not touch.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(methods):
        raise ContractError("scores must be (methods, series) with one row per method name")
    k, n = scores.shape
    if k < 2 or n < 2:
        raise ContractError("MCB needs at least 2 methods and 2 series")
    if not np.all(np.isfinite(scores)):
        raise ContractError("score matrix has missing cells")
    ranks = rankdata(scores, axis=0)  # ties get the average rank
    avg = ranks.mean(axis=1)
    half = 0.5 * critical_value(k, alpha) * np.sqrt(k * (k + 1) / (6.0 * n))
    gap = np.abs(avg[:, None] - avg[None, :])
    return McbResult(list(methods), avg, float(half), gap > 2.0 * half)


def score_matrix(tables: Sequence[ScoreTable], metric: str = "smape"):
    """(methods, series) matrix over the series every table scored."""
    common = sorted(set.intersection(*(set(getattr(t, metric)) for t in tables)))
    mat = np.array([[getattr(t, metric)[sid] for sid in common] for t in tables])
    return mat, [t.method for t in tables], common
