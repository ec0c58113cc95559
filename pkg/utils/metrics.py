"""
Competition metrics and report aggregation.

Per-series metrics take 1-D arrays of length H. Degenerate terms (zero
denominators) are dropped and counted in an optional ``collections.Counter``.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from utils.baselines import naive2_forecast

logger = logging.getLogger(__name__)

METRICS = ("smape", "smape_m3", "mape", "mase", "owa", "nd")

# Series counts per subset
M4_COUNTS = {"Yearly": 23000, "Quarterly": 24000, "Monthly": 48000, "Weekly": 359, "Daily": 4227, "Hourly": 414}
M3_COUNTS = {"Yearly": 645, "Quarterly": 756, "Monthly": 1428, "Other": 174}
TOURISM_COUNTS = {"Yearly": 518, "Quarterly": 427, "Monthly": 366}

AGGREGATE = "Average"


class CoverageError(ValueError):
    """Forecasts do not cover the evaluated series set."""


def _pair(forecast, target):
    f = np.asarray(forecast, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if f.shape != y.shape or f.ndim != 1 or f.size < 1:
        raise ValueError(f"forecast{f.shape} and target{y.shape} must be equal-length non-empty vectors")
    return f, y


def _count(counts: Optional[Counter], key: str, n: int):
    if n and counts is not None:
        counts[key] += n


def smape_metric(forecast, target, counts: Optional[Counter] = None) -> float:
    """200/H · Σ |y - ŷ| / (|y| + |ŷ|)."""
    f, y = _pair(forecast, target)
    denom = np.abs(y) + np.abs(f)
    zero = denom == 0
    _count(counts, "smape_zero_denominator", int(zero.sum()))
    terms = np.abs(y - f) / np.where(zero, 1.0, denom)
    return float(200.0 * np.sum(np.where(zero, 0.0, terms)) / f.size)


def smape_m3_metric(forecast, target, counts: Optional[Counter] = None) -> float:
    """The M3 variant: denominator y + ŷ without absolute values."""
    f, y = _pair(forecast, target)
    denom = y + f
    zero = denom == 0
    _count(counts, "smape_m3_zero_denominator", int(zero.sum()))
    terms = np.abs(y - f) / np.where(zero, 1.0, denom)
    return float(200.0 * np.sum(np.where(zero, 0.0, terms)) / f.size)


def mape_metric(forecast, target, counts: Optional[Counter] = None) -> float:
    f, y = _pair(forecast, target)
    zero = y == 0
    _count(counts, "mape_zero_target", int(zero.sum()))
    terms = np.abs(y - f) / np.where(zero, 1.0, np.abs(y))
    return float(100.0 * np.sum(np.where(zero, 0.0, terms)) / f.size)


def mase_metric(forecast, future, history, m: int, counts: Optional[Counter] = None) -> float:
    """
    Mean absolute error over the horizon scaled by the mean lag-m error over
    the concatenated history and future. Returns NaN (and counts it) when the
    scale is zero.
    """
    f, y = _pair(forecast, future)
    full = np.concatenate([np.asarray(history, dtype=np.float64), y])
    if full.size <= m:
        raise ValueError(f"MASE needs T+H > m, got {full.size} points for m={m}")
    scale = np.mean(np.abs(full[m:] - full[:-m]))
    if scale == 0:
        _count(counts, "mase_zero_scale", 1)
        return float("nan")
    return float(np.mean(np.abs(y - f)) / scale)


def owa(smape: float, mase: float, naive2_smape: float, naive2_mase: float) -> float:
    """½ (sMAPE / sMAPE_Naïve2 + MASE / MASE_Naïve2)."""
    if naive2_smape == 0 or naive2_mase == 0:
        raise ValueError("OWA is undefined for a zero Naive2 baseline")
    return 0.5 * (smape / naive2_smape + mase / naive2_mase)


def nd_metric(forecast, actual) -> float:
    """Σ|Ŷ - Y| / Σ|Y| over every cell."""
    f = np.asarray(forecast, dtype=np.float64)
    y = np.asarray(actual, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"forecast{f.shape} and actual{y.shape} shapes differ")
    total = np.sum(np.abs(y))
    if total == 0:
        raise ValueError("ND is undefined when every actual value is zero")
    return float(np.sum(np.abs(f - y)) / total)


def aggregate_weights(counts: Sequence[int], horizons: Sequence[int]) -> np.ndarray:
    """N_s = horizon_s × count_s."""
    return np.asarray(counts, dtype=np.int64) * np.asarray(horizons, dtype=np.int64)


def aggregate_average(means: Sequence[float], counts: Sequence[int], horizons: Sequence[int]) -> float:
    if not (len(means) == len(counts) == len(horizons)):
        raise ValueError("means, counts and horizons must have equal lengths")
    weights = aggregate_weights(counts, horizons)
    total = weights.sum()
    if total == 0:
        raise ValueError("aggregate weight is zero")
    return float(np.sum(weights / total * np.asarray(means, dtype=np.float64)))


# --- Reports ---

@dataclass
class EvalReport:
    """
    ``per_series`` columns: series_id, subset, smape, smape_m3, mape, mase.
    ``subsets`` has one row per frequency plus the weighted ``Average`` row.
    """
    per_series: pd.DataFrame
    subsets: pd.DataFrame
    counts: Counter = field(default_factory=Counter)

    def row(self, subset: str = AGGREGATE) -> pd.Series:
        return self.subsets.set_index("subset").loc[subset]

    def value(self, metric: str, subset: str = AGGREGATE) -> float:
        return float(self.row(subset)[metric])


def _forecast_lookup(forecasts) -> Mapping[str, np.ndarray]:
    return forecasts.forecasts if hasattr(forecasts, "forecasts") else forecasts


def naive2_table(series_set, counts: Optional[Counter] = None) -> Dict[str, np.ndarray]:
    return {s.id: naive2_forecast(s.train, series_set.info(s.frequency).periodicity,
                                  series_set.info(s.frequency).horizon, counts)
            for s in series_set}


def _series_rows(forecasts: Mapping[str, np.ndarray], series_set, counts: Counter) -> pd.DataFrame:
    rows = []
    for s in series_set:
        f = forecasts[s.id]
        m = series_set.info(s.frequency).periodicity
        rows.append({
            "series_id": s.id,
            "subset": s.frequency,
            "smape": smape_metric(f, s.test, counts),
            "smape_m3": smape_m3_metric(f, s.test, counts),
            "mape": mape_metric(f, s.test, counts),
            "mase": mase_metric(f, s.test, s.train, m, counts),
        })
    return pd.DataFrame(rows, columns=["series_id", "subset", "smape", "smape_m3", "mape", "mase"])


def _owa_or_nan(row: dict, subset: str) -> float:
    baseline = (row["naive2_smape"], row["naive2_mase"])
    if not all(np.isfinite(v) and v != 0 for v in baseline):
        if np.isfinite(baseline[0]) and np.isfinite(baseline[1]):
            logger.warning(f"Naive2 baseline of '{subset}' is zero, OWA left empty")
        return np.nan
    return owa(row["smape"], row["mase"], *baseline)


def evaluate(forecasts, series_set, naive2: Union[str, pd.DataFrame] = "internal",
             counts: Optional[Counter] = None) -> EvalReport:
    """
    Scores per-series forecasts against the test values. ``naive2`` is either
    ``"internal"`` (computed here) or a table with columns subset, smape, mase
    supplying external per-subset baseline means.
    """
    counts = Counter() if counts is None else counts
    forecasts = _forecast_lookup(forecasts)
    missing = [sid for sid in series_set.ids if sid not in forecasts]
    if missing:
        raise CoverageError(f"{len(missing)} series have no forecast: {', '.join(missing[:20])}")
    for s in series_set:
        if np.asarray(forecasts[s.id]).shape != s.test.shape:
            raise CoverageError(f"forecast for '{s.id}' has length {np.asarray(forecasts[s.id]).size}, "
                                f"horizon is {s.test.size}")

    per_series = _series_rows(forecasts, series_set, counts)

    if isinstance(naive2, pd.DataFrame):
        baseline = {row.subset: (float(row.smape), float(row.mase)) for row in naive2.itertuples()}
    else:
        naive2_rows = _series_rows(naive2_table(series_set, counts), series_set, Counter())
        baseline = {}
        for tag in series_set.present_frequencies():
            part = naive2_rows[naive2_rows["subset"] == tag]
            baseline[tag] = (part["smape"].mean(), part["mase"].mean(skipna=True))

    subsets = []
    for tag in series_set.present_frequencies():
        part = per_series[per_series["subset"] == tag]
        members = [s for s in series_set if s.frequency == tag]
        actual = np.stack([s.test for s in members])
        predicted = np.stack([np.asarray(forecasts[s.id], dtype=np.float64) for s in members])
        row = {
            "subset": tag,
            "series": len(part),
            "horizon": series_set.info(tag).horizon,
            "smape": part["smape"].mean(),
            "smape_m3": part["smape_m3"].mean(),
            "mape": part["mape"].mean(),
            "mase": part["mase"].mean(skipna=True),
            "nd": nd_metric(predicted, actual),
        }
        if tag in baseline:
            row["naive2_smape"], row["naive2_mase"] = baseline[tag]
        else:
            logger.warning(f"No Naive2 baseline for subset '{tag}', OWA left empty")
            row["naive2_smape"] = row["naive2_mase"] = np.nan
        row["owa"] = _owa_or_nan(row, tag)
        subsets.append(row)

    table = pd.DataFrame(subsets)
    average = {"subset": AGGREGATE, "series": int(table["series"].sum()), "horizon": np.nan}
    for metric in ("smape", "smape_m3", "mape", "mase", "naive2_smape", "naive2_mase"):
        average[metric] = aggregate_average(table[metric].tolist(), table["series"].tolist(), table["horizon"].tolist())
    all_actual = np.concatenate([s.test for s in series_set])
    all_predicted = np.concatenate([np.asarray(forecasts[s.id], dtype=np.float64) for s in series_set])
    average["nd"] = nd_metric(all_predicted, all_actual)
    average["owa"] = _owa_or_nan(average, AGGREGATE)
    table = pd.concat([table, pd.DataFrame([average])], ignore_index=True)

    for key, n in sorted(counts.items()):
        logger.warning(f"{key}: {n}")
    return EvalReport(per_series, table, counts)


def write_report(report: EvalReport, path: str) -> str:
    """Per-series rows first, then a blank line and the subset/aggregate block."""
    report.per_series[["series_id", "smape", "smape_m3", "mape", "mase"]].to_csv(path, index=False, float_format="%.10g")
    with open(path, "a", encoding="utf-8", newline="") as f:
        f.write("\n")
        report.subsets.to_csv(f, index=False, float_format="%.10g")
    return path
