"""
Statistical baselines: Naïve1, seasonal naive and Naïve2 (naive on the
multiplicatively deseasonalized series, M4 convention).
"""
import logging
import warnings
from collections import Counter
from typing import Optional

import numpy as np
from statsmodels.tsa.seasonal import seasonal_decompose
from statsmodels.tsa.stattools import acf

logger = logging.getLogger(__name__)

# two-sided 90% critical value
SEASONALITY_Z = 1.645


def naive_forecast(history, H: int) -> np.ndarray:
    history = np.asarray(history, dtype=np.float64)
    if history.size < 1:
        raise ValueError("naive forecast needs at least one observation")
    return np.full(H, history[-1])


def snaive_forecast(history, m: int, H: int) -> np.ndarray:
    """y_{T+i} = y_{T+i-m*ceil(i/m)}: the last observed season, extended periodically."""
    history = np.asarray(history, dtype=np.float64)
    if history.size < m:
        raise ValueError(f"seasonal naive needs at least m={m} observations, got {history.size}")
    last_season = history[history.size - m:]
    return last_season[np.arange(H) % m].copy()


def seasonality_test(history, m: int) -> bool:
    """
    True when |r_m| > 1.645 * sqrt((1 + 2 * sum_{k<m} r_k^2) / N), i.e. the lag-m
    autocorrelation is significant at the 90% level.
    """
    history = np.asarray(history, dtype=np.float64)
    if m <= 1 or history.size <= m or np.ptp(history) == 0:
        return False
    r = acf(history, nlags=m, fft=False)
    limit = SEASONALITY_Z * np.sqrt((1.0 + 2.0 * np.sum(r[1:m] ** 2)) / history.size)
    return bool(abs(r[m]) > limit)


def seasonal_indices(history, m: int) -> np.ndarray:
    """Multiplicative seasonal component aligned with ``history`` (classical decomposition)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = seasonal_decompose(history, model="multiplicative", period=m)
    return np.asarray(result.seasonal, dtype=np.float64)


def naive2_forecast(history, m: int, H: int, counts: Optional[Counter] = None) -> np.ndarray:
    """
    Repeats the last deseasonalized value and reseasonalizes it. Falls back to
    Naïve1 for m = 1, a failed seasonality test, a history shorter than
    max(3m, 3) or non-positive values.
    """
    history = np.asarray(history, dtype=np.float64)
    if m <= 1:
        return naive_forecast(history, H)
    if history.size < max(3 * m, 3):
        if counts is not None:
            counts["naive2_short_history"] += 1
        logger.debug(f"Naive2: history of {history.size} points is shorter than 3m={3 * m}, using naive")
        return naive_forecast(history, H)
    if np.any(history <= 0):
        if counts is not None:
            counts["naive2_non_positive"] += 1
        logger.debug("Naive2: non-positive values rule out multiplicative decomposition, using naive")
        return naive_forecast(history, H)
    if not seasonality_test(history, m):
        return naive_forecast(history, H)

    season = seasonal_indices(history, m)
    T = history.size
    deseasonalized = history / season
    # positions T..T+H-1 share their phase with T-m..T-1
    future_season = season[T - m + (np.arange(H) % m)]
    return deseasonalized[-1] * future_season
