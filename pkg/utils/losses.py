"""
Masked training losses and their gradients with respect to the forecast.

Every function takes arrays of shape (H,) or (B, H) and returns
``(loss, grad)`` with ``grad`` shaped like the forecast. sign(0) is 0 in all
gradients.
"""
import logging
from collections import Counter
from typing import Optional, Tuple, Union

import numpy as np

from utils.ndcore import ShapeError

logger = logging.getLogger(__name__)

SMAPE = "SMAPE"
MAPE = "MAPE"
MASE = "MASE"
LOSSES = (SMAPE, MAPE, MASE)

MASE_MIN_SCALE = 1e-12


def _prepare(forecast, target, mask):
    f = np.asarray(forecast, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if not (f.shape == y.shape == m.shape):
        raise ShapeError(f"forecast{f.shape}, target{y.shape} and mask{m.shape} must have equal shapes")
    return f, y, m


def smape_loss(forecast, target, mask) -> Tuple[float, np.ndarray]:
    """
    200/Σmask · Σ mask·|y - ŷ| / (|y| + |ŷ|). The gradient holds the
    denominator constant, which keeps training stable near zero.
    """
    f, y, m = _prepare(forecast, target, mask)
    total = m.sum()
    if total <= 0:
        raise ValueError("sMAPE loss needs at least one unmasked target position")
    denom = np.abs(y) + np.abs(f)
    active = m * (denom > 0)
    safe = np.where(denom > 0, denom, 1.0)
    err = y - f
    scale = 200.0 / total
    loss = scale * np.sum(active * np.abs(err) / safe)
    grad = -scale * active * np.sign(err) / safe
    return float(loss), grad


def mape_loss(forecast, target, mask) -> Tuple[float, np.ndarray]:
    """100/N · Σ |y - ŷ| / |y| over unmasked positions with y != 0."""
    f, y, m = _prepare(forecast, target, mask)
    active = m * (y != 0)
    total = active.sum()
    if total <= 0:
        raise ValueError("MAPE loss has no unmasked position with a non-zero target")
    safe = np.where(y != 0, np.abs(y), 1.0)
    err = y - f
    scale = 100.0 / total
    loss = scale * np.sum(active * np.abs(err) / safe)
    grad = -scale * active * np.sign(err) / safe
    return float(loss), grad


def naive_scale(history: np.ndarray, history_mask: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean |h_j - h_{j-m}| over pairs where both points are observed, per row.
    Returns ``(scale, pair_count)``.
    """
    if history.shape[1] <= m:
        rows = history.shape[0]
        return np.zeros(rows), np.zeros(rows, dtype=np.int64)
    pairs = history_mask[:, m:] * history_mask[:, :-m]
    diffs = np.abs(history[:, m:] - history[:, :-m]) * pairs
    count = pairs.sum(axis=1).astype(np.int64)
    scale = diffs.sum(axis=1) / np.maximum(count, 1)
    return scale, count


def mase_loss(forecast, target, mask, history, m: Union[int, np.ndarray],
              history_mask=None, counts: Optional[Counter] = None) -> Tuple[float, np.ndarray]:
    """
    Per-sample mean masked absolute error divided by the in-sample naive-m error
    of that sample's history window, averaged over the batch. Samples whose
    history has no observed lag-m pair, or whose scale is ~0, contribute 0.
    """
    f, y, mk = _prepare(forecast, target, mask)
    single = f.ndim == 1
    f, y, mk = np.atleast_2d(f), np.atleast_2d(y), np.atleast_2d(mk)
    h = np.atleast_2d(np.asarray(history, dtype=np.float64))
    hm = np.ones_like(h) if history_mask is None else np.atleast_2d(np.asarray(history_mask, dtype=np.float64))
    if h.shape[0] != f.shape[0] or hm.shape != h.shape:
        raise ShapeError(f"history{h.shape} / history mask{hm.shape} do not match forecast batch {f.shape}")
    batch = f.shape[0]
    periods = np.broadcast_to(np.asarray(m, dtype=np.int64), (batch,))

    scale = np.zeros(batch)
    pairs = np.zeros(batch, dtype=np.int64)
    for period in np.unique(periods):
        rows = periods == period
        scale[rows], pairs[rows] = naive_scale(h[rows], hm[rows], int(period))

    short = pairs == 0
    usable = ~short & (scale > MASE_MIN_SCALE)
    if short.any():
        if counts is not None:
            counts["mase_short_history"] += int(short.sum())
        logger.debug(f"MASE loss: {int(short.sum())} samples without a lag-m history pair contribute 0")

    per_row_mask = mk.sum(axis=1)
    weight = np.where(usable & (per_row_mask > 0), 1.0 / (np.maximum(per_row_mask, 1) * np.where(usable, scale, 1.0)), 0.0)
    err = y - f
    loss = np.sum(weight[:, None] * mk * np.abs(err)) / batch
    grad = -(weight[:, None] * mk * np.sign(err)) / batch
    return float(loss), (grad[0] if single else grad)


def compute_loss(kind: str, forecast: np.ndarray, batch, counts: Optional[Counter] = None) -> Tuple[float, np.ndarray]:
    """Dispatches on the loss kind with the fields of a ``TrainBatch``."""
    if kind == SMAPE:
        return smape_loss(forecast, batch.targets, batch.target_masks)
    if kind == MAPE:
        return mape_loss(forecast, batch.targets, batch.target_masks)
    if kind == MASE:
        return mase_loss(forecast, batch.targets, batch.target_masks, batch.inputs,
                         batch.periodicity, history_mask=batch.input_masks, counts=counts)
    raise ValueError(f"unknown loss '{kind}', expected one of {LOSSES}")
