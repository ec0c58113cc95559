"""
Training batch sampler.

For every sample a series is drawn with replacement, then an anchor point
among the most recent ``ceil(L_H * H)`` sampler-visible points. The target is
the H points starting at the anchor, the input the ``lookback * H`` points
before it. Positions outside the series are zero and masked.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from utils.ndcore import Rng

logger = logging.getLogger(__name__)


@dataclass
class TrainBatch:
    inputs: np.ndarray        # (B, lookback * H)
    input_masks: np.ndarray
    targets: np.ndarray       # (B, H)
    target_masks: np.ndarray
    series_ids: List[str]
    periodicity: np.ndarray   # (B,)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def anchor_window(H: int, L_H: float) -> int:
    return int(math.ceil(L_H * H))


def anchor_bounds(lengths: np.ndarray, window: int):
    """Half-open anchor ranges [low, high) per series; high is the series length."""
    lengths = np.asarray(lengths, dtype=np.int64)
    low = np.maximum(1, lengths - window)
    # a single visible point can only serve as a target
    low = np.where(lengths <= 1, 0, low)
    return low, lengths


def fill_window(values: np.ndarray, anchor: int, input_len: int, H: int):
    """Right-aligned input ending before ``anchor`` and left-aligned target starting at it."""
    inputs = np.zeros(input_len)
    input_mask = np.zeros(input_len)
    start = max(0, anchor - input_len)
    history = values[start:anchor]
    if history.size:
        inputs[input_len - history.size:] = history
        input_mask[input_len - history.size:] = 1.0

    targets = np.zeros(H)
    target_mask = np.zeros(H)
    future = values[anchor:min(values.size, anchor + H)]
    targets[:future.size] = future
    target_mask[:future.size] = 1.0
    return inputs, input_mask, targets, target_mask


def sample_batch(view, H: int, plan, rng: Rng) -> TrainBatch:
    """
    Draws ``plan.batch_size`` windows from the sampler-visible ranges of a
    ``SplitView``; nothing beyond ``view.visible[i]`` is ever read.
    """
    visible: Sequence[np.ndarray] = view.visible
    if not visible:
        raise ValueError("cannot sample a batch from an empty series set")
    input_len = plan.lookback_multiple * H
    lengths = np.array([v.size for v in visible], dtype=np.int64)
    low, high = anchor_bounds(lengths, anchor_window(H, plan.L_H))

    picks = rng.integers(0, len(visible), plan.batch_size)
    anchors = rng.integers(low[picks], high[picks])

    batch = plan.batch_size
    inputs = np.zeros((batch, input_len))
    input_masks = np.zeros((batch, input_len))
    targets = np.zeros((batch, H))
    target_masks = np.zeros((batch, H))
    for row, (i, anchor) in enumerate(zip(picks, anchors)):
        inputs[row], input_masks[row], targets[row], target_masks[row] = fill_window(
            visible[i], int(anchor), input_len, H)

    ids = view.source.ids
    return TrainBatch(
        inputs=inputs,
        input_masks=input_masks,
        targets=targets,
        target_masks=target_masks,
        series_ids=[ids[i] for i in picks],
        periodicity=view.periodicities()[picks],
    )
