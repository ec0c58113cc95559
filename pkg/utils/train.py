"""
Training loop: sample → forward → loss → backward → Adam, with validation
sMAPE early stopping when the view holds validation targets.
"""
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from utils.adam import AdamState, adam_step
from utils.data import SplitView
from utils.losses import LOSSES, SMAPE, compute_loss
from utils.metrics import smape_metric
from utils.model import ModelConfig, ParamStore, init_params, model_backward, topology_forward
from utils.ndcore import Rng
from utils.sampler import sample_batch

logger = logging.getLogger(__name__)

# Dedicated training log, kept out of the console stream
log_directory = os.getenv("LOG_DIR", "logs")
train_logger = logging.getLogger("train_logger")
train_logger.setLevel(logging.INFO)
train_logger.propagate = False


def _attach_file_handler():
    if train_logger.handlers:
        return
    os.makedirs(log_directory, exist_ok=True)
    log_file = os.path.join(log_directory, f"training_{datetime.now().strftime('%Y%m%d')}.log")
    file_handler = logging.FileHandler(log_file, encoding="utf-8")
    file_handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s"))
    train_logger.addHandler(file_handler)


INFERENCE_CHUNK = 1024


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, value: float, what: str = "training loss"):
        super().__init__(f"{what} became {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class TrainPlan:
    iterations: int
    batch_size: int = 1024
    L_H: float = 1.5
    loss: str = SMAPE
    lookback_multiple: int = 2
    patience: int = 5
    eval_every: int = 0
    seed: int = 0
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.L_H > 0:
            raise ValueError(f"L_H must be > 0, got {self.L_H}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss '{self.loss}', expected one of {LOSSES}")
        if not 2 <= self.lookback_multiple <= 7:
            raise ValueError(f"lookback_multiple must be in 2..7, got {self.lookback_multiple}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")

    @property
    def cadence(self) -> int:
        """Iterations between validation evaluations."""
        return self.eval_every if self.eval_every > 0 else max(1, self.iterations // 20)

    def with_seed(self, seed: int) -> "TrainPlan":
        return replace(self, seed=seed)


@dataclass
class TrainLogRow:
    iteration: int
    train_loss: float
    val_smape: float
    best_flag: bool


@dataclass
class TrainResult:
    params: ParamStore
    log: List[TrainLogRow] = field(default_factory=list)
    best_iteration: int = 0
    best_val_smape: float = float("nan")
    stopped_early: bool = False
    counts: Counter = field(default_factory=Counter)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.log], columns=["iteration", "train_loss", "val_smape", "best_flag"])


def write_train_log(result: TrainResult, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    result.log_frame().to_csv(path, index=False)
    return path


# --- Inference helpers ---

def model_inputs(histories: Sequence[np.ndarray], input_len: int) -> np.ndarray:
    """The last ``input_len`` points of each history, left-padded with zeros."""
    x = np.zeros((len(histories), input_len))
    for row, values in enumerate(histories):
        tail = np.asarray(values, dtype=np.float64)[-input_len:]
        if tail.size:
            x[row, input_len - tail.size:] = tail
    return x


def forecast_series(histories: Sequence[np.ndarray], cfg: ModelConfig, params: ParamStore) -> np.ndarray:
    """Forecasts for arbitrary histories, shape (N, H)."""
    out = np.zeros((len(histories), cfg.horizon))
    for start in range(0, len(histories), INFERENCE_CHUNK):
        chunk = histories[start:start + INFERENCE_CHUNK]
        out[start:start + len(chunk)] = topology_forward(model_inputs(chunk, cfg.input_len), cfg, params).forecast
    return out


def decompose_series(histories: Sequence[np.ndarray], cfg: ModelConfig,
                     params: ParamStore) -> Tuple[np.ndarray, np.ndarray]:
    """Forecasts (N, H) and per-stack partial forecasts (N, stacks, H)."""
    forecasts, stacks = [], []
    for start in range(0, len(histories), INFERENCE_CHUNK):
        chunk = histories[start:start + INFERENCE_CHUNK]
        trace = topology_forward(model_inputs(chunk, cfg.input_len), cfg, params)
        forecasts.append(trace.forecast)
        stacks.append(np.stack(trace.stack_forecasts, axis=1))
    return np.concatenate(forecasts), np.concatenate(stacks)


def validation_smape(view: SplitView, cfg: ModelConfig, params: ParamStore) -> float:
    """Mean sMAPE over every series that carries a validation target."""
    indices = view.validation_indices()
    if not indices:
        raise ValueError("view has no validation targets")
    predicted = forecast_series([view.visible[i] for i in indices], cfg, params)
    return float(np.mean([smape_metric(p, view.validation[i]) for p, i in zip(predicted, indices)]))


# --- Training ---

def _check_consistent(view: SplitView, cfg: ModelConfig, plan: TrainPlan):
    horizons = set(view.horizons().tolist())
    if horizons != {cfg.horizon}:
        raise ValueError(f"model horizon {cfg.horizon} does not match series horizons {sorted(horizons)}")
    if cfg.lookback_multiple != plan.lookback_multiple:
        raise ValueError(f"model lookback {cfg.lookback_multiple} differs from plan lookback {plan.lookback_multiple}")


def train_model(view: SplitView, cfg: ModelConfig, plan: TrainPlan, progress: bool = False,
                counts: Optional[Counter] = None, label: str = "model") -> TrainResult:
    """
    Trains one model from ``Rng(plan.seed)``. With validation targets in
    ``view`` the best-validation parameters are kept and training stops after
    ``plan.patience`` evaluations without improvement; otherwise exactly
    ``plan.iterations`` batches run.
    """
    _check_consistent(view, cfg, plan)
    _attach_file_handler()
    counts = Counter() if counts is None else counts
    rng = Rng(plan.seed)
    params = init_params(cfg, rng)
    state = AdamState.for_params(params, lr=plan.learning_rate)
    validating = view.has_validation

    result = TrainResult(params=params, counts=counts)
    best_params, best_val, stale = None, np.inf, 0
    train_logger.info(f"[{label}] start: loss={plan.loss} lookback={plan.lookback_multiple} "
                      f"iterations={plan.iterations} seed={plan.seed} validation={validating}")

    for iteration in tqdm(range(1, plan.iterations + 1), desc=f"Training {label}", disable=not progress, leave=False):
        batch = sample_batch(view, cfg.horizon, plan, rng)
        trace = topology_forward(batch.inputs, cfg, params)
        loss, grad = compute_loss(plan.loss, trace.forecast, batch, counts)
        if not np.isfinite(loss):
            raise TrainingDivergedError(iteration, loss)
        grads = model_backward(trace, grad, cfg, params)
        adam_step(params, grads, state)

        if not (iteration == 1 or iteration % plan.cadence == 0 or iteration == plan.iterations):
            continue
        if not validating:
            result.log.append(TrainLogRow(iteration, loss, float("nan"), False))
            train_logger.info(f"[{label}] iteration {iteration}: train_loss={loss:.6f}")
            continue

        val = validation_smape(view, cfg, params)
        if not np.isfinite(val):
            raise TrainingDivergedError(iteration, val, "validation sMAPE")
        improved = val < best_val
        if improved:
            best_params, best_val, stale = params.copy(), val, 0
            result.best_iteration = iteration
        else:
            stale += 1
        result.log.append(TrainLogRow(iteration, loss, val, improved))
        train_logger.info(f"[{label}] iteration {iteration}: train_loss={loss:.6f} val_smape={val:.6f}"
                          f"{' *' if improved else ''}")
        if stale >= plan.patience:
            result.stopped_early = True
            logger.info(f"{label}: early stop at iteration {iteration}, best {best_val:.4f} "
                        f"at iteration {result.best_iteration}")
            break

    if validating:
        result.params = best_params
        result.best_val_smape = best_val
    else:
        result.best_iteration = plan.iterations
    if counts:
        logger.warning(f"{label}: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return result
