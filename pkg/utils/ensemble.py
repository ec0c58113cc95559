"""
Ensembles: expand the (loss × lookback × repeat) grid, train the members in
joblib workers, persist their forecasts and aggregate them by median.
"""
import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed, parallel_config
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from utils.data import SeriesSet, full_train_view, split_train_validation
from utils.losses import LOSSES
from utils.metrics import evaluate
from utils.model import ModelConfig
from utils.train import TrainPlan, forecast_series, train_model, write_train_log
from utils.weights import save_params

logger = logging.getLogger(__name__)

OK = "ok"
FAILED = "failed"

MANIFEST_COLUMNS = ["member", "frequency", "loss", "lookback", "repeat", "seed",
                    "forecast_file", "weight_file", "status"]


class EnsembleError(RuntimeError):
    """Too few members survived, or member forecasts are inconsistent."""


def member_seed(base_seed: int, loss: str, lookback: int, repeat: int) -> int:
    """Stable 64-bit seed from BLAKE2b over the member identity."""
    key = f"{int(base_seed)}|{loss}|{int(lookback)}|{int(repeat)}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class EnsembleSpec:
    losses: Tuple[str, ...]
    lookback_multiples: Tuple[int, ...]
    repeats: int
    base_config: ModelConfig
    base_plan: TrainPlan

    def __post_init__(self):
        object.__setattr__(self, "losses", tuple(self.losses))
        object.__setattr__(self, "lookback_multiples", tuple(self.lookback_multiples))
        if not self.losses:
            raise ValueError("ensemble needs at least one loss")
        if not self.lookback_multiples:
            raise ValueError("ensemble needs at least one lookback multiple")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        unknown = [loss for loss in self.losses if loss not in LOSSES]
        if unknown:
            raise ValueError(f"unknown losses {unknown}, expected a subset of {LOSSES}")
        bad = [k for k in self.lookback_multiples if not 2 <= k <= 7]
        if bad:
            raise ValueError(f"lookback multiples must be in 2..7, got {bad}")

    @property
    def size(self) -> int:
        return len(self.losses) * len(self.lookback_multiples) * self.repeats


@dataclass(frozen=True)
class MemberId:
    index: int
    loss: str
    lookback: int
    repeat: int
    seed: int


@dataclass(frozen=True)
class MemberPlan:
    member: MemberId
    config: ModelConfig
    plan: TrainPlan


def expand_spec(spec: EnsembleSpec) -> List[MemberPlan]:
    """Loss-major, then lookback, then repeat."""
    members = []
    for loss in spec.losses:
        for lookback in spec.lookback_multiples:
            cfg = spec.base_config.with_lookback(lookback)
            for repeat in range(spec.repeats):
                seed = member_seed(spec.base_plan.seed, loss, lookback, repeat)
                plan = TrainPlan(
                    iterations=spec.base_plan.iterations,
                    batch_size=spec.base_plan.batch_size,
                    L_H=spec.base_plan.L_H,
                    loss=loss,
                    lookback_multiple=lookback,
                    patience=spec.base_plan.patience,
                    eval_every=spec.base_plan.eval_every,
                    seed=seed,
                    learning_rate=spec.base_plan.learning_rate,
                )
                members.append(MemberPlan(MemberId(len(members), loss, lookback, repeat, seed), cfg, plan))
    return members


@dataclass
class ForecastSet:
    """Per-series forecasts; ``stacks`` optionally holds (stack count, H) partials per series."""
    forecasts: Dict[str, np.ndarray]
    stacks: Optional[Dict[str, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.forecasts)

    @property
    def ids(self) -> List[str]:
        return list(self.forecasts)


@dataclass
class MemberForecasts:
    members: List[MemberId]
    forecasts: List[Optional[Dict[str, np.ndarray]]]
    status: List[str] = field(default_factory=list)
    errors: Dict[int, str] = field(default_factory=dict)
    weight_files: List[Optional[str]] = field(default_factory=list)

    def survivors(self) -> List[int]:
        return [i for i, s in enumerate(self.status) if s == OK]

    def __len__(self) -> int:
        return len(self.members)


# --- Training ---

def _run_member(member_plan: MemberPlan, series_set: SeriesSet, validation: bool,
                out_dir: Optional[str], tag: str, progress: bool):
    member, cfg, plan = member_plan.member, member_plan.config, member_plan.plan
    label = f"{tag} member {member.index} ({member.loss}, {member.lookback}H, r{member.repeat})"
    try:
        view = split_train_validation(series_set) if validation else full_train_view(series_set)
        result = train_model(view, cfg, plan, progress=progress, label=label)
        predicted = forecast_series([s.train for s in series_set], cfg, result.params)
        weight_file = None
        if out_dir:
            weight_file = os.path.join(out_dir, member_file_stem(member, tag) + ".nbts")
            save_params(result.params, weight_file)
            write_train_log(result, os.path.join(out_dir, member_file_stem(member, tag) + "_log.csv"))
        if not np.all(np.isfinite(predicted)):
            raise FloatingPointError("non-finite test forecast")
        return OK, dict(zip(series_set.ids, predicted)), None, weight_file
    except Exception as e:
        logger.error(f"{label} failed: {e}")
        return FAILED, None, str(e), None


def member_file_stem(member: MemberId, tag: str) -> str:
    return f"member_{member.index:03d}_{tag}"


def train_ensemble(spec: EnsembleSpec, series_set: SeriesSet, worker_count: int = 1,
                   out_dir: Optional[str] = None, validation: bool = False,
                   progress: bool = False) -> MemberForecasts:
    """
    Trains every member of ``spec`` on a single-horizon ``series_set``. Each
    member is seeded from its identity alone, so results do not depend on
    ``worker_count``.
    """
    frequencies = series_set.present_frequencies()
    if len(frequencies) != 1:
        raise ValueError(f"train_ensemble expects one frequency, got {frequencies}")
    tag = frequencies[0]
    plans = expand_spec(spec)
    logger.info(f"Training {len(plans)} {tag} members with {worker_count} worker(s)")

    # One BLAS thread in this process and in every worker
    if worker_count <= 1:
        with threadpool_limits(limits=1):
            outcomes = [_run_member(p, series_set, validation, out_dir, tag, progress)
                        for p in tqdm(plans, desc=f"{tag} members", disable=not progress)]
    else:
        with parallel_config(backend="loky", inner_max_num_threads=1), threadpool_limits(limits=1):
            outcomes = Parallel(n_jobs=worker_count)(
                delayed(_run_member)(p, series_set, validation, out_dir, tag, False)
                for p in tqdm(plans, desc=f"{tag} members", disable=not progress)
            )

    result = MemberForecasts(members=[p.member for p in plans], forecasts=[], status=[], weight_files=[])
    for plan, (status, forecasts, error, weight_file) in zip(plans, outcomes):
        result.status.append(status)
        result.forecasts.append(forecasts)
        result.weight_files.append(weight_file)
        if error is not None:
            result.errors[plan.member.index] = error

    survivors = len(result.survivors())
    if survivors * 2 < len(plans):
        raise EnsembleError(f"only {survivors} of {len(plans)} {tag} members trained successfully")
    if survivors < len(plans):
        logger.warning(f"{len(plans) - survivors} of {len(plans)} {tag} members failed; aggregating survivors")
    return result


# --- Aggregation ---

def aggregate_median(members: MemberForecasts, limit: Optional[int] = None) -> ForecastSet:
    """
    Pointwise median over surviving members (the first ``limit`` of them in
    expansion order when given). An even count averages the central pair.
    """
    chosen = members.survivors()
    if limit is not None:
        chosen = chosen[:limit]
    if not chosen:
        raise EnsembleError("no member forecasts to aggregate")
    ids = list(members.forecasts[chosen[0]])
    for i in chosen[1:]:
        if set(members.forecasts[i]) != set(ids):
            raise EnsembleError(f"member {members.members[i].index} covers a different series set")
    return ForecastSet({
        sid: np.median(np.stack([members.forecasts[i][sid] for i in chosen]), axis=0)
        for sid in ids
    })


def ensemble_size_sweep(members: Union[MemberForecasts, Mapping[str, MemberForecasts]], sizes: Sequence[int],
                        series_set: SeriesSet, naive2="internal") -> pd.DataFrame:
    """
    One aggregate metric row per ensemble size, members taken in expansion
    order. ``members`` may map frequency tags to their ensembles.
    """
    groups = list(members.values()) if isinstance(members, Mapping) else [members]
    available = min(len(m.survivors()) for m in groups)
    rows = []
    for size in sizes:
        if size < 1:
            raise ValueError(f"ensemble size must be >= 1, got {size}")
        if size > available:
            raise ValueError(f"ensemble size {size} exceeds the {available} available members")
        combined = merge_forecast_sets([aggregate_median(m, limit=size) for m in groups])
        report = evaluate(combined, series_set, naive2)
        average = report.row()
        rows.append({"members": size, "smape": average["smape"], "smape_m3": average["smape_m3"],
                     "mase": average["mase"], "owa": average["owa"]})
    return pd.DataFrame(rows, columns=["members", "smape", "smape_m3", "mase", "owa"])


def merge_forecast_sets(parts: Sequence[ForecastSet]) -> ForecastSet:
    merged: Dict[str, np.ndarray] = {}
    for part in parts:
        overlap = set(merged) & set(part.forecasts)
        if overlap:
            raise EnsembleError(f"series forecast twice: {sorted(overlap)[:5]}")
        merged.update(part.forecasts)
    return ForecastSet(merged)


# --- Persistence ---

def write_forecasts(forecasts: Mapping[str, np.ndarray], path: str) -> str:
    """``series_id,f1,...,fH``; rows of different horizons leave trailing cells empty."""
    if isinstance(forecasts, ForecastSet):
        forecasts = forecasts.forecasts
    width = max((len(v) for v in forecasts.values()), default=0)
    columns = ["series_id"] + [f"f{i + 1}" for i in range(width)]
    rows = [[sid] + [float(x) for x in values] for sid, values in forecasts.items()]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    return path


def read_forecasts(path: str) -> ForecastSet:
    if not os.path.exists(path):
        raise FileNotFoundError(f"forecast file not found: {path}")
    frame = pd.read_csv(path, dtype={"series_id": str}, float_precision="round_trip")
    if "series_id" not in frame.columns:
        raise ValueError(f"{path} has no series_id column")
    values = frame.drop(columns=["series_id"]).to_numpy(dtype=np.float64)
    forecasts = {}
    for sid, row in zip(frame["series_id"], values):
        forecasts[sid] = row[~np.isnan(row)]
    return ForecastSet(forecasts)


def write_member_forecasts(members: MemberForecasts, out_dir: str, tag: str,
                           manifest: Optional[List[dict]] = None) -> List[dict]:
    """Writes one CSV per surviving member and returns the manifest rows for them."""
    rows = [] if manifest is None else manifest
    for i, member in enumerate(members.members):
        forecast_file = ""
        if members.status[i] == OK:
            forecast_file = member_file_stem(member, tag) + ".csv"
            write_forecasts(members.forecasts[i], os.path.join(out_dir, forecast_file))
        weight_file = members.weight_files[i] if i < len(members.weight_files) else None
        rows.append({
            "member": member.index,
            "frequency": tag,
            "loss": member.loss,
            "lookback": member.lookback,
            "repeat": member.repeat,
            "seed": str(member.seed),
            "forecast_file": forecast_file,
            "weight_file": os.path.basename(weight_file) if weight_file else "",
            "status": members.status[i],
        })
    return rows


def write_manifest(rows: List[dict], path: str) -> str:
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False)
    return path


def read_manifest(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    frame = pd.read_csv(path, dtype={"seed": str, "frequency": str, "forecast_file": str, "weight_file": str},
                        keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} lacks manifest columns {missing}")
    return frame


def read_member_forecasts(manifest_path: str, tag: str) -> MemberForecasts:
    """Rebuilds the members of one frequency from a manifest and its forecast files."""
    frame = read_manifest(manifest_path)
    frame = frame[frame["frequency"] == tag]
    base = os.path.dirname(os.path.abspath(manifest_path))
    result = MemberForecasts(members=[], forecasts=[], status=[], weight_files=[])
    for row in frame.itertuples():
        result.members.append(MemberId(int(row.member), row.loss, int(row.lookback), int(row.repeat), int(row.seed)))
        result.status.append(row.status)
        result.weight_files.append(os.path.join(base, row.weight_file) if row.weight_file else None)
        if row.status == OK:
            result.forecasts.append(read_forecasts(os.path.join(base, row.forecast_file)).forecasts)
        else:
            result.forecasts.append(None)
    return result
