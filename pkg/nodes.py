import logging
import os
from collections import Counter

import numpy as np
import pandas as pd
from pocketflow import BatchNode, Node

from utils.baselines import naive2_forecast, naive_forecast, snaive_forecast
from utils.config import GENERIC_PRESET, INTERPRETABLE_PRESET, load_run_config, serialize_run_config
from utils.data import SeriesSet, load_dataset, validation_series_set
from utils.ensemble import (
    EnsembleSpec,
    ForecastSet,
    aggregate_median,
    ensemble_size_sweep,
    merge_forecast_sets,
    read_forecasts,
    read_manifest,
    train_ensemble,
    write_forecasts,
    write_manifest,
    write_member_forecasts,
)
from utils.metrics import AGGREGATE, evaluate, write_report
from utils.train import TrainPlan, decompose_series
from utils.weights import load_params

logger = logging.getLogger(__name__)

BASELINES = ("naive", "naive2", "snaive")
ABLATION_AXES = ("stacks", "basis", "topology", "ensemble_size")


# Helper: one ensemble per dataset entry (one horizon each)
def train_datasets(run, datasets, workers, out_dir=None, progress=False, validation=None, **overrides):
    members = {}
    for index, series_set in enumerate(datasets):
        tag = series_set.present_frequencies()[0]
        l_h, iterations, losses = run.training_settings(index, overrides.get("preset"))
        horizon = series_set.info(tag).horizon
        plan = TrainPlan(
            iterations=iterations,
            batch_size=run.batch,
            L_H=l_h,
            loss=losses[0],
            lookback_multiple=run.lookbacks[0],
            patience=run.patience,
            eval_every=run.eval_every,
            seed=run.seed,
        )
        spec = EnsembleSpec(losses, run.lookbacks, run.repeats,
                            run.model_config(horizon, run.lookbacks[0], **overrides), plan)
        members[tag] = train_ensemble(
            spec, series_set, worker_count=workers, out_dir=out_dir,
            validation=run.validation if validation is None else validation, progress=progress,
        )
    return members


def median_forecasts(members):
    return merge_forecast_sets([aggregate_median(m) for m in members.values()])


class LoadRunConfig(Node):
    def prep(self, shared):
        return shared["config_path"]

    def exec(self, config_path):
        run = load_run_config(config_path)
        print(f"Loaded run config {config_path} (preset {run.preset}, topology {run.topology})")
        return run

    def post(self, shared, prep_res, exec_res):
        # CLI flags override the file
        overrides = shared.get("overrides", {})
        for attr, value in overrides.items():
            if value is not None:
                setattr(exec_res, attr, value)
        shared["run_config"] = exec_res.check(need_data=True)
        shared["out_dir"] = exec_res.out


class LoadDatasets(Node):
    def prep(self, shared):
        return shared["run_config"]

    def exec(self, run):
        datasets = []
        for index, (train_csv, test_csv) in enumerate(zip(run.train, run.test)):
            datasets.append(load_dataset(train_csv, test_csv, run.meta_for(index), run.frequency_for(index)))
        series_set = SeriesSet.merge(datasets)
        tags = [d.present_frequencies()[0] for d in datasets if len(d)]
        if len(tags) != len(set(tags)):
            raise ValueError(f"each frequency may appear in one dataset only, got {tags}")
        print(f"Loaded {len(series_set)} series across {', '.join(tags)}")
        return datasets, series_set

    def post(self, shared, prep_res, exec_res):
        shared["datasets"], shared["series_set"] = exec_res


class TrainEnsembles(Node):
    def prep(self, shared):
        os.makedirs(shared["out_dir"], exist_ok=True)
        return shared["run_config"], shared["datasets"], shared["workers"], shared["out_dir"], shared["progress"]

    def exec(self, prep_res):
        run, datasets, workers, out_dir, progress = prep_res
        members = train_datasets(run, datasets, workers, out_dir=out_dir, progress=progress)
        for tag, result in members.items():
            print(f"{tag}: {len(result.survivors())}/{len(result)} members trained")
        return members

    def post(self, shared, prep_res, exec_res):
        shared["members"] = exec_res
        shared["forecasts"] = median_forecasts(exec_res)


class WriteTrainOutputs(Node):
    def prep(self, shared):
        return shared["run_config"], shared["members"], shared["forecasts"], shared["out_dir"]

    def exec(self, prep_res):
        run, members, forecasts, out_dir = prep_res
        rows = []
        for tag, result in members.items():
            write_member_forecasts(result, out_dir, tag, rows)
        manifest_path = write_manifest(rows, os.path.join(out_dir, "manifest.csv"))
        forecast_path = write_forecasts(forecasts, os.path.join(out_dir, "forecast.csv"))
        with open(os.path.join(out_dir, "run.cfg"), "w", encoding="utf-8") as f:
            f.write(serialize_run_config(run))
        print(f"Wrote {len(rows)} member entries to {manifest_path}")
        return forecast_path

    def post(self, shared, prep_res, exec_res):
        shared["forecast_path"] = exec_res


class LoadForecasts(Node):
    """
    Stored forecasts (CSV, manifest or weight files) or a baseline computed on
    the spot. A comma-separated list of manifests and weight files pools all
    their members into one median ensemble, e.g. the generic and the
    interpretable runs together.
    """

    def prep(self, shared):
        source = shared.get("forecast_source") or os.path.join(shared["out_dir"], "forecast.csv")
        return source, shared["series_set"]

    def exec(self, prep_res):
        source, series_set = prep_res
        sources = [s.strip() for s in source.split(",") if s.strip()]
        if len(sources) > 1:
            weights = [pair for s in sources for pair in weight_sources(s)]
            print(f"Pooling {len(weights)} members from {len(sources)} sources into one median ensemble")
            return forecasts_from_weights(weights, series_set)
        if source in BASELINES:
            print(f"Computing {source} forecasts for {len(series_set)} series")
            return baseline_forecasts(source, series_set)
        if source.endswith(".nbts") or os.path.basename(source) == "manifest.csv":
            return forecasts_from_weights(weight_sources(source), series_set)
        return read_forecasts(source)

    def post(self, shared, prep_res, exec_res):
        shared["forecasts"] = exec_res


def baseline_forecasts(name, series_set):
    counts = Counter()
    result = {}
    for s in series_set:
        info = series_set.info(s.frequency)
        if name == "naive":
            result[s.id] = naive_forecast(s.train, info.horizon)
        elif name == "snaive":
            result[s.id] = snaive_forecast(s.train, info.periodicity, info.horizon)
        else:
            result[s.id] = naive2_forecast(s.train, info.periodicity, info.horizon, counts)
    if counts:
        logger.warning(f"{name} fallbacks: {dict(counts)}")
    return ForecastSet(result)


def weight_sources(source):
    """(weight path, frequency tag) pairs of a manifest's usable members, or of one .nbts file."""
    if source.endswith(".nbts"):
        return [(source, None)]
    if os.path.basename(source) != "manifest.csv":
        raise ValueError(f"only manifest.csv and .nbts files can be pooled, got '{source}'")
    base = os.path.dirname(os.path.abspath(source))
    frame = read_manifest(source)
    usable = frame[(frame["status"] == "ok") & (frame["weight_file"] != "")]
    return [(os.path.join(base, w), tag) for w, tag in zip(usable["weight_file"], usable["frequency"])]


def forecasts_from_weights(models, series_set):
    """
    Median over ``models``, a list of (weight path, frequency tag) pairs. A model
    without a tag serves every series of its horizon. Series covered by a single
    model also keep its stack partials.
    """
    per_series = {s.id: [] for s in series_set}
    partials = {}
    for path, tag in models:
        params = load_params(path)
        cfg = params.cfg
        chosen = [s for s in series_set if (s.frequency == tag if tag else
                                            series_set.info(s.frequency).horizon == cfg.horizon)]
        if not chosen:
            logger.warning(f"{path}: no series with horizon {cfg.horizon}")
            continue
        predicted, stacks = decompose_series([s.train for s in chosen], cfg, params)
        for s, row, stack_rows in zip(chosen, predicted, stacks):
            per_series[s.id].append(row)
            partials[s.id] = stack_rows
    missing = [sid for sid, rows in per_series.items() if not rows]
    if missing:
        raise ValueError(f"no model covers series: {', '.join(missing[:20])}")
    single = {sid: partials[sid] for sid, rows in per_series.items() if len(rows) == 1}
    return ForecastSet({sid: np.median(np.stack(rows), axis=0) for sid, rows in per_series.items()},
                       stacks=single or None)


class EvaluateForecasts(Node):
    def prep(self, shared):
        naive2 = shared.get("naive2_source") or "internal"
        return shared["forecasts"], shared["series_set"], naive2

    def exec(self, prep_res):
        forecasts, series_set, naive2 = prep_res
        if naive2 != "internal":
            if not os.path.exists(naive2):
                raise FileNotFoundError(f"Naive2 baseline file not found: {naive2}")
            naive2 = pd.read_csv(naive2)
            missing = [c for c in ("subset", "smape", "mase") if c not in naive2.columns]
            if missing:
                raise ValueError(f"Naive2 baseline file lacks columns {missing}")
        return evaluate(forecasts, series_set, naive2)

    def post(self, shared, prep_res, exec_res):
        shared["report"] = exec_res


class WriteReport(Node):
    def prep(self, shared):
        return shared["report"], shared["out_dir"], shared.get("metric")

    def exec(self, prep_res):
        report, out_dir, metric = prep_res
        os.makedirs(out_dir, exist_ok=True)
        path = write_report(report, os.path.join(out_dir, "report.csv"))
        metrics = [metric] if metric else ["smape", "mase", "owa"]
        for row in report.subsets.itertuples():
            values = ", ".join(f"{m}={getattr(row, m):.4f}" for m in metrics)
            print(f"{row.subset:>12}: {values}")
        return path

    def post(self, shared, prep_res, exec_res):
        shared["report_path"] = exec_res
        print(f"Report written to {exec_res}")


class LoadMemberModels(Node):
    """Picks one member per frequency from the manifest and loads its weights."""

    def prep(self, shared):
        return shared["out_dir"], shared.get("member", 0), shared["series_set"]

    def exec(self, prep_res):
        out_dir, member, series_set = prep_res
        manifest_path = os.path.join(out_dir, "manifest.csv")
        frame = read_manifest(manifest_path)
        models = {}
        for tag in series_set.present_frequencies():
            rows = frame[(frame["frequency"] == tag) & (frame["member"] == member)]
            if rows.empty:
                raise ValueError(f"{manifest_path} has no member {member} for {tag}")
            row = rows.iloc[0]
            if row["status"] != "ok" or not row["weight_file"]:
                raise ValueError(f"member {member} of {tag} has no usable weights (status {row['status']})")
            params = load_params(os.path.join(out_dir, row["weight_file"]))
            if len(params.cfg.stacks) < 2:
                raise ValueError(f"member {member} of {tag} has a single stack; nothing to decompose")
            models[tag] = params
        return models

    def post(self, shared, prep_res, exec_res):
        shared["models"] = exec_res


class DecomposeSeries(BatchNode):
    def prep(self, shared):
        series_set = shared["series_set"]
        ids = shared["series_ids"]
        chosen = series_set.select(ids)
        return [(s, shared["models"][s.frequency], shared["out_dir"]) for s in chosen]

    def exec(self, item):
        series, params, out_dir = item
        cfg = params.cfg
        forecast, stacks = decompose_series([series.train], cfg, params)
        scale = float(np.max(series.test))
        if not scale > 0:
            raise ValueError(f"series '{series.id}' has no positive actual value to normalize by")
        frame = pd.DataFrame({"t": np.arange(cfg.horizon), "ACTUAL": series.test / scale,
                              "FORECAST": forecast[0] / scale})
        for s, partial in enumerate(stacks[0], start=1):
            frame[f"STACK{s}"] = partial / scale
        path = os.path.join(out_dir, f"decompose_{series.id}.csv")
        frame.to_csv(path, index=False)
        return path

    def post(self, shared, prep_res, exec_res_list):
        shared["decompose_paths"] = exec_res_list
        print(f"Wrote {len(exec_res_list)} decomposition trace(s) to {shared['out_dir']}")


class RunAblation(Node):
    """Trains every setting of one axis on the validation split and scores it."""

    def prep(self, shared):
        return shared["run_config"], shared["datasets"], shared["axis"], shared["workers"], shared["progress"]

    def exec(self, prep_res):
        run, datasets, axis, workers, progress = prep_res
        if axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis '{axis}', expected one of {ABLATION_AXES}")
        counts = Counter()
        held_out = [validation_series_set(d, counts) for d in datasets]
        scored = SeriesSet.merge(held_out)
        rows = []

        if axis == "ensemble_size":
            members = train_datasets(run, held_out, workers, progress=progress, validation=False)
            sweep = ensemble_size_sweep(members, run.ablate_ensemble_size_values, scored)
            for row in sweep.itertuples():
                rows.append({"axis": axis, "setting": str(row.members), "members": row.members,
                             "smape": row.smape, "mase": row.mase, "owa": row.owa})
            return rows

        if axis == "stacks":
            settings = [(str(n), {"preset": GENERIC_PRESET, "stacks": n}) for n in run.ablate_stacks_values]
        elif axis == "basis":
            settings = [(f"{t}:{s}", {"preset": INTERPRETABLE_PRESET, "t_blocks": t, "s_blocks": s})
                        for t, s in run.ablate_basis_values]
        else:
            settings = [(t, {"topology": t}) for t in run.ablate_topology_values]

        pinned = settings[0][1].get("preset") if settings else None
        if pinned and pinned != run.preset:
            logger.info(f"The {axis} axis trains the {pinned} preset (config preset is {run.preset})")

        for label, overrides in settings:
            print(f"Ablation {axis} = {label}")
            members = train_datasets(run, held_out, workers, progress=progress, validation=False, **overrides)
            size = sum(len(m.survivors()) for m in members.values())
            rows.append(_ablation_row(axis, label, size, evaluate(median_forecasts(members), scored)))
        return rows

    def post(self, shared, prep_res, exec_res):
        out_dir = shared["out_dir"]
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"ablation_{shared['axis']}.csv")
        pd.DataFrame(exec_res, columns=["axis", "setting", "members", "smape", "mase", "owa"]).to_csv(path, index=False)
        shared["ablation_path"] = path
        print(f"Ablation table written to {path}")


def _ablation_row(axis, setting, members, report):
    average = report.row(AGGREGATE)
    return {"axis": axis, "setting": setting, "members": members,
            "smape": average["smape"], "mase": average["mase"], "owa": average["owa"]}
