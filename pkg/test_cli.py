import io
import logging

import numpy as np
import pandas as pd
import pytest

from main import main
from nodes import forecasts_from_weights, weight_sources
from utils.data import load_dataset, synth_generate, write_dataset
from utils.ensemble import aggregate_median, read_member_forecasts
from utils.ndcore import Rng

TINY_GENERIC = """
Stacks = 2
Width = 8
Block-layers = 2
"""

TINY_INTERPRETABLE = """
preset = interpretable
T-width = 8
T-blocks = 1
T-block-layers = 2
S-width = 8
S-blocks = 1
S-block-layers = 2
"""


@pytest.fixture(autouse=True)
def quiet_cli(monkeypatch):
    monkeypatch.delenv("NBEATS_PROGRESS", raising=False)
    monkeypatch.delenv("NBEATS_WORKERS", raising=False)
    yield
    # main() installs a console handler bound to the captured stream
    for handler in logging.root.handlers[:]:
        logging.root.removeHandler(handler)


@pytest.fixture
def workspace(tmp_path):
    series_set = synth_generate(12, 36, 6, 1, trend_degree=1, noise_level=0.1, rng=Rng(21), frequency="Yearly")
    paths = {name: str(tmp_path / f"{name}.csv") for name in ("train", "test", "meta")}
    write_dataset(series_set, paths["train"], paths["test"], paths["meta"])
    return tmp_path, paths


def _config(workspace, body, name="run.cfg"):
    tmp_path, paths = workspace
    text = (f"train = {paths['train']}\ntest = {paths['test']}\nmeta = {paths['meta']}\n"
            f"out = {tmp_path / 'out'}\nL_H = 10\niterations = 6\nBatch = 16\n"
            f"losses = SMAPE, MASE\nlookbacks = 2\n" + body)
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def _summary(path):
    with open(path, encoding="utf-8") as f:
        return pd.read_csv(io.StringIO(f.read().split("\n\n")[1])).set_index("subset")


def _read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_train_writes_every_artifact_and_is_repeatable(workspace):
    tmp_path, _ = workspace
    config = _config(workspace, TINY_GENERIC)
    out = tmp_path / "out"
    assert main(["train", "--config", config, "--seed", "4"]) == 0
    for name in ("manifest.csv", "forecast.csv", "report.csv", "run.cfg",
                 "member_000_Yearly.nbts", "member_001_Yearly.csv"):
        assert (out / name).exists(), name
    assert "seed = 4" in (out / "run.cfg").read_text(encoding="utf-8")
    manifest = pd.read_csv(out / "manifest.csv")
    assert manifest["status"].tolist() == ["ok", "ok"]

    first = {name: _read_bytes(out / name) for name in ("forecast.csv", "report.csv", "member_000_Yearly.nbts")}
    assert main(["train", "--config", config, "--seed", "4"]) == 0
    for name, content in first.items():
        assert _read_bytes(out / name) == content, name


def test_evaluate_reuses_stored_forecasts_and_weights(workspace):
    tmp_path, _ = workspace
    config = _config(workspace, TINY_GENERIC)
    out = tmp_path / "out"
    assert main(["train", "--config", config]) == 0
    trained = _summary(out / "report.csv")

    assert main(["evaluate", "--config", config]) == 0
    assert _summary(out / "report.csv").loc["Average", "smape"] == pytest.approx(trained.loc["Average", "smape"])

    assert main(["evaluate", "--config", config, "--forecasts", str(out / "manifest.csv")]) == 0
    from_weights = _summary(out / "report.csv")
    assert from_weights.loc["Average", "smape"] == pytest.approx(trained.loc["Average", "smape"], rel=1e-9)


def test_evaluate_pools_generic_and_interpretable_members(workspace):
    tmp_path, paths = workspace
    generic, interpretable = tmp_path / "out_g", tmp_path / "out_i"
    assert main(["train", "--config", _config(workspace, TINY_GENERIC, "g.cfg"), "--out", str(generic)]) == 0
    assert main(["train", "--config", _config(workspace, TINY_INTERPRETABLE, "i.cfg"),
                 "--out", str(interpretable)]) == 0

    pooled_source = f"{generic / 'manifest.csv'},{interpretable / 'manifest.csv'}"
    config = _config(workspace, TINY_GENERIC)
    assert main(["evaluate", "--config", config, "--forecasts", pooled_source]) == 0
    pooled_report = _summary(tmp_path / "out" / "report.csv")

    series_set = load_dataset(paths["train"], paths["test"], paths["meta"])
    pooled = forecasts_from_weights(weight_sources(str(generic / "manifest.csv")) +
                                    weight_sources(str(interpretable / "manifest.csv")), series_set)
    parts = [read_member_forecasts(str(out / "manifest.csv"), "Yearly") for out in (generic, interpretable)]
    members = [f for part in parts for f in part.forecasts]
    assert len(members) == 4
    for sid in series_set.ids:
        np.testing.assert_allclose(pooled.forecasts[sid], np.median([m[sid] for m in members], axis=0), rtol=1e-9)

    for part in parts:
        alone = aggregate_median(part)
        assert not all(np.allclose(pooled.forecasts[sid], alone.forecasts[sid]) for sid in series_set.ids)
    assert pooled.stacks is None
    assert np.isfinite(pooled_report.loc["Average", "smape"])


def test_pooling_rejects_forecast_csvs(workspace, capsys):
    tmp_path, _ = workspace
    config = _config(workspace, TINY_GENERIC)
    assert main(["train", "--config", config]) == 0
    out = tmp_path / "out"
    assert main(["evaluate", "--config", config, "--forecasts", f"{out / 'manifest.csv'},{out / 'forecast.csv'}"]) == 1
    assert "only manifest.csv and .nbts files can be pooled" in capsys.readouterr().err


def test_naive2_scores_owa_one(workspace, capsys):
    config = _config(workspace, TINY_GENERIC)
    assert main(["evaluate", "--config", config, "--forecasts", "naive2", "--metric", "owa"]) == 0
    printed = capsys.readouterr().out
    assert "Yearly: owa=1.0000" in printed
    assert "Average: owa=1.0000" in printed


def test_decompose_writes_stack_traces(workspace):
    tmp_path, _ = workspace
    config = _config(workspace, TINY_INTERPRETABLE)
    assert main(["train", "--config", config]) == 0
    assert main(["decompose", "--config", config, "--series", "S1, S3"]) == 0

    trace = pd.read_csv(tmp_path / "out" / "decompose_S1.csv")
    assert list(trace.columns) == ["t", "ACTUAL", "FORECAST", "STACK1", "STACK2"]
    assert trace["t"].tolist() == list(range(6))
    assert trace["ACTUAL"].max() == 1.0
    np.testing.assert_allclose(trace["STACK1"] + trace["STACK2"], trace["FORECAST"], atol=1e-9)
    assert (tmp_path / "out" / "decompose_S3.csv").exists()


def test_ablate_topology(workspace):
    tmp_path, _ = workspace
    config = _config(workspace, TINY_GENERIC + "ablate.topology = DRESS, PARALLEL\n")
    assert main(["ablate", "--config", config, "--axis", "topology"]) == 0
    table = pd.read_csv(tmp_path / "out" / "ablation_topology.csv")
    assert list(table.columns) == ["axis", "setting", "members", "smape", "mase", "owa"]
    assert table["setting"].tolist() == ["DRESS", "PARALLEL"]
    assert table["members"].tolist() == [2, 2]
    assert np.all(np.isfinite(table["smape"]))


def test_ablate_basis_under_a_generic_config(workspace):
    tmp_path, _ = workspace
    body = TINY_GENERIC + TINY_INTERPRETABLE.replace("preset = interpretable\n", "") + "ablate.basis = 1:1, 2:0\n"
    config = _config(workspace, body)
    assert main(["ablate", "--config", config, "--axis", "basis"]) == 0
    table = pd.read_csv(tmp_path / "out" / "ablation_basis.csv")
    assert table["setting"].tolist() == ["1:1", "2:0"]
    assert np.all(np.isfinite(table["smape"]))
    assert table["smape"].iloc[0] != pytest.approx(table["smape"].iloc[1], rel=1e-9)


def test_ablate_stacks_under_an_interpretable_config(workspace):
    tmp_path, _ = workspace
    config = _config(workspace, TINY_INTERPRETABLE + TINY_GENERIC + "ablate.stacks = 1, 3\n")
    assert main(["ablate", "--config", config, "--axis", "stacks"]) == 0
    table = pd.read_csv(tmp_path / "out" / "ablation_stacks.csv")
    assert table["setting"].tolist() == [1, 3]
    assert np.all(np.isfinite(table["smape"]))
    assert table["smape"].iloc[0] != pytest.approx(table["smape"].iloc[1], rel=1e-9)


def test_unknown_config_key_fails(workspace, capsys):
    config = _config(workspace, "Stakcs = 2\n")
    assert main(["train", "--config", config]) == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_axis_fails(workspace, capsys):
    config = _config(workspace, TINY_GENERIC)
    assert main(["ablate", "--config", config, "--axis", "dropout"]) == 1
    assert "unknown ablation axis" in capsys.readouterr().err


def test_unknown_series_fails(workspace, capsys):
    config = _config(workspace, TINY_INTERPRETABLE)
    assert main(["train", "--config", config]) == 0
    assert main(["decompose", "--config", config, "--series", "S999"]) == 1
    assert "S999" in capsys.readouterr().err


def test_missing_config_fails(tmp_path, capsys):
    assert main(["evaluate", "--config", str(tmp_path / "absent.cfg")]) == 1
    assert "not found" in capsys.readouterr().err
