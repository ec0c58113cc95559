from pocketflow import Flow
# Import all node classes from nodes.py
from nodes import (
    LoadRunConfig,
    LoadDatasets,
    TrainEnsembles,
    WriteTrainOutputs,
    LoadForecasts,
    EvaluateForecasts,
    WriteReport,
    LoadMemberModels,
    DecomposeSeries,
    RunAblation,
)
import logging

logger = logging.getLogger(__name__)


def create_train_flow():
    """Trains the configured ensembles, writes their artifacts and scores the median forecast."""

    load_config = LoadRunConfig()
    load_datasets = LoadDatasets()
    train_ensembles = TrainEnsembles()
    write_outputs = WriteTrainOutputs()
    evaluate = EvaluateForecasts()
    write_report = WriteReport()

    load_config >> load_datasets
    load_datasets >> train_ensembles
    train_ensembles >> write_outputs
    write_outputs >> evaluate
    evaluate >> write_report

    return Flow(start=load_config)


def create_evaluate_flow():
    """Scores stored forecasts, model files or a baseline against the test set."""

    load_config = LoadRunConfig()
    load_datasets = LoadDatasets()
    load_forecasts = LoadForecasts()
    evaluate = EvaluateForecasts()
    write_report = WriteReport()

    load_config >> load_datasets
    load_datasets >> load_forecasts
    load_forecasts >> evaluate
    evaluate >> write_report

    return Flow(start=load_config)


def create_decompose_flow():
    load_config = LoadRunConfig()
    load_datasets = LoadDatasets()
    load_models = LoadMemberModels()
    decompose = DecomposeSeries()  # This is a BatchNode

    load_config >> load_datasets
    load_datasets >> load_models
    load_models >> decompose

    return Flow(start=load_config)


def create_ablate_flow():
    load_config = LoadRunConfig()
    load_datasets = LoadDatasets()
    run_ablation = RunAblation()

    load_config >> load_datasets
    load_datasets >> run_ablation

    return Flow(start=load_config)


FLOWS = {
    "train": create_train_flow,
    "evaluate": create_evaluate_flow,
    "decompose": create_decompose_flow,
    "ablate": create_ablate_flow,
}
