import numpy as np
import pytest

from utils.data import FrequencyInfo, Series, SeriesSet, synth_generate
from utils.model import preset_generic, preset_interpretable
from utils.ndcore import Rng


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    # keep the training file log out of the working tree
    import utils.train
    monkeypatch.setattr(utils.train, "log_directory", str(tmp_path / "logs"))
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    for handler in utils.train.train_logger.handlers[:]:
        utils.train.train_logger.removeHandler(handler)
        handler.close()
    yield


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def seasonal_set():
    """Twenty noiseless period-4 series with horizon 4."""
    return synth_generate(20, 40, 4, 4, trend_degree=0, noise_level=0.0, rng=Rng(7), frequency="Quarterly")


@pytest.fixture
def noisy_set():
    return synth_generate(30, 48, 6, 1, trend_degree=2, noise_level=0.2, rng=Rng(11), frequency="Yearly")


@pytest.fixture
def tiny_generic():
    return preset_generic(horizon=4, lookback_multiple=2, stacks=2, width=8, fc_layers=2)


@pytest.fixture
def tiny_interpretable():
    return preset_interpretable(horizon=6, lookback_multiple=2, t_width=8, t_blocks=2, t_layers=2,
                                s_width=8, s_blocks=2, s_layers=2)


def make_set(rows, horizon, periodicity=1, frequency="Yearly"):
    """SeriesSet from ``{id: (train, test)}``."""
    series = [Series(sid, frequency, np.asarray(train, dtype=np.float64), np.asarray(test, dtype=np.float64))
              for sid, (train, test) in rows.items()]
    return SeriesSet(series, {frequency: FrequencyInfo(horizon, periodicity)})
