import os

import numpy as np
import pytest

from utils.model import init_params, preset_generic
from utils.ndcore import Rng
from utils.weights import WeightFileError, load_params, read_config, save_params


def test_save_and_load_are_bit_exact(tmp_path, tiny_interpretable):
    params = init_params(tiny_interpretable, Rng(3))
    path = save_params(params, str(tmp_path / "model.nbts"))
    loaded = load_params(path)
    assert loaded.cfg == tiny_interpretable
    assert loaded.equals(params)
    assert read_config(path) == tiny_interpretable


def test_identical_params_give_identical_bytes(tmp_path, tiny_generic):
    a = save_params(init_params(tiny_generic, Rng(1)), str(tmp_path / "a.nbts"))
    b = save_params(init_params(tiny_generic, Rng(1)), str(tmp_path / "b.nbts"))
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()


def test_truncated_file_names_the_tensor(tmp_path, tiny_generic):
    path = save_params(init_params(tiny_generic, Rng(0)), str(tmp_path / "m.nbts"))
    size = os.path.getsize(path)
    with open(path, "r+b") as f:
        f.truncate(size - 16)
    with pytest.raises(WeightFileError, match="truncated while reading data of tensor"):
        load_params(path)


def test_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "bad.nbts"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(WeightFileError, match="not a weight file"):
        load_params(str(path))


def test_expected_config_mismatch(tmp_path, tiny_generic):
    path = save_params(init_params(tiny_generic, Rng(0)), str(tmp_path / "m.nbts"))
    other = preset_generic(horizon=4, lookback_multiple=2, stacks=3, width=8, fc_layers=2)
    with pytest.raises(WeightFileError, match="different model config"):
        load_params(path, expected=other)


def test_trailing_bytes_are_rejected(tmp_path, tiny_generic):
    path = save_params(init_params(tiny_generic, Rng(0)), str(tmp_path / "m.nbts"))
    with open(path, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(WeightFileError, match="trailing"):
        load_params(path)


def test_loaded_tensors_are_writable(tmp_path, tiny_generic):
    path = save_params(init_params(tiny_generic, Rng(0)), str(tmp_path / "m.nbts"))
    loaded = load_params(path)
    loaded["stack0.block0.fc0.b"][0] = 1.0
    assert np.all(np.isfinite(loaded["stack0.block0.fc0.W"]))
