from collections import Counter

import numpy as np
import pytest

from conftest import make_set
from utils.data import (
    M3_FREQUENCIES,
    DatasetError,
    FrequencyInfo,
    SeriesSet,
    full_train_view,
    load_dataset,
    load_datasets,
    read_meta,
    read_series_csv,
    split_train_validation,
    synth_generate,
    validation_series_set,
    write_dataset,
)
from utils.ndcore import Rng


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture
def files(tmp_path):
    meta = _write(tmp_path / "meta.csv", "frequency,horizon,periodicity\nYearly,2,1\nQuarterly,4,4\n")
    train = _write(tmp_path / "train.csv", "V1,V2,V3,V4\nY1,1,2,3,\nY2,4,5,6,7\n")
    test = _write(tmp_path / "test.csv", "Y1,4,5\nY2,8,9\n")
    return train, test, meta


def test_read_meta(files):
    freqs = read_meta(files[2])
    assert freqs == {"Yearly": FrequencyInfo(2, 1), "Quarterly": FrequencyInfo(4, 4)}


def test_read_meta_reports_bad_rows(tmp_path):
    path = _write(tmp_path / "meta.csv", "Yearly,6,1\nMonthly,x,12\n")
    with pytest.raises(DatasetError, match="row 2"):
        read_meta(path)


def test_missing_meta_file_names_the_path(tmp_path, files):
    missing = str(tmp_path / "nope.csv")
    with pytest.raises(DatasetError, match="nope.csv"):
        load_dataset(files[0], files[1], missing, "Yearly")


def test_read_series_csv_variable_lengths_and_header(files):
    rows = read_series_csv(files[0])
    assert list(rows) == ["Y1", "Y2"]
    np.testing.assert_array_equal(rows["Y1"], [1, 2, 3])
    np.testing.assert_array_equal(rows["Y2"], [4, 5, 6, 7])


def test_bad_value_names_row_column_and_id(tmp_path):
    path = _write(tmp_path / "train.csv", "A,1,2\nB,3,oops\n")
    with pytest.raises(DatasetError, match=r"row 2 \(id 'B'\) column 3"):
        read_series_csv(path)


def test_load_dataset(files):
    series_set = load_dataset(*files, frequency="Yearly")
    assert series_set.ids == ["Y1", "Y2"]
    assert series_set.info("Yearly").horizon == 2
    np.testing.assert_array_equal(list(series_set)[0].test, [4, 5])


def test_load_dataset_needs_a_frequency_when_meta_lists_several(files):
    with pytest.raises(DatasetError, match="name the frequency"):
        load_dataset(*files)


def test_test_length_must_equal_horizon(files):
    with pytest.raises(DatasetError, match="horizon is 4"):
        load_dataset(*files, frequency="Quarterly")


def test_id_mismatch(tmp_path, files):
    test = _write(tmp_path / "other.csv", "Y1,4,5\nY3,8,9\n")
    with pytest.raises(DatasetError, match="ids differ"):
        load_dataset(files[0], test, files[2], "Yearly")


def test_load_datasets_merges_frequencies(tmp_path, files):
    q_train = _write(tmp_path / "q_train.csv", "Q1,1,2,3,4,5,6,7,8\n")
    q_test = _write(tmp_path / "q_test.csv", "Q1,9,10,11,12\n")
    merged = load_datasets([files[0], q_train], [files[1], q_test], files[2], ["Yearly", "Quarterly"])
    assert merged.present_frequencies() == ["Yearly", "Quarterly"]
    assert len(merged.subset("Quarterly")) == 1


def test_series_set_rejects_duplicates_and_unknown_tags():
    a = make_set({"a": ([1.0], [1.0])}, horizon=1)
    with pytest.raises(DatasetError, match="duplicate"):
        SeriesSet.merge([a, a])
    with pytest.raises(DatasetError, match="unknown frequency"):
        SeriesSet(list(a), {"Monthly": FrequencyInfo(18, 12)})


def test_select_unknown_id(noisy_set):
    assert noisy_set.select(["S2", "S1"]).ids == ["S2", "S1"]
    with pytest.raises(DatasetError, match="nope"):
        noisy_set.select(["S1", "nope"])


def test_write_dataset_round_trip_is_bit_exact(tmp_path, noisy_set):
    paths = [str(tmp_path / n) for n in ("train.csv", "test.csv", "meta.csv")]
    write_dataset(noisy_set, *paths)
    loaded = load_dataset(*paths)
    assert loaded.ids == noisy_set.ids
    for original, read in zip(noisy_set, loaded):
        np.testing.assert_array_equal(original.train, read.train)
        np.testing.assert_array_equal(original.test, read.test)
    assert loaded.frequencies == noisy_set.frequencies


def test_split_hides_the_last_horizon():
    series_set = make_set({"long": (np.arange(10.0), [0.0] * 3), "short": ([1.0, 2.0], [0.0] * 3)}, horizon=3)
    counts = Counter()
    view = split_train_validation(series_set, counts)
    np.testing.assert_array_equal(view.visible[0], np.arange(7.0))
    np.testing.assert_array_equal(view.validation[0], [7.0, 8.0, 9.0])
    assert view.validation[1] is None
    np.testing.assert_array_equal(view.visible[1], [1.0, 2.0])
    assert counts["validation_excluded"] == 1
    assert view.validation_indices() == [0]


def test_full_train_view_has_no_validation(noisy_set):
    view = full_train_view(noisy_set)
    assert not view.has_validation
    assert all(v.size == s.train.size for v, s in zip(view.visible, noisy_set))


def test_validation_series_set_moves_the_target_into_test(noisy_set):
    held_out = validation_series_set(noisy_set)
    first, original = list(held_out)[0], list(noisy_set)[0]
    np.testing.assert_array_equal(first.test, original.train[-6:])
    np.testing.assert_array_equal(first.train, original.train[:-6])


def test_synthetic_series_are_positive_and_seeded():
    a = synth_generate(50, 30, 6, 12, trend_degree=2, noise_level=0.5, rng=Rng(4), amplitude=3.0)
    b = synth_generate(50, 30, 6, 12, trend_degree=2, noise_level=0.5, rng=Rng(4), amplitude=3.0)
    assert all(np.array_equal(x.train, y.train) for x, y in zip(a, b))
    assert min(float(np.concatenate([s.train, s.test]).min()) for s in a) >= 1.0
    assert all(s.test.size == 6 and s.train.size == 24 for s in a)


def test_competition_presets():
    assert M3_FREQUENCIES["Monthly"] == (18, 12)
    assert M3_FREQUENCIES["Other"] == (8, 1)
