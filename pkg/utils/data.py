"""
Dataset ingestion and the train/validation split.

Canonical on-disk format, one series per row: ``id,v1,v2,...`` with variable
row lengths (trailing empty cells ignored). A separate metadata file lists
``frequency,horizon,periodicity`` per line.
"""
import csv
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from utils.ndcore import Rng

logger = logging.getLogger(__name__)

# Competition conventions: (horizon, periodicity)
M4_FREQUENCIES = {
    "Yearly": (6, 1), "Quarterly": (8, 4), "Monthly": (18, 12),
    "Weekly": (13, 1), "Daily": (14, 1), "Hourly": (48, 24),
}
M3_FREQUENCIES = {"Yearly": (6, 1), "Quarterly": (8, 4), "Monthly": (18, 12), "Other": (8, 1)}
TOURISM_FREQUENCIES = {"Yearly": (4, 1), "Quarterly": (8, 4), "Monthly": (24, 12)}


class DatasetError(ValueError):
    """Raised for malformed dataset or metadata files."""


@dataclass(frozen=True)
class FrequencyInfo:
    horizon: int
    periodicity: int


@dataclass(frozen=True)
class Series:
    id: str
    frequency: str
    train: np.ndarray
    test: np.ndarray


@dataclass
class SeriesSet:
    series: List[Series]
    frequencies: Dict[str, FrequencyInfo]

    def __post_init__(self):
        seen = set()
        for s in self.series:
            if s.id in seen:
                raise DatasetError(f"duplicate series id '{s.id}'")
            seen.add(s.id)
            if s.frequency not in self.frequencies:
                raise DatasetError(f"series '{s.id}' has unknown frequency tag '{s.frequency}'")

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.series]

    def info(self, frequency: str) -> FrequencyInfo:
        return self.frequencies[frequency]

    def present_frequencies(self) -> List[str]:
        """Frequency tags in first-appearance order."""
        return list(dict.fromkeys(s.frequency for s in self.series))

    def subset(self, frequency: str) -> "SeriesSet":
        return SeriesSet([s for s in self.series if s.frequency == frequency],
                         {frequency: self.frequencies[frequency]})

    def select(self, ids: Iterable[str]) -> "SeriesSet":
        by_id = {s.id: s for s in self.series}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DatasetError(f"unknown series ids: {', '.join(missing)}")
        return SeriesSet([by_id[i] for i in ids], dict(self.frequencies))

    @staticmethod
    def merge(sets: Sequence["SeriesSet"]) -> "SeriesSet":
        series, freqs = [], {}
        for part in sets:
            for tag, info in part.frequencies.items():
                if tag in freqs and freqs[tag] != info:
                    raise DatasetError(f"frequency '{tag}' has conflicting metadata {freqs[tag]} vs {info}")
                freqs[tag] = info
            series.extend(part.series)
        return SeriesSet(series, freqs)


@dataclass
class SplitView:
    """
    What the sampler may see. ``visible[i]`` is a view into series i's train
    values; ``validation[i]`` is its hidden validation target or None.
    """
    source: SeriesSet
    visible: List[np.ndarray]
    validation: List[Optional[np.ndarray]] = field(default_factory=list)

    @property
    def has_validation(self) -> bool:
        return any(v is not None for v in self.validation)

    def horizons(self) -> np.ndarray:
        return np.array([self.source.info(s.frequency).horizon for s in self.source])

    def periodicities(self) -> np.ndarray:
        return np.array([self.source.info(s.frequency).periodicity for s in self.source])

    def validation_indices(self) -> List[int]:
        return [i for i, v in enumerate(self.validation) if v is not None]


# --- Reading ---

def read_meta(meta: Union[str, Dict[str, FrequencyInfo]]) -> Dict[str, FrequencyInfo]:
    if isinstance(meta, dict):
        return dict(meta)
    if not os.path.exists(meta):
        raise DatasetError(f"metadata file not found: {meta}")
    freqs = {}
    with open(meta, "r", encoding="utf-8", newline="") as f:
        for row_no, row in enumerate(csv.reader(f), start=1):
            cells = [c.strip() for c in row]
            if not cells or not cells[0] or cells[0].startswith("#"):
                continue
            if row_no == 1 and cells[0].lower() == "frequency":
                continue
            if len(cells) != 3:
                raise DatasetError(f"{meta} row {row_no}: expected 'frequency,horizon,periodicity'")
            try:
                horizon, periodicity = int(cells[1]), int(cells[2])
            except ValueError:
                raise DatasetError(f"{meta} row {row_no}: horizon and periodicity must be integers")
            if horizon < 1 or periodicity < 1:
                raise DatasetError(f"{meta} row {row_no}: horizon and periodicity must be >= 1")
            freqs[cells[0]] = FrequencyInfo(horizon, periodicity)
    if not freqs:
        raise DatasetError(f"metadata file {meta} lists no frequencies")
    return freqs


def _parse_float(cell: str):
    try:
        return float(cell)
    except ValueError:
        return None


def read_series_csv(path: str) -> Dict[str, np.ndarray]:
    """Rows ``id,v1,...``; an all-text first row (e.g. ``V1,V2,...``) is a header and skipped."""
    if not os.path.exists(path):
        raise DatasetError(f"series file not found: {path}")
    rows = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row_no, row in enumerate(csv.reader(f), start=1):
            cells = [c.strip() for c in row]
            while cells and cells[-1] == "":
                cells.pop()
            if not cells:
                continue
            sid, raw = cells[0], cells[1:]
            values = [_parse_float(c) for c in raw]
            if row_no == 1 and raw and all(v is None for v in values):
                continue
            for col, (cell, value) in enumerate(zip(raw, values), start=2):
                if value is None or not np.isfinite(value):
                    raise DatasetError(f"{path} row {row_no} (id '{sid}') column {col}: bad value '{cell}'")
            if sid in rows:
                raise DatasetError(f"{path} row {row_no}: duplicate id '{sid}'")
            rows[sid] = np.array(values, dtype=np.float64)
    return rows


def load_dataset(train_csv: str, test_csv: str, meta: Union[str, Dict[str, FrequencyInfo]],
                 frequency: Optional[str] = None) -> SeriesSet:
    """
    Loads one frequency subset. ``frequency`` may be omitted when the metadata
    lists a single frequency.
    """
    freqs = read_meta(meta)
    if frequency is None:
        if len(freqs) != 1:
            raise DatasetError(f"metadata lists {sorted(freqs)}; name the frequency of {train_csv}")
        frequency = next(iter(freqs))
    if frequency not in freqs:
        raise DatasetError(f"unknown frequency tag '{frequency}' (metadata has {sorted(freqs)})")
    info = freqs[frequency]

    train = read_series_csv(train_csv)
    test = read_series_csv(test_csv)
    only_train = [i for i in train if i not in test]
    only_test = [i for i in test if i not in train]
    if only_train or only_test:
        raise DatasetError(
            f"train/test ids differ: {len(only_train)} only in {train_csv} (e.g. {only_train[:3]}), "
            f"{len(only_test)} only in {test_csv} (e.g. {only_test[:3]})"
        )
    series = []
    for sid, values in train.items():
        if values.size < 1:
            raise DatasetError(f"{train_csv}: series '{sid}' has no train values")
        if test[sid].size != info.horizon:
            raise DatasetError(
                f"{test_csv}: series '{sid}' has {test[sid].size} test values, {frequency} horizon is {info.horizon}"
            )
        series.append(Series(sid, frequency, values, test[sid]))
    logger.info(f"Loaded {len(series)} {frequency} series from {train_csv}")
    return SeriesSet(series, {frequency: info})


def load_datasets(train_csvs: Sequence[str], test_csvs: Sequence[str], meta: str,
                  frequencies: Sequence[Optional[str]]) -> SeriesSet:
    if not (len(train_csvs) == len(test_csvs) == len(frequencies)):
        raise DatasetError("train, test and frequency lists must have equal lengths")
    freqs = read_meta(meta)
    return SeriesSet.merge([load_dataset(tr, te, freqs, fr)
                            for tr, te, fr in zip(train_csvs, test_csvs, frequencies)])


# --- Writing ---

def _write_rows(path: str, rows: Iterable[Sequence]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for row in rows:
            writer.writerow(row)


def write_dataset(series_set: SeriesSet, train_csv: str, test_csv: str, meta_csv: Optional[str] = None) -> None:
    """Writes the canonical format; float repr keeps every value bit-exact on re-read."""
    _write_rows(train_csv, ([s.id] + [repr(float(v)) for v in s.train] for s in series_set))
    _write_rows(test_csv, ([s.id] + [repr(float(v)) for v in s.test] for s in series_set))
    if meta_csv:
        _write_rows(meta_csv, ([tag, info.horizon, info.periodicity]
                               for tag, info in series_set.frequencies.items()))


# --- Splits ---

def split_train_validation(series_set: SeriesSet, counts: Optional[Counter] = None) -> SplitView:
    """
    Holds out the last horizon of each train series as its validation target.
    Series with train length <= H keep their whole train range and get no
    validation target.
    """
    visible, validation = [], []
    excluded = 0
    for s in series_set:
        horizon = series_set.info(s.frequency).horizon
        if s.train.size <= horizon:
            visible.append(s.train)
            validation.append(None)
            excluded += 1
            continue
        visible.append(s.train[: s.train.size - horizon])
        validation.append(s.train[s.train.size - horizon:])
    if excluded:
        if counts is not None:
            counts["validation_excluded"] += excluded
        logger.warning(f"{excluded} series are too short for a validation horizon and are excluded from validation")
    return SplitView(series_set, visible, validation)


def full_train_view(series_set: SeriesSet) -> SplitView:
    """The final-fit view: every train point is visible, nothing is held out."""
    return SplitView(series_set, [s.train for s in series_set], [None] * len(series_set))


def validation_series_set(series_set: SeriesSet, counts: Optional[Counter] = None) -> SeriesSet:
    """
    The validation problem as a SeriesSet of its own: train = sampler-visible
    range, test = validation target. Series without a validation target are
    dropped.
    """
    view = split_train_validation(series_set, counts)
    series = [Series(s.id, s.frequency, visible, target)
              for s, visible, target in zip(series_set, view.visible, view.validation) if target is not None]
    if not series:
        raise DatasetError("no series is long enough to hold out a validation horizon")
    return SeriesSet(series, dict(series_set.frequencies))


# --- Synthetic data ---

def synth_generate(count: int, length: int, H: int, m: int, trend_degree: int, noise_level: float,
                   rng: Rng, amplitude: float = 1.0, frequency: str = "Synthetic") -> SeriesSet:
    """
    Polynomial trend + period-m sinusoid + uniform noise, shifted so the noise
    cannot push a value below 1. The last H points of each series become test.
    """
    if length <= H:
        raise ValueError(f"series length {length} must exceed the horizon {H}")
    t = np.arange(length) / length
    j = np.arange(length)
    series = []
    for i in range(count):
        level = rng.uniform(1.0, 10.0, None)
        coeffs = rng.uniform(-1.0, 1.0, trend_degree)
        trend = level + sum(c * t ** (k + 1) for k, c in enumerate(coeffs))
        phase = rng.uniform(0.0, 2.0 * np.pi, None)
        season = amplitude * np.sin(2.0 * np.pi * j / m + phase) if m > 1 else np.zeros(length)
        noise = rng.uniform(-noise_level, noise_level, length) if noise_level > 0 else np.zeros(length)
        base = trend + season
        shift = max(0.0, -float(base.min())) + noise_level + 1.0
        values = base + shift + noise
        series.append(Series(f"S{i + 1}", frequency, values[: length - H].copy(), values[length - H:].copy()))
    return SeriesSet(series, {frequency: FrequencyInfo(H, m)})
