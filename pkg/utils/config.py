"""
Flat ``key = value`` run configuration.

Model and training keys use the printed hyperparameter names (``L_H``,
``S-width``, ``Block-layers``, ...); the remaining keys wire datasets,
ensembles, ablations and outputs. ``#`` starts a comment.
"""
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

from utils.losses import LOSSES, MAPE, MASE, SMAPE
from utils.model import (
    DRESS,
    GENERIC,
    SEASONALITY,
    TOPOLOGIES,
    TREND,
    ModelConfig,
    StackConfig,
    make_block_config,
    preset_generic,
    preset_interpretable,
)

logger = logging.getLogger(__name__)

GENERIC_PRESET = "generic"
INTERPRETABLE_PRESET = "interpretable"
CUSTOM_PRESET = "custom"
PRESETS = (GENERIC_PRESET, INTERPRETABLE_PRESET, CUSTOM_PRESET)

ALL_LOSSES = [SMAPE, MAPE, MASE]

# subset -> preset -> (L_H, iterations)
SUBSET_SETTINGS: Dict[str, Dict[str, Tuple[float, int]]] = {
    "M4.Yearly": {INTERPRETABLE_PRESET: (1.5, 15000), GENERIC_PRESET: (1.5, 15000)},
    "M4.Quarterly": {INTERPRETABLE_PRESET: (1.5, 15000), GENERIC_PRESET: (1.5, 15000)},
    "M4.Monthly": {INTERPRETABLE_PRESET: (1.5, 15000), GENERIC_PRESET: (1.5, 15000)},
    "M4.Weekly": {INTERPRETABLE_PRESET: (10, 5000), GENERIC_PRESET: (10, 5000)},
    "M4.Daily": {INTERPRETABLE_PRESET: (10, 5000), GENERIC_PRESET: (10, 5000)},
    "M4.Hourly": {INTERPRETABLE_PRESET: (10, 5000), GENERIC_PRESET: (10, 5000)},
    "M3.Yearly": {INTERPRETABLE_PRESET: (20, 50), GENERIC_PRESET: (20, 20)},
    "M3.Quarterly": {INTERPRETABLE_PRESET: (5, 6000), GENERIC_PRESET: (20, 250)},
    "M3.Monthly": {INTERPRETABLE_PRESET: (5, 6000), GENERIC_PRESET: (20, 10000)},
    "M3.Other": {INTERPRETABLE_PRESET: (20, 250), GENERIC_PRESET: (10, 250)},
    "TOURISM.Yearly": {INTERPRETABLE_PRESET: (20, 30), GENERIC_PRESET: (5, 30)},
    "TOURISM.Quarterly": {INTERPRETABLE_PRESET: (10, 500), GENERIC_PRESET: (10, 100)},
    "TOURISM.Monthly": {INTERPRETABLE_PRESET: (20, 300), GENERIC_PRESET: (20, 100)},
}
SUBSET_LOSSES = {"M4": ALL_LOSSES, "M3": ALL_LOSSES, "TOURISM": [MAPE]}

DEFAULT_ABLATE_STACKS = [1, 3, 9, 18, 30]
DEFAULT_ABLATE_BASIS = [(0, 2), (2, 0), (1, 1), (3, 3)]
DEFAULT_ABLATE_ENSEMBLE_SIZE = [1, 6, 18]

SHARING_WORDS = {"STACK LEVEL": True, "YES": True, "TRUE": True, "1": True,
                 "NO": False, "FALSE": False, "0": False}


class ConfigError(ValueError):
    """Raised for unknown keys or unparsable values in a run config."""


def _split(value: str) -> List[str]:
    return [part.strip() for part in value.split(",") if part.strip() != ""] if value.strip() else []


def _split_aligned(value: str) -> List[str]:
    """Comma list that keeps empty entries, for lists aligned with ``train``."""
    return [part.strip() for part in value.split(",")] if value.strip() else []


def _bool(value: str) -> bool:
    word = value.strip().upper()
    if word not in SHARING_WORDS:
        raise ValueError(f"expected a yes/no value, got '{value}'")
    return SHARING_WORDS[word]


def _pairs(value: str) -> List[Tuple[int, int]]:
    pairs = []
    for item in _split(value):
        left, sep, right = item.partition(":")
        if not sep:
            raise ValueError(f"expected 'trend_blocks:seasonality_blocks', got '{item}'")
        pairs.append((int(left), int(right)))
    return pairs


@dataclass(frozen=True)
class StackEntry:
    """One entry of ``stack_spec``: ``kind:width:layers:blocks[:degree]``."""
    kind: str
    width: int
    layers: int
    blocks: int
    degree: int = 0

    @classmethod
    def parse(cls, text: str) -> "StackEntry":
        parts = text.split(":")
        if len(parts) not in (4, 5):
            raise ValueError(f"stack entry '{text}' must be kind:width:layers:blocks[:degree]")
        kind = parts[0].strip().lower()
        if kind not in (GENERIC, TREND, SEASONALITY):
            raise ValueError(f"unknown stack kind '{kind}'")
        numbers = [int(p) for p in parts[1:]]
        return cls(kind, *numbers)

    def format(self) -> str:
        base = f"{self.kind}:{self.width}:{self.layers}:{self.blocks}"
        return base + (f":{self.degree}" if self.kind == TREND else "")


# key, attribute, parser, formatter
_SPEC = [
    ("train", "train", _split, ", ".join),
    ("test", "test", _split, ", ".join),
    ("meta", "meta", _split, ", ".join),
    ("frequency", "frequency", _split_aligned, ", ".join),
    ("subset", "subset", _split_aligned, ", ".join),
    ("preset", "preset", str.strip, str),
    ("stack_spec", "stack_spec", lambda v: [StackEntry.parse(x) for x in _split(v)],
     lambda v: ", ".join(e.format() for e in v)),
    ("topology", "topology", lambda v: v.strip().upper().replace("-", "_"), str),
    ("L_H", "l_h", float, repr),
    ("iterations", "iterations", int, str),
    ("losses", "losses", lambda v: [x.upper() for x in _split(v)], ", ".join),
    ("lookbacks", "lookbacks", lambda v: [int(x.rstrip("Hh")) for x in _split(v)], lambda v: ", ".join(map(str, v))),
    ("repeats", "repeats", int, str),
    ("Batch", "batch", int, str),
    ("S-width", "s_width", int, str),
    ("S-blocks", "s_blocks", int, str),
    ("S-block-layers", "s_block_layers", int, str),
    ("T-width", "t_width", int, str),
    ("T-degree", "t_degree", int, str),
    ("T-blocks", "t_blocks", int, str),
    ("T-block-layers", "t_block_layers", int, str),
    ("Width", "width", int, str),
    ("Blocks", "blocks", int, str),
    ("Block-layers", "block_layers", int, str),
    ("Stacks", "stacks", int, str),
    ("Sharing", "sharing", _bool, lambda v: "STACK LEVEL" if v else "NO"),
    ("theta_dim", "theta_dim", int, str),
    ("seed", "seed", int, str),
    ("out", "out", str.strip, str),
    ("patience", "patience", int, str),
    ("eval_every", "eval_every", int, str),
    ("validation", "validation", _bool, lambda v: "yes" if v else "no"),
    ("ablate.stacks", "ablate_stacks", lambda v: [int(x) for x in _split(v)], lambda v: ", ".join(map(str, v))),
    ("ablate.basis", "ablate_basis", _pairs, lambda v: ", ".join(f"{a}:{b}" for a, b in v)),
    ("ablate.topology", "ablate_topology", lambda v: [x.upper().replace("-", "_") for x in _split(v)], ", ".join),
    ("ablate.ensemble_size", "ablate_ensemble_size", lambda v: [int(x) for x in _split(v)],
     lambda v: ", ".join(map(str, v))),
]
KEYS = {key: (attr, parse, fmt) for key, attr, parse, fmt in _SPEC}


@dataclass
class RunConfig:
    train: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    meta: List[str] = field(default_factory=list)
    frequency: List[str] = field(default_factory=list)
    subset: List[str] = field(default_factory=list)
    preset: str = GENERIC_PRESET
    stack_spec: List[StackEntry] = field(default_factory=list)
    topology: str = DRESS
    l_h: Optional[float] = None
    iterations: Optional[int] = None
    losses: Optional[List[str]] = None
    lookbacks: List[int] = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    repeats: int = 1
    batch: int = 1024
    s_width: int = 2048
    s_blocks: int = 3
    s_block_layers: int = 4
    t_width: int = 256
    t_degree: int = 2
    t_blocks: int = 3
    t_block_layers: int = 4
    width: int = 512
    blocks: int = 1
    block_layers: int = 4
    stacks: int = 30
    sharing: Optional[bool] = None
    theta_dim: int = 0
    seed: int = 0
    out: str = "output"
    patience: int = 5
    eval_every: int = 0
    validation: bool = False
    ablate_stacks: Optional[List[int]] = None
    ablate_basis: Optional[List[Tuple[int, int]]] = None
    ablate_topology: Optional[List[str]] = None
    ablate_ensemble_size: Optional[List[int]] = None

    # --- Resolved settings ---

    @property
    def share_weights(self) -> bool:
        return self.shares_weights(self.preset)

    def shares_weights(self, preset: str) -> bool:
        if self.sharing is not None:
            return self.sharing
        return preset == INTERPRETABLE_PRESET

    def subset_for(self, index: int) -> Optional[str]:
        if index < len(self.subset) and self.subset[index]:
            return self.subset[index]
        return None

    def frequency_for(self, index: int) -> Optional[str]:
        if index < len(self.frequency) and self.frequency[index]:
            return self.frequency[index]
        subset = self.subset_for(index)
        return subset.split(".", 1)[1] if subset and "." in subset else None

    def meta_for(self, index: int) -> str:
        if len(self.meta) == 1:
            return self.meta[0]
        return self.meta[index]

    def training_settings(self, index: int, preset: Optional[str] = None) -> Tuple[float, int, List[str]]:
        """
        (L_H, iterations, losses) for the index-th dataset: explicit keys win
        over the subset column of ``preset`` (default: the configured preset).
        """
        preset = preset or self.preset
        subset = self.subset_for(index)
        table = SUBSET_SETTINGS.get(subset, {}).get(
            INTERPRETABLE_PRESET if preset == INTERPRETABLE_PRESET else GENERIC_PRESET)
        l_h = self.l_h if self.l_h is not None else (table[0] if table else None)
        iterations = self.iterations if self.iterations is not None else (table[1] if table else None)
        if l_h is None or iterations is None:
            raise ConfigError(f"dataset #{index + 1}: set L_H and iterations or name a known subset "
                              f"(one of {', '.join(SUBSET_SETTINGS)})")
        losses = self.losses
        if losses is None:
            losses = SUBSET_LOSSES.get(subset.split(".")[0], ALL_LOSSES) if subset else ALL_LOSSES
        return float(l_h), int(iterations), list(losses)

    @property
    def ablate_stacks_values(self) -> List[int]:
        return self.ablate_stacks or DEFAULT_ABLATE_STACKS

    @property
    def ablate_basis_values(self) -> List[Tuple[int, int]]:
        return self.ablate_basis or DEFAULT_ABLATE_BASIS

    @property
    def ablate_topology_values(self) -> List[str]:
        return self.ablate_topology or list(TOPOLOGIES)

    @property
    def ablate_ensemble_size_values(self) -> List[int]:
        return self.ablate_ensemble_size or DEFAULT_ABLATE_ENSEMBLE_SIZE

    # --- Model ---

    def model_config(self, horizon: int, lookback_multiple: int, **overrides) -> ModelConfig:
        """
        Builds the architecture for one horizon. ``overrides`` replace preset
        fields for ablations: ``preset`` switches the builder, ``topology``
        applies to every builder, ``stacks`` to generic and ``t_blocks`` /
        ``s_blocks`` to interpretable. Any other leftover is a ConfigError.
        """
        overrides = dict(overrides)
        preset = overrides.pop("preset", self.preset)
        topology = overrides.pop("topology", self.topology)
        share = self.shares_weights(preset)
        if preset == GENERIC_PRESET:
            model = preset_generic(
                horizon, lookback_multiple,
                stacks=overrides.pop("stacks", self.stacks), blocks=self.blocks, width=self.width,
                fc_layers=self.block_layers, share_weights=share,
                topology=topology, theta_dim=self.theta_dim,
            )
        elif preset == INTERPRETABLE_PRESET:
            model = preset_interpretable(
                horizon, lookback_multiple,
                t_width=self.t_width, t_degree=self.t_degree,
                t_blocks=overrides.pop("t_blocks", self.t_blocks), t_layers=self.t_block_layers,
                s_width=self.s_width, s_blocks=overrides.pop("s_blocks", self.s_blocks),
                s_layers=self.s_block_layers, share_weights=share, topology=topology,
            )
        elif preset == CUSTOM_PRESET:
            backcast_len = lookback_multiple * horizon
            stacks = tuple(
                StackConfig(e.blocks, make_block_config(e.kind, e.width, e.layers, backcast_len, horizon,
                                                        degree=e.degree, theta_dim=self.theta_dim),
                            share)
                for e in self.stack_spec
            )
            model = ModelConfig(stacks, topology, lookback_multiple, horizon)
        else:
            raise ConfigError(f"preset must be one of {PRESETS}, got '{preset}'")
        if overrides:
            raise ConfigError(f"preset '{preset}' does not take the override(s) {sorted(overrides)}")
        return model

    # --- Validation ---

    def check(self, need_data: bool = True) -> "RunConfig":
        problems = []
        if self.preset not in PRESETS:
            problems.append(f"preset must be one of {PRESETS}, got '{self.preset}'")
        if self.preset == CUSTOM_PRESET and not self.stack_spec:
            problems.append("preset 'custom' needs a stack_spec")
        if self.topology not in TOPOLOGIES:
            problems.append(f"topology must be one of {TOPOLOGIES}, got '{self.topology}'")
        bad_losses = [x for x in (self.losses or []) if x not in LOSSES]
        if bad_losses:
            problems.append(f"unknown losses {bad_losses}")
        bad_topologies = [x for x in (self.ablate_topology or []) if x not in TOPOLOGIES]
        if bad_topologies:
            problems.append(f"unknown ablation topologies {bad_topologies}")
        if any(not 2 <= k <= 7 for k in self.lookbacks) or not self.lookbacks:
            problems.append(f"lookbacks must be a non-empty list within 2..7, got {self.lookbacks}")
        unknown_subsets = [s for s in self.subset if s and s not in SUBSET_SETTINGS]
        if unknown_subsets:
            problems.append(f"unknown subsets {unknown_subsets}")
        if need_data:
            if not self.train or len(self.train) != len(self.test):
                problems.append("train and test must list the same number of files")
            if not self.meta or len(self.meta) not in (1, len(self.train)):
                problems.append("meta must name one file or one per train file")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    values, unknown, seen = {}, [], set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source} line {line_no}: expected 'key = value', got '{raw.strip()}'")
        if key not in KEYS:
            unknown.append(key)
            continue
        if key in seen:
            raise ConfigError(f"{source} line {line_no}: '{key}' is set twice")
        seen.add(key)
        attr, parse, _ = KEYS[key]
        try:
            values[attr] = parse(value)
        except ValueError as e:
            raise ConfigError(f"{source} line {line_no}: bad value for '{key}': {e}") from e
    if unknown:
        raise ConfigError(f"{source}: unknown keys: {', '.join(unknown)}")
    return RunConfig(**values)


def load_run_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        cfg = parse_run_config(f.read(), path)
    logger.debug(f"Loaded run config from {path}")
    return cfg


def serialize_run_config(cfg: RunConfig) -> str:
    """Every set field as ``key = value``; unset optional fields are omitted."""
    by_attr = {attr: (key, fmt) for key, (attr, _, fmt) in KEYS.items()}
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        key, fmt = by_attr[f.name]
        lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"
