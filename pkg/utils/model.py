"""
N-BEATS architecture: basis constructors, the basic block, doubly residual
stacking and its ablation topologies, parameter layout and initialization.

All activations are batched: a model input is an array of shape (B, L) where
L = lookback_multiple * horizon, and every trace entry keeps that leading
batch axis. A single 1-D input is treated as a batch of one.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.ndcore import (
    ShapeError,
    Rng,
    affine_backward,
    affine_forward,
    relu,
    relu_backward,
)

logger = logging.getLogger(__name__)

GENERIC = "generic"
TREND = "trend"
SEASONALITY = "seasonality"
BASIS_KINDS = (GENERIC, TREND, SEASONALITY)

DRESS = "DRESS"
PARALLEL = "PARALLEL"
NO_RESIDUAL = "NO_RESIDUAL"
LAST_FORWARD = "LAST_FORWARD"
NO_RESIDUAL_LAST_FORWARD = "NO_RESIDUAL_LAST_FORWARD"
RESIDUAL_INPUT = "RESIDUAL_INPUT"
TOPOLOGIES = (DRESS, PARALLEL, NO_RESIDUAL, LAST_FORWARD, NO_RESIDUAL_LAST_FORWARD, RESIDUAL_INPUT)

# topologies whose model forecast comes from the last block alone
_LAST_ONLY = (LAST_FORWARD, NO_RESIDUAL_LAST_FORWARD)


def fourier_harmonics(length: int) -> int:
    return int(np.floor(length / 2 - 1))


@dataclass(frozen=True)
class BasisSpec:
    kind: str
    backcast_len: int
    forecast_len: int
    degree: int = 0

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ValueError(f"unknown basis kind '{self.kind}', expected one of {BASIS_KINDS}")
        if self.backcast_len < 1 or self.forecast_len < 1:
            raise ValueError(
                f"basis lengths must be >= 1, got backcast {self.backcast_len}, forecast {self.forecast_len}"
            )
        if self.kind == TREND and self.degree < 0:
            raise ValueError(f"trend degree must be >= 0, got {self.degree}")
        if self.kind == SEASONALITY and (self.forecast_len < 2 or self.backcast_len < 2):
            raise ValueError(f"seasonality basis needs lengths >= 2, got {self.backcast_len}/{self.forecast_len}")

    @property
    def natural_theta_dims(self) -> Tuple[int, int]:
        """(theta_b_dim, theta_f_dim) implied by a fixed basis."""
        if self.kind == TREND:
            return self.degree + 1, self.degree + 1
        if self.kind == SEASONALITY:
            return (
                2 * fourier_harmonics(self.backcast_len) + 1,
                2 * fourier_harmonics(self.forecast_len) + 1,
            )
        return self.backcast_len, self.forecast_len


@dataclass(frozen=True)
class BlockConfig:
    width: int
    fc_layers: int
    basis: BasisSpec
    theta_f_dim: int
    theta_b_dim: int

    def __post_init__(self):
        if self.fc_layers < 1:
            raise ValueError(f"fc_layers must be >= 1, got {self.fc_layers}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.basis.kind != GENERIC:
            expected = self.basis.natural_theta_dims
            if (self.theta_b_dim, self.theta_f_dim) != expected:
                raise ValueError(
                    f"{self.basis.kind} basis requires theta dims (b, f) = {expected}, "
                    f"got ({self.theta_b_dim}, {self.theta_f_dim})"
                )
        elif self.theta_f_dim < 1 or self.theta_b_dim < 1:
            raise ValueError("generic theta dims must be >= 1")


@dataclass(frozen=True)
class StackConfig:
    blocks: int
    block: BlockConfig
    share_weights: bool = False

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError(f"a stack needs at least one block, got {self.blocks}")

    @property
    def physical_blocks(self) -> int:
        return 1 if self.share_weights else self.blocks


@dataclass(frozen=True)
class ModelConfig:
    stacks: Tuple[StackConfig, ...]
    topology: str
    lookback_multiple: int
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "stacks", tuple(self.stacks))
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology '{self.topology}', expected one of {TOPOLOGIES}")
        if not 2 <= self.lookback_multiple <= 7:
            raise ValueError(f"lookback_multiple must be in 2..7, got {self.lookback_multiple}")
        if not self.stacks:
            raise ValueError("a model needs at least one stack")
        for s, stack in enumerate(self.stacks):
            basis = stack.block.basis
            if basis.backcast_len != self.input_len or basis.forecast_len != self.horizon:
                raise ValueError(
                    f"stack {s} basis lengths ({basis.backcast_len}, {basis.forecast_len}) "
                    f"do not match model ({self.input_len}, {self.horizon})"
                )

    @property
    def input_len(self) -> int:
        return self.lookback_multiple * self.horizon

    @property
    def block_count(self) -> int:
        return sum(stack.blocks for stack in self.stacks)

    def with_topology(self, topology: str) -> "ModelConfig":
        return ModelConfig(self.stacks, topology, self.lookback_multiple, self.horizon)

    def with_lookback(self, lookback_multiple: int) -> "ModelConfig":
        """Same architecture on a different input window; natural θ sizes follow the new window."""
        backcast_len = lookback_multiple * self.horizon
        stacks = []
        for stack in self.stacks:
            block = stack.block
            theta_dim = 0
            if block.basis.kind == GENERIC and (block.theta_b_dim, block.theta_f_dim) != block.basis.natural_theta_dims:
                if block.theta_b_dim != block.theta_f_dim:
                    raise ValueError("cannot carry unequal explicit generic theta sizes to a new lookback")
                theta_dim = block.theta_f_dim
            rebuilt = make_block_config(block.basis.kind, block.width, block.fc_layers, backcast_len,
                                        self.horizon, degree=block.basis.degree, theta_dim=theta_dim)
            stacks.append(StackConfig(stack.blocks, rebuilt, stack.share_weights))
        return ModelConfig(tuple(stacks), self.topology, lookback_multiple, self.horizon)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        stacks = []
        for stack in data["stacks"]:
            block = dict(stack["block"])
            block["basis"] = BasisSpec(**block["basis"])
            stacks.append(StackConfig(blocks=stack["blocks"], block=BlockConfig(**block),
                                      share_weights=stack["share_weights"]))
        return cls(tuple(stacks), data["topology"], data["lookback_multiple"], data["horizon"])

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def make_block_config(kind: str, width: int, fc_layers: int, backcast_len: int, horizon: int,
                      degree: int = 0, theta_dim: int = 0) -> BlockConfig:
    """Builds a block with the natural theta sizes for its basis (or ``theta_dim`` for generic)."""
    basis = BasisSpec(kind, backcast_len, horizon, degree)
    theta_b, theta_f = basis.natural_theta_dims
    if kind == GENERIC and theta_dim > 0:
        theta_b = theta_f = theta_dim
    return BlockConfig(width, fc_layers, basis, theta_f_dim=theta_f, theta_b_dim=theta_b)


def preset_generic(horizon: int, lookback_multiple: int, stacks: int = 30, blocks: int = 1,
                   width: int = 512, fc_layers: int = 4, share_weights: bool = False,
                   topology: str = DRESS, theta_dim: int = 0) -> ModelConfig:
    backcast_len = lookback_multiple * horizon
    block = make_block_config(GENERIC, width, fc_layers, backcast_len, horizon, theta_dim=theta_dim)
    stack = StackConfig(blocks, block, share_weights)
    return ModelConfig(tuple([stack] * stacks), topology, lookback_multiple, horizon)


def preset_interpretable(horizon: int, lookback_multiple: int,
                         t_width: int = 256, t_degree: int = 2, t_blocks: int = 3, t_layers: int = 4,
                         s_width: int = 2048, s_blocks: int = 3, s_layers: int = 4,
                         share_weights: bool = True, topology: str = DRESS) -> ModelConfig:
    """Trend stack followed by seasonality stack; a stack with zero blocks is left out."""
    backcast_len = lookback_multiple * horizon
    stacks = []
    if t_blocks > 0:
        trend = make_block_config(TREND, t_width, t_layers, backcast_len, horizon, degree=t_degree)
        stacks.append(StackConfig(t_blocks, trend, share_weights))
    if s_blocks > 0:
        season = make_block_config(SEASONALITY, s_width, s_layers, backcast_len, horizon)
        stacks.append(StackConfig(s_blocks, season, share_weights))
    return ModelConfig(tuple(stacks), topology, lookback_multiple, horizon)


# --- Basis constructors ---

def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=None)
def make_trend_basis(backcast_len: int, H: int, p: int) -> Tuple[np.ndarray, np.ndarray]:
    """Polynomial bases: row i of the forecast matrix is [1, i/H, (i/H)^2, ..., (i/H)^p]."""
    if p < 0 or H < 1 or backcast_len < 1:
        raise ValueError(f"invalid trend basis arguments backcast_len={backcast_len}, H={H}, p={p}")
    powers = np.arange(p + 1)
    t_back = np.arange(backcast_len) / backcast_len
    t_fwd = np.arange(H) / H
    T_back = t_back[:, None] ** powers[None, :]
    T_fwd = t_fwd[:, None] ** powers[None, :]
    return _frozen(T_back), _frozen(T_fwd)


def _fourier_matrix(length: int) -> np.ndarray:
    harmonics = np.arange(1, fourier_harmonics(length) + 1)
    t = np.arange(length) / length
    angles = 2.0 * np.pi * t[:, None] * harmonics[None, :]
    return np.hstack([np.ones((length, 1)), np.cos(angles), np.sin(angles)])


@lru_cache(maxsize=None)
def make_fourier_basis(backcast_len: int, H: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fourier bases [1, cos(2πt), ..., cos(2πKt), sin(2πt), ..., sin(2πKt)] with
    K = floor(len/2 - 1), each on its own grid t = [0, ..., len-1]/len.
    """
    if H < 2:
        raise ValueError(f"Fourier basis needs H >= 2, got {H}")
    if backcast_len < 2:
        raise ValueError(f"Fourier basis needs backcast_len >= 2, got {backcast_len}")
    return _frozen(_fourier_matrix(backcast_len)), _frozen(_fourier_matrix(H))


def fixed_basis(basis: BasisSpec) -> Tuple[np.ndarray, np.ndarray]:
    if basis.kind == TREND:
        return make_trend_basis(basis.backcast_len, basis.forecast_len, basis.degree)
    if basis.kind == SEASONALITY:
        return make_fourier_basis(basis.backcast_len, basis.forecast_len)
    raise ValueError("generic basis has no fixed matrices")


# --- Parameters ---

def block_layer_shapes(cfg: BlockConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    fan_in = cfg.basis.backcast_len
    for i in range(cfg.fc_layers):
        shapes.append((f"fc{i}.W", (cfg.width, fan_in)))
        shapes.append((f"fc{i}.b", (cfg.width,)))
        fan_in = cfg.width
    shapes.append(("theta_b.W", (cfg.theta_b_dim, cfg.width)))
    shapes.append(("theta_f.W", (cfg.theta_f_dim, cfg.width)))
    if cfg.basis.kind == GENERIC:
        shapes.append(("basis_b.V", (cfg.basis.backcast_len, cfg.theta_b_dim)))
        shapes.append(("basis_b.b", (cfg.basis.backcast_len,)))
        shapes.append(("basis_f.V", (cfg.basis.forecast_len, cfg.theta_f_dim)))
        shapes.append(("basis_f.b", (cfg.basis.forecast_len,)))
    return shapes


def tensor_name(stack: int, block: int, layer: str) -> str:
    return f"stack{stack}.block{block}.{layer}"


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Physical tensor names in a fixed order; a shared stack owns one block's worth."""
    shapes = {}
    for s, stack in enumerate(cfg.stacks):
        layers = block_layer_shapes(stack.block)
        for b in range(stack.physical_blocks):
            for layer, shape in layers:
                shapes[tensor_name(s, b, layer)] = shape
    return shapes


class ParamStore:
    """
    All trainable tensors of one model, addressed by (stack, block, layer).
    Blocks of a shared stack resolve to the tensors of block 0.
    """

    def __init__(self, cfg: ModelConfig, tensors: Dict[str, np.ndarray]):
        expected = param_shapes(cfg)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"parameter names do not match config: missing {missing[:5]}, extra {extra[:5]}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {tensors[name].shape}, config expects {shape}")
        self.cfg = cfg
        self.tensors = {name: tensors[name] for name in expected}
        self._layers = {}
        for s, stack in enumerate(cfg.stacks):
            for b in range(stack.physical_blocks):
                self._layers[(s, b)] = [(layer, tensor_name(s, b, layer))
                                        for layer, _ in block_layer_shapes(stack.block)]

    def physical_block(self, stack: int, block: int) -> int:
        stack_cfg = self.cfg.stacks[stack]
        if not 0 <= block < stack_cfg.blocks:
            raise KeyError(f"stack {stack} has no block {block}")
        return 0 if stack_cfg.share_weights else block

    def key(self, stack: int, block: int, layer: str) -> str:
        return tensor_name(stack, self.physical_block(stack, block), layer)

    def get(self, stack: int, block: int, layer: str) -> np.ndarray:
        return self.tensors[self.key(stack, block, layer)]

    def block(self, stack: int, block: int) -> Dict[str, np.ndarray]:
        """Layer name -> tensor for one block; shared blocks hand out the same arrays."""
        layers = self._layers[(stack, self.physical_block(stack, block))]
        return {layer: self.tensors[name] for layer, name in layers}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ParamStore":
        return ParamStore(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore(self.cfg, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def size(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of every tensor."""
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def init_params(cfg: ModelConfig, rng: Rng) -> ParamStore:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); additive biases start at zero."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, shape)
    return ParamStore(cfg, tensors)


# --- Block ---

@dataclass
class BlockCache:
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    hidden: np.ndarray
    theta_b: np.ndarray
    theta_f: np.ndarray


def block_forward(x: np.ndarray, params: Dict[str, np.ndarray], cfg: BlockConfig):
    """
    One basic block: ``fc_layers`` FC+ReLU layers, bias-free θ projections, then
    the basis layers. Returns ``(backcast, forecast, cache)``.
    """
    if x.shape[-1] != cfg.basis.backcast_len:
        raise ShapeError(f"block expects input length {cfg.basis.backcast_len}, got shape {x.shape}")
    h = x
    layer_inputs, pre_activations = [], []
    for i in range(cfg.fc_layers):
        layer_inputs.append(h)
        z = affine_forward(params[f"fc{i}.W"], params[f"fc{i}.b"], h)
        pre_activations.append(z)
        h = relu(z)
    theta_b = affine_forward(params["theta_b.W"], None, h)
    theta_f = affine_forward(params["theta_f.W"], None, h)
    if cfg.basis.kind == GENERIC:
        backcast = affine_forward(params["basis_b.V"], params["basis_b.b"], theta_b)
        forecast = affine_forward(params["basis_f.V"], params["basis_f.b"], theta_f)
    else:
        T_back, T_fwd = fixed_basis(cfg.basis)
        backcast = affine_forward(T_back, None, theta_b)
        forecast = affine_forward(T_fwd, None, theta_f)
    return backcast, forecast, BlockCache(layer_inputs, pre_activations, h, theta_b, theta_f)


def block_backward(cache: BlockCache, grad_backcast: np.ndarray, grad_forecast: np.ndarray,
                   params: Dict[str, np.ndarray], cfg: BlockConfig):
    """Returns ``(grads by layer name, grad wrt block input)``."""
    grads = {}
    if cfg.basis.kind == GENERIC:
        grads["basis_b.V"], grads["basis_b.b"], g_theta_b = affine_backward(
            params["basis_b.V"], cache.theta_b, grad_backcast)
        grads["basis_f.V"], grads["basis_f.b"], g_theta_f = affine_backward(
            params["basis_f.V"], cache.theta_f, grad_forecast)
    else:
        T_back, T_fwd = fixed_basis(cfg.basis)
        g_theta_b = grad_backcast @ T_back
        g_theta_f = grad_forecast @ T_fwd
    grads["theta_b.W"], _, g_h_b = affine_backward(params["theta_b.W"], cache.hidden, g_theta_b)
    grads["theta_f.W"], _, g_h_f = affine_backward(params["theta_f.W"], cache.hidden, g_theta_f)
    g = g_h_b + g_h_f
    for i in reversed(range(cfg.fc_layers)):
        g = relu_backward(cache.pre_activations[i], g)
        grads[f"fc{i}.W"], grads[f"fc{i}.b"], g = affine_backward(
            params[f"fc{i}.W"], cache.layer_inputs[i], g)
    return grads, g


# --- Stacking ---

@dataclass
class ForwardTrace:
    """
    Per-block inputs x_l, backcasts and partial forecasts, per-stack partial
    forecasts and the model forecast. ``contributes[l]`` marks the blocks whose
    partial forecast enters the model forecast.
    """
    config: ModelConfig
    model_input: np.ndarray
    inputs: List[np.ndarray] = field(default_factory=list)
    backcasts: List[np.ndarray] = field(default_factory=list)
    forecasts: List[np.ndarray] = field(default_factory=list)
    caches: List[BlockCache] = field(default_factory=list)
    positions: List[Tuple[int, int]] = field(default_factory=list)
    contributes: List[bool] = field(default_factory=list)
    stack_forecasts: List[np.ndarray] = field(default_factory=list)
    forecast: Optional[np.ndarray] = None


def _as_batch(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_len:
        raise ShapeError(
            f"model input must have length {cfg.input_len} "
            f"(lookback {cfg.lookback_multiple} x H {cfg.horizon}), got shape {x.shape}"
        )
    return x


def topology_forward(x: np.ndarray, cfg: ModelConfig, params: ParamStore) -> ForwardTrace:
    """Forward pass under any of the supported topologies."""
    if cfg.topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology '{cfg.topology}'")
    if params.cfg != cfg:
        raise ShapeError("parameter store was built for a different model config")
    x = _as_batch(x, cfg)
    topology = cfg.topology
    trace = ForwardTrace(config=cfg, model_input=x)

    block_input = x
    for s, stack in enumerate(cfg.stacks):
        for b in range(stack.blocks):
            inp = x if topology == PARALLEL else block_input
            backcast, forecast, cache = block_forward(inp, params.block(s, b), stack.block)
            trace.inputs.append(inp)
            trace.backcasts.append(backcast)
            trace.forecasts.append(forecast)
            trace.caches.append(cache)
            trace.positions.append((s, b))
            if topology in (DRESS, LAST_FORWARD):
                block_input = inp - backcast
            elif topology in (NO_RESIDUAL, NO_RESIDUAL_LAST_FORWARD):
                block_input = backcast
            elif topology == RESIDUAL_INPUT:
                block_input = x - backcast

    last = len(trace.forecasts) - 1
    trace.contributes = [topology not in _LAST_ONLY or i == last for i in range(last + 1)]

    zeros = np.zeros((x.shape[0], cfg.horizon))
    for s in range(len(cfg.stacks)):
        partial = zeros
        for i, (stack_idx, _) in enumerate(trace.positions):
            if stack_idx == s and trace.contributes[i]:
                partial = partial + trace.forecasts[i]
        trace.stack_forecasts.append(partial)
    total = zeros
    for partial in trace.stack_forecasts:
        total = total + partial
    trace.forecast = total
    return trace


def model_forward(x: np.ndarray, cfg: ModelConfig, params: ParamStore) -> ForwardTrace:
    """Doubly residual stacking: x_{l+1} = x_l - backcast_l, forecast = sum of partials."""
    if cfg.topology != DRESS:
        raise ValueError(f"model_forward runs DRESS only, config has {cfg.topology}; use topology_forward")
    return topology_forward(x, cfg, params)


def forecast(x: np.ndarray, cfg: ModelConfig, params: ParamStore) -> np.ndarray:
    return topology_forward(x, cfg, params).forecast


def model_backward(trace: ForwardTrace, grad_forecast: np.ndarray, cfg: ModelConfig,
                   params: ParamStore) -> ParamStore:
    """
    Reverse pass through the topology recorded in ``trace``. Gradients of all
    blocks aliasing one shared tensor are summed into that tensor's slot.
    """
    if trace.config != cfg or params.cfg != cfg:
        raise ShapeError("trace, config and parameters do not belong together")
    grad_forecast = np.asarray(grad_forecast, dtype=np.float64)
    if grad_forecast.ndim == 1:
        grad_forecast = grad_forecast[None, :]
    if grad_forecast.shape != trace.forecast.shape:
        raise ShapeError(f"grad of forecast has shape {grad_forecast.shape}, forecast is {trace.forecast.shape}")

    topology = cfg.topology
    grads = params.zeros_like()
    zeros_y = np.zeros_like(grad_forecast)
    # gradient reaching the input of the block after the current one
    g_next = np.zeros_like(trace.model_input)
    for i in reversed(range(len(trace.caches))):
        s, b = trace.positions[i]
        stack = cfg.stacks[s]
        g_y = grad_forecast if trace.contributes[i] else zeros_y
        if topology in (DRESS, LAST_FORWARD, RESIDUAL_INPUT):
            g_backcast = -g_next
        elif topology in (NO_RESIDUAL, NO_RESIDUAL_LAST_FORWARD):
            g_backcast = g_next
        else:
            g_backcast = np.zeros_like(trace.backcasts[i])
        block_grads, g_in = block_backward(trace.caches[i], g_backcast, g_y, params.block(s, b), stack.block)
        for layer, g in block_grads.items():
            grads.tensors[params.key(s, b, layer)] += g
        if topology in (DRESS, LAST_FORWARD):
            g_next = g_next + g_in
        else:
            g_next = g_in
    return grads
