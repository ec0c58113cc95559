"""Adam with bias correction over a ParamStore, updated in place."""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from utils.model import ParamStore
from utils.ndcore import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamStore, lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.epsilon,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: ParamStore, grads: ParamStore, state: AdamState):
    """One Adam update; mutates ``params`` and ``state`` and returns both."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ShapeError(f"Adam moments for {name} have shape {state.m[name].shape}, parameter is {p.shape}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step_size = state.lr / bc1
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + state.epsilon)
    return params, state
