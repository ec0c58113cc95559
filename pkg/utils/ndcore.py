"""
Dense float64 kernel for the fixed N-BEATS operator set.

Vectors are 1-D ``numpy.ndarray`` objects, matrices are 2-D row-major arrays.
Every operation also accepts a batch of vectors stacked as rows, so a single
call processes a whole training batch.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Matrix = np.ndarray
Vector = np.ndarray
Tensors = Dict[str, np.ndarray]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


def as_vector(values, name: str = "vector") -> Vector:
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_matrix(values, name: str = "matrix") -> Matrix:
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _check_affine(W: Matrix, b: Optional[Vector], x: np.ndarray) -> None:
    if W.ndim != 2:
        raise ShapeError(f"W must be 2-D, got shape {W.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"W{W.shape} cannot multiply x{x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"bias{b.shape} does not match W{W.shape} rows")


def affine_forward(W: Matrix, b: Optional[Vector], x: np.ndarray) -> np.ndarray:
    """
    Computes ``W x + b`` for a vector, or ``X Wᵀ + b`` row-wise for a batch.
    ``b=None`` gives the bias-free linear projection used for θ.
    """
    _check_affine(W, b, x)
    out = x @ W.T
    if b is not None:
        out = out + b
    return out


def affine_backward(
    W: Matrix, x: np.ndarray, grad_out: np.ndarray
) -> Tuple[Matrix, Vector, np.ndarray]:
    """
    Gradients of ``affine_forward`` with respect to W, b and x.
    For a batch the weight and bias gradients are summed over rows.
    """
    _check_affine(W, None, x)
    if grad_out.shape[:-1] != x.shape[:-1] or grad_out.shape[-1] != W.shape[0]:
        raise ShapeError(
            f"grad_out{grad_out.shape} does not match W{W.shape} applied to x{x.shape}"
        )
    if x.ndim == 1:
        grad_W = np.outer(grad_out, x)
        grad_b = grad_out.copy()
    else:
        grad_W = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ W
    return grad_W, grad_b, grad_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu input{x.shape} and grad_out{grad_out.shape} differ")
    return np.where(x > 0.0, grad_out, 0.0)


class Rng:
    """
    Seeded generator over numpy's Philox counter-based bit generator.

    Equal seeds give identical draw sequences; the bit stream does not depend
    on the platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n)."""
        return self._gen.choice(n, k, replace=False)

    def draws(self, count: int) -> np.ndarray:
        """Raw 64-bit draws, handy for comparing streams."""
        return self._gen.bit_generator.random_raw(count)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    rel_errors: Dict[str, np.ndarray] = field(default_factory=dict)
    failure: Optional[str] = None
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error <= self.tolerance

    def worst(self) -> Tuple[str, int]:
        name = max(self.rel_errors, key=lambda k: self.rel_errors[k].max(initial=0.0))
        return name, int(np.argmax(self.rel_errors[name]))


def grad_check(
    f: Callable[[Tensors], Tuple[float, Tensors]],
    params: Tensors,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    floor: float = 1e-8,
    coords: Optional[Dict[str, Iterable[int]]] = None,
    skip: Optional[Callable[[str, int], bool]] = None,
) -> GradCheckReport:
    """
    Compares the analytic gradient returned by ``f`` against central differences
    ``(f(p+h) - f(p-h)) / 2h`` coordinate by coordinate.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` has the keys of
    ``params``. Parameters are perturbed in place and restored. ``coords``
    restricts the check to selected flat indices per tensor, ``skip`` drops
    coordinates (e.g. near a ReLU kink) after they are visited.
    """
    base_loss, analytic = f(params)
    if not np.isfinite(base_loss):
        return GradCheckReport(np.inf, tolerance, failure="loss is not finite at the base point")

    report = GradCheckReport(0.0, tolerance)
    for name, tensor in params.items():
        indices = list(coords[name]) if coords and name in coords else range(tensor.size)
        errors = np.zeros(len(indices))
        grad = analytic[name]
        for n, i in enumerate(indices):
            original = tensor.flat[i]
            tensor.flat[i] = original + step
            f_plus, _ = f(params)
            tensor.flat[i] = original - step
            f_minus, _ = f(params)
            tensor.flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failure = f"non-finite loss when perturbing {name}[{i}]"
                report.max_rel_error = np.inf
                return report
            if skip is not None and skip(name, i):
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = grad.flat[i]
            errors[n] = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            report.checked += 1
        report.rel_errors[name] = errors
        if errors.size:
            report.max_rel_error = max(report.max_rel_error, float(errors.max()))

    if not report.passed:
        name, idx = report.worst()
        logger.debug(f"grad_check worst coordinate {name}[{idx}] rel err {report.max_rel_error:.3e}")
    return report


def sample_coords(params: Tensors, per_tensor: int, rng: Rng) -> Dict[str, List[int]]:
    """Picks up to ``per_tensor`` distinct flat indices from every tensor."""
    picked = {}
    for name, tensor in params.items():
        if tensor.size <= per_tensor:
            picked[name] = list(range(tensor.size))
        else:
            picked[name] = sorted(int(i) for i in rng.choice(tensor.size, per_tensor))
    return picked
