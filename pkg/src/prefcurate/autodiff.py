"""Flat-vector gradient and Hessian-vector machinery over trainable parameters.

A model exposes three things to this layer:

* ``layout``: a :class:`ParameterLayout` naming the trainable arrays,
* ``bind(flat)``: fresh gradient-tracked leaf tensors for a flat vector,
* ``example_loss(leaves, example)``: a scalar loss graph for one example.

Everything here works on flat float64 vectors in layout order, which is what
the conjugate-gradient solver and the influence scorer consume. Hessian-vector
products are exact: the operator differentiates ``dot(grad(L), v)`` a second
time (double backprop) rather than using finite differences.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .errors import InputError, NumericalError

__all__ = [
    "ParameterLayout",
    "EvalCounter",
    "example_gradient",
    "batch_mean_loss",
    "HvpOperator",
]


@dataclass(frozen=True)
class ParameterLayout:
    """Ordered names and shapes of the trainable arrays of a model."""

    names: tuple
    shapes: tuple

    def __post_init__(self):
        if len(self.names) != len(self.shapes):
            raise InputError("layout names and shapes must align")
        if len(set(self.names)) != len(self.names):
            raise InputError("layout names must be unique")

    @property
    def sizes(self) -> tuple:
        return tuple(int(np.prod(shape, dtype=np.int64)) for shape in self.shapes)

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    def validate_vector(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.total:
            raise InputError(
                f"expected a flat vector of length {self.total}, got shape {v.shape}"
            )
        return v

    def flatten(self, arrays: dict) -> np.ndarray:
        """Concatenate named arrays into one flat vector in layout order."""
        parts = []
        for name, shape in zip(self.names, self.shapes):
            array = np.asarray(arrays[name], dtype=np.float64)
            if array.shape != shape:
                raise InputError(
                    f"array {name!r} has shape {array.shape}, layout says {shape}"
                )
            parts.append(array.ravel())
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def unflatten(self, flat: np.ndarray) -> dict:
        """Split a flat vector into named arrays (copies, layout shapes)."""
        flat = self.validate_vector(flat)
        arrays = {}
        offset = 0
        for name, shape, size in zip(self.names, self.shapes, self.sizes):
            arrays[name] = flat[offset : offset + size].reshape(shape).copy()
            offset += size
        return arrays


@dataclass
class EvalCounter:
    """Thread-safe tally of gradient and Hessian-vector evaluations."""

    gradient_evaluations: int = 0
    hvp_evaluations: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def count_gradient(self, n: int = 1):
        with self._lock:
            self.gradient_evaluations += n

    def count_hvp(self, n: int = 1):
        with self._lock:
            self.hvp_evaluations += n


def _leaf_list(model, leaves: dict) -> list:
    return [leaves[name] for name in model.layout.names]


def _example_key(example, fallback: int):
    return getattr(example, "id", fallback)


def _ordered(examples) -> list:
    """Fixed accumulation order: ascending example id, enumeration order otherwise."""
    indexed = list(enumerate(examples))
    indexed.sort(key=lambda item: _example_key(item[1], item[0]))
    return [example for _, example in indexed]


def batch_mean_loss(model, leaves: dict, examples, rng=None) -> Tensor:
    """Mean per-example loss, accumulated in ascending-id order.

    ``rng`` is forwarded to the model's per-example loss (dropout stream);
    omit it for the deterministic loss used by gradients and curvature.
    """
    if not examples:
        raise InputError("batch_mean_loss needs at least one example")
    total = None
    for example in _ordered(examples):
        term = model.example_loss(leaves, example, rng)
        total = term if total is None else engine.add(total, term)
    return engine.mul(total, 1.0 / len(examples))


def example_gradient(model, params: np.ndarray, example, counter: EvalCounter | None = None) -> np.ndarray:
    """Flat gradient of one example's loss at ``params``."""
    params = model.layout.validate_vector(params)
    leaves = model.bind(params)
    loss = model.example_loss(leaves, example)
    if not np.isfinite(loss.data):
        raise NumericalError(
            f"non-finite loss for example {_example_key(example, -1)!r}"
        )
    grads = engine.grad(loss, _leaf_list(model, leaves))
    flat = model.layout.flatten(
        {name: g.data for name, g in zip(model.layout.names, grads)}
    )
    if not np.all(np.isfinite(flat)):
        raise NumericalError(
            f"non-finite gradient for example {_example_key(example, -1)!r}"
        )
    if counter is not None:
        counter.count_gradient()
    return flat


class HvpOperator:
    """Applies ``v -> (H_B + damping * I) @ v`` over the trainable subspace.

    ``H_B`` is the Hessian of the mean loss over a batch. In ``deterministic``
    mode the batch is the full example list given at construction, so repeated
    applications are bit-identical. In ``stochastic`` mode each application
    resamples ``batch_size`` examples without replacement from a generator
    seeded at construction; sampling happens under a lock, so concurrent use
    is safe (though the draw order then depends on scheduling).

    The evaluation point is copied at construction and never mutated. The
    damping term is added as the final step, so the undamped product is the
    bitwise-identical prefix of the damped one.
    """

    def __init__(
        self,
        model,
        params: np.ndarray,
        examples,
        damping: float,
        *,
        mode: str = "deterministic",
        batch_size: int | None = None,
        seed=0,
        zero_curvature: bool = False,
        counter: EvalCounter | None = None,
    ):
        if mode not in ("deterministic", "stochastic"):
            raise InputError(f"unknown hvp mode {mode!r}")
        if not examples:
            raise InputError("HvpOperator needs at least one example")
        if not math.isfinite(damping) or damping < 0:
            raise InputError(f"damping must be finite and >= 0, got {damping!r}")
        self.model = model
        self.params = model.layout.validate_vector(params).copy()
        self.examples = list(examples)
        self.damping = float(damping)
        self.mode = mode
        self.zero_curvature = bool(zero_curvature)
        self.counter = counter
        if mode == "stochastic":
            if batch_size is None or batch_size < 1:
                raise InputError("stochastic mode needs batch_size >= 1")
            if batch_size > len(self.examples):
                raise InputError(
                    f"batch_size {batch_size} exceeds population {len(self.examples)}"
                )
            self.batch_size = int(batch_size)
            self._rng = np.random.default_rng(seed)
        else:
            self.batch_size = len(self.examples)
            self._rng = None
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.model.layout.total

    def _batch(self) -> list:
        if self.mode == "deterministic":
            return self.examples
        with self._lock:
            picks = self._rng.choice(len(self.examples), self.batch_size, replace=False)
        return [self.examples[i] for i in np.sort(picks)]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = self.model.layout.validate_vector(v)
        if self.zero_curvature:
            if self.counter is not None:
                self.counter.count_hvp()
            return self.damping * v
        layout = self.model.layout
        leaves = self.model.bind(self.params)
        loss = batch_mean_loss(self.model, leaves, self._batch())
        leaf_list = _leaf_list(self.model, leaves)
        grads = engine.grad(loss, leaf_list, create_graph=True)
        v_parts = layout.unflatten(v)
        inner = None
        for name, g in zip(layout.names, grads):
            term = engine.dot(g, Tensor(v_parts[name]))
            inner = term if inner is None else engine.add(inner, term)
        second = engine.grad(inner, leaf_list)
        flat = layout.flatten(
            {name: h.data for name, h in zip(layout.names, second)}
        )
        if not np.all(np.isfinite(flat)):
            raise NumericalError("non-finite Hessian-vector product")
        if self.counter is not None:
            self.counter.count_hvp()
        return flat + self.damping * v

    __call__ = apply
