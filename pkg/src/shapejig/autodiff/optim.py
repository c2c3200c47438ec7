"""Parameter containers and the SGD-with-momentum optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor

GROUPS = ("f", "c", "j")


class ParamSet:
    """Named parameter tensors, grouped by the prefix before the first dot.

    Group ``f`` is the shared feature extractor, ``c`` the classifier head
    and ``j`` the jigsaw head.
    """

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, t in (params or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.split(".", 1)[0] == prefix}

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient slot per parameter; zeros where nothing was accumulated."""
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in self._params.items()}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            t = self._params[k]
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: stored shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.astype(dtype)) for k, v in self._params.items()})

    def copy(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.copy()) for k, v in self._params.items()})


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float64,
                   gain: float = 1.0) -> np.ndarray:
    """Uniform on +-gain/sqrt(fan_in); gain sqrt(6) gives the He-uniform bound for relu layers."""
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class OptState:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-5
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for key in ("lr", "momentum", "weight_decay"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative")


def sgd_step(params: ParamSet, state: OptState, require_all: bool = True) -> ParamSet:
    """One momentum SGD update, in place; gradients are cleared afterwards.

    ``v <- momentum * v + grad + weight_decay * p`` then ``p <- p - lr * v``.
    With ``require_all=False`` a missing gradient counts as zero instead of
    raising.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            if require_all:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = np.zeros_like(p.data)
        buf = state.buffers.get(name)
        step = g + state.weight_decay * p.data
        if buf is None:
            buf = step.copy()
        else:
            buf = state.momentum * buf + step
        state.buffers[name] = buf
        p.data = p.data - state.lr * buf
    params.zero_grad()
    return params
