"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .optim import ParamSet
from .tensor import Tape, Tensor, backward


class NonDeterminismError(RuntimeError):
    """Two forward passes of the same closure disagreed."""


@dataclass(frozen=True)
class GradCheckRow:
    name: str
    shape: tuple[int, ...]
    checked: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); ``floor`` keeps near-zero entries from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    closure: Callable[[], Tensor],
    params: ParamSet,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> list[GradCheckRow]:
    """Compare tape gradients of ``closure()`` against central differences.

    With ``max_entries`` set, each parameter tensor is probed at that many
    seeded random positions instead of exhaustively.
    """
    first = closure().item()
    second = closure().item()
    if first != second:
        raise NonDeterminismError(f"closure returned {first!r} then {second!r}")

    params.zero_grad()
    with Tape() as tape:
        loss = closure()
    backward(loss, tape)
    analytic = params.grads()
    params.zero_grad()

    rng = np.random.default_rng(seed)
    rows = []
    for name, p in params.items():
        size = p.size
        if max_entries is None or size <= max_entries:
            flat_idx = np.arange(size)
        else:
            flat_idx = np.sort(rng.choice(size, size=max_entries, replace=False))
        original = p.data
        numeric = np.empty(len(flat_idx))
        for n, i in enumerate(flat_idx):
            bumped = original.copy().reshape(-1)
            bumped[i] = original.reshape(-1)[i] + h
            p.data = bumped.reshape(original.shape)
            up = closure().item()
            bumped[i] = original.reshape(-1)[i] - h
            p.data = bumped.reshape(original.shape)
            down = closure().item()
            numeric[n] = (up - down) / (2 * h)
        p.data = original
        a = analytic[name].reshape(-1)[flat_idx]
        rel = relative_error(a, numeric, floor)
        max_rel = float(rel.max()) if rel.size else 0.0
        rows.append(
            GradCheckRow(
                name=name,
                shape=p.shape,
                checked=len(flat_idx),
                max_rel_error=max_rel,
                max_abs_error=float(np.abs(a - numeric).max()) if rel.size else 0.0,
                passed=max_rel < tolerance,
            )
        )
    return rows
