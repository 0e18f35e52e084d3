"""Adam optimizer over named parameter arrays, with an exponentially
decaying learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, applied to the arrays in place.

    ``params`` maps names to live arrays (e.g. from ``named_arrays``);
    moments are lazily allocated to match. Shape mismatches raise.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, arr in params.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{arr.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def exponential_lr(lr0: float, step: int, total_steps: int,
                   final_ratio: float = 0.01) -> float:
    """Learning rate decayed geometrically from ``lr0`` to ``lr0*final_ratio``
    over ``total_steps``."""
    if total_steps <= 0:
        return lr0
    frac = min(1.0, step / total_steps)
    return lr0 * final_ratio ** frac
