"""Discrete-time leaky integrate-and-fire dynamics and the ArcTan surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class LifParams:
    """Per-layer LIF constants.

    alpha is the membrane decay per step, v_th the firing threshold and
    surrogate_scale the width/height parameter of the ArcTan surrogate.
    """

    alpha: float = 0.9
    v_th: float = 1.0
    surrogate_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.v_th > 0.0:
            raise ConfigError(f"v_th must be positive, got {self.v_th}")
        if not self.surrogate_scale > 0.0:
            raise ConfigError(f"surrogate_scale must be positive, got {self.surrogate_scale}")


@dataclass
class MembraneState:
    """Membrane potential ``v`` and the previous step's spikes ``s_prev``."""

    v: np.ndarray
    s_prev: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "MembraneState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def lif_step(
    state: MembraneState,
    input_current: np.ndarray,
    recurrent_current: np.ndarray | float,
    params: LifParams,
) -> tuple[MembraneState, np.ndarray]:
    """Advance one step with soft reset by threshold subtraction.

    ``v' = alpha*v + I + I_rec - s_prev*v_th`` and a spike is emitted
    wherever ``v' >= v_th``.
    """
    input_current = np.asarray(input_current)
    if input_current.shape != state.v.shape:
        raise DimensionError(
            f"input current shape {input_current.shape} != membrane shape {state.v.shape}"
        )
    if np.ndim(recurrent_current) and np.shape(recurrent_current) != state.v.shape:
        raise DimensionError(
            f"recurrent current shape {np.shape(recurrent_current)} != membrane shape {state.v.shape}"
        )
    if not np.all(np.isfinite(input_current)):
        raise NumericError("non-finite input current")
    dtype = state.v.dtype
    v = params.alpha * state.v + input_current + recurrent_current - state.s_prev * params.v_th
    v = v.astype(dtype, copy=False)
    if not np.all(np.isfinite(v)):
        raise NumericError("membrane potential became non-finite")
    spikes = (v >= params.v_th).astype(dtype)
    return MembraneState(v, spikes), spikes


def surrogate_derivative(v: np.ndarray, params: LifParams) -> np.ndarray:
    """ArcTan pseudo-derivative ``s / (1 + (pi*s*u/2)**2)`` at ``u = v - v_th``."""
    s = params.surrogate_scale
    u = np.asarray(v) - params.v_th
    return s / (1.0 + (0.5 * np.pi * s * u) ** 2)


def surrogate_antiderivative(v: np.ndarray, params: LifParams) -> np.ndarray:
    """Smoothed spike function ``(2/pi) * atan(pi*s*u/2)``, zero at threshold.

    Its derivative is exactly :func:`surrogate_derivative`.
    """
    s = params.surrogate_scale
    u = np.asarray(v) - params.v_th
    return (2.0 / np.pi) * np.arctan(0.5 * np.pi * s * u)
