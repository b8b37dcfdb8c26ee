"""MAC and memory accounting for TP versus TESS.

Widths follow the convention where ``hidden[0]`` is the first hidden layer
(the one fed by the target propagator ``S``) and ``input_width`` plays the
role of ``H_{-1}`` in the per-layer MAC terms. Counts are unitless: MAC
operations and stored scalars.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CostSpec:
    input_width: int
    hidden: tuple[int, ...]
    batch: int
    steps: int
    classes: int
    update_step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_width, self.batch, self.steps, self.classes) + self.hidden,
               default=1) < 1:
            raise ConfigError("all widths, batch, steps and classes must be positive")
        if not 0 <= self.update_step < self.steps:
            raise ConfigError(f"update step must lie in [0, T), got {self.update_step}")

    def _pairs(self):
        prev = (self.input_width,) + self.hidden[:-1]
        return zip(prev, self.hidden)


@dataclass
class CostReport:
    macs_tp: int
    macs_tess: int
    mem_tp: int
    mem_tess: int
    relative_memory_cost: float

    def as_dict(self) -> dict:
        return asdict(self)


def macs_tp(spec: CostSpec) -> int:
    B = spec.batch
    per_step = sum(2 * B * h + B * B * h + B * B * hp + 2 * B * B * hp * h
                   for hp, h in spec._pairs())
    return spec.steps * per_step


def macs_tess(spec: CostSpec) -> int:
    B, O = spec.batch, spec.classes
    per_step = sum(B * h + B * hp + B * h * O + B * h + 2 * B * hp * h for hp, h in spec._pairs())
    return (spec.steps - spec.update_step) * per_step


def memory_tp(spec: CostSpec) -> int:
    """``O*H_0`` for ``S`` plus input/target potentials and traces of every hidden layer."""
    if not spec.hidden:
        return 0
    return spec.classes * spec.hidden[0] + 4 * spec.batch * sum(spec.hidden)


def memory_tess(spec: CostSpec) -> int:
    return (3 * spec.batch + spec.classes) * sum(spec.hidden)


def relative_memory_cost(batch: int, classes: int) -> float:
    """Deep-network limit of TESS memory over TP memory, ``(3B + O) / 4B``."""
    if batch < 1 or classes < 1:
        raise ConfigError("batch and classes must be at least 1")
    return (3 * batch + classes) / (4 * batch)


def cost_report(spec: CostSpec) -> CostReport:
    m_tp, m_tess = memory_tp(spec), memory_tess(spec)
    return CostReport(macs_tp(spec), macs_tess(spec), m_tp, m_tess, m_tess / m_tp)


def sweep(input_width: int, hidden, steps: int, batches, classes, update_step: int = 0) -> list[dict]:
    """One row per (batch, classes) pair with exact counts and both memory ratios."""
    rows = []
    for B in batches:
        for O in classes:
            spec = CostSpec(input_width, tuple(hidden), int(B), steps, int(O), update_step)
            rep = cost_report(spec)
            row = {"batch": int(B), "classes": int(O)}
            row.update(rep.as_dict())
            row["relative_memory_cost_approx"] = relative_memory_cost(int(B), int(O))
            rows.append(row)
    return rows


@dataclass
class MemoryAudit:
    live: int
    formula: int
    delta: int
    breakdown: dict
    untracked: dict


def audit_live_memory(net, batch: int) -> MemoryAudit:
    """Count the state scalars a real batch allocates and compare with ``memory_tp``.

    Potentials and traces are read off an actual :class:`NetworkState`; arrays
    the formula does not model (previous-step spikes, the input-layer traces,
    weights) are reported under ``untracked``.
    """
    from .network import init_state

    state = init_state(net, batch)
    breakdown = {"S": int(net.S.size), "potentials": 0, "traces": 0}
    untracked = {"spike_memory": 0, "input_traces": 0, "weights": 0}
    for ls in state.layers:
        breakdown["potentials"] += ls.mem.v.size + ls.mem_tilde.v.size
        breakdown["traces"] += ls.trace.eps.size + ls.trace.eps_tilde.size
        untracked["spike_memory"] += ls.mem.s_prev.size + ls.mem_tilde.s_prev.size
    untracked["input_traces"] = int(state.input_trace.eps.size + state.input_trace.eps_tilde.size)
    untracked["weights"] = int(sum(p.size for p in net.parameters()) - net.S.size)
    live = int(sum(breakdown.values()))
    spec = CostSpec(int(np.prod(net.input_shape)), tuple(layer.units for layer in net.layers),
                    batch, 1, net.num_classes)
    formula = memory_tp(spec)
    return MemoryAudit(live, formula, live - formula, breakdown, untracked)
