"""Fixed-order assignment MDP over discretized TM-IRS switching parameters.

Slot ``t`` is assigned at step ``t``: first every element's turn-on time, then
every element's on-duration. The state graph is therefore a tree and the
backward transition probability is identically one.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .physics import Direction, SystemGeometry, TmIrsConfig, default_phase_profile

UNASSIGNED = -1
DEFAULT_ENUM_CAP = 10**6


class EnumerationCapError(ValueError):
    pass


@dataclass(frozen=True)
class DiscretizationGrid:
    q_levels: int = 8

    def __post_init__(self):
        if self.q_levels < 2:
            raise ValueError("q_levels must be >= 2")

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.q_levels) / self.q_levels


def n_slots(geom: SystemGeometry) -> int:
    return 2 * geom.n_elements


def state_dim(geom: SystemGeometry, grid: DiscretizationGrid) -> int:
    return n_slots(geom) * grid.q_levels


@dataclass(frozen=True)
class AssignmentState:
    slots: tuple
    q_levels: int

    def __post_init__(self):
        slots = tuple(int(s) for s in self.slots)
        cursor = sum(1 for s in slots if s != UNASSIGNED)
        if any(s == UNASSIGNED for s in slots[:cursor]) or any(s != UNASSIGNED for s in slots[cursor:]):
            raise ValueError("slots must be assigned in order")
        if any(not (0 <= s < self.q_levels) for s in slots[:cursor]):
            raise ValueError("slot level out of range")
        object.__setattr__(self, "slots", slots)

    @classmethod
    def empty(cls, geom: SystemGeometry, grid: DiscretizationGrid) -> "AssignmentState":
        return cls((UNASSIGNED,) * n_slots(geom), grid.q_levels)

    @property
    def cursor(self) -> int:
        return sum(1 for s in self.slots if s != UNASSIGNED)

    @property
    def is_terminal(self) -> bool:
        return self.cursor == len(self.slots)


def encode_state(state: AssignmentState, grid: DiscretizationGrid) -> np.ndarray:
    q = grid.q_levels
    x = np.zeros(len(state.slots) * q)
    for t, level in enumerate(state.slots[: state.cursor]):
        x[t * q + level] = 1.0
    return x


def encode_levels(levels: np.ndarray, n_steps: int, q_levels: int) -> np.ndarray:
    """Batch encoder: row ``b`` of the result encodes the first ``n_steps`` slots of ``levels[b]``."""
    levels = np.atleast_2d(levels)
    out = np.zeros((levels.shape[0], levels.shape[1] * q_levels))
    rows = np.repeat(np.arange(levels.shape[0]), n_steps)
    cols = (np.arange(n_steps) * q_levels)[None, :] + levels[:, :n_steps]
    out[rows, cols.ravel()] = 1.0
    return out


def trajectory_inputs(levels: np.ndarray, q_levels: int) -> np.ndarray:
    """Encoded states s_0..s_{T-1} visited while assigning ``levels`` (shape ``(T, T*Q)``)."""
    levels = np.asarray(levels)
    n = levels.size
    x = np.zeros((n, n * q_levels))
    cols = np.arange(n) * q_levels + levels
    # row t has slots 0..t-1 assigned
    r, c = np.tril_indices(n, k=-1)
    x[r, cols[c]] = 1.0
    return x


def legal_actions(state: AssignmentState) -> frozenset:
    if state.is_terminal:
        return frozenset()
    return frozenset(range(state.q_levels))


def apply_action(state: AssignmentState, level: int) -> AssignmentState:
    if state.is_terminal:
        raise ValueError("no action is legal in a terminal state")
    if not 0 <= level < state.q_levels:
        raise ValueError(f"illegal level {level}; expected 0..{state.q_levels - 1}")
    slots = list(state.slots)
    slots[state.cursor] = int(level)
    return AssignmentState(tuple(slots), state.q_levels)


def levels_to_switching(levels: np.ndarray, q_levels: int):
    """Split level indices (``(..., 2E)``) into turn-on times and on-durations."""
    levels = np.asarray(levels)
    n_el = levels.shape[-1] // 2
    vals = levels / q_levels
    return vals[..., :n_el], vals[..., n_el:]


def decode_levels(levels, grid: DiscretizationGrid, geom: SystemGeometry, steer: Direction,
                  phase: Optional[np.ndarray] = None) -> TmIrsConfig:
    tau_on, delta_tau = levels_to_switching(np.asarray(levels), grid.q_levels)
    if phase is None:
        phase = default_phase_profile(geom, steer)
    return TmIrsConfig(tau_on, delta_tau, phase)


def decode_terminal(state: AssignmentState, grid: DiscretizationGrid, geom: SystemGeometry,
                    cu: Direction) -> TmIrsConfig:
    """Terminal state -> configuration; the phase profile steers toward ``cu``."""
    if not state.is_terminal:
        raise ValueError("cannot decode a non-terminal state")
    return decode_levels(np.array(state.slots), grid, geom, cu)


def terminal_from_config(cfg: TmIrsConfig, grid: DiscretizationGrid) -> AssignmentState:
    levels = np.rint(np.concatenate([cfg.tau_on, cfg.delta_tau]) * grid.q_levels).astype(int)
    return AssignmentState(tuple(levels), grid.q_levels)


def n_terminals(geom: SystemGeometry, grid: DiscretizationGrid) -> int:
    return grid.q_levels ** n_slots(geom)


def _check_cap(geom, grid, cap):
    count = n_terminals(geom, grid)
    if count > cap:
        raise EnumerationCapError(
            f"{grid.q_levels}^{n_slots(geom)} = {count} terminals exceeds the enumeration cap {cap}")
    return count


def enumerate_levels(geom: SystemGeometry, grid: DiscretizationGrid, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    """All terminal level vectors in lexicographic order, as an ``(n, 2E)`` array."""
    _check_cap(geom, grid, cap)
    return np.array(list(itertools.product(range(grid.q_levels), repeat=n_slots(geom))), dtype=np.int64)


def enumerate_terminals(geom: SystemGeometry, grid: DiscretizationGrid,
                        cap: int = DEFAULT_ENUM_CAP) -> Iterator[AssignmentState]:
    _check_cap(geom, grid, cap)
    for levels in itertools.product(range(grid.q_levels), repeat=n_slots(geom)):
        yield AssignmentState(levels, grid.q_levels)


def true_partition(env, cap: int = DEFAULT_ENUM_CAP) -> float:
    """Sum of floored rewards over every terminal of ``env`` (a gflownet TaskEnv)."""
    levels = enumerate_levels(env.geom, env.grid, cap)
    return float(np.sum(env.rewards(levels)))
