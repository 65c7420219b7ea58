import itertools

import numpy as np
import pytest

from metagfn import mdp
from metagfn.gflownet import TaskEnv
from metagfn.mdp import (AssignmentState, DiscretizationGrid, EnumerationCapError, apply_action,
                         decode_terminal, encode_state, enumerate_terminals, legal_actions,
                         terminal_from_config, true_partition)
from metagfn.physics import Direction, OfdmSpec, SystemGeometry, effective_sum_rate

G12 = SystemGeometry(1, 2, n_tx=8)
G11 = SystemGeometry(1, 1, n_tx=8)


def test_grid_values():
    g = DiscretizationGrid(8)
    assert np.array_equal(g.values, np.arange(8) / 8)
    assert np.all(np.diff(g.values) > 0) and g.values[-1] < 1
    with pytest.raises(ValueError, match="q_levels must be >= 2"):
        DiscretizationGrid(1)


def test_encode_examples():
    grid = DiscretizationGrid(8)
    s = AssignmentState.empty(G11, grid)
    assert not encode_state(s, grid).any()
    s = apply_action(s, 3)
    x = encode_state(s, grid)
    assert x.size == 2 * 1 * 8 and x[3] == 1 and x.sum() == 1


def test_fully_assigned_has_one_bit_per_block():
    grid = DiscretizationGrid(4)
    for state in enumerate_terminals(G12, grid):
        x = encode_state(state, grid).reshape(4, 4)
        assert np.array_equal(x.sum(axis=1), np.ones(4))


def test_legal_actions_and_transitions():
    grid = DiscretizationGrid(8)
    s = AssignmentState.empty(SystemGeometry(2, 1), grid)
    assert legal_actions(s) == frozenset(range(8))
    s1 = apply_action(s, 0)
    assert s1.cursor == 1 and s1.slots[0] == 0
    for t in range(1, 4):
        assert len(legal_actions(s1)) == 8
        s1 = apply_action(s1, t)
    assert s1.is_terminal and legal_actions(s1) == frozenset()
    with pytest.raises(ValueError):
        apply_action(s1, 0)
    with pytest.raises(ValueError):
        apply_action(s, 8)


def test_out_of_order_state_rejected():
    with pytest.raises(ValueError):
        AssignmentState((mdp.UNASSIGNED, 1), 4)


def test_decode_examples():
    grid = DiscretizationGrid(8)
    cu = Direction(40, 30)
    geom = SystemGeometry(2, 2)
    zero = AssignmentState((0,) * 8, 8)
    cfg = decode_terminal(zero, grid, geom, cu)
    assert not cfg.tau_on.any() and not cfg.delta_tau.any()
    top = decode_terminal(AssignmentState((7,) * 8, 8), grid, geom, cu)
    assert np.all(top.tau_on == 0.875) and np.all(top.delta_tau == 0.875)
    with pytest.raises(ValueError):
        decode_terminal(AssignmentState.empty(geom, grid), grid, geom, cu)


def test_decode_slot_order():
    grid = DiscretizationGrid(4)
    cfg = decode_terminal(AssignmentState((1, 2, 3, 0), 4), grid, G12, Direction(0, 0))
    assert np.array_equal(cfg.tau_on, [0.25, 0.5]) and np.array_equal(cfg.delta_tau, [0.75, 0.0])


def test_encode_decode_bijection():
    grid = DiscretizationGrid(4)
    seen = set()
    for state in enumerate_terminals(G12, grid):
        cfg = decode_terminal(state, grid, G12, Direction(10, 10))
        back = terminal_from_config(cfg, grid)
        assert back == state
        assert np.array_equal(encode_state(back, grid), encode_state(state, grid))
        seen.add(encode_state(state, grid).tobytes())
    assert len(seen) == 256


def test_enumeration_counts_and_order():
    assert len(list(enumerate_terminals(G11, DiscretizationGrid(2)))) == 4
    states = list(enumerate_terminals(G12, DiscretizationGrid(4)))
    assert len(states) == 256
    assert [s.slots for s in states] == list(itertools.product(range(4), repeat=4))
    with pytest.raises(EnumerationCapError):
        next(enumerate_terminals(SystemGeometry(6, 6), DiscretizationGrid(8)))


def test_trajectory_inputs_match_state_encoding():
    grid = DiscretizationGrid(4)
    levels = np.array([2, 0, 3, 1])
    x = mdp.trajectory_inputs(levels, 4)
    s = AssignmentState.empty(G12, grid)
    for t in range(4):
        assert np.array_equal(x[t], encode_state(s, grid))
        s = apply_action(s, levels[t])
    assert np.array_equal(mdp.encode_levels(levels[None], 4, 4)[0], encode_state(s, grid))


def make_env(geom, q, **kw):
    return TaskEnv(geom, OfdmSpec(k_sub=4), DiscretizationGrid(q), Direction(40, 30), **kw)


def test_true_partition_matches_enumeration():
    env = make_env(G11, 2)
    expected = 0.0
    for state in enumerate_terminals(G11, env.grid):
        cfg = decode_terminal(state, env.grid, G11, env.cu)
        expected += max(effective_sum_rate(cfg, G11, env.ofdm, env.cu), env.r_floor)
    assert abs(true_partition(env) - expected) < 1e-12


def test_true_partition_all_floored():
    # on-duration 0 everywhere: zero rate at every terminal
    env = make_env(G11, 2)
    levels = mdp.enumerate_levels(G11, env.grid)
    levels = levels[levels[:, 1] == 0]
    assert np.all(env.rewards(levels) == env.r_floor)


def test_true_partition_golden_1x2_q4():
    env = make_env(G12, 4)
    # frozen from a one-config-at-a-time enumeration through effective_sum_rate
    assert true_partition(env) == pytest.approx(920.0861166991316, rel=1e-12)
