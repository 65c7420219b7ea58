"""Trajectory-balance GFlowNet over the fixed-order TM-IRS assignment MDP."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import mdp
from .mdp import DiscretizationGrid
from .nn import PolicyNet, block_log_softmax, clip_grad_norm, sgd_step
from .physics import (Direction, OfdmSpec, SystemGeometry, TmIrsConfig, default_phase_profile,
                      element_weights, eta, harmonic_orders, rates_from_gains, switching_coeff)

log = logging.getLogger(__name__)

DEFAULT_R_FLOOR = 1e-6
TELEMETRY_CADENCE = 1000


@dataclass(frozen=True)
class TaskEnv:
    """Reward context for one CU direction.

    ``steer`` is the direction the fixed phase profile points at; it defaults
    to ``cu``. Keeping it fixed while ``cu`` moves is what makes the
    per-direction tasks differ at all: with ``steer == cu`` the CU reward of a
    switching pattern does not depend on the direction.
    """

    geom: SystemGeometry
    ofdm: OfdmSpec
    grid: DiscretizationGrid
    cu: Direction
    eve: Direction = Direction(-20.0, -20.0)
    r_floor: float = DEFAULT_R_FLOOR
    steer: Optional[Direction] = None

    def __post_init__(self):
        if not self.r_floor > 0:
            raise ValueError("r_floor must be > 0")
        if self.steer is None:
            object.__setattr__(self, "steer", self.cu)

    def with_cu(self, cu: Direction) -> "TaskEnv":
        return replace(self, cu=cu)

    @property
    def n_steps(self) -> int:
        return mdp.n_slots(self.geom)

    @property
    def q_levels(self) -> int:
        return self.grid.q_levels

    @property
    def n_inputs(self) -> int:
        return mdp.state_dim(self.geom, self.grid)

    @cached_property
    def phase(self) -> np.ndarray:
        return default_phase_profile(self.geom, self.steer)

    @cached_property
    def _orders(self) -> np.ndarray:
        return harmonic_orders(self.ofdm.k_sub)

    def decode(self, levels) -> TmIrsConfig:
        return mdp.decode_levels(levels, self.grid, self.geom, self.steer, phase=self.phase)

    def gains(self, levels, direction: Direction) -> np.ndarray:
        """Harmonic gains for a batch of level vectors, shape ``(..., 2K-1)``."""
        tau_on, delta_tau = mdp.levels_to_switching(np.asarray(levels), self.q_levels)
        psi = switching_coeff(self._orders[:, None], tau_on[..., None, :], delta_tau[..., None, :])
        return psi @ element_weights(self.phase, self.geom, direction)

    def rates(self, levels, direction: Optional[Direction] = None) -> np.ndarray:
        """Effective sum rate (unfloored) at ``direction`` (default: the CU)."""
        direction = self.cu if direction is None else direction
        _, eff = rates_from_gains(self.gains(levels, direction), eta(self.geom, self.ofdm), self.ofdm)
        return eff

    def rewards(self, levels) -> np.ndarray:
        """Training reward ``max(R, r_floor)`` at the CU."""
        return np.maximum(self.rates(levels), self.r_floor)

    def secrecy(self, levels) -> np.ndarray:
        return self.rates(levels, self.cu) - self.rates(levels, self.eve)


@dataclass(frozen=True)
class TrainSchedule:
    segments: tuple = ((700_000, 1e-2), (200_000, 1e-3))
    seed: int = 0
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        segs = tuple((int(n), float(lr)) for n, lr in self.segments)
        if any(n < 0 or lr <= 0 for n, lr in segs):
            raise ValueError("segment counts must be >= 0 and rates > 0")
        object.__setattr__(self, "segments", segs)

    @property
    def n_trajectories(self) -> int:
        return sum(n for n, _ in self.segments)

    def rates(self) -> np.ndarray:
        """Learning rate for every trajectory index."""
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([np.full(n, lr) for n, lr in self.segments])


@dataclass(eq=False)
class Trajectory:
    actions: np.ndarray
    logpf_terms: np.ndarray
    logpb_terms: np.ndarray
    reward: float          # floored training reward R
    rate: float            # unfloored effective sum rate at the CU
    terminal: Optional[TmIrsConfig] = field(default=None, repr=False)

    @property
    def log_reward(self) -> float:
        return float(np.log(self.reward))

    @property
    def key(self) -> tuple:
        return tuple(int(a) for a in self.actions)


# -- sampling --------------------------------------------------------------

def _diag_blocks(pf: np.ndarray, n_traj: int, n_steps: int, q: int) -> np.ndarray:
    """Pick slot ``t``'s Q forward logits from row ``t`` of each trajectory."""
    return pf.reshape(n_traj, n_steps, n_steps, q)[:, np.arange(n_steps), np.arange(n_steps)]


def sample_levels(net: PolicyNet, env: TaskEnv, n: int, rng: np.random.Generator):
    """Draw ``n`` trajectories in parallel under ``net``; return ``(levels, logpf)``."""
    t_max, q = env.n_steps, env.q_levels
    x = np.zeros((n, t_max * q))
    levels = np.zeros((n, t_max), dtype=np.int64)
    logpf = np.zeros((n, t_max))
    rows = np.arange(n)
    for t in range(t_max):
        pf, _ = net.forward(x)
        logp, p = block_log_softmax(pf[:, t * q:(t + 1) * q])
        u = rng.random(n)
        a = np.minimum(np.sum(np.cumsum(p, axis=1) < u[:, None], axis=1), q - 1)
        levels[:, t] = a
        logpf[:, t] = logp[rows, a]
        x[rows, t * q + a] = 1.0
    return levels, logpf


def sample_batch(net: PolicyNet, env: TaskEnv, n: int, rng: np.random.Generator,
                 decode: bool = True) -> list:
    if n == 0:
        return []
    levels, logpf = sample_levels(net, env, n, rng)
    rates = env.rates(levels)
    rewards = np.maximum(rates, env.r_floor)
    zeros = np.zeros(env.n_steps)
    return [Trajectory(levels[i], logpf[i], zeros, float(rewards[i]), float(rates[i]),
                       env.decode(levels[i]) if decode else None)
            for i in range(n)]


def sample_trajectory(net: PolicyNet, env: TaskEnv, rng: np.random.Generator) -> Trajectory:
    return sample_batch(net, env, 1, rng)[0]


# -- trajectory balance ----------------------------------------------------

def _stack_inputs(trajs: Sequence[Trajectory], q: int) -> np.ndarray:
    return np.concatenate([mdp.trajectory_inputs(tr.actions, q) for tr in trajs], axis=0)


def tb_residuals(net: PolicyNet, trajs: Sequence[Trajectory], env: TaskEnv):
    """Forward all trajectories; return ``(residuals, probs, actions)`` with the cache primed."""
    n, t_max, q = len(trajs), env.n_steps, env.q_levels
    pf, _ = net.forward(_stack_inputs(trajs, q))
    logp, p = block_log_softmax(_diag_blocks(pf, n, t_max, q))
    actions = np.stack([tr.actions for tr in trajs])
    logpf = np.take_along_axis(logp, actions[..., None], axis=2)[..., 0]
    log_r = np.array([tr.log_reward for tr in trajs])
    logpb = np.array([np.sum(tr.logpb_terms) for tr in trajs])
    resid = net.log_z + logpf.sum(axis=1) - log_r - logpb
    return resid, p, actions


def tb_batch_loss(net: PolicyNet, trajs: Sequence[Trajectory], env: TaskEnv):
    """Mean trajectory-balance loss over ``trajs`` and its gradient."""
    n, t_max, q = len(trajs), env.n_steps, env.q_levels
    if n == 0:
        raise ValueError("empty trajectory batch")
    resid, p, actions = tb_residuals(net, trajs, env)
    coef = 2.0 * resid / n
    d_blocks = -p * coef[:, None, None]
    n_idx, t_idx = np.meshgrid(np.arange(n), np.arange(t_max), indexing="ij")
    d_blocks[n_idx, t_idx, actions] += coef[:, None]
    d_pf = np.zeros((n, t_max, t_max, q), dtype=d_blocks.dtype)
    d_pf[:, np.arange(t_max), np.arange(t_max)] = d_blocks
    grad = net.backprop(d_pf.reshape(n * t_max, t_max * q), None, np.sum(coef))
    return np.mean(resid ** 2), grad


def tb_loss(net: PolicyNet, traj: Trajectory, env: TaskEnv):
    """Trajectory-balance loss ``(log Z + sum log PF - log R - sum log PB)^2`` and its gradient."""
    loss, grad = tb_batch_loss(net, [traj], env)
    return float(loss.real) if np.iscomplexobj(loss) else float(loss), grad


def log_flow_implied_reward(net: PolicyNet, traj: Trajectory, env: TaskEnv) -> float:
    resid, _, _ = tb_residuals(net, [traj], env)
    return float(resid[0] + traj.log_reward)


def flow_implied_reward(net: PolicyNet, traj: Trajectory, env: TaskEnv) -> float:
    """``Z * prod PF / prod PB`` under the current parameters, evaluated in log space."""
    return float(np.exp(log_flow_implied_reward(net, traj, env)))


def average_grads(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Equal-weight mean of gradient vectors, summed in list order."""
    if not grads:
        raise ValueError("no gradients to average")
    total = np.zeros_like(grads[0])
    for g in grads:
        total += g
    return total / len(grads)


def pooled_sgd_step(net: PolicyNet, groups: Sequence[Sequence[Trajectory]], envs: Sequence[TaskEnv],
                    lr: float, max_grad_norm: Optional[float] = None) -> np.ndarray:
    """One batched TB-SGD step over several trajectory groups (equal weight per group)."""
    grads = [tb_batch_loss(net, trajs, env)[1] for trajs, env in zip(groups, envs)]
    net.set_params(sgd_step(net.theta, clip_grad_norm(average_grads(grads), max_grad_norm), lr))
    return net.get_params()


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    net: PolicyNet
    losses: np.ndarray
    rewards: np.ndarray
    rates: np.ndarray

    def telemetry_rows(self, cadence: int = TELEMETRY_CADENCE):
        """Windowed means every ``cadence`` trajectories: (trajectory_index, tb_loss, reward)."""
        rows = []
        for end in range(cadence, self.losses.size + 1, cadence):
            sl = slice(end - cadence, end)
            rows.append((end, float(np.mean(self.losses[sl])), float(np.mean(self.rates[sl]))))
        return rows

    def write_telemetry(self, path, cadence: int = TELEMETRY_CADENCE):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trajectory_index", "tb_loss", "reward"])
            for idx, loss, rew in self.telemetry_rows(cadence):
                w.writerow([idx, format(loss, ".10g"), format(rew, ".10g")])


def train_single_task(net: PolicyNet, env: TaskEnv, schedule: TrainSchedule,
                      rng: Optional[np.random.Generator] = None,
                      log_every: int = TELEMETRY_CADENCE * 10) -> TrainResult:
    """On-policy TB-SGD, one update per sampled trajectory. Mutates ``net``."""
    rng = np.random.default_rng(schedule.seed) if rng is None else rng
    lrs = schedule.rates()
    losses = np.zeros(lrs.size)
    rewards = np.zeros(lrs.size)
    rates = np.zeros(lrs.size)
    for i, lr in enumerate(lrs):
        traj = sample_batch(net, env, 1, rng, decode=False)[0]
        loss, grad = tb_batch_loss(net, [traj], env)
        if not np.isfinite(loss):
            raise FloatingPointError(f"TB loss diverged at trajectory {i}; lower the rate or set max_grad_norm")
        net.update(clip_grad_norm(grad, schedule.max_grad_norm), lr)
        losses[i], rewards[i], rates[i] = loss, traj.reward, traj.rate
        if log_every and (i + 1) % log_every == 0:
            sl = slice(i + 1 - log_every, i + 1)
            log.info("traj %d  tb_loss %.4g  reward %.4g  log_z %.4g",
                     i + 1, losses[sl].mean(), rates[sl].mean(), net.log_z)
    return TrainResult(net, losses, rewards, rates)


# -- evaluation ------------------------------------------------------------

def empirical_terminal_distribution(net: PolicyNet, env: TaskEnv, n_samples: int, seed: int,
                                    chunk: int = 8192) -> dict:
    """Relative frequency of every sampled terminal (keyed by its level tuple)."""
    counts: dict = {}
    if n_samples == 0:
        return counts
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        levels, _ = sample_levels(net, env, n, rng)
        uniq, cnt = np.unique(levels, axis=0, return_counts=True)
        for row, c in zip(uniq, cnt):
            key = tuple(int(v) for v in row)
            counts[key] = counts.get(key, 0) + int(c)
        done += n
    return {k: v / n_samples for k, v in sorted(counts.items())}


def best_of(net: PolicyNet, env: TaskEnv, n: int, rng: np.random.Generator):
    """Sample ``n`` configurations and keep the one with the highest CU rate.

    Ties go to the earliest draw. Returns ``(levels, cu_rate)``.
    """
    levels, _ = sample_levels(net, env, n, rng)
    rates = env.rates(levels)
    i = int(np.argmax(rates))
    return levels[i], float(rates[i])
