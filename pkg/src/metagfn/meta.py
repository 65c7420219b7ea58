"""MAML-style meta-training of the TB GFlowNet across CU directions.

Each task is a CU direction. Support and query trajectories are drawn under
the current meta-parameters before any adaptation; the inner loop takes one
SGD step per support trajectory, and the outer loop averages the query-loss
gradients at the adapted parameters over the task batch.

The meta-gradient is first-order by default. ``second_order=True`` pulls the
query gradient back through every inner step with exact Hessian-vector
products (complex-step differentiation of the analytic gradient).
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .gflownet import TaskEnv, Trajectory, average_grads, sample_batch, tb_batch_loss
from .nn import PolicyNet, clip_grad_norm, sgd_step
from .physics import Direction

log = logging.getLogger(__name__)

COMPLEX_STEP = 1e-30


@dataclass(frozen=True)
class DirectionTask:
    cu: Direction


@dataclass(frozen=True)
class TaskRegion:
    """Disk of directions in (theta, phi) coordinates, radius in degrees."""

    center: Direction
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        c = self.center
        if abs(c.theta) + self.radius > 90 or abs(c.phi) + self.radius > 90:
            raise ValueError("task region leaves the [-90, 90] evaluation range")


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-2
    beta: float = 1e-3
    k_sup: int = 100
    k_qry: int = 800
    task_batch: int = 10
    meta_iters: int = 1_000_000
    seed: int = 0
    second_order: bool = False
    early_stop: bool = False
    plateau_window: int = 1000
    plateau_tol: float = 1e-3
    eval_samples: int = 32
    threads: int = 1
    max_grad_norm: Optional[float] = None  # applied to inner and outer steps

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be >= 0")
        if self.k_sup < 0 or self.k_qry < 1 or self.task_batch < 1 or self.meta_iters < 0:
            raise ValueError("k_sup >= 0, k_qry >= 1, task_batch >= 1, meta_iters >= 0 required")


def sample_task(region: TaskRegion, rng: np.random.Generator) -> DirectionTask:
    """Area-uniform draw from the disk."""
    r = region.radius * np.sqrt(rng.random())
    ang = 2.0 * np.pi * rng.random()
    c = region.center
    return DirectionTask(Direction(c.theta + r * np.cos(ang), c.phi + r * np.sin(ang)))


def build_sets(net: PolicyNet, task: DirectionTask, env_template: TaskEnv, k_sup: int, k_qry: int,
               rng: np.random.Generator):
    """Support and query trajectories drawn under the current parameters at the task direction."""
    env = env_template.with_cu(task.cu)
    trajs = sample_batch(net, env, k_sup + k_qry, rng, decode=False)
    return trajs[:k_sup], trajs[k_sup:]


def inner_adapt(omega: PolicyNet, support: Sequence[Trajectory], env: TaskEnv, alpha: float,
                return_path: bool = False, max_grad_norm: Optional[float] = None):
    """One SGD step per support trajectory, starting from ``omega``'s parameters.

    ``omega`` is not modified. Returns the adapted parameter vector, and with
    ``return_path`` also the parameters before each step.
    """
    scratch = omega.copy()
    path = []
    for traj in support:
        if return_path:
            path.append(scratch.get_params())
        _, grad = tb_batch_loss(scratch, [traj], env)
        scratch.update(clip_grad_norm(grad, max_grad_norm), alpha)
    phi = scratch.theta
    return (phi, path) if return_path else phi


def query_loss(phi: PolicyNet, query: Sequence[Trajectory], env: TaskEnv) -> float:
    """Mean TB loss of the query trajectories under ``phi`` (rewards as cached)."""
    if not query:
        raise ValueError("empty query set")
    loss, _ = tb_batch_loss(phi, query, env)
    return float(loss)


def hessian_vector(net_dims, params: np.ndarray, trajs: Sequence[Trajectory], env: TaskEnv,
                   v: np.ndarray) -> np.ndarray:
    """Exact ``H v`` of the mean TB loss via complex-step differentiation of its gradient."""
    cnet = PolicyNet(net_dims, params + 1j * COMPLEX_STEP * v)
    _, g = tb_batch_loss(cnet, trajs, env)
    return g.imag / COMPLEX_STEP


@dataclass
class TaskOutcome:
    grad: np.ndarray
    query_loss: float
    adapted_reward: float
    support: list = field(repr=False)
    query: list = field(repr=False)


def _run_task(omega: PolicyNet, task: DirectionTask, env_template: TaskEnv, cfg: MetaConfig,
              rng: np.random.Generator) -> TaskOutcome:
    env = env_template.with_cu(task.cu)
    support, query = build_sets(omega, task, env_template, cfg.k_sup, cfg.k_qry, rng)
    phi, path = inner_adapt(omega, support, env, cfg.alpha, return_path=True, max_grad_norm=cfg.max_grad_norm)
    phi_net = PolicyNet(omega.layer_dims, phi)
    loss, grad = tb_batch_loss(phi_net, query, env)
    if cfg.second_order:
        v = grad
        for params, traj in zip(reversed(path), reversed(support)):
            v = v - cfg.alpha * hessian_vector(omega.layer_dims, params, [traj], env, v)
        grad = v
    reward = float("nan")
    if cfg.eval_samples:
        reward = float(np.mean([t.rate for t in sample_batch(phi_net, env, cfg.eval_samples, rng, decode=False)]))
    return TaskOutcome(grad, float(loss), reward, support, query)


@dataclass
class MetaStepResult:
    params: np.ndarray
    mean_query_loss: float
    mean_adapted_reward: float
    outcomes: list = field(repr=False)


def meta_step(net: PolicyNet, tasks: Sequence[DirectionTask], env_template: TaskEnv, cfg: MetaConfig,
              rng: np.random.Generator) -> MetaStepResult:
    """One outer update of ``net`` in place; tasks run on snapshots of the current parameters.

    Every task gets its own child generator spawned from ``rng`` so the result
    does not depend on ``cfg.threads``; gradients are reduced in task order.
    """
    rngs = rng.spawn(len(tasks))
    snapshots = [net.copy() for _ in tasks]
    jobs = list(zip(snapshots, tasks, rngs))
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            outcomes = list(pool.map(lambda j: _run_task(j[0], j[1], env_template, cfg, j[2]), jobs))
    else:
        outcomes = [_run_task(s, t, env_template, cfg, r) for s, t, r in jobs]
    meta_grad = average_grads([o.grad for o in outcomes])
    net.set_params(sgd_step(net.theta, clip_grad_norm(meta_grad, cfg.max_grad_norm), cfg.beta))
    return MetaStepResult(net.get_params(),
                          float(np.mean([o.query_loss for o in outcomes])),
                          float(np.mean([o.adapted_reward for o in outcomes])),
                          outcomes)


@dataclass
class MetaTrainResult:
    net: PolicyNet
    telemetry: list  # (meta_iter, mean_query_loss, mean_adapted_reward)
    stopped_early: bool = False

    def write_telemetry(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["meta_iter", "mean_query_loss", "mean_adapted_reward"])
            for it, loss, rew in self.telemetry:
                w.writerow([it, format(loss, ".10g"), format(rew, ".10g")])


def _plateaued(losses: list, window: int, tol: float) -> bool:
    if len(losses) < 2 * window:
        return False
    prev = np.mean(losses[-2 * window:-window])
    last = np.mean(losses[-window:])
    return (prev - last) < tol * abs(prev)


def meta_train(net: PolicyNet, region: TaskRegion, env_template: TaskEnv, cfg: MetaConfig,
               checkpoint: Optional[Callable[[int, PolicyNet], None]] = None,
               checkpoint_every: int = 0, log_every: int = 100) -> MetaTrainResult:
    """Algorithm-1 loop; mutates and returns ``net`` as the meta-initialization."""
    rng = np.random.default_rng(cfg.seed)
    telemetry = []
    losses = []
    stopped = False
    for it in range(1, cfg.meta_iters + 1):
        tasks = [sample_task(region, rng) for _ in range(cfg.task_batch)]
        res = meta_step(net, tasks, env_template, cfg, rng)
        if not np.isfinite(res.mean_query_loss):
            raise FloatingPointError(f"meta loss diverged at iteration {it}; lower alpha/beta or set max_grad_norm")
        telemetry.append((it, res.mean_query_loss, res.mean_adapted_reward))
        losses.append(res.mean_query_loss)
        if log_every and it % log_every == 0:
            recent = np.array(telemetry[-log_every:])
            log.info("meta-iter %d  query_loss %.4g  adapted_reward %.4g",
                     it, recent[:, 1].mean(), np.nanmean(recent[:, 2]))
        if checkpoint is not None and checkpoint_every and it % checkpoint_every == 0:
            checkpoint(it, net)
        if cfg.early_stop and _plateaued(losses, cfg.plateau_window, cfg.plateau_tol):
            stopped = True
            log.info("meta-loss plateau at iteration %d", it)
            break
    return MetaTrainResult(net, telemetry, stopped)


def deploy_adapt(omega: PolicyNet, new_direction: Direction, env_template: TaskEnv, k_sup: int,
                 alpha: float, rng: np.random.Generator, max_grad_norm: Optional[float] = None):
    """Inner-loop-only adaptation at deployment; returns ``(adapted_net, support)``."""
    env = env_template.with_cu(new_direction)
    support = sample_batch(omega, env, k_sup, rng, decode=False)
    phi = inner_adapt(omega, support, env, alpha, max_grad_norm=max_grad_norm)
    return PolicyNet(omega.layer_dims, phi), support
