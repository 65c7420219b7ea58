"""Experiment runners behind the CLI: training, SER heatmap, motion-path secrecy, oracle checks.

Every runner writes CSVs with a header row, fixed column order and
``repr``-formatted floats so reruns with the same config, seed and
checkpoints are byte-identical.
"""
from __future__ import annotations

import csv
import json
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import __version__, mdp
from ..gflownet import (TaskEnv, TrainSchedule, best_of, empirical_terminal_distribution, sample_batch,
                        tb_batch_loss, train_single_task)
from ..meta import deploy_adapt, meta_train
from ..nn import CheckpointError, PolicyNet, load_checkpoint, save_checkpoint
from ..physics import Direction, ser_monte_carlo
from .config import ScenarioConfig, dumps
from .motion import MotionPath

log = logging.getLogger(__name__)


class FingerprintMismatch(CheckpointError):
    pass


# artifacts

def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_manifest(out_dir, cfg: ScenarioConfig, argv: Sequence[str], **extra) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dumps(cfg))
    manifest = {
        "argv": list(argv),
        "config_hash": cfg.config_hash(),
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "versions": {"metagfn": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def new_net(cfg: ScenarioConfig, seed: Optional[int] = None) -> PolicyNet:
    n_in = mdp.state_dim(cfg.geometry, cfg.grid)
    return PolicyNet.build(n_in, n_in, cfg.hidden, seed=cfg.seed if seed is None else seed)


def save_run_checkpoint(path, net: PolicyNet, cfg: ScenarioConfig, tag: str) -> Path:
    return save_checkpoint(path, net, fingerprint=cfg.fingerprint(), seed=cfg.seed, tag=tag)


def load_run_checkpoint(path, cfg: ScenarioConfig, tag: Optional[str] = None) -> PolicyNet:
    net, header = load_checkpoint(path)
    if header.get("fingerprint") != cfg.fingerprint():
        raise FingerprintMismatch(
            f"{path}: checkpoint fingerprint {header.get('fingerprint')} != config {cfg.fingerprint()}")
    if tag is not None and header.get("tag") != tag:
        raise FingerprintMismatch(f"{path}: expected a '{tag}' checkpoint, found '{header.get('tag')}'")
    return net


def cell_rng(seed: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(index)))


def _pmap(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# training

def run_train(cfg: ScenarioConfig, out_dir, init: Optional[PolicyNet] = None):
    net = init.copy() if init is not None else new_net(cfg)
    res = train_single_task(net, cfg.env(), cfg.schedule())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.write_telemetry(out / "train_telemetry.csv")
    ckpt = save_run_checkpoint(out / "single.ckpt", net, cfg, "single")
    return net, ckpt


def run_meta_train(cfg: ScenarioConfig, out_dir, init: Optional[PolicyNet] = None):
    net = init.copy() if init is not None else new_net(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = meta_train(net, cfg.region, cfg.env(), cfg.meta_config(),
                     checkpoint=lambda it, n: save_run_checkpoint(out / "meta.ckpt", n, cfg, "meta"),
                     checkpoint_every=1000)
    res.write_telemetry(out / "meta_telemetry.csv")
    ckpt = save_run_checkpoint(out / "meta.ckpt", net, cfg, "meta")
    return net, ckpt


# SER heatmap

def deployed_levels(net: PolicyNet, env: TaskEnv, n: int, seed: int) -> np.ndarray:
    levels, _ = best_of(net, env, n, cell_rng(seed, 0xC0F16))
    return levels


def heatmap_grid(resolution: float) -> np.ndarray:
    n = int(round(180 / resolution)) + 1
    return np.linspace(-90.0, 90.0, n)


def run_heatmap(cfg: ScenarioConfig, net: PolicyNet, resolution: Optional[float] = None,
                out_path=None, levels: Optional[np.ndarray] = None):
    """SER at every (theta, phi) cell for the best-of-S configuration at the CU.

    Returns ``(rows, levels)``; rows are ``(theta, phi, ser, log10_ser)``
    ordered theta-major. log10 is floored at half a symbol error.
    """
    resolution = cfg.heatmap_resolution if resolution is None else resolution
    env = cfg.env()
    if levels is None:
        levels = deployed_levels(net, env, cfg.best_of, cfg.seed)
    tm = env.decode(levels)
    axis = heatmap_grid(resolution)
    cells = [(i, th, ph) for i, (th, ph) in enumerate((a, b) for a in axis for b in axis)]
    floor = 0.5 / (cfg.ser_frames * cfg.k_sub)

    def one(cell):
        i, th, ph = cell
        ser = ser_monte_carlo(tm, env.geom, env.ofdm, Direction(float(th), float(ph)), cfg.ser_frames,
                              cell_rng(cfg.seed, 1, i))
        return (float(th), float(ph), ser, float(np.log10(max(ser, floor))))

    rows = _pmap(one, cells, cfg.threads)
    if out_path is not None:
        write_csv(out_path, ("theta", "phi", "ser", "log10_ser"), rows)
    return rows, levels


# motion-path secrecy

@dataclass(frozen=True)
class Method:
    kind: str  # native | retrain | meta
    steps: int = 0

    @classmethod
    def parse(cls, text: str) -> "Method":
        text = text.strip()
        if text == "native":
            return cls("native")
        for kind in ("retrain", "meta"):
            if text.startswith(kind + "(") and text.endswith(")"):
                return cls(kind, int(text[len(kind) + 1:-1]))
        raise ValueError(f"unknown method '{text}' (native, retrain(N) or meta(K))")

    def __str__(self):
        return self.kind if self.kind == "native" else f"{self.kind}({self.steps})"


def adapted_net(method: Method, cfg: ScenarioConfig, direction: Direction, rng: np.random.Generator,
                pretrained: Optional[PolicyNet] = None, meta_init: Optional[PolicyNet] = None) -> PolicyNet:
    if method.kind == "native":
        return _need(pretrained, method)
    if method.kind == "retrain":
        net = _need(pretrained, method).copy()
        train_single_task(net, cfg.env(direction), TrainSchedule(((method.steps, cfg.retrain_lr),), max_grad_norm=cfg.max_grad_norm),
                          rng=rng, log_every=0)
        return net
    if method.kind == "meta":
        net, _ = deploy_adapt(_need(meta_init, method), direction, cfg.env(), method.steps, cfg.meta_alpha, rng,
                              max_grad_norm=cfg.max_grad_norm)
        return net
    raise ValueError(method.kind)


def _need(net, method):
    if net is None:
        raise CheckpointError(f"method {method} needs a {'meta' if method.kind == 'meta' else 'pretrained'} checkpoint")
    return net


def secrecy_at(method: Method, cfg: ScenarioConfig, direction: Direction, rng: np.random.Generator,
               pretrained=None, meta_init=None) -> float:
    net = adapted_net(method, cfg, direction, rng, pretrained, meta_init)
    env = cfg.env(direction)
    levels, _ = best_of(net, env, cfg.best_of, rng)
    return float(env.secrecy(levels[None])[0])


def run_motion_eval(cfg: ScenarioConfig, method, path: MotionPath, pretrained=None, meta_init=None,
                    out_path=None):
    """Secrecy rate of the best-of-S configuration after per-method adaptation at every waypoint."""
    method = Method.parse(method) if isinstance(method, str) else method
    _need(meta_init if method.kind == "meta" else pretrained, method)

    def one(i):
        rng = cell_rng(cfg.seed, 2, i)
        return (float(path.cumulative_angle[i]),
                secrecy_at(method, cfg, path.waypoints[i], rng, pretrained, meta_init))

    rows = _pmap(one, range(len(path)), cfg.threads)
    if out_path is not None:
        write_csv(out_path, ("cumulative_angle", "secrecy_rate"), rows)
    return rows


# validation subcommands

def run_oracle_check(cfg: ScenarioConfig, n_samples: int = 100_000, net: Optional[PolicyNet] = None,
                     train: bool = True, out_path=None, cap: int = mdp.DEFAULT_ENUM_CAP):
    """Train on an enumerable instance and compare sampled frequencies with R / sum R.

    Returns ``(l1, table)`` with table rows ``(levels, target, empirical)``.
    """
    env = cfg.env()
    levels = mdp.enumerate_levels(env.geom, env.grid, cap=cap)
    rewards = env.rewards(levels)
    target = rewards / rewards.sum()
    net = new_net(cfg) if net is None else net
    if train:
        train_single_task(net, env, cfg.schedule())
    freq = empirical_terminal_distribution(net, env, n_samples, seed=cfg.seed + 1)
    emp = np.array([freq.get(tuple(int(v) for v in lv), 0.0) for lv in levels])
    l1 = float(np.abs(emp - target).sum())
    table = [(" ".join(str(int(v)) for v in lv), t, e) for lv, t, e in zip(levels, target, emp)]
    if out_path is not None:
        write_csv(out_path, ("levels", "target", "empirical"), table)
    return l1, table


def _rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def run_grad_check(seed: int = 0, n_pairs: int = 20, h: float = 1e-5, tol: float = 1e-4,
                   corrupt: bool = False, env: Optional[TaskEnv] = None, hidden=(12, 12)):
    """Analytic TB gradient against central differences on random tiny nets and trajectories.

    ``corrupt`` perturbs the analytic gradient as a negative control.
    """
    from ..mdp import DiscretizationGrid
    from ..physics import OfdmSpec, SystemGeometry

    if env is None:
        cu = Direction(40, 30)
        env = TaskEnv(SystemGeometry(1, 2), OfdmSpec(k_sub=8), DiscretizationGrid(4), cu, steer=cu)
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_pairs):
        net = PolicyNet.build(env.n_inputs, env.n_inputs, hidden, seed=int(rng.integers(2 ** 31)))
        net.log_z = float(rng.normal(0.0, 2.0))
        trajs = sample_batch(net, env, 1, rng)
        _, grad = tb_batch_loss(net, trajs, env)
        if corrupt:
            grad = grad * 1.01 + 1e-3
        theta = net.get_params()
        fd = np.empty_like(theta)
        probe = PolicyNet(net.layer_dims, theta.copy())
        for i in range(theta.size):
            probe.theta[i] = theta[i] + h
            up = tb_batch_loss(probe, trajs, env)[0]
            probe.theta[i] = theta[i] - h
            down = tb_batch_loss(probe, trajs, env)[0]
            probe.theta[i] = theta[i]
            fd[i] = (up - down) / (2 * h)
        errors.append(_rel_err(grad, fd))
    worst = max(errors)
    return {"seed": seed, "pairs": n_pairs, "max_rel_err": worst, "passed": bool(worst < tol),
            "errors": errors}


def command_line() -> list:
    return list(sys.argv)


def held_out_directions(cfg: ScenarioConfig, n: int = 5, min_dist: float = 10.0) -> list:
    """``n`` points on the straight CU-to-destination chord, the nearest ``min_dist`` degrees out."""
    start, end = cfg.cu, cfg.destination
    frac0 = min(min_dist / start.distance(end), 1.0)
    out = []
    for f in np.linspace(frac0, 1.0, n):
        out.append(Direction(start.theta + f * (end.theta - start.theta), start.phi + f * (end.phi - start.phi)))
    return out


def compare_methods(cfg: ScenarioConfig, methods: Sequence, directions: Sequence[Direction], seeds: Sequence[int],
                    pretrained=None, meta_init=None) -> dict:
    """Secrecy rate per method as a ``(len(seeds), len(directions))`` array."""
    out = {}
    for m in methods:
        m = Method.parse(m) if isinstance(m, str) else m
        vals = np.zeros((len(seeds), len(directions)))
        for a, s in enumerate(seeds):
            for b, d in enumerate(directions):
                vals[a, b] = secrecy_at(m, cfg, d, cell_rng(s, 3, b), pretrained, meta_init)
        out[str(m)] = vals
    return out
