"""Scenario configuration: a flat ``key = value`` text format with ``#`` comments.

Every key has a default, so an empty file is the full-scale scenario. Unknown
keys, malformed values and range violations raise ``ConfigError`` carrying the
offending line number and key.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from ..gflownet import TaskEnv, TrainSchedule
from ..mdp import DiscretizationGrid
from ..meta import MetaConfig, TaskRegion
from ..physics import Direction, OfdmSpec, SystemGeometry


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line, self.key = line, key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class ScenarioConfig:
    # geometry
    m_x: int = 6
    m_z: int = 6
    n_tx: int = 8
    tx_theta: float = 15.0
    tx_phi: float = 10.0
    # OFDM link
    k_sub: int = 16
    mod_order: int = 4
    xi: Optional[float] = None  # None -> pi / mod_order
    snr_db: float = 0.0
    # search space and policy
    q_levels: int = 8
    hidden: tuple = (256, 256, 256)
    r_floor: float = 1e-6
    # directions
    cu_theta: float = 40.0
    cu_phi: float = 30.0
    eve_theta: float = -20.0
    eve_phi: float = -20.0
    dest_theta: float = 20.0
    dest_phi: float = 10.0
    task_theta: float = 40.0  # task-region center, defaults to the initial CU
    task_phi: float = 30.0
    task_radius: float = 10.0
    # single-task schedule: steps at lr_hi, then steps at lr_lo
    train_steps_hi: int = 700_000
    train_lr_hi: float = 1e-2
    train_steps_lo: int = 200_000
    train_lr_lo: float = 1e-3
    retrain_lr: float = 1e-3
    max_grad_norm: Optional[float] = None  # clip for every SGD step, None disables
    # meta schedule
    meta_alpha: float = 1e-2
    meta_beta: float = 1e-3
    k_sup: int = 100
    k_qry: int = 800
    task_batch: int = 10
    meta_iters: int = 1_000_000
    second_order: bool = False
    early_stop: bool = False
    # evaluation
    best_of: int = 64
    ser_frames: int = 20_000
    heatmap_resolution: float = 1.0
    n_waypoints: int = 30
    curvature: float = 5.0
    retrain_steps: tuple = (100, 10_000)
    # run
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(msg, key=key)

        for key in ("m_x", "m_z", "n_tx", "k_sub"):
            need(getattr(self, key) >= 1, key, f"{key} must be >= 1")
        need(self.mod_order >= 2, "mod_order", "mod_order must be >= 2")
        need(self.q_levels >= 2, "q_levels", "q_levels must be ≥ 2")
        need(self.xi is None or 0 < self.xi <= math.pi / self.mod_order, "xi", "xi must lie in (0, pi/mod_order]")
        need(len(self.hidden) >= 1 and all(h >= 1 for h in self.hidden), "hidden", "hidden sizes must be >= 1")
        need(self.max_grad_norm is None or self.max_grad_norm > 0, "max_grad_norm", "max_grad_norm must be > 0")
        need(self.r_floor > 0, "r_floor", "r_floor must be > 0")
        for key in ("tx", "cu", "eve", "dest", "task"):
            for ax in ("theta", "phi"):
                k = f"{key}_{ax}"
                need(-90 <= getattr(self, k) <= 90, k, f"{k} must lie in [-90, 90]")
        need(self.task_radius >= 0, "task_radius", "task_radius must be >= 0")
        need(abs(self.task_theta) + self.task_radius <= 90 and abs(self.task_phi) + self.task_radius <= 90,
             "task_radius", "task region leaves [-90, 90]")
        for key in ("train_steps_hi", "train_steps_lo", "meta_iters", "k_sup"):
            need(getattr(self, key) >= 0, key, f"{key} must be >= 0")
        for key in ("train_lr_hi", "train_lr_lo", "retrain_lr", "meta_alpha", "meta_beta"):
            need(getattr(self, key) >= 0, key, f"{key} must be >= 0")
        for key in ("k_qry", "task_batch", "best_of", "ser_frames", "threads"):
            need(getattr(self, key) >= 1, key, f"{key} must be >= 1")
        need(0 < self.heatmap_resolution <= 180 and math.isclose(180 / self.heatmap_resolution,
                                                                    round(180 / self.heatmap_resolution)),
             "heatmap_resolution", "heatmap_resolution must divide 180")
        need(self.n_waypoints >= 2, "n_waypoints", "n_waypoints must be >= 2")
        need(all(n >= 0 for n in self.retrain_steps), "retrain_steps", "retrain_steps must be >= 0")

    # derived objects

    @property
    def geometry(self) -> SystemGeometry:
        return SystemGeometry(self.m_x, self.m_z, self.n_tx, tx_dir=Direction(self.tx_theta, self.tx_phi))

    @property
    def ofdm(self) -> OfdmSpec:
        return OfdmSpec(self.k_sub, self.noise_var, self.mod_order, self.xi)

    @property
    def noise_var(self) -> float:
        return snr_db_to_noise_var(self.snr_db)

    @property
    def grid(self) -> DiscretizationGrid:
        return DiscretizationGrid(self.q_levels)

    @property
    def cu(self) -> Direction:
        return Direction(self.cu_theta, self.cu_phi)

    @property
    def eve(self) -> Direction:
        return Direction(self.eve_theta, self.eve_phi)

    @property
    def destination(self) -> Direction:
        return Direction(self.dest_theta, self.dest_phi)

    @property
    def region(self) -> TaskRegion:
        return TaskRegion(Direction(self.task_theta, self.task_phi), self.task_radius)

    def env(self, cu: Optional[Direction] = None) -> TaskEnv:
        """Task environment; the phase profile always stays steered at the initial CU."""
        return TaskEnv(self.geometry, self.ofdm, self.grid, cu or self.cu, eve=self.eve,
                       r_floor=self.r_floor, steer=self.cu)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(((self.train_steps_hi, self.train_lr_hi), (self.train_steps_lo, self.train_lr_lo)),
                             seed=self.seed, max_grad_norm=self.max_grad_norm)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(alpha=self.meta_alpha, beta=self.meta_beta, k_sup=self.k_sup, k_qry=self.k_qry,
                          task_batch=self.task_batch, meta_iters=self.meta_iters, seed=self.seed,
                          second_order=self.second_order, early_stop=self.early_stop, threads=self.threads,
                          max_grad_norm=self.max_grad_norm)

    def fingerprint(self) -> str:
        """Hash of what a checkpoint's shape and meaning depend on."""
        keys = ("m_x", "m_z", "n_tx", "tx_theta", "tx_phi", "k_sub", "q_levels", "hidden")
        blob = json.dumps({k: _encode(getattr(self, k)) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def snr_db_to_noise_var(snr_db: float) -> float:
    # unit-power symbols, normalized path loss
    return 10.0 ** (-snr_db / 10.0)


# Laptop-core scale: 2e5 single-task trajectories and a meta budget that fits
# the whole motion comparison in well under an hour.
DESK_OVERRIDES = dict(
    m_x=3, m_z=3, k_sub=8, q_levels=4,
    hidden=(128, 128),
    train_steps_hi=150_000, train_steps_lo=50_000,
    k_qry=200, task_batch=4, meta_iters=2_000, meta_beta=1e-2,
    task_theta=30.0, task_phi=20.0, task_radius=15.0,
    max_grad_norm=100.0,
    heatmap_resolution=5.0,
)


def preset(name: str) -> ScenarioConfig:
    if name == "full":
        return ScenarioConfig()
    if name == "desk":
        return ScenarioConfig(**DESK_OVERRIDES)
    raise ConfigError(f"unknown preset '{name}'")


# text format

_FIELDS = {f.name: f for f in fields(ScenarioConfig)}


def _encode(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode(name: str, text: str):
    default = _FIELDS[name].default
    if name in ("xi", "max_grad_norm"):
        return None if text.lower() == "none" else float(text)
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got '{text}'")
        return low == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(p) for p in text.split(",") if p.strip())
    return text


def loads(text: str, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    base = base or ScenarioConfig()
    values = {}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, val = (p.strip() for p in line.partition("="))
        if key not in _FIELDS:
            raise ConfigError("unknown key", line=lineno, key=key)
        if key in values:
            raise ConfigError("duplicate key", line=lineno, key=key)
        try:
            values[key] = _decode(key, val)
        except ValueError as exc:
            raise ConfigError(f"bad value '{val}' ({exc})", line=lineno, key=key) from None
        lines[key] = lineno
    try:
        return dataclasses.replace(base, **values)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], line=lines.get(exc.key), key=exc.key) from None


def load_config(path, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    return loads(Path(path).read_text(), base)


def dumps(cfg: ScenarioConfig) -> str:
    return "".join(f"{f.name} = {_encode(getattr(cfg, f.name))}\n" for f in fields(cfg))


def save_config(cfg: ScenarioConfig, path) -> Path:
    path = Path(path)
    path.write_text(dumps(cfg))
    return path
