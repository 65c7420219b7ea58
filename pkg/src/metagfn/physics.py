"""Closed-form TM-IRS / OFDM link model.

Harmonic coefficients of the periodic on/off switching, IRS array response,
per-subcarrier SINR, sum rates, secrecy rate and a Monte-Carlo SER estimate
with a nearest-neighbour M-PSK detector.

Angles are passed around in degrees and converted to radians once, inside
:func:`steering_vector`. Element ordering follows the Kronecker product of the
x-axis and z-axis steering vectors: element ``p * m_z + q``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Direction",
    "SystemGeometry",
    "OfdmSpec",
    "TmIrsConfig",
    "DegenerateEqualizationWarning",
    "eta",
    "switching_coeff",
    "steering_vector",
    "element_weights",
    "default_phase_profile",
    "harmonic_gain",
    "harmonic_gains",
    "harmonic_orders",
    "sinr_from_gains",
    "sinr_subcarrier",
    "achievable_sum_rate",
    "effective_sum_rate",
    "rates_from_gains",
    "secrecy_rate",
    "received_symbols",
    "psk_constellation",
    "ser_monte_carlo",
]


class DegenerateEqualizationWarning(RuntimeWarning):
    """Raised as a warning when V0 vanishes and the receiver cannot equalize."""


@dataclass(frozen=True)
class Direction:
    """Elevation/azimuth pair in degrees."""

    theta: float
    phi: float

    def __post_init__(self):
        if not (-90.0 <= self.theta <= 90.0 and -90.0 <= self.phi <= 90.0):
            raise ValueError(f"direction out of range [-90, 90]: ({self.theta}, {self.phi})")

    def distance(self, other: "Direction") -> float:
        return float(np.hypot(self.theta - other.theta, self.phi - other.phi))


@dataclass(frozen=True)
class SystemGeometry:
    m_x: int = 6
    m_z: int = 6
    n_tx: int = 8
    tx_dir: Direction = Direction(15.0, 10.0)
    # Direction of the IRS seen from the ULA. The steered ULA output collapses
    # to sqrt(N) e(t), so this never enters a formula.
    theta_irs: float = 0.0

    def __post_init__(self):
        if self.m_x < 1 or self.m_z < 1:
            raise ValueError("m_x and m_z must be >= 1")
        if self.n_tx < 1:
            raise ValueError("n_tx must be >= 1")

    @property
    def n_elements(self) -> int:
        return self.m_x * self.m_z


@dataclass(frozen=True)
class OfdmSpec:
    k_sub: int = 16
    noise_var: float = 1.0
    mod_order: int = 4
    xi: Optional[float] = None  # None -> pi / mod_order

    def __post_init__(self):
        if self.k_sub < 1:
            raise ValueError("k_sub must be >= 1")
        if self.mod_order < 2:
            raise ValueError("mod_order must be >= 2")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be > 0")
        if self.xi is None:
            object.__setattr__(self, "xi", float(np.pi / self.mod_order))
        if not (0.0 < self.xi <= np.pi / self.mod_order):
            raise ValueError(f"xi must lie in (0, pi/{self.mod_order}]")

    @classmethod
    def from_snr_db(cls, snr_db: float, **kwargs) -> "OfdmSpec":
        """Unit-power symbols and unit path loss: SNR(dB) = -10 log10(noise_var)."""
        return cls(noise_var=10.0 ** (-snr_db / 10.0), **kwargs)


def eta(geom: SystemGeometry, ofdm: OfdmSpec) -> float:
    """Power ratio N/K between the ULA gain and the OFDM normalization."""
    return geom.n_tx / ofdm.k_sub


@dataclass(frozen=True, eq=False)
class TmIrsConfig:
    """One TM-IRS design point: turn-on times, on-durations and phase shifts."""

    tau_on: np.ndarray
    delta_tau: np.ndarray
    phase: np.ndarray = field(repr=False)

    def __post_init__(self):
        tau_on = np.asarray(self.tau_on, dtype=float)
        delta_tau = np.asarray(self.delta_tau, dtype=float)
        phase = np.asarray(self.phase, dtype=complex)
        if not (tau_on.shape == delta_tau.shape == phase.shape) or tau_on.ndim != 1:
            raise ValueError("tau_on, delta_tau and phase must be 1-D vectors of equal length")
        for name, v in (("tau_on", tau_on), ("delta_tau", delta_tau)):
            if np.any(v < 0.0) or np.any(v >= 1.0):
                raise ValueError(f"{name} entries must lie in [0, 1)")
        if np.any(np.abs(np.abs(phase) - 1.0) > 1e-12):
            raise ValueError("phase entries must have unit modulus")
        object.__setattr__(self, "tau_on", tau_on)
        object.__setattr__(self, "delta_tau", delta_tau)
        object.__setattr__(self, "phase", phase)

    def __len__(self):
        return self.tau_on.size


def switching_coeff(l, tau_on, delta_tau):
    """Fourier coefficient of the 0/1 switching waveform at harmonic ``l``.

    ``delta_tau * sinc(l*pi*delta_tau) * exp(-j*l*pi*(2*tau_on + delta_tau))``.
    Broadcasts over all arguments.
    """
    l = np.asarray(l, dtype=float)
    tau_on = np.asarray(tau_on, dtype=float)
    delta_tau = np.asarray(delta_tau, dtype=float)
    # np.sinc is the normalized sinc: sin(pi x) / (pi x)
    amp = delta_tau * np.sinc(l * delta_tau)
    return amp * np.exp(-1j * np.pi * l * (2.0 * tau_on + delta_tau))


def steering_vector(geom: SystemGeometry, direction: Direction) -> np.ndarray:
    theta = np.deg2rad(direction.theta)
    phi = np.deg2rad(direction.phi)
    u = np.sin(theta) * np.cos(phi)
    v = np.sin(theta) * np.sin(phi)
    ax = np.exp(-1j * np.pi * np.arange(geom.m_x) * u)
    az = np.exp(-1j * np.pi * np.arange(geom.m_z) * v)
    return np.kron(ax, az)


def default_phase_profile(geom: SystemGeometry, cu: Direction) -> np.ndarray:
    """Phase shifts that co-phase every element toward ``cu``."""
    prod = steering_vector(geom, geom.tx_dir) * steering_vector(geom, cu)
    # unit modulus, so the inverse is the conjugate
    return np.conj(prod)


def element_weights(phase: np.ndarray, geom: SystemGeometry, direction: Direction) -> np.ndarray:
    """Per-element factor ``a_el(dir) * c_el * a_el(tx)`` multiplying each switching coefficient."""
    return steering_vector(geom, direction) * phase * steering_vector(geom, geom.tx_dir)


def harmonic_orders(k_sub: int) -> np.ndarray:
    """Harmonic indices -(K-1)..K-1 reachable inside the demodulation window."""
    return np.arange(-(k_sub - 1), k_sub)


def harmonic_gain(l: int, cfg: TmIrsConfig, geom: SystemGeometry, direction: Direction) -> complex:
    w = element_weights(cfg.phase, geom, direction)
    return complex(np.sum(w * switching_coeff(l, cfg.tau_on, cfg.delta_tau)))


def harmonic_gains(cfg: TmIrsConfig, geom: SystemGeometry, direction: Direction, orders) -> np.ndarray:
    """Vector of V(l) for every l in ``orders``."""
    w = element_weights(cfg.phase, geom, direction)
    orders = np.asarray(orders)
    psi = switching_coeff(orders[:, None], cfg.tau_on[None, :], cfg.delta_tau[None, :])
    return psi @ w


def sinr_from_gains(gains: np.ndarray, eta_: float, noise_var: float, literal: bool = False) -> np.ndarray:
    """SINR on every subcarrier from ``gains`` indexed by ``harmonic_orders(K)``.

    Works on a trailing axis of length 2K-1, so batches of gain vectors are fine.
    With ``literal=True`` the denominator subtracts a bare ``|V0|^2`` instead of
    ``eta*|V0|^2``; that form can go negative whenever eta < 1.
    """
    gains = np.asarray(gains)
    n_orders = gains.shape[-1]
    k_sub = (n_orders + 1) // 2
    power = np.abs(gains) ** 2
    p0 = power[..., k_sub - 1]
    # window for subcarrier i covers orders i-(K-1)..i -> array slots i..i+K-1
    csum = np.concatenate([np.zeros(power.shape[:-1] + (1,)), np.cumsum(power, axis=-1)], axis=-1)
    window = csum[..., k_sub:] - csum[..., :k_sub]
    if literal:
        denom = eta_ * window - p0[..., None] + noise_var
    else:
        denom = eta_ * (window - p0[..., None]) + noise_var
    return eta_ * p0[..., None] / denom


def _gains_at(cfg, geom, ofdm, direction):
    return harmonic_gains(cfg, geom, direction, harmonic_orders(ofdm.k_sub))


def sinr_subcarrier(i: int, cfg: TmIrsConfig, geom: SystemGeometry, ofdm: OfdmSpec,
                    direction: Direction, literal: bool = False) -> float:
    if not 0 <= i < ofdm.k_sub:
        raise IndexError(f"subcarrier index {i} outside [0, {ofdm.k_sub})")
    gains = _gains_at(cfg, geom, ofdm, direction)
    return float(sinr_from_gains(gains, eta(geom, ofdm), ofdm.noise_var, literal)[i])


def rates_from_gains(gains: np.ndarray, eta_: float, ofdm: OfdmSpec, literal: bool = False):
    """Return ``(achievable, effective)`` sum rates for one or many gain vectors."""
    gains = np.asarray(gains)
    sinr = sinr_from_gains(gains, eta_, ofdm.noise_var, literal)
    achievable = np.sum(np.log2(1.0 + sinr), axis=-1)
    v0 = gains[..., (gains.shape[-1] - 1) // 2]
    # Heaviside with H(0) = 1: the phase constraint is inclusive
    gate = np.abs(np.angle(v0)) <= ofdm.xi
    return achievable, np.where(gate, achievable, 0.0)


def achievable_sum_rate(cfg, geom, ofdm, direction, literal: bool = False) -> float:
    ach, _ = rates_from_gains(_gains_at(cfg, geom, ofdm, direction), eta(geom, ofdm), ofdm, literal)
    return float(ach)


def effective_sum_rate(cfg, geom, ofdm, direction, literal: bool = False) -> float:
    _, eff = rates_from_gains(_gains_at(cfg, geom, ofdm, direction), eta(geom, ofdm), ofdm, literal)
    return float(eff)


def secrecy_rate(cfg, geom, ofdm, cu: Direction, eve: Direction) -> float:
    """CU effective rate minus eavesdropper effective rate (not clamped)."""
    return effective_sum_rate(cfg, geom, ofdm, cu) - effective_sum_rate(cfg, geom, ofdm, eve)


def _channel_matrix(gains: np.ndarray, k_sub: int, eta_: float) -> np.ndarray:
    # H[i, k] = sqrt(eta) * V(i - k); gains[m] holds order m - (K-1)
    i = np.arange(k_sub)
    return np.sqrt(eta_) * gains[(i[:, None] - i[None, :]) + k_sub - 1]


def received_symbols(cfg, geom, ofdm, direction, data, noise) -> np.ndarray:
    """Demodulated symbols ``y_i = sqrt(eta) * sum_k d(k) V(i-k) + z_i``.

    ``data`` and ``noise`` may carry leading batch axes; the last axis is the
    subcarrier axis of length K.
    """
    data = np.asarray(data, dtype=complex)
    noise = np.asarray(noise, dtype=complex)
    if data.shape[-1] != ofdm.k_sub or noise.shape != data.shape:
        raise ValueError(f"data and noise must have shape (..., {ofdm.k_sub}) and match")
    h = _channel_matrix(_gains_at(cfg, geom, ofdm, direction), ofdm.k_sub, eta(geom, ofdm))
    return data @ h.T + noise


def psk_constellation(mod_order: int) -> np.ndarray:
    return np.exp(2j * np.pi * np.arange(mod_order) / mod_order)


def ser_monte_carlo(cfg, geom, ofdm, direction, n_frames: int, seed: int) -> float:
    """Symbol error rate over ``n_frames`` OFDM frames of random M-PSK symbols.

    The receiver divides by its own ``sqrt(eta)*V0`` and slices to the nearest
    constellation point. If V0 vanishes the receiver cannot equalize, so the
    chance-level SER ``(M-1)/M`` is returned and a
    :class:`DegenerateEqualizationWarning` is emitted.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    m = ofdm.mod_order
    k = ofdm.k_sub
    gains = _gains_at(cfg, geom, ofdm, direction)
    v0 = gains[k - 1]
    if v0 == 0:
        warnings.warn(f"V0 = 0 at {direction}; equalization is undefined",
                      DegenerateEqualizationWarning, stacklevel=2)
        return (m - 1) / m
    eta_ = eta(geom, ofdm)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, m, size=(n_frames, k))
    noise = np.sqrt(ofdm.noise_var / 2.0) * (
        rng.standard_normal((n_frames, k)) + 1j * rng.standard_normal((n_frames, k)))
    data = psk_constellation(m)[idx]
    y = data @ _channel_matrix(gains, k, eta_).T + noise
    y_eq = y / (np.sqrt(eta_) * v0)
    detected = np.mod(np.rint(np.angle(y_eq) * m / (2.0 * np.pi)).astype(np.int64), m)
    return float(np.count_nonzero(detected != idx)) / idx.size
