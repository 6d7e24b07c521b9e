"""
Coordinated-turn process model and co-located range-bearing sensors.

All model functions work on a single vector or on a stack of vectors (points in
rows), so a whole sigma-point set is propagated in one call.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np
import numpy.typing as npt

from config import MIN_RANGE_M, OMEGA_EPSILON
from core import CovMatrix, MeasVec, StateVec, as_cov
from errors import NonFinite, OriginSingularity

CT_STATE_DIM = 5  # [x, x_dot, y, y_dot, omega]
RB_MEAS_DIM = 2  # [range, bearing]
BEARING = 1


@dataclass(frozen=True)
class CtModelConfig:
    """Coordinated-turn parameters: sample time (s), acceleration and turn-rate noise densities."""

    T_s: float = 1.0
    q1: float = 0.1
    q2: float = 1.75e-2
    omega_epsilon: float = OMEGA_EPSILON

    def __post_init__(self):
        if not self.T_s > 0:
            raise ValueError(f"T_s must be positive, got {self.T_s}.")
        if self.q1 < 0 or self.q2 < 0:
            raise ValueError(f"q1 and q2 must be nonnegative, got q1={self.q1}, q2={self.q2}.")
        if not self.omega_epsilon > 0:
            raise ValueError(f"omega_epsilon must be positive, got {self.omega_epsilon}.")


@dataclass(frozen=True)
class SensorModel:
    """Range/bearing noise: Q_w = intensity * diag(sigma_r^2, sigma_zeta^2)."""

    sigma_r: float = 10.0
    sigma_zeta: float = np.sqrt(10.0) * 1e-3
    intensity: float = 1.0

    def __post_init__(self):
        if not (self.sigma_r > 0 and self.sigma_zeta > 0):
            raise ValueError(f"sigma_r and sigma_zeta must be positive, got {self.sigma_r}, {self.sigma_zeta}.")
        if not self.intensity > 0:
            raise ValueError(f"Noise intensity must be positive, got {self.intensity}.")

    def with_intensity(self, intensity: float) -> "SensorModel":
        return SensorModel(self.sigma_r, self.sigma_zeta, intensity)


@dataclass(frozen=True, eq=False)
class ProcessModel:
    """Deterministic transition f (row-wise on point stacks) and additive noise covariance Q_v."""

    transition: Callable[[npt.NDArray[np.float64]], npt.NDArray[np.float64]]
    noise_cov: CovMatrix


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Measurement function h, additive noise covariance, and which components are angles."""

    function: Callable[[npt.NDArray[np.float64]], npt.NDArray[np.float64]]
    noise_cov: CovMatrix
    angle_indices: tuple[int, ...] = ()

    def with_noise(self, noise_cov: CovMatrix) -> "MeasurementModel":
        return MeasurementModel(self.function, noise_cov, self.angle_indices)


def ct_transition(x: StateVec, cfg: CtModelConfig) -> StateVec:
    """
    Deterministic coordinated-turn step F(omega) @ x. Accepts shape (5,) or (N, 5).
    Turn rates with |omega| < omega_epsilon use the constant-velocity limit.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"Coordinated-turn input has non-finite entries: {x}")
    px, vx, py, vy, omega = np.moveaxis(x, -1, 0)
    T = cfg.T_s
    small = np.abs(omega) < cfg.omega_epsilon
    safe_omega = np.where(small, 1.0, omega)
    sin_wt = np.sin(omega * T)
    cos_wt = np.cos(omega * T)
    a = np.where(small, T, sin_wt / safe_omega)  # sin(wT)/w
    b = np.where(small, 0.0, (1.0 - cos_wt) / safe_omega)  # (1 - cos(wT))/w
    c = np.where(small, 1.0, cos_wt)
    s = np.where(small, 0.0, sin_wt)
    return np.stack(
        [
            px + a * vx - b * vy,
            c * vx - s * vy,
            py + b * vx + a * vy,
            s * vx + c * vy,
            omega,
        ],
        axis=-1,
    )


def ct_process_cov(cfg: CtModelConfig) -> CovMatrix:
    """Q_v: white-acceleration blocks on each position/velocity pair and q2*T on the turn rate."""
    T = cfg.T_s
    block = cfg.q1 * np.array([[T**4 / 4.0, T**3 / 2.0], [T**3 / 2.0, T**2]])
    Q = np.zeros((CT_STATE_DIM, CT_STATE_DIM))
    Q[0:2, 0:2] = block
    Q[2:4, 2:4] = block
    Q[4, 4] = cfg.q2 * T
    return Q


def range_bearing(x: StateVec) -> MeasVec:
    """[sqrt(x^2 + y^2), atan2(y, x)] for a sensor at the origin. Accepts shape (5,) or (N, 5)."""
    x = np.asarray(x, dtype=float)
    px = x[..., 0]
    py = x[..., 2]
    rng = np.hypot(px, py)
    if np.any(rng < MIN_RANGE_M):
        raise OriginSingularity(f"Range {np.min(rng):.3e} m is too close to the sensor at the origin.")
    return np.stack([rng, np.arctan2(py, px)], axis=-1)


def meas_cov(sensor: SensorModel) -> CovMatrix:
    return sensor.intensity * np.diag([sensor.sigma_r**2, sensor.sigma_zeta**2])


def wrap_angle(angle):
    """Wraps angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return float(wrapped) if wrapped.ndim == 0 else wrapped


def wrap_angle_residual(a, b):
    """(a - b) wrapped into (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def coordinated_turn_process(cfg: CtModelConfig) -> ProcessModel:
    return ProcessModel(lambda x: ct_transition(x, cfg), as_cov(ct_process_cov(cfg), CT_STATE_DIM, "Q_v"))


def range_bearing_sensor(sensor: SensorModel) -> MeasurementModel:
    return MeasurementModel(range_bearing, as_cov(meas_cov(sensor), RB_MEAS_DIM, "Q_w"), angle_indices=(BEARING,))
