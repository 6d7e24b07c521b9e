"""
Measurement vector fusion with a one-step-delayed source: the primary
measurement is fused with the transferred predicted observation and the fused
pseudo-measurement is tracked by an ordinary filter.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg

from config import MAX_CONDITION
from core import CovMatrix, GaussianBelief, MeasVec, TransferPacket, as_vector, symmetrize
from errors import DimensionMismatch, SingularSum, StalePacket
from filter_engine import measurement_update, predict, residuals
from models import wrap_angle
from btl import FilterState


class MvfNoise(str, Enum):
    FUSED = "fused"  # update with the fused covariance
    PRIMARY = "primary"  # keep the primary sensor covariance


@dataclass(frozen=True, eq=False)
class FusedMeasurement:
    z_tilde: MeasVec
    Q_tilde: CovMatrix


def fuse(z: MeasVec, Q_w: CovMatrix, eta_star: MeasVec, eta_cov: CovMatrix, angle_indices=()) -> FusedMeasurement:
    """
    Minimum mean square combination of two measurement-space estimates:
    z~ = z + Q_w (Q_w + eta_cov)^-1 (eta* - z),  Q~ = (Q_w^-1 + eta_cov^-1)^-1.
    Components listed in angle_indices are blended as wrapped residuals.
    """
    z = as_vector(z, name="z")
    eta_star = as_vector(eta_star, z.size, name="eta*")
    Q_w = np.atleast_2d(np.asarray(Q_w, dtype=float))
    eta_cov = np.atleast_2d(np.asarray(eta_cov, dtype=float))
    if Q_w.shape != (z.size, z.size) or eta_cov.shape != (z.size, z.size):
        raise DimensionMismatch(f"Covariances {Q_w.shape} and {eta_cov.shape} do not match a {z.size}-vector.")

    total = Q_w + eta_cov
    if not np.all(np.isfinite(total)) or not np.linalg.cond(total) <= MAX_CONDITION:
        raise SingularSum(f"Q_w + eta_cov is not invertible:\n{total}")
    try:
        # Q_w (Q_w + E)^-1, via the transpose of a symmetric solve
        blend = linalg.solve(total, Q_w, assume_a="sym", check_finite=False).T
    except linalg.LinAlgError as e:
        raise SingularSum(f"Q_w + eta_cov solve failed: {e}") from e

    z_tilde = z + blend @ residuals(eta_star, z, angle_indices)
    for i in angle_indices:
        z_tilde[i] = wrap_angle(z_tilde[i])
    Q_tilde = symmetrize(blend @ eta_cov)
    return FusedMeasurement(z_tilde, Q_tilde)


def mvf_step(
    state: FilterState,
    z: MeasVec,
    packet: TransferPacket,
    noise: MvfNoise = MvfNoise.FUSED,
) -> GaussianBelief:
    """Fuses z with the transferred predicted observation, then runs one isolated predict + update."""
    if packet.valid_for != state.belief.step + 1:
        raise StalePacket(f"Packet valid for step {packet.valid_for} offered to the MVF filter at step {state.belief.step + 1}.")
    fused = fuse(z, state.measurement.noise_cov, packet.eta_mean, packet.eta_cov, state.measurement.angle_indices)
    pred, propagated = predict(state.belief, state.rule, state.process)
    noise_cov = fused.Q_tilde if MvfNoise(noise) is MvfNoise.FUSED else None
    return measurement_update(pred, propagated, state.measurement, fused.z_tilde, noise_cov=noise_cov)
