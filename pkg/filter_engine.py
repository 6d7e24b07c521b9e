"""
Rule-agnostic Gaussian moment matching: the predict, measurement-update and
predict-observation steps shared by the UKF and both cubature filters.
"""
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy import linalg

from config import MAX_CONDITION
from core import CovMatrix, GaussianBelief, MeasVec, Stage, TransferPacket, psd_repair
from errors import SingularInnovation, StageError
from models import MeasurementModel, ProcessModel, wrap_angle, wrap_angle_residual
from rules import SigmaRule, WeightedPointSet


@dataclass(frozen=True, eq=False)
class MomentSet:
    """Predicted measurement mean, innovation covariance and state/measurement cross-covariance."""

    pred_meas_mean: MeasVec
    innov_cov: CovMatrix
    cross_cov: npt.NDArray[np.float64]


def weighted_mean(values: npt.NDArray[np.float64], weights, angle_indices=()) -> npt.NDArray[np.float64]:
    """Weighted mean of rows; angular components are averaged as wrapped residuals about the first row."""
    mean = weights @ values
    for i in angle_indices:
        ref = values[0, i]
        mean[i] = wrap_angle(ref + weights @ wrap_angle_residual(values[:, i], ref))
    return mean


def residuals(values: npt.NDArray[np.float64], center, angle_indices=()) -> npt.NDArray[np.float64]:
    dev = values - center
    for i in angle_indices:
        dev[..., i] = wrap_angle_residual(values[..., i], center[i])
    return dev


def observation_moments(
    points: WeightedPointSet,
    state_mean,
    measurement: MeasurementModel,
    added_cov: CovMatrix,
) -> MomentSet:
    """Moments of h over a point set; added_cov is the noise (or transferred) covariance."""
    z_points = measurement.function(points.points)
    w = points.weights
    z_hat = weighted_mean(z_points, w, measurement.angle_indices)
    dz = residuals(z_points, z_hat, measurement.angle_indices)
    dx = points.points - state_mean
    innov_cov = dz.T @ (w[:, None] * dz) + added_cov
    cross_cov = dx.T @ (w[:, None] * dz)
    return MomentSet(z_hat, 0.5 * (innov_cov + innov_cov.T), cross_cov)


def kalman_correct(
    belief: GaussianBelief,
    moments: MomentSet,
    observed,
    angle_indices=(),
    stage: Stage = Stage.POSTERIOR,
    strict: bool = True,
) -> GaussianBelief:
    """
    Conditions a belief on one observation given its moments; the gain comes from
    a linear solve. strict=False clamps an indefinite posterior instead of raising.
    """
    innov_cov = moments.innov_cov
    if not np.all(np.isfinite(innov_cov)) or not np.linalg.cond(innov_cov) <= MAX_CONDITION:
        raise SingularInnovation(f"Innovation covariance is singular at step {belief.step}:\n{innov_cov}")
    try:
        gain = linalg.solve(innov_cov, moments.cross_cov.T, assume_a="sym", check_finite=False).T
    except linalg.LinAlgError as e:
        raise SingularInnovation(f"Innovation solve failed at step {belief.step}: {e}") from e

    innovation = residuals(np.asarray(observed, dtype=float), moments.pred_meas_mean, angle_indices)
    mean = belief.mean + gain @ innovation
    cov, repairs = psd_repair(
        belief.cov - gain @ innov_cov @ gain.T, value_scale=np.abs(mean).max(), strict=strict
    )
    return belief.evolve(stage, mean, cov, repairs)


def _propagate(belief: GaussianBelief, rule: SigmaRule, process: ProcessModel) -> WeightedPointSet:
    drawn = rule.generate(belief)
    return WeightedPointSet(process.transition(drawn.points), drawn.weights)


def predict(
    belief: GaussianBelief,
    rule: SigmaRule,
    process: ProcessModel,
) -> tuple[GaussianBelief, WeightedPointSet]:
    """Time update. Returns the predicted belief and the propagated points f(X_j)."""
    if belief.stage is not Stage.POSTERIOR:
        raise StageError(f"predict needs a posterior belief, got stage {belief.stage.value}.")
    propagated = _propagate(belief, rule, process)
    mean = propagated.mean()
    cov, repairs = psd_repair(
        propagated.scatter(mean) + process.noise_cov,
        value_scale=np.abs(propagated.points).max(),
        strict=not propagated.has_negative_weights,
    )
    return belief.evolve(Stage.PREDICTED, mean, cov, repairs), propagated


def measurement_update(
    pred: GaussianBelief,
    pred_points: WeightedPointSet,
    measurement: MeasurementModel,
    z: MeasVec,
    noise_cov: CovMatrix | None = None,
) -> GaussianBelief:
    """
    Measurement update using the given points (propagated or redrawn) around
    pred.mean. noise_cov overrides the sensor covariance (fused measurements).
    """
    if pred.stage not in (Stage.PREDICTED, Stage.TL_UPDATED):
        raise StageError(f"measurement_update needs a predicted belief, got stage {pred.stage.value}.")
    noise_cov = measurement.noise_cov if noise_cov is None else noise_cov
    moments = observation_moments(pred_points, pred.mean, measurement, noise_cov)
    return kalman_correct(pred, moments, z, measurement.angle_indices, strict=not pred_points.has_negative_weights)


def predict_observation(
    post: GaussianBelief,
    rule: SigmaRule,
    process: ProcessModel,
    measurement: MeasurementModel,
) -> TransferPacket:
    """One-step-ahead measurement moments from a posterior: the packet a source filter transfers."""
    if post.stage is not Stage.POSTERIOR:
        raise StageError(f"predict_observation needs a posterior belief, got stage {post.stage.value}.")
    propagated = _propagate(post, rule, process)
    moments = observation_moments(propagated, propagated.mean(), measurement, measurement.noise_cov)
    # Negative-weight rules can leave the scatter indefinite.
    eta_cov, repairs = psd_repair(
        moments.innov_cov,
        value_scale=np.abs(moments.pred_meas_mean).max(),
        strict=not propagated.has_negative_weights,
    )
    return TransferPacket(moments.pred_meas_mean, eta_cov, produced_at=post.step, repairs=repairs)
