"""
Value types shared by every filter: validated vectors and covariances, Gaussian
beliefs, transfer packets, and the two covariance operations every sigma-point
rule depends on (a column-oriented square root and a PSD repair).
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import numpy.typing as npt
from loguru import logger
from scipy import linalg

from config import EPS_JITTER_REL, EPS_PSD, EPS_REPAIR_REL, ROUNDOFF_ULPS, SYMMETRY_TOL
from errors import DimensionMismatch, NonFinite, NotRepairable, NotSymmetric, StageError

StateVec = npt.NDArray[np.float64]
MeasVec = npt.NDArray[np.float64]
CovMatrix = npt.NDArray[np.float64]


def as_vector(values, length: int | None = None, name: str = "vector") -> npt.NDArray[np.float64]:
    """Returns a read-only float copy of a finite 1-D vector, checking its length."""
    vec = np.array(values, dtype=float).reshape(-1)
    if vec.size < 1:
        raise DimensionMismatch(f"{name} must have at least one entry.")
    if length is not None and vec.size != length:
        raise DimensionMismatch(f"{name} has length {vec.size}, expected {length}.")
    if not np.all(np.isfinite(vec)):
        raise NonFinite(f"{name} has non-finite entries: {vec}")
    vec.flags.writeable = False
    return vec


def as_cov(values, dim: int | None = None, name: str = "covariance", eps_psd: float = EPS_PSD) -> CovMatrix:
    """Returns a read-only symmetric copy of a covariance after checking shape, symmetry and PSD-ness."""
    mat = np.array(values, dtype=float)
    if mat.ndim == 0:
        mat = mat.reshape(1, 1)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {mat.shape}.")
    if dim is not None and mat.shape[0] != dim:
        raise DimensionMismatch(f"{name} is {mat.shape[0]}x{mat.shape[0]}, expected {dim}x{dim}.")
    if not np.all(np.isfinite(mat)):
        raise NonFinite(f"{name} has non-finite entries.")
    _check_symmetric(mat, name)
    mat = symmetrize(mat)
    min_eig = np.linalg.eigvalsh(mat).min()
    if min_eig < -eps_psd:
        raise NotRepairable(f"{name} has eigenvalue {min_eig:.3e} below -{eps_psd:g}.")
    mat.flags.writeable = False
    return mat


def symmetrize(mat: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    return 0.5 * (mat + mat.T)


def _check_symmetric(mat: npt.NDArray[np.float64], name: str = "matrix"):
    scale = np.max(np.abs(mat)) if mat.size else 0.0
    asymmetry = np.max(np.abs(mat - mat.T)) if mat.size else 0.0
    if asymmetry > SYMMETRY_TOL * max(scale, np.finfo(float).tiny):
        raise NotSymmetric(f"{name} is not symmetric (max |P - P^T| = {asymmetry:.3e}, scale {scale:.3e}).")


def roundoff_floor(sym: npt.NDArray[np.float64], value_scale: float = 0.0) -> float:
    """
    Magnitude below which a negative eigenvalue of sym is indistinguishable from
    zero. Scatter matrices of points near value_scale cannot resolve variances
    below (ulp * value_scale)^2, whatever the size of the matrix entries.
    """
    n = sym.shape[0]
    unit = ROUNDOFF_ULPS * np.finfo(float).eps
    entries = np.abs(sym).max(initial=0.0)
    return n * unit * max(entries, unit * float(value_scale) ** 2)


def matrix_sqrt_psd(
    P: CovMatrix,
    eps_repair_rel: float = EPS_REPAIR_REL,
    value_scale: float = 0.0,
) -> npt.NDArray[np.float64]:
    """
    Returns S with S @ S.T == P. Column j of S is the j-th square-root column the
    point-set rules offset the mean by.

    The lower Cholesky factor of the symmetrized matrix is used when it exists;
    singular or slightly indefinite matrices fall back to an eigen-decomposition
    with negative eigenvalues clamped to zero. value_scale is the magnitude of
    the mean the covariance belongs to (see roundoff_floor).
    """
    P = np.asarray(P, dtype=float)
    if not np.all(np.isfinite(P)):
        raise NonFinite("Cannot take the square root of a non-finite covariance.")
    _check_symmetric(P, "covariance")
    sym = symmetrize(P)
    try:
        return linalg.cholesky(sym, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass

    eigvals, eigvecs = np.linalg.eigh(sym)
    floor = -max(eps_repair_rel * abs(np.trace(sym)), roundoff_floor(sym, value_scale))
    if eigvals.min() < floor:
        raise NotRepairable(f"Most negative eigenvalue {eigvals.min():.3e} is below {floor:.3e}.")
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def psd_repair(
    P: CovMatrix,
    eps_repair_rel: float = EPS_REPAIR_REL,
    eps_jitter_rel: float = EPS_JITTER_REL,
    value_scale: float = 0.0,
    strict: bool = True,
) -> tuple[CovMatrix, int]:
    """
    Symmetrizes P and, if it has negative eigenvalues, clamps them to zero and adds
    eps_jitter_rel * trace to the diagonal. Returns the matrix and the number of
    repairs performed (0 or 1). Idempotent: a repaired matrix passes unchanged.

    Negative eigenvalues within round-off of zero (see roundoff_floor) are left
    alone and not counted. Below -eps_repair_rel * trace a strict repair raises
    NotRepairable; a lenient one clamps and counts as usual. Filters with
    negative point weights repair leniently.
    """
    P = np.asarray(P, dtype=float)
    if not np.all(np.isfinite(P)):
        raise NonFinite("Cannot repair a non-finite covariance.")
    sym = symmetrize(P)
    try:
        linalg.cholesky(sym, lower=True, check_finite=False)
        return sym, 0
    except linalg.LinAlgError:
        pass

    eigvals, eigvecs = np.linalg.eigh(sym)
    roundoff = roundoff_floor(sym, value_scale)
    if eigvals.min() >= -roundoff:
        return sym, 0
    trace = abs(np.trace(sym))
    if eigvals.min() < -max(eps_repair_rel * trace, roundoff):
        if strict:
            raise NotRepairable(
                f"Most negative eigenvalue {eigvals.min():.3e} is below -{eps_repair_rel:g} * trace ({trace:.3e})."
            )
        logger.debug(f"Clamping indefinite covariance: eigenvalue {eigvals.min():.3e}, trace {trace:.3e}")
    else:
        logger.debug(f"Repairing covariance: clamping eigenvalue {eigvals.min():.3e}")

    clamped = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
    jitter = eps_jitter_rel * max(np.trace(clamped), roundoff)
    repaired = symmetrize(clamped + jitter * np.eye(sym.shape[0]))
    return repaired, 1


class Stage(str, Enum):
    """Conditioning stage of a belief at its time index."""

    POSTERIOR = "k|k"
    PREDICTED = "k|k-1"
    TL_UPDATED = "k|k-1,eta"


_NEXT_STAGES = {
    Stage.POSTERIOR: {Stage.PREDICTED},
    Stage.PREDICTED: {Stage.TL_UPDATED, Stage.POSTERIOR},
    Stage.TL_UPDATED: {Stage.POSTERIOR},
}


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """
    Mean and covariance of a state density at step k and a conditioning stage.

    `repairs` counts covariance repairs along the chain of beliefs that led here,
    so callers can audit numerical hygiene without any shared counter.
    """

    mean: StateVec
    cov: CovMatrix
    step: int = 0
    stage: Stage = Stage.POSTERIOR
    repairs: int = 0

    def __post_init__(self):
        mean = as_vector(self.mean, name="belief mean")
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"belief covariance has shape {cov.shape}, expected {(mean.size, mean.size)}.")
        if not np.all(np.isfinite(cov)):
            raise NonFinite("belief covariance has non-finite entries.")
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "stage", Stage(self.stage))

    @property
    def dim(self) -> int:
        return self.mean.size

    def evolve(self, stage: Stage, mean, cov, repairs: int = 0) -> "GaussianBelief":
        """Returns the belief at the next stage; predicting from a posterior advances the step."""
        stage = Stage(stage)
        if stage not in _NEXT_STAGES[self.stage]:
            raise StageError(f"Cannot move a belief from stage {self.stage.value} to {stage.value}.")
        step = self.step + 1 if stage is Stage.PREDICTED else self.step
        return GaussianBelief(mean, cov, step=step, stage=stage, repairs=self.repairs + repairs)


@dataclass(frozen=True, eq=False)
class TransferPacket:
    """Predicted-observation moments a source filter ships to the primary filter, one step ahead."""

    eta_mean: MeasVec
    eta_cov: CovMatrix
    produced_at: int
    valid_for: int = field(default=-1)
    repairs: int = 0  # covariance repairs spent building eta_cov

    def __post_init__(self):
        if self.valid_for == -1:
            object.__setattr__(self, "valid_for", self.produced_at + 1)
        if self.valid_for != self.produced_at + 1:
            raise ValueError(
                f"Packet produced at step {self.produced_at} must be valid for {self.produced_at + 1}, "
                f"not {self.valid_for}."
            )
        eta_mean = as_vector(self.eta_mean, name="eta mean")
        object.__setattr__(self, "eta_mean", eta_mean)
        object.__setattr__(self, "eta_cov", as_cov(self.eta_cov, eta_mean.size, name="eta covariance"))
