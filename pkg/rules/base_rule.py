from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
import numpy.typing as npt

from core import GaussianBelief, matrix_sqrt_psd
from errors import DegenerateRule, DimensionMismatch

ALPHA_RANGE = (1e-4, 1.0)


class RuleKind(str, Enum):
    UT = "ut"
    CKF3 = "ckf3"
    CKF5 = "ckf5"


@dataclass(frozen=True)
class RuleSpec:
    """
    Which weighted point set to use and for what state dimension.

    alpha and kappa only apply to the unscented rule; a UT spec built without a
    kappa gets the classic kappa = 3 - n_x.
    """

    kind: RuleKind
    n_x: int
    alpha: float = 1.0
    kappa: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if int(self.n_x) != self.n_x or self.n_x < 1:
            raise DegenerateRule(f"State dimension must be a positive integer, got {self.n_x}.")
        object.__setattr__(self, "n_x", int(self.n_x))
        if self.kind is RuleKind.UT:
            if not ALPHA_RANGE[0] <= self.alpha <= ALPHA_RANGE[1]:
                raise DegenerateRule(f"alpha must lie in [{ALPHA_RANGE[0]}, {ALPHA_RANGE[1]}], got {self.alpha}.")
            if self.kappa is None:
                object.__setattr__(self, "kappa", float(3 - self.n_x))
            object.__setattr__(self, "kappa", float(self.kappa))
            if self.n_x + self.lam == 0:
                raise DegenerateRule(f"n_x + lambda is zero for n_x={self.n_x}, alpha={self.alpha}, kappa={self.kappa}.")

    @property
    def lam(self) -> float:
        """lambda = alpha^2 (n_x + kappa) - n_x (UT only)."""
        return self.alpha**2 * (self.n_x + self.kappa) - self.n_x

    @property
    def label(self) -> str:
        if self.kind is RuleKind.UT:
            return f"UKF(kappa={self.kappa:g})"
        return self.kind.value.upper()


@dataclass(frozen=True, eq=False)
class WeightedPointSet:
    """Points in rows with signed weights summing to one."""

    points: npt.NDArray[np.float64]
    weights: npt.NDArray[np.float64]

    def __len__(self):
        return self.weights.size

    def mean(self) -> npt.NDArray[np.float64]:
        return self.weights @ self.points

    def scatter(self, center=None) -> npt.NDArray[np.float64]:
        center = self.mean() if center is None else center
        dev = self.points - center
        return dev.T @ (self.weights[:, None] * dev)

    @property
    def has_negative_weights(self) -> bool:
        return bool(np.any(self.weights < 0))


class SigmaRule(ABC):
    """
    A deterministic point-set rule: points are mean + S @ xi_j with S the square
    root of the covariance and xi_j fixed unit points of the rule.
    """

    def __init__(self, spec: RuleSpec):
        self.spec = spec
        self.weights = self._build_weights()
        self.weights.flags.writeable = False

    @property
    def n_x(self) -> int:
        return self.spec.n_x

    @abstractmethod
    def _build_weights(self) -> npt.NDArray[np.float64]:
        pass

    @abstractmethod
    def _build_unit_points(self) -> npt.NDArray[np.float64]:
        """Points for a standard normal belief, one per row, in the rule's documented order."""
        pass

    @abstractmethod
    def stability_measure(self) -> float:
        """Closed-form sum of absolute weights; 1 means every weight is nonnegative."""
        pass

    @cached_property
    def unit_points(self) -> npt.NDArray[np.float64]:
        points = self._build_unit_points()
        points.flags.writeable = False
        return points

    def absolute_weight_sum(self) -> float:
        return float(np.abs(self.weights).sum())

    def generate(self, belief: GaussianBelief) -> WeightedPointSet:
        if belief.dim != self.n_x:
            raise DimensionMismatch(f"{self.spec.label} is built for n_x={self.n_x}, belief has {belief.dim}.")
        sqrt_cov = matrix_sqrt_psd(belief.cov, value_scale=np.abs(belief.mean).max())
        points = belief.mean + self.unit_points @ sqrt_cov.T
        return WeightedPointSet(points, self.weights)

    def __repr__(self):
        return f"{type(self).__name__}({self.spec.label}, n_x={self.n_x}, points={self.weights.size})"
