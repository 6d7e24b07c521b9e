import numpy as np

from errors import DegenerateRule
from rules.base_rule import SigmaRule


class UnscentedRule(SigmaRule):
    """2n_x + 1 points: center, +columns, -columns of sqrt((n_x + lambda) P)."""

    def _build_weights(self):
        n, lam = self.n_x, self.spec.lam
        weights = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
        weights[0] = lam / (n + lam)
        return weights

    def _build_unit_points(self):
        n, lam = self.n_x, self.spec.lam
        if n + lam < 0:
            raise DegenerateRule(f"n_x + lambda = {n + lam:g} < 0 gives imaginary sigma-point offsets.")
        spread = np.sqrt(n + lam) * np.eye(n)
        return np.vstack([np.zeros((1, n)), spread, -spread])

    def stability_measure(self):
        n, lam = self.n_x, self.spec.lam
        return (n + abs(lam)) / abs(n + lam)
