import numpy as np

from rules.base_rule import SigmaRule


class ThirdDegreeCubatureRule(SigmaRule):
    """2n_x equally weighted points at +/- columns of sqrt(n_x P); no center point."""

    def _build_weights(self):
        return np.full(2 * self.n_x, 1.0 / (2 * self.n_x))

    def _build_unit_points(self):
        spread = np.sqrt(self.n_x) * np.eye(self.n_x)
        return np.vstack([spread, -spread])

    def stability_measure(self):
        return 1.0
