from itertools import combinations

import numpy as np

from rules.base_rule import SigmaRule


class FifthDegreeCubatureRule(SigmaRule):
    """
    2n_x^2 + 1 points scaled by gamma = sqrt(n_x + 2).

    Order: center, +axis, -axis, +P+, -P+, +P-, -P-, where the P+/P- columns are
    (S_a +/- S_b)/sqrt(2) for pairs a < b in lexicographic order.
    """

    @property
    def gamma(self) -> float:
        return np.sqrt(self.n_x + 2.0)

    def _pairs(self):
        return list(combinations(range(self.n_x), 2))

    def _build_weights(self):
        n = self.n_x
        n_pairs = len(self._pairs())
        return np.concatenate(
            [
                [2.0 / (n + 2)],
                np.full(2 * n, (4.0 - n) / (2.0 * (n + 2) ** 2)),
                np.full(4 * n_pairs, 1.0 / (n + 2) ** 2),
            ]
        )

    def _build_unit_points(self):
        n = self.n_x
        eye = np.eye(n)
        plus = np.array([eye[a] + eye[b] for a, b in self._pairs()]).reshape(-1, n) / np.sqrt(2.0)
        minus = np.array([eye[a] - eye[b] for a, b in self._pairs()]).reshape(-1, n) / np.sqrt(2.0)
        return self.gamma * np.vstack([np.zeros((1, n)), eye, -eye, plus, -plus, minus, -minus])

    def stability_measure(self):
        n = self.n_x
        return (n * abs(4 - n) + 2 * n**2 + 4) / (n + 2) ** 2
