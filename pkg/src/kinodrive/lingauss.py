"""Time-varying linear-Gaussian dynamics and policies."""

from dataclasses import dataclass

import numpy as np


class DegeneratePolicy(ValueError):
    pass


def is_pd(m, tol=0.0):
    try:
        np.linalg.cholesky(0.5 * (m + m.T) - tol * np.eye(len(m)))
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass
class LinearGaussianDynamics:
    """p(s'|s, a) = N(A_t s + B_t a + f_t, F_t) for t in [0, T)."""
    A: np.ndarray  # (T, ds, ds)
    B: np.ndarray  # (T, ds, da)
    f: np.ndarray  # (T, ds)
    F: np.ndarray  # (T, ds, ds)

    @property
    def T(self):
        return self.A.shape[0]

    @property
    def dim_s(self):
        return self.A.shape[1]

    @property
    def dim_a(self):
        return self.B.shape[2]


@dataclass
class LinearGaussianPolicy:
    """pi(a|s) = N(K_t s + k_t, C_t)."""
    K: np.ndarray  # (T, da, ds)
    k: np.ndarray  # (T, da)
    C: np.ndarray  # (T, da, da)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self._chol = None

    @property
    def T(self):
        return self.K.shape[0]

    @property
    def dim_a(self):
        return self.K.shape[1]

    @property
    def dim_s(self):
        return self.K.shape[2]

    def chol(self):
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.C)
            except np.linalg.LinAlgError:
                raise DegeneratePolicy("degenerate policy") from None
        return self._chol

    def precision(self):
        self.chol()
        return np.linalg.inv(self.C)

    def mean_action(self, t, s):
        return self.K[t] @ s + self.k[t]

    def sample(self, t, s, rng):
        return self.mean_action(t, s) + self.chol()[t] @ rng.standard_normal(self.dim_a)

    def copy(self):
        return LinearGaussianPolicy(self.K.copy(), self.k.copy(), self.C.copy())

    @classmethod
    def time_invariant(cls, K, k, C, T):
        return cls(np.repeat(np.asarray(K, float)[None], T, 0),
                   np.repeat(np.asarray(k, float)[None], T, 0),
                   np.repeat(np.asarray(C, float)[None], T, 0))
