"""Global GMM dynamics prior and per-timestep linear-Gaussian dynamics fits.

Tuples are stacked as ``x = [s, a, s']``. The mixture is refit with EM on a
sliding window of recent episodes and, at each timestep, supplies a
normal-inverse-Wishart pseudo-observation that regularizes the local fit.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from .lingauss import LinearGaussianDynamics

COV_FLOOR = 1e-8


class PriorUnavailable(RuntimeError):
    pass


class RankDeficientData(ValueError):
    pass


class SingularConditioning(ValueError):
    pass


def condition_gaussian(mu, Sigma, split):
    """Conditional of the trailing block of N(mu, Sigma) given the leading ``split`` coordinates.

    Returns ``(gain, offset, cov)`` so that x2 | x1 ~ N(gain @ x1 + offset, cov).
    """
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    S11, S12 = Sigma[:split, :split], Sigma[:split, split:]
    S21, S22 = Sigma[split:, :split], Sigma[split:, split:]
    try:
        cf = cho_factor(S11, lower=True)
    except np.linalg.LinAlgError:
        raise SingularConditioning("singular conditioning block") from None
    gain = cho_solve(cf, S12).T
    offset = mu[split:] - gain @ mu[:split]
    cov = S22 - gain @ S12
    return gain, offset, 0.5 * (cov + cov.T)


def floor_cov(S, floor=COV_FLOOR):
    """Symmetrize and clip eigenvalues below ``floor``; untouched when already above."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= floor:
        return S
    return (V * np.maximum(w, floor)) @ V.T


@dataclass
class GmmModel:
    n_components: int = 20
    weights: np.ndarray = None  # (K,)
    means: np.ndarray = None  # (K, d)
    covariances: np.ndarray = None  # (K, d, d)
    total_points: int = 0
    ll_history: list = field(default_factory=list)

    @property
    def fitted(self):
        return self.weights is not None

    @property
    def K(self):
        return 0 if self.weights is None else len(self.weights)

    def log_joint(self, X):
        """(N, K) array of log(w_k) + log N(x_n | mu_k, Sigma_k)."""
        X = np.atleast_2d(X)
        N, d = X.shape
        out = np.empty((N, self.K))
        for k in range(self.K):
            L = np.linalg.cholesky(self.covariances[k])
            z = solve_triangular(L, (X - self.means[k]).T, lower=True)
            out[:, k] = (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L)))
                         - 0.5 * d * np.log(2 * np.pi))
        return out + np.log(self.weights)

    def responsibilities(self, X):
        lj = self.log_joint(X)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def log_likelihood(self, X):
        return float(np.sum(logsumexp(self.log_joint(X), axis=1)))

    def to_text(self):
        """One line per component: weight, mean, row-major covariance."""
        lines = []
        for w, m, c in zip(self.weights, self.means, self.covariances):
            lines.append(" ".join(repr(float(v)) for v in np.concatenate([[w], m, c.ravel()])))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, n_components=None):
        rows = [np.array(line.split(), dtype=float) for line in text.splitlines() if line.strip()]
        n = len(rows[0])
        d = int((-1 + np.sqrt(1 + 4 * (n - 1))) / 2)
        if 1 + d + d * d != n:
            raise ValueError("malformed GMM text")
        W = np.array([r[0] for r in rows])
        M = np.array([r[1:1 + d] for r in rows])
        C = np.array([r[1 + d:].reshape(d, d) for r in rows])
        return cls(n_components or len(rows), W, M, C)


def _init_gmm(X, K, rng):
    N, d = X.shape
    base = floor_cov(np.cov(X.T, bias=True).reshape(d, d))
    idx = rng.choice(N, size=K, replace=False)
    return np.full(K, 1.0 / K), X[idx].copy(), np.repeat(base[None], K, 0)


def _m_step(X, resp):
    N, d = X.shape
    nk = resp.sum(axis=0)
    weights = nk / N
    means = (resp.T @ X) / np.maximum(nk, 1e-300)[:, None]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        D = X - means[k]
        covs[k] = floor_cov((resp[:, k, None] * D).T @ D / max(nk[k], 1e-300))
    return weights, means, covs, nk


def gmm_em_update(gmm, samples, iters=10, rng=None, min_mass=1e-6):
    """Run ``iters`` EM sweeps on ``samples``, warm-started from ``gmm``.

    An unfitted model is initialized from random samples. When there are
    fewer samples than components the component count is temporarily
    reduced (the model is re-initialized at that size). Components whose
    responsibility mass drops below ``min_mass`` are re-seeded at the
    worst-explained sample. ``ll_history`` receives the data log-likelihood
    before each sweep and once after the last one.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(X) == 0:
        raise ValueError("no samples")
    rng = np.random.default_rng(0) if rng is None else rng
    N, d = X.shape
    K = min(gmm.n_components, N)
    if not gmm.fitted or gmm.K != K or gmm.means.shape[1] != d:
        w, m, c = _init_gmm(X, K, rng)
    else:
        w, m, c = gmm.weights, gmm.means, gmm.covariances
    model = GmmModel(gmm.n_components, w, m, c, gmm.total_points + N, [])
    base = None
    for _ in range(iters):
        lj = model.log_joint(X)
        lse = logsumexp(lj, axis=1, keepdims=True)
        model.ll_history.append(float(lse.sum()))
        resp = np.exp(lj - lse)
        w, m, c, nk = _m_step(X, resp)
        dead = np.flatnonzero(nk < min_mass)
        if len(dead):
            if base is None:
                base = floor_cov(np.cov(X.T, bias=True).reshape(d, d))
            worst = np.argsort(lse[:, 0])
            for j, k in enumerate(dead):
                m[k] = X[worst[j % N]]
                c[k] = base
                w[k] = 1.0 / N
            w = w / w.sum()
        model.weights, model.means, model.covariances = w, m, c
    model.ll_history.append(model.log_likelihood(X))
    return model


@dataclass
class NiwPrior:
    mu0: np.ndarray
    Phi: np.ndarray
    m: float = 1.0
    n0: float = 1.0


def gmm_prior_moments(gmm, query_samples, m=1.0, n0=1.0):
    """Collapse the mixture to one Gaussian weighted by mean responsibilities of the queries."""
    if gmm is None or not gmm.fitted:
        raise PriorUnavailable("prior unavailable")
    if query_samples is None or len(query_samples) == 0:
        wbar = gmm.weights
    else:
        wbar = gmm.responsibilities(np.atleast_2d(query_samples)).mean(axis=0)
    mu0 = wbar @ gmm.means
    second = np.einsum("k,kij->ij", wbar, gmm.covariances + np.einsum("ki,kj->kij", gmm.means, gmm.means))
    sigma = second - np.outer(mu0, mu0)
    return NiwPrior(mu0, n0 * floor_cov(sigma), m, n0)


def niw_posterior(X, prior):
    """Posterior mean and covariance of pooled samples ``X`` under a NIW pseudo-observation."""
    N = len(X)
    if N == 0:
        return prior.mu0.copy(), prior.Phi / prior.n0
    xbar = X.mean(axis=0)
    D = X - xbar
    scatter = D.T @ D
    mu = (prior.m * prior.mu0 + N * xbar) / (prior.m + N)
    diff = xbar - prior.mu0
    sigma = (prior.Phi + scatter + (N * prior.m / (N + prior.m)) * np.outer(diff, diff)) / (N + prior.n0)
    return mu, 0.5 * (sigma + sigma.T)


@dataclass
class Trajectory:
    """One rollout: ``states`` (L+1, ds), ``actions`` (L, da), per-step ``costs`` (L,)."""
    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray = None

    @property
    def length(self):
        return len(self.actions)

    def tuples(self):
        return np.concatenate([self.states[:-1], self.actions, self.states[1:]], axis=1)


def pooled_tuples(trajs, t, window=2):
    rows = []
    for tr in trajs:
        lo, hi = max(0, t - window), min(tr.length, t + window + 1)
        if lo < hi:
            rows.append(tr.tuples()[lo:hi])
    return np.concatenate(rows) if rows else None


def fit_local_dynamics(trajs, gmm, reg=1e-6, T=None, window=2):
    """Fit p(s'|s,a) = N(A_t s + B_t a + f_t, F_t) for each t.

    Tuples from timesteps [t-window, t+window] of every trajectory are
    pooled and combined with the GMM's NIW pseudo-observation; the joint is
    then conditioned on (s, a). Trajectories cut short by termination
    contribute only the steps they have.
    """
    ds = trajs[0].states.shape[1]
    da = trajs[0].actions.shape[1]
    T = max(tr.length for tr in trajs) if T is None else T
    d_in = ds + da
    A = np.empty((T, ds, ds))
    B = np.empty((T, ds, da))
    f = np.empty((T, ds))
    F = np.empty((T, ds, ds))
    for t in range(T):
        X = pooled_tuples(trajs, t, window)
        if X is None:
            X = np.empty((0, d_in + ds))
        try:
            prior = gmm_prior_moments(gmm, X if len(X) else None)
            mu, sigma = niw_posterior(X, prior)
        except PriorUnavailable:
            if len(X) < 2:
                raise RankDeficientData("rank-deficient data") from None
            mu, sigma = X.mean(axis=0), np.cov(X.T, bias=True)
        try:
            gain, offset, cov = condition_gaussian(mu, sigma, d_in)
        except SingularConditioning:
            sigma = sigma.copy()
            sigma[:d_in, :d_in] += reg * np.eye(d_in)
            try:
                gain, offset, cov = condition_gaussian(mu, sigma, d_in)
            except SingularConditioning:
                raise RankDeficientData("rank-deficient data") from None
        A[t], B[t], f[t] = gain[:, :ds], gain[:, ds:], offset
        F[t] = floor_cov(cov, 0.0) + reg * np.eye(ds)
    return LinearGaussianDynamics(A, B, f, F)
