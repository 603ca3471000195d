"""KL-constrained trajectory optimization over linear-Gaussian policies.

Forward propagation of Gaussian marginals, the trajectory KL divergence
between two policies under shared dynamics, a maximum-entropy LQG backward
pass, and the dual gradient descent loop that tunes the KL multiplier.
"""

from dataclasses import dataclass
import math

import numpy as np

from .cost import expand_cost, obs_cost, quadratize_cost
from .lingauss import DegeneratePolicy, LinearGaussianPolicy, is_pd

LAMBDA_MIN, LAMBDA_MAX = 1e-4, 1e6


class NumericalBlowUp(FloatingPointError):
    pass


class BackwardPassFailed(RuntimeError):
    pass


class TrustRegionUnsatisfiable(RuntimeError):
    pass


DEFAULT_PD_GAINS = {"steer_dy": 0.2, "steer_dphi": 0.6, "accel_dv": 0.8}


def pd_init_policy(dim_s, dim_a, gains=None, T=50, v_ref=6.0, noise_std=(0.5, 0.1)):
    """Time-invariant PD controller with broad exploration noise.

    steer = -g_dy * dy - g_dphi * dphi and accel = -g_dv * (v - v_ref); the
    speed setpoint lives in the bias term k.
    """
    g = dict(DEFAULT_PD_GAINS if gains is None else gains)
    K = np.zeros((dim_a, dim_s))
    k = np.zeros(dim_a)
    K[0, 2] = -g.get("accel_dv", 0.0)
    k[0] = g.get("accel_dv", 0.0) * v_ref
    K[1, 0] = -g.get("steer_dy", 0.0)
    K[1, 1] = -g.get("steer_dphi", 0.0)
    C = np.diag(np.square(noise_std[:dim_a]))
    return LinearGaussianPolicy.time_invariant(K, k, C, T)


@dataclass
class TrajMarginals:
    """Gaussian marginals over x_t = [s_t; a_t] for t < T and over the final state."""
    mu: np.ndarray  # (T, d)
    sigma: np.ndarray  # (T, d, d)
    final_mu: np.ndarray  # (ds,)
    final_sigma: np.ndarray  # (ds, ds)

    def state_mean(self, t, ds):
        return self.mu[t, :ds]


def forward_marginals(dyn, pol, init_mean, init_cov, tol=1e-8):
    ds, da, T = dyn.dim_s, dyn.dim_a, dyn.T
    if pol.T != T or pol.dim_s != ds or pol.dim_a != da:
        raise ValueError("policy and dynamics dimensions differ")
    d = ds + da
    mu = np.empty((T, d))
    sigma = np.empty((T, d, d))
    ms = np.asarray(init_mean, dtype=float).copy()
    Ss = np.asarray(init_cov, dtype=float).copy()
    for t in range(T):
        K, k, C = pol.K[t], pol.k[t], pol.C[t]
        mu[t, :ds] = ms
        mu[t, ds:] = K @ ms + k
        sigma[t, :ds, :ds] = Ss
        sigma[t, :ds, ds:] = Ss @ K.T
        sigma[t, ds:, :ds] = K @ Ss
        sigma[t, ds:, ds:] = K @ Ss @ K.T + C
        sigma[t] = 0.5 * (sigma[t] + sigma[t].T)
        if np.linalg.eigvalsh(sigma[t]).min() < -tol * max(1.0, np.abs(sigma[t]).max()):
            raise NumericalBlowUp("numerical blow-up: increase dynamics regularization")
        AB = np.concatenate([dyn.A[t], dyn.B[t]], axis=1)
        ms = AB @ mu[t] + dyn.f[t]
        Ss = AB @ sigma[t] @ AB.T + dyn.F[t]
        Ss = 0.5 * (Ss + Ss.T)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(Ss))):
        raise NumericalBlowUp("numerical blow-up: increase dynamics regularization")
    return TrajMarginals(mu, sigma, ms, Ss)


def traj_kl(dyn, pol_new, pol_old, marginals_new):
    """KL(p_new(tau) || p_old(tau)) under shared dynamics.

    The dynamics factors cancel, leaving the expected conditional action KL
    at every step, with the mean-difference term integrated over the state
    marginal of the new trajectory distribution.
    """
    ds = dyn.dim_s
    total = 0.0
    for t in range(pol_new.T):
        C_old = pol_old.C[t]
        if not is_pd(C_old):
            raise DegeneratePolicy("degenerate old policy")
        L_old = np.linalg.cholesky(C_old)
        L_new = np.linalg.cholesky(pol_new.C[t])
        prec_old = np.linalg.inv(C_old)
        mu_s = marginals_new.mu[t, :ds]
        S_s = marginals_new.sigma[t, :ds, :ds]
        dK = pol_new.K[t] - pol_old.K[t]
        dm = dK @ mu_s + pol_new.k[t] - pol_old.k[t]
        quad = dm @ prec_old @ dm + np.trace(dK.T @ prec_old @ dK @ S_s)
        logdet = 2.0 * (np.sum(np.log(np.diag(L_old))) - np.sum(np.log(np.diag(L_new))))
        total += 0.5 * (np.trace(prec_old @ pol_new.C[t]) - pol_new.dim_a + logdet + quad)
    return max(float(total), 0.0)


def lqg_backward(dyn, qcost, floor=1e-6, terminal=None):
    """Maximum-entropy LQG: Riccati recursion giving K_t, k_t and C_t = Q_uu^-1.

    ``qcost`` is in deviation form around its ``xbar``; ``terminal`` is an
    optional ``(V, v)`` quadratic value on the final state (absolute coordinates).
    """
    ds, da, T = dyn.dim_s, dyn.dim_a, dyn.T
    V = np.zeros((ds, ds)) if terminal is None else np.asarray(terminal[0], float)
    v = np.zeros(ds) if terminal is None else np.asarray(terminal[1], float)
    K = np.empty((T, da, ds))
    k = np.empty((T, da))
    C = np.empty((T, da, da))
    for t in range(T - 1, -1, -1):
        Ct = qcost.C[t]
        ct = qcost.c[t] - Ct @ qcost.xbar[t]
        AB = np.concatenate([dyn.A[t], dyn.B[t]], axis=1)
        Q = Ct + AB.T @ V @ AB
        q = ct + AB.T @ (V @ dyn.f[t] + v)
        Q = 0.5 * (Q + Q.T)
        Quu, Qus = Q[ds:, ds:], Q[ds:, :ds]
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(q))):
            raise BackwardPassFailed("backward pass failed")
        w, U = np.linalg.eigh(Quu)
        w = np.maximum(w, floor)
        Quu_inv = (U / w) @ U.T
        Quu_f = (U * w) @ U.T
        K[t] = -Quu_inv @ Qus
        k[t] = -Quu_inv @ q[ds:]
        C[t] = 0.5 * (Quu_inv + Quu_inv.T)
        V = Q[:ds, :ds] + K[t].T @ Quu_f @ K[t] + K[t].T @ Qus + Qus.T @ K[t]
        v = q[:ds] + K[t].T @ Quu_f @ k[t] + K[t].T @ q[ds:] + Qus.T @ k[t]
        V = 0.5 * (V + V.T)
    return LinearGaussianPolicy(K, k, C)


@dataclass
class DgdConfig:
    epsilon: float = 1.0
    lambda0: float = 1.0
    alpha_dual: float = 0.5
    max_iter: int = 20
    dual_update: str = "multiplicative"  # or "additive"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.dual_update not in ("multiplicative", "additive"):
            raise ValueError("dual_update must be multiplicative or additive")


def dual_step(lam, delta, cfg):
    """One multiplier update; raises lam when the KL budget is exceeded.

    The multiplicative rule measures the violation ``delta`` in units of
    epsilon so tiny budgets still move lam at a useful rate.
    """
    if cfg.dual_update == "additive":
        lam = lam + cfg.alpha_dual * delta
    elif delta:
        rel = delta / cfg.epsilon
        lam = lam * math.exp(cfg.alpha_dual * math.copysign(min(abs(rel), 1.0), rel))
    return min(max(lam, LAMBDA_MIN), LAMBDA_MAX)


def expected_quadratic(expansion, xbar, marginals):
    """E[l] under Gaussian marginals using the quadratic model of l around ``xbar``."""
    H, g, v = expansion
    dm = marginals.mu - xbar
    return float(np.sum(0.5 * np.einsum("tij,tji->t", H, marginals.sigma)
                        + 0.5 * np.einsum("ti,tij,tj->t", dm, H, dm)
                        + np.einsum("ti,ti->t", g, dm) + v))


@dataclass
class DgdResult:
    policy: LinearGaussianPolicy
    lambda_final: float
    kl_final: float
    predicted_cost: float
    success: bool
    history: list


def dgd_solve(dyn, prev_pol, init_mean, init_cov, weights, cfg, lambda0=None, cost_fn=None):
    """Dual gradient descent on the KL-constrained trajectory problem.

    The nominal trajectory is the mean rollout of ``prev_pol`` under ``dyn``.
    Returns the feasible iterate (kl <= 1.1*epsilon) with the lowest
    predicted cost, or the last iterate with ``success=False``.
    """
    ds = dyn.dim_s
    nominal = forward_marginals(dyn, prev_pol, init_mean, init_cov)
    xbar = nominal.mu
    if cost_fn is None:
        def cost_fn(x):
            return obs_cost(x, weights, ds)
    expansion = expand_cost(cost_fn, xbar)
    lam = cfg.lambda0 if lambda0 is None else lambda0
    history = []
    for _ in range(cfg.max_iter):
        q = quadratize_cost(xbar, lam, prev_pol, weights, ds, expansion=expansion)
        try:
            pol = lqg_backward(dyn, q)
            marg = forward_marginals(dyn, pol, init_mean, init_cov)
        except (BackwardPassFailed, NumericalBlowUp):
            lam = min(lam * 10.0, LAMBDA_MAX)
            continue
        kl = traj_kl(dyn, pol, prev_pol, marg)
        history.append((pol, lam, kl, expected_quadratic(expansion, xbar, marg)))
        lam = dual_step(lam, kl - cfg.epsilon, cfg)
    if not history:
        raise BackwardPassFailed("backward pass failed")
    feasible = [h for h in history if h[2] <= 1.1 * cfg.epsilon]
    if feasible:
        pol, lam, kl, cost = min(feasible, key=lambda h: h[3])
        return DgdResult(pol, lam, kl, cost, True, history)
    if all(h[2] > 10.0 * cfg.epsilon for h in history):
        raise TrustRegionUnsatisfiable("trust region unsatisfiable")
    pol, lam, kl, cost = history[-1]
    return DgdResult(pol, lam, kl, cost, False, history)
