"""Driving cost: lane tracking, gated obstacle term, collision penalty, and LQG quadratization."""

from dataclasses import dataclass, fields

import numpy as np

from .lingauss import DegeneratePolicy, is_pd
from .world import front_vehicle, is_off_road, any_collision, observe_mb

OBSTACLE_RANGE = 20.0


@dataclass(frozen=True)
class CostWeights:
    alpha_l: float = 1.0
    alpha_y: float = 0.5
    alpha_v: float = 0.5
    alpha_a: float = 0.1
    alpha_sigma: float = 0.1
    v_ref: float = 6.0
    beta_s: float = 0.5
    beta_v: float = 1.0
    collision_penalty: float = 500.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.v_ref <= 0:
            raise ValueError("v_ref must be positive")


def tracking_cost(obs, action, w):
    """Weighted squares of lateral error, yaw error, speed error and both actions.

    Broadcasts over leading axes of ``obs`` (..., >=3) and ``action`` (..., 2).
    """
    obs = np.asarray(obs, dtype=float)
    action = np.asarray(action, dtype=float)
    return (w.alpha_l * obs[..., 0] ** 2 + w.alpha_y * obs[..., 1] ** 2
            + w.alpha_v * (obs[..., 2] - w.v_ref) ** 2
            + w.alpha_a * action[..., 0] ** 2 + w.alpha_sigma * action[..., 1] ** 2)


def gated_obstacle_cost(s, v_approach, w):
    """beta_s*(20 - s) + beta_v*max(0, v_approach) where 0 < s < 20, else 0."""
    s = np.asarray(s, dtype=float)
    active = (s > 0.0) & (s < OBSTACLE_RANGE)
    val = w.beta_s * (OBSTACLE_RANGE - s) + w.beta_v * np.maximum(0.0, v_approach)
    return np.where(active, val, 0.0)


def obstacle_cost(w_state, weights):
    """Obstacle term for the nearest same-lane vehicle ahead of the ego."""
    fv = front_vehicle(w_state)
    if fv is None:
        return 0.0
    other, gap = fv
    return float(gated_obstacle_cost(gap, w_state.ego.v - other.state.v, weights))


def step_cost(w_state, action, weights, events=None):
    """Cost of applying ``action`` in ``w_state``: ``(cost, terminal)``.

    ``events`` are the StepEvents produced by that step; without them the
    collision and off-road status of ``w_state`` itself is used. Collision
    and off-road steps both add ``collision_penalty``.
    """
    obs = observe_mb(w_state, with_obstacle=False)
    a = np.array([action.accel, action.steer])
    cost = float(tracking_cost(obs, a, weights)) + obstacle_cost(w_state, weights)
    if events is None:
        collision, off_road = any_collision(w_state), is_off_road(w_state)
        terminal = collision or off_road or w_state.t >= w_state.horizon
    else:
        collision, off_road, terminal = events.collision, events.off_road, events.done
    # leaving the road is penalized like a crash so early termination never pays
    if collision or off_road:
        cost += weights.collision_penalty
    return cost, terminal


def obs_cost(x, weights, dim_s):
    """Cost of stacked ``[s; a]`` vectors in observation space (no collision term).

    With a 7-dim state the trailing block is the front vehicle's relative
    position/velocity; along-lane distance is approximated by ``rel_x``.
    """
    x = np.asarray(x, dtype=float)
    s, a = x[..., :dim_s], x[..., dim_s:]
    c = tracking_cost(s, a, weights)
    if dim_s >= 7:
        c = c + gated_obstacle_cost(s[..., 3], -s[..., 5], weights)
    return c


@dataclass
class QuadraticCost:
    """cost_t ~ 1/2 dx^T C_t dx + c_t^T dx + c0_t with dx = x - xbar_t, x = [s; a]."""
    C: np.ndarray  # (T, d, d)
    c: np.ndarray  # (T, d)
    c0: np.ndarray  # (T,)
    xbar: np.ndarray  # (T, d)
    dim_s: int

    @property
    def T(self):
        return self.C.shape[0]

    def scaled(self, factor):
        return QuadraticCost(self.C * factor, self.c * factor, self.c0 * factor, self.xbar, self.dim_s)

    def evaluate(self, x):
        dx = np.asarray(x) - self.xbar
        return 0.5 * np.einsum("ti,tij,tj->t", dx, self.C, dx) + np.einsum("ti,ti->t", self.c, dx) + self.c0


def expand_cost(fn, xbar, h=1e-4):
    """Second-order expansion of a vectorized cost by central differences.

    ``fn`` maps (..., d) -> (...). Returns the un-floored QuadraticCost pieces
    (Hessian, gradient, value) around every row of ``xbar``.
    """
    xbar = np.asarray(xbar, dtype=float)
    T, d = xbar.shape
    eye = np.eye(d) * h
    f0 = fn(xbar)
    grad = np.empty((T, d))
    hess = np.empty((T, d, d))
    for i in range(d):
        fp, fm = fn(xbar + eye[i]), fn(xbar - eye[i])
        grad[:, i] = (fp - fm) / (2 * h)
        hess[:, i, i] = (fp - 2 * f0 + fm) / h ** 2
        for j in range(i):
            fpp = fn(xbar + eye[i] + eye[j])
            fpm = fn(xbar + eye[i] - eye[j])
            fmp = fn(xbar - eye[i] + eye[j])
            fmm = fn(xbar - eye[i] - eye[j])
            hess[:, i, j] = hess[:, j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    return hess, grad, f0


def floor_action_block(C, dim_s, floor=1e-6):
    """Symmetrize and clip the action block's eigenvalues from below."""
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    Cuu = C[..., dim_s:, dim_s:]
    w, V = np.linalg.eigh(Cuu)
    w = np.maximum(w, floor)
    C = C.copy()
    C[..., dim_s:, dim_s:] = np.einsum("...ij,...j,...kj->...ik", V, w, V)
    return C


def policy_nll_terms(prev_policy, xbar):
    """Exact quadratic -log pi_hat(a|s) (up to constants) expanded around ``xbar``."""
    ds, da = prev_policy.dim_s, prev_policy.dim_a
    try:
        prec = np.linalg.inv(prev_policy.C)
    except np.linalg.LinAlgError:
        raise DegeneratePolicy("degenerate policy") from None
    if not all(is_pd(c) for c in prev_policy.C):
        raise DegeneratePolicy("degenerate policy")
    T = prev_policy.T
    # residual r = a - K s - k = M x - k with M = [-K, I]
    M = np.concatenate([-prev_policy.K, np.broadcast_to(np.eye(da), (T, da, da))], axis=2)
    H = np.einsum("tai,tab,tbj->tij", M, prec, M)
    r = np.einsum("tai,ti->ta", M, xbar) - prev_policy.k
    g = np.einsum("tai,tab,tb->ti", M, prec, r)
    v = 0.5 * np.einsum("ta,tab,tb->t", r, prec, r)
    assert H.shape[1] == ds + da
    return H, g, v


def quadratize_cost(nominal, lam, prev_policy, weights, dim_s, expansion=None, h=1e-4):
    """Quadratic model of the augmented cost l/lam - log pi_hat(a|s) along ``nominal``.

    ``nominal`` is the (T, ds+da) stack of mean states and actions. The
    expansion of l may be passed in to avoid recomputing it for every lam.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    xbar = np.asarray(nominal, dtype=float)
    if expansion is None:
        expansion = expand_cost(lambda x: obs_cost(x, weights, dim_s), xbar, h)
    Hl, gl, vl = expansion
    Hp, gp, vp = policy_nll_terms(prev_policy, xbar)
    C = floor_action_block(Hl / lam + Hp, dim_s)
    return QuadraticCost(C, gl / lam + gp, vl / lam + vp, xbar, dim_s)
