"""Cross-entropy method over time-invariant linear-Gaussian policies."""

from dataclasses import dataclass
import logging

import numpy as np

from .lingauss import LinearGaussianPolicy
from .tasks import episode_seed, linear_policy_fn
from .trajopt import pd_init_policy

log = logging.getLogger(__name__)

CEM_COLUMNS = ("iter", "env_steps", "mean_cost", "pop_mean_cost", "sigma_mean")
SIGMA_FLOOR = 1e-3


class DegenerateScenario(RuntimeError):
    pass


@dataclass
class CemState:
    mu: np.ndarray
    sigma: np.ndarray
    population: int = 16
    elite_frac: float = 0.2

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")

    @property
    def n_elite(self):
        return max(2, int(round(self.elite_frac * self.population)))


def cem_step(state, evaluate, rng, sigma_floor=SIGMA_FLOOR):
    """Sample a population, score it with ``evaluate(theta) -> cost`` and refit to the elites.

    Returns ``(new_state, thetas, costs)``.
    """
    thetas = state.mu + state.sigma * rng.standard_normal((state.population, len(state.mu)))
    costs = np.array([evaluate(th) for th in thetas])
    elite = thetas[np.argsort(costs, kind="stable")[:state.n_elite]]
    mu = elite.mean(axis=0)
    sigma = np.maximum(elite.std(axis=0, ddof=1), sigma_floor)
    return CemState(mu, sigma, state.population, state.elite_frac), thetas, costs


def cem_optimize(evaluate, state, iters, rng):
    history = []
    for _ in range(iters):
        state, thetas, costs = cem_step(state, evaluate, rng)
        history.append((state, float(costs.min())))
    return state, history


@dataclass
class CemConfig:
    iters: int = 20
    population: int = 16
    elite_frac: float = 0.2
    n_rollouts: int = 4
    sigma_init: float = 0.3
    # fixed action noise of the linear-Gaussian policy; parameter noise does the exploring
    action_std: tuple = (0.1, 0.02)


def theta_to_policy(theta, task, action_std, T=None):
    """Unflatten theta = [K (row-major), k] of a = K (s - s_ref) + k."""
    ds, da = task.dim_s, task.dim_a
    K = theta[:da * ds].reshape(da, ds)
    k = theta[da * ds:] - K @ task.obs_ref()
    return LinearGaussianPolicy.time_invariant(K, k, np.diag(np.square(action_std)), T or task.horizon)


def initial_theta(task):
    """PD gains expressed around the reference observation."""
    pol = pd_init_policy(task.dim_s, task.dim_a, T=1, v_ref=task.weights.v_ref)
    K = pol.K[0]
    return np.concatenate([K.ravel(), pol.k[0] + K @ task.obs_ref()])


# typical magnitude of each observation entry; gain noise is divided by it so that a
# perturbation moves the action by a similar amount whatever the feature's units
OBS_SCALE = np.array([1.0, 1.0, 1.0, 20.0, 2.0, 2.0, 2.0])


def initial_sigma(task, sigma_init):
    K_sigma = np.tile(sigma_init / OBS_SCALE[:task.dim_s], task.dim_a)
    return np.concatenate([K_sigma, np.full(task.dim_a, sigma_init)])


def cem_train(task, cfg=None, seed=0):
    """CEM policy search; each candidate is scored on the same ``n_rollouts`` initial states.

    Returns ``(policy, rows)``; ``mean_cost`` in a row is the best candidate's mean cost.
    """
    cfg = CemConfig() if cfg is None else cfg
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    theta0 = initial_theta(task)
    state = CemState(theta0, initial_sigma(task, cfg.sigma_init), cfg.population, cfg.elite_frac)
    rows = []
    env_steps = 0
    for it in range(cfg.iters):
        seeds = [episode_seed(seed, i) for i in range(cfg.n_rollouts)]
        step_counts = []

        def evaluate(theta):
            act = linear_policy_fn(theta_to_policy(theta, task, cfg.action_std))
            eps = [task.rollout(act, s, rng) for s in seeds]
            step_counts.extend(ep.traj.length for ep in eps)
            return float(np.mean([ep.cost for ep in eps]))

        mu_before = state.mu
        state, thetas, costs = cem_step(state, evaluate, rng)
        if max(step_counts) == 0:
            raise DegenerateScenario("degenerate scenario")
        env_steps += sum(step_counts)
        i_best = int(np.argmin(costs))
        rows.append({"iter": it, "env_steps": env_steps, "mean_cost": float(costs[i_best]),
                     "pop_mean_cost": float(np.mean(costs)), "sigma_mean": float(np.mean(state.sigma))})
        log.debug("cem iter %d best %.3f mu shift %.3g", it, costs[i_best], np.abs(state.mu - mu_before).max())
    return theta_to_policy(state.mu, task, cfg.action_std), rows
