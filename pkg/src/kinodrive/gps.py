"""Model-based outer loop: rollouts, GMM prior refit, local dynamics, DGD policy update."""

from collections import deque
from dataclasses import dataclass
import logging
import time

import numpy as np

from .dynfit import GmmModel, fit_local_dynamics, gmm_em_update
from .tasks import episode_seed, linear_policy_fn
from .trajopt import DgdConfig, dgd_solve, pd_init_policy

log = logging.getLogger(__name__)

GPS_COLUMNS = ("iter", "env_steps", "mean_cost", "kl", "lambda", "wall_ms")


@dataclass
class GpsConfig:
    max_iters: int = 25
    n_traj: int = 4
    gmm_components: int = 20
    gmm_window: int = 20  # episodes kept for the prior refit
    em_iters: int = 10
    dyn_reg: float = 1e-6
    init_cov_reg: float = 1e-6


class GpsIterationError(RuntimeError):
    pass


def gps_train(task, dgd_cfg=None, cfg=None, seed=0, policy=None, on_iteration=None):
    """Guided policy search with a GMM dynamics prior.

    Returns ``(policy, rows)`` where each row follows GPS_COLUMNS plus a
    ``success`` flag from the dual solve.
    """
    dgd_cfg = DgdConfig() if dgd_cfg is None else dgd_cfg
    cfg = GpsConfig() if cfg is None else cfg
    T, ds = task.horizon, task.dim_s
    if policy is None:
        policy = pd_init_policy(ds, task.dim_a, T=T, v_ref=task.weights.v_ref)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    gmm = GmmModel(cfg.gmm_components)
    window = deque(maxlen=cfg.gmm_window)
    lam = dgd_cfg.lambda0
    rows = []
    env_steps = 0
    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        try:
            act = linear_policy_fn(policy)
            episodes = [task.rollout(act, episode_seed(seed, i), rng) for i in range(cfg.n_traj)]
            env_steps += sum(ep.traj.length for ep in episodes)
            trajs = [ep.traj for ep in episodes]
            window.extend(trajs)
            gmm = gmm_em_update(gmm, np.concatenate([tr.tuples() for tr in window]), cfg.em_iters, rng)
            dyn = fit_local_dynamics(trajs, gmm, cfg.dyn_reg, T=T)
            s0 = np.array([tr.states[0] for tr in trajs])
            init_mean = s0.mean(axis=0)
            init_cov = np.cov(s0.T, bias=True).reshape(ds, ds) + cfg.init_cov_reg * np.eye(ds)
            res = dgd_solve(dyn, policy, init_mean, init_cov, task.weights, dgd_cfg, lambda0=lam)
        except Exception as exc:
            raise GpsIterationError(f"GPS iteration {it}: {exc}") from exc
        policy = res.policy
        lam = res.lambda_final
        row = {"iter": it, "env_steps": env_steps,
               "mean_cost": float(np.mean([ep.cost for ep in episodes])),
               "kl": res.kl_final, "lambda": res.lambda_final,
               "wall_ms": 1000.0 * (time.perf_counter() - t0), "success": res.success}
        rows.append(row)
        log.debug("gps iter %d cost %.3f kl %.3f lambda %.3g", it, row["mean_cost"], row["kl"], lam)
        if on_iteration is not None:
            on_iteration(row, policy)
    return policy, rows
