"""Experiment orchestration: per-seed training runs, CSV logs, checkpoints and evaluation."""

from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
import logging
import math
import os
import traceback

import numpy as np

from .cem import CEM_COLUMNS, cem_train
from .checkpoint import CheckpointMismatch, load_checkpoint, save_checkpoint
from .gps import GPS_COLUMNS, gps_train
from .plotting import plot_png
from .sac import SAC_COLUMNS, DrivingEnv, SacEnvConfig, sac_train
from .tasks import ACTION_HIGH, ACTION_LOW, DrivingTask, episode_seed
from .world import occupied_lane

log = logging.getLogger(__name__)

COLUMNS = {"gps": GPS_COLUMNS, "cem": CEM_COLUMNS, "sac": SAC_COLUMNS}
EVAL_SEED_OFFSET = 1000
TRAJ_COLUMNS = ("episode", "t", "ego_x", "ego_y", "ego_yaw", "ego_v", "accel", "steer", "collision")


def make_task(cfg):
    return DrivingTask(cfg.sim, cfg.cost, cfg.experiment.with_obstacle)


def env_config(cfg):
    return SacEnvConfig(cfg.sim, cfg.cost)


def train(cfg, seed):
    """Run the configured trainer for one seed: ``(policy, rows)``."""
    algo = cfg.algorithm
    if algo == "gps":
        return gps_train(make_task(cfg), cfg.dgd, cfg.gps, seed=seed)
    if algo == "cem":
        return cem_train(make_task(cfg), cfg.cem, seed=seed)
    return sac_train(env_config(cfg), cfg.experiment.encoder, cfg.sac, cfg.experiment.total_steps, seed=seed)


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_log(path, rows, columns, header):
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(format_value(row[c]) for c in columns) + "\n")


def run_paths(cfg, seed):
    stem = os.path.join(cfg.output_dir, f"{cfg.algorithm}_{seed}")
    return {"csv": stem + ".csv", "ckpt": stem + ".ckpt", "png": stem + ".png", "err": stem + ".err"}


def run_seed(cfg, seed):
    """Train one seed and write its files; returns ``(seed, ok, message)``."""
    paths = run_paths(cfg, seed)
    start = datetime.now(timezone.utc).isoformat(timespec="seconds")
    try:
        policy, rows = train(cfg, seed)
        header = f"config_hash={cfg.config_hash()} seed={seed} start={start}"
        write_log(paths["csv"], rows, COLUMNS[cfg.algorithm], header)
        save_checkpoint(paths["ckpt"], policy, cfg.algorithm)
        if rows:
            plot_png([paths["csv"]], paths["png"], log_x=False, title=f"{cfg.algorithm} seed {seed}")
    except Exception as exc:
        with open(paths["err"], "w") as fh:
            fh.write(traceback.format_exc())
        return seed, False, f"{type(exc).__name__}: {exc}"
    if os.path.exists(paths["err"]):
        os.remove(paths["err"])
    last = rows[-1] if rows else {}
    key = "mean_cost" if "mean_cost" in last else "mean_return"
    summary = f"{key}={last[key]:.4g} env_steps={last['env_steps']}" if last else "no rows"
    return seed, True, summary


def thread_limit():
    try:
        return max(1, int(os.environ.get("KINODRIVE_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(cfg, echo=print):
    """Train every configured seed; returns the process exit status."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    workers = min(thread_limit(), len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [run_seed(cfg, s) for s in cfg.seeds]
    status = 0
    for seed, ok, message in results:
        echo(f"{cfg.algorithm} seed={seed} {'ok' if ok else 'FAILED'} {message}")
        if not ok:
            status = 1
    return status


# -- evaluation --------------------------------------------------------------------

def _policy_action(algorithm, policy):
    if algorithm == "sac":
        return lambda t, obs: policy.act(obs, None, deterministic=True)
    return lambda t, obs: policy.mean_action(min(t, policy.T - 1), obs)


def _check_match(algorithm, policy, cfg):
    if algorithm != cfg.algorithm:
        raise CheckpointMismatch(f"checkpoint is {algorithm}, config says {cfg.algorithm}")
    if algorithm == "sac":
        if policy.encoder.kind != cfg.experiment.encoder:
            raise CheckpointMismatch(f"checkpoint encoder {policy.encoder.kind} != {cfg.experiment.encoder}")
    else:
        task = make_task(cfg)
        if policy.dim_s != task.dim_s or policy.T != task.horizon:
            raise CheckpointMismatch(f"checkpoint shape (T={policy.T}, ds={policy.dim_s}) does not match "
                                     f"config (T={task.horizon}, ds={task.dim_s})")


def evaluate(algorithm, policy, cfg, n_episodes, seed=None, dump=None):
    """Deterministic mean-action rollouts on held-out initial states."""
    seed = cfg.seeds[0] if seed is None else seed
    if n_episodes == 0:
        return {"n_episodes": 0}
    if algorithm == "sac":
        obs_kind = policy.encoder.kind if policy.encoder.kind != "none" else "mb"
    else:
        obs_kind = "mb_obstacle" if cfg.experiment.with_obstacle else "mb"
    env = DrivingEnv(SacEnvConfig(cfg.sim, cfg.cost, obs_kind))
    act = _policy_action(algorithm, policy)
    costs, collisions, off_roads, lane_changes = [], [], [], []
    traj_rows = []
    for ep in range(n_episodes):
        obs = env.reset(episode_seed(EVAL_SEED_OFFSET + seed, ep))
        total, t, changed = 0.0, 0, False
        info = {"collision": False, "off_road": False}
        while True:
            a = np.asarray(act(t, obs), dtype=float)
            w = env.world
            obs, r, terminal, truncated, info = env.step(a)
            total -= r
            if dump is not None:
                traj_rows.append((ep, t, w.ego.x, w.ego.y, w.ego.yaw, w.ego.v,
                                  *np.clip(a, ACTION_LOW, ACTION_HIGH), info["collision"]))
            if not (terminal or info["off_road"]) and occupied_lane(env.world)[0] != w.ego_lane:
                changed = True
            t += 1
            if terminal or truncated:
                break
        costs.append(total)
        collisions.append(info["collision"])
        off_roads.append(info["off_road"])
        lane_changes.append(changed)
    if dump is not None:
        with open(dump, "w") as fh:
            fh.write(",".join(TRAJ_COLUMNS) + "\n")
            for row in traj_rows:
                fh.write(",".join(format_value(v) for v in row) + "\n")
    return {"n_episodes": n_episodes, "mean_cost": float(np.mean(costs)), "std_cost": float(np.std(costs)),
            "collision_rate": float(np.mean(collisions)), "off_road_rate": float(np.mean(off_roads)),
            "lane_change_rate": float(np.mean(lane_changes))}


def eval_policy(checkpoint, cfg, n_episodes, dump=None):
    algorithm, policy = load_checkpoint(checkpoint)
    _check_match(algorithm, policy, cfg)
    return evaluate(algorithm, policy, cfg, n_episodes, dump=dump)


def format_summary(summary):
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) and not math.isnan(v) else f"{k}={v}"
                    for k, v in summary.items())
