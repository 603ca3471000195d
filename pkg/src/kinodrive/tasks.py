"""Episodic driving tasks shared by the model-based and policy-search trainers."""

from dataclasses import dataclass, field

import numpy as np

from .cost import CostWeights, step_cost
from .dynfit import Trajectory
from .vehicle import ACCEL_MAX, STEER_MAX, Action
from .world import ScenarioConfig, observe_mb, spawn_scenario, step_world

ACTION_LOW = np.array([-ACCEL_MAX, -STEER_MAX])
ACTION_HIGH = np.array([ACCEL_MAX, STEER_MAX])

# deterministic lane-keeping controller used as the reference threshold
PD_REFERENCE_GAINS = {"steer_dy": 0.5, "steer_dphi": 1.6, "accel_dv": 2.0}


@dataclass
class EpisodeResult:
    traj: Trajectory
    cost: float
    collision: bool
    off_road: bool
    worlds: list = field(default_factory=list)


@dataclass(frozen=True)
class DrivingTask:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    with_obstacle: bool = False

    @property
    def horizon(self):
        return self.scenario.horizon

    @property
    def dim_s(self):
        return 7 if self.with_obstacle else 3

    dim_a = 2

    def obs_ref(self):
        """Observation at the desired operating point (lane center, v_ref, nothing ahead)."""
        ref = [0.0, 0.0, self.weights.v_ref]
        if self.with_obstacle:
            ref += [50.0, 0.0, 0.0, 0.0]
        return np.array(ref)

    def reset(self, seed):
        return spawn_scenario(self.scenario, seed)

    def observe(self, w):
        return observe_mb(w, self.with_obstacle)

    def rollout(self, policy, seed, rng=None, keep_worlds=False):
        """Run one episode; ``policy(t, obs, rng)`` returns a raw action vector.

        Actions are clipped to the vehicle limits before execution and the
        clipped action is what gets recorded.
        """
        w = self.reset(seed)
        states = [self.observe(w)]
        actions, costs, worlds = [], [], [w]
        collision = off_road = False
        for t in range(self.horizon):
            a = np.clip(np.asarray(policy(t, states[-1], rng), dtype=float), ACTION_LOW, ACTION_HIGH)
            act = Action(float(a[0]), float(a[1]))
            nw, ev = step_world(w, act)
            c, _ = step_cost(w, act, self.weights, ev)
            actions.append(a)
            costs.append(c)
            w = nw
            if keep_worlds:
                worlds.append(w)
            if ev.done and not (ev.collision or ev.off_road):
                states.append(self.observe(w))
                break
            if ev.collision or ev.off_road:
                collision, off_road = ev.collision, ev.off_road
                try:
                    states.append(self.observe(w))
                except ValueError:
                    states.append(states[-1])
                break
            states.append(self.observe(w))
        traj = Trajectory(np.array(states), np.array(actions).reshape(-1, 2), np.array(costs))
        return EpisodeResult(traj, float(sum(costs)), collision, off_road, worlds)


def linear_policy_fn(pol, stochastic=True):
    def act(t, s, rng):
        if stochastic:
            return pol.sample(t, s, rng)
        return pol.mean_action(t, s)
    return act


def pd_reference_fn(task, gains=None):
    """Deterministic hand-tuned PD lane keeper (ignores the obstacle block)."""
    g = PD_REFERENCE_GAINS if gains is None else gains
    v_ref = task.weights.v_ref

    def act(t, s, rng):
        return np.array([-g["accel_dv"] * (s[2] - v_ref), -g["steer_dy"] * s[0] - g["steer_dphi"] * s[1]])
    return act


def episode_seed(seed, index):
    """Initial-state seed of rollout ``index``; common to every training iteration."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def pd_reference_cost(task, n_episodes=4, seed=0, gains=None):
    """Mean episode cost of the PD reference on the first ``n_episodes`` common initial states of ``seed``."""
    fn = pd_reference_fn(task, gains)
    return float(np.mean([task.rollout(fn, episode_seed(seed, i)).cost for i in range(n_episodes)]))
