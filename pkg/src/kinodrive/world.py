"""Scenario construction and deterministic world stepping with IDM traffic."""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .geometry import Centerline, OffMapError, build_chain, frenet_project
from .vehicle import (ACCEL_MAX, DT, STEER_MAX, WHEELBASE, Action, IdmParams,
                      VehicleState, idm_accel, step_vehicle)

SCENARIOS = ("straight", "turn90", "roundabout", "town")
VEHICLE_RADIUS = 1.0
COLLISION_DIST = 2.0 * VEHICLE_RADIUS
MIN_SPAWN_GAP = 8.0
DETECT_RANGE = 50.0
OFF_ROAD_MARGIN = 0.5


class EpisodeFinished(RuntimeError):
    pass


class ScenarioOverfull(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "straight"
    n_vehicles: int = 0
    randomize_count: bool = False
    min_vehicles: int = 3
    horizon: int = 50
    n_lanes: int = 2
    lane_width: float = 3.5
    ego_speed: tuple = (4.0, 8.0)
    ego_lateral: float = 0.5  # initial |delta_y| bound
    ego_heading: float = 0.05  # initial |delta_phi| bound
    ego_start_s: float = 10.0
    others_v0: tuple = (5.0, 9.0)
    # first vehicle of a non-town scenario is a slow obstacle placed ahead in the ego lane
    obstacle_gap: tuple = (25.0, 35.0)
    obstacle_v0: tuple = (2.0, 3.0)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not 0 <= self.n_vehicles <= 100:
            raise ValueError("n_vehicles must be in [0, 100]")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True)
class OtherVehicle:
    state: VehicleState
    lane_id: int
    idm: IdmParams = field(default_factory=IdmParams)


@dataclass(frozen=True)
class StepEvents:
    collision: bool = False
    off_road: bool = False
    done: bool = False


@dataclass(frozen=True)
class WorldState:
    ego: VehicleState
    others: tuple
    centerlines: tuple
    t: int = 0
    ego_lane: int = 0
    horizon: int = 50
    lane_width: float = 3.5
    done: bool = False
    rng_stream: object = field(default=None, compare=False, repr=False)

    @property
    def lane_half_width(self):
        return 0.5 * self.lane_width


def road_layout(scenario, n_lanes=2, lane_width=3.5):
    """Centerlines (lane 0 rightmost) for a named scenario."""
    if scenario == "straight":
        base = Centerline(build_chain(0.0, 0.0, 0.0, [(400.0, 0.0)]))
    elif scenario == "turn90":
        r = 25.0
        base = Centerline(build_chain(0.0, 0.0, 0.0, [(40.0, 0.0), (r * math.pi / 2, 1.0 / r), (200.0, 0.0)]))
    elif scenario == "roundabout":
        base = Centerline(build_chain(0.0, 0.0, 0.0, [
            (30.0, 0.0), (20.0 * math.pi / 6, -1.0 / 20.0), (25.0 * 4.0 * math.pi / 3, 1.0 / 25.0), (150.0, 0.0)]))
    elif scenario == "town":
        r = 40.0
        base = Centerline(build_chain(0.0, 0.0, 0.0, [
            (150.0, 0.0), (math.pi * r, 1.0 / r), (150.0, 0.0), (math.pi * r, 1.0 / r)]), closed=True)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return tuple([base] + [base.offset(i * lane_width) for i in range(1, n_lanes)])


def _place(cl, s, lateral=0.0, heading_err=0.0, v=0.0):
    x, y, h = cl.pose_at(s)
    return VehicleState(x - lateral * math.sin(h), y + lateral * math.cos(h), h + heading_err, v)


def spawn_scenario(cfg, seed):
    """Sample an initial world.

    Sampling order from ``default_rng(seed)``: vehicle count (only when
    ``randomize_count``: uniform integer in [min_vehicles, n_vehicles]), ego
    speed, ego lateral offset, ego heading error, then each surrounding vehicle
    (lane, arclength, desired speed, initial speed fraction).
    """
    rng = np.random.default_rng(seed)
    lanes = road_layout(cfg.scenario, cfg.n_lanes, cfg.lane_width)
    n = cfg.n_vehicles
    if cfg.randomize_count and n > 0:
        n = int(rng.integers(min(cfg.min_vehicles, n), n + 1))
    v = float(rng.uniform(*cfg.ego_speed))
    lat = float(rng.uniform(-cfg.ego_lateral, cfg.ego_lateral))
    dphi = float(rng.uniform(-cfg.ego_heading, cfg.ego_heading))
    ego_s = cfg.ego_start_s
    ego = _place(lanes[0], ego_s, lat, dphi, v)

    capacity = sum(int(cl.total_length // MIN_SPAWN_GAP) for cl in lanes) - 1
    if n > capacity:
        raise ScenarioOverfull("scenario overfull")

    placed = [(0, ego_s)]
    others = []
    for i in range(n):
        obstacle = cfg.scenario != "town" and i == 0
        for _ in range(2000):
            if obstacle:
                lane, s = 0, ego_s + float(rng.uniform(*cfg.obstacle_gap))
            else:
                lane = int(rng.integers(0, len(lanes)))
                s = float(rng.uniform(0.0, lanes[lane].total_length - (0.0 if lanes[lane].closed else 60.0)))
            if all(l != lane or _gap_ok(lanes[lane], s, ps) for l, ps in placed):
                break
        else:
            raise ScenarioOverfull("scenario overfull")
        v0 = float(rng.uniform(*(cfg.obstacle_v0 if obstacle else cfg.others_v0)))
        frac = 1.0 if obstacle else float(rng.uniform(0.5, 1.0))
        placed.append((lane, s))
        others.append(OtherVehicle(_place(lanes[lane], s, v=v0 * frac), lane, IdmParams(v0=v0)))
    return WorldState(ego=ego, others=tuple(others), centerlines=lanes, t=0, ego_lane=0,
                      horizon=cfg.horizon, lane_width=cfg.lane_width, rng_stream=rng)


def _gap_ok(cl, s, other_s):
    d = abs(s - other_s)
    if cl.closed:
        d = min(d, cl.total_length - d)
    return d >= MIN_SPAWN_GAP


def occupied_lane(w, pose=None):
    """Index of the lane whose centerline is laterally closest to ``pose``."""
    pose = w.ego if pose is None else pose
    best, best_d = None, math.inf
    for i, cl in enumerate(w.centerlines):
        d, _, _, lateral = cl.project(pose.x, pose.y)
        if d < best_d:
            best, best_d = i, d
    return best, best_d


def is_off_road(w, pose=None):
    _, d = occupied_lane(w, pose)
    return d > w.lane_half_width + OFF_ROAD_MARGIN


def _pure_pursuit(state, cl, s):
    lookahead = max(4.0, 0.8 * state.v)
    tx, ty, _ = cl.pose_at(s + lookahead)
    alpha = math.atan2(ty - state.y, tx - state.x) - state.yaw
    steer = math.atan2(2.0 * WHEELBASE * math.sin(alpha), lookahead)
    return min(max(steer, -STEER_MAX), STEER_MAX)


def lane_leaders(w):
    """For each surrounding vehicle: (gap, leader speed) along its own lane.

    The ego counts as a leader when it occupies that lane. Gap is bumper to
    bumper (center distance minus two radii); no leader gives an infinite gap.
    """
    n = len(w.others)
    s_vals = [w.centerlines[o.lane_id].project(o.state.x, o.state.y)[1] for o in w.others]
    ego_lane, _ = occupied_lane(w)
    ego_s = w.centerlines[ego_lane].project(w.ego.x, w.ego.y)[1]
    out = []
    for i, o in enumerate(w.others):
        cl = w.centerlines[o.lane_id]
        best_gap, v_lead = math.inf, o.state.v
        cands = [(s_vals[j], w.others[j].state.v) for j in range(n) if j != i and w.others[j].lane_id == o.lane_id]
        if ego_lane == o.lane_id:
            cands.append((ego_s, w.ego.v))
        for sj, vj in cands:
            ds = cl.signed_gap(s_vals[i], sj)
            if 0.0 < ds < best_gap:
                best_gap, v_lead = ds, vj
        out.append((best_gap - COLLISION_DIST, v_lead, s_vals[i]))
    return out


def _positions(w):
    return np.array([[w.ego.x, w.ego.y]] + [[o.state.x, o.state.y] for o in w.others])


def any_collision(w):
    p = _positions(w)
    if len(p) < 2:
        return False
    diff = p[:, None, :] - p[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    return bool(d2.min() < COLLISION_DIST ** 2)


def step_world(w, ego_action):
    """Advance ego and traffic by one step; returns ``(new_world, events)``."""
    if w.done:
        raise EpisodeFinished("episode finished")
    ego = step_vehicle(w.ego, ego_action)
    others = []
    for o, (gap, v_lead, s) in zip(w.others, lane_leaders(w)):
        cl = w.centerlines[o.lane_id]
        a = idm_accel(gap if math.isfinite(gap) else 1e9, o.state.v, v_lead, o.idm)
        a = min(max(a, -ACCEL_MAX), ACCEL_MAX)
        steer = _pure_pursuit(o.state, cl, s)
        others.append(replace(o, state=step_vehicle(o.state, Action(a, steer))))
    nw = replace(w, ego=ego, others=tuple(others), t=w.t + 1)
    collision = any_collision(nw)
    off_road = is_off_road(nw)
    done = collision or off_road or nw.t >= w.horizon
    return replace(nw, done=done), StepEvents(collision, off_road, done)


# -- observations -----------------------------------------------------------

def ego_frenet(w):
    return frenet_project(w.centerlines[w.ego_lane], w.ego)


def relative_features(ego, other):
    """[rel_x, rel_y, rel_vx, rel_vy] of ``other`` expressed in the ego frame."""
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    dx, dy = other.x - ego.x, other.y - ego.y
    dvx = other.v * math.cos(other.yaw) - ego.v * c
    dvy = other.v * math.sin(other.yaw) - ego.v * s
    return [c * dx + s * dy, -s * dx + c * dy, c * dvx + s * dvy, -s * dvx + c * dvy]


NO_FRONT_SENTINEL = (DETECT_RANGE, 0.0, 0.0, 0.0)


def front_vehicle(w):
    """Nearest same-lane vehicle ahead of the ego within detect range: (other, gap) or None."""
    lane, _ = occupied_lane(w)
    cl = w.centerlines[lane]
    ego_s = cl.project(w.ego.x, w.ego.y)[1]
    best = None
    for o in w.others:
        if o.lane_id != lane:
            continue
        gap = cl.signed_gap(ego_s, cl.project(o.state.x, o.state.y)[1])
        if 0.0 < gap < DETECT_RANGE and (best is None or gap < best[1]):
            best = (o, gap)
    return best


def observe_mb(w, with_obstacle=False):
    """Model-based observation: [dy, dphi, v] plus the front vehicle block if requested."""
    dy, dphi, _ = ego_frenet(w)
    obs = [dy, dphi, w.ego.v]
    if with_obstacle:
        fv = front_vehicle(w)
        obs += relative_features(w.ego, fv[0].state) if fv else list(NO_FRONT_SENTINEL)
    return np.array(obs)


def _nearby(w, max_count=None):
    """Relative features of vehicles within detect range, canonically sorted by distance."""
    feats = [relative_features(w.ego, o.state) for o in w.others]
    feats = [f for f in feats if math.hypot(f[0], f[1]) < DETECT_RANGE]
    feats.sort(key=lambda f: (math.hypot(f[0], f[1]), f[0], f[1], f[2], f[3]))
    return feats[:max_count] if max_count is not None else feats


STATE_VECTOR_SLOTS = 10
STATE_VECTOR_DIM = 3 + 4 * STATE_VECTOR_SLOTS


def observe_state_vector(w):
    """Fixed 43-dim vector: ego block then the 10 nearest vehicles, zero padded."""
    try:
        dy, dphi, _ = ego_frenet(w)
    except OffMapError:
        dy, dphi = 0.0, 0.0
    out = np.zeros(STATE_VECTOR_DIM)
    out[:3] = (dy, dphi, w.ego.v)
    for i, f in enumerate(_nearby(w, STATE_VECTOR_SLOTS)):
        out[3 + 4 * i: 7 + 4 * i] = f
    return out


@dataclass(frozen=True)
class GraphObs:
    """Star graph: vertex 0 is the ego; every edge points from a vehicle to the ego."""
    vertex_features: np.ndarray  # (n+1, 4)
    edge_src: np.ndarray  # (n,) source indices, all >= 1
    edge_features: np.ndarray  # (n, 4)

    @property
    def n_vertices(self):
        return len(self.vertex_features)

    @property
    def n_edges(self):
        return len(self.edge_src)


def observe_graph(w):
    try:
        dy, dphi, _ = ego_frenet(w)
    except OffMapError:
        dy, dphi = 0.0, 0.0
    feats = _nearby(w)
    vertices = np.array([[dy, dphi, w.ego.v, 0.0]] + feats)
    edges = np.array(feats).reshape(-1, 4)
    return GraphObs(vertices, np.arange(1, len(feats) + 1), edges)
