"""Soft actor-critic over pluggable observation encoders."""

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .geometry import OffMapError
from .cost import CostWeights, step_cost
from .neural import (Adam, batch_graphs, canonical_graph, gnn_backward, gnn_encode_batch, init_gnn,
                     init_mlp, init_state_encoder, mlp_backward, mlp_forward, polyak)
from .tasks import ACTION_HIGH, ACTION_LOW
from .vehicle import Action
from .world import (STATE_VECTOR_DIM, GraphObs, ScenarioConfig, observe_graph, observe_mb,
                    observe_state_vector, spawn_scenario, step_world)

log = logging.getLogger(__name__)

SAC_COLUMNS = ("env_steps", "mean_return", "loss_q", "loss_pi", "entropy")
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
ENCODERS = ("graph", "state_vector", "none")


class SacDiverged(RuntimeError):
    pass


@dataclass
class SacConfig:
    hidden: int = 64
    batch: int = 256
    lr: float = 3e-4
    discount: float = 0.99
    tau: float = 0.005
    entropy_coeff: float = 0.2
    buffer_capacity: int = 100_000
    warmup: int = 1000
    log_every: int = 1000
    return_window: int = 5
    feature_dim: int = 64
    encoder_hidden: int = 128  # state-vector encoder width
    gnn_width: int = 32
    reward_scale: float = 1.0  # applied to stored rewards only; logged returns are unscaled


class ReplayBuffer:
    """Uniform ring buffer. Vector observations live in a dense array, graphs in an object array."""

    def __init__(self, capacity=100_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self.pos = 0
        self.obs = self.next_obs = None

    def _alloc(self, obs, dim_a):
        if isinstance(obs, np.ndarray):
            shape = (self.capacity,) + obs.shape
            self.obs, self.next_obs = np.zeros(shape), np.zeros(shape)
        else:
            self.obs = np.empty(self.capacity, dtype=object)
            self.next_obs = np.empty(self.capacity, dtype=object)
        self.actions = np.zeros((self.capacity, dim_a))
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity)

    def add(self, obs, action, reward, next_obs, done):
        if self.obs is None:
            self._alloc(obs, len(action))
        i = self.pos
        self.obs[i], self.next_obs[i] = obs, next_obs
        self.actions[i], self.rewards[i], self.dones[i] = action, reward, float(done)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n, rng):
        if self.size == 0:
            raise ValueError("empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n, rng):
        idx = self.sample_indices(n, rng)
        return (self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])


# -- encoders -------------------------------------------------------------------

# typical magnitudes that bring observation entries to order one before any network sees them
EGO_SCALE = np.array([1.0, 1.0, 5.0])  # dy, dphi, v
OTHER_SCALE = np.array([20.0, 4.0, 5.0, 5.0])  # rel_x, rel_y, rel_vx, rel_vy


def observation_scale(dim):
    """Scale of an ego block followed by vehicle blocks, or None for any other layout."""
    if dim is None or dim < 3 or (dim - 3) % 4:
        return None
    return np.concatenate([EGO_SCALE, np.tile(OTHER_SCALE, (dim - 3) // 4)])


class IdentityEncoder:
    """Low-dimensional observations used directly as features (after optional scaling)."""
    kind = "none"

    def __init__(self, dim, scale=None):
        self.out_dim = dim
        self.scale = scale

    def prepare(self, obs):
        obs = np.asarray(obs, dtype=float)
        return obs if self.scale is None else obs / self.scale

    def collate(self, batch):
        return np.asarray(list(batch), dtype=float)

    def encode(self, x):
        return x, None

    def backward(self, tape, d_feat):
        return []

    def params(self):
        return []

    def touch(self):
        pass

    def copy(self):
        return IdentityEncoder(self.out_dim, self.scale)


class StateVectorEncoder(IdentityEncoder):
    kind = "state_vector"

    def __init__(self, net):
        self.net = net
        self.out_dim = net.sizes[-1]
        self.scale = observation_scale(net.sizes[0])

    def encode(self, x):
        if x.shape[-1] != self.net.sizes[0]:
            raise ValueError(f"state vector must have dim {self.net.sizes[0]}")
        return mlp_forward(self.net, x)

    def backward(self, tape, d_feat):
        return mlp_backward(self.net, tape, d_feat)[1]

    def params(self):
        return self.net.params()

    def touch(self):
        self.net.touch()

    def copy(self):
        return StateVectorEncoder(self.net.copy())


class GraphEncoder:
    kind = "graph"

    def __init__(self, gnn):
        self.gnn = gnn
        self.out_dim = gnn.out_dim

    def prepare(self, obs):
        v = obs.vertex_features / OTHER_SCALE
        v[0] = obs.vertex_features[0] / np.append(EGO_SCALE, 1.0)
        return canonical_graph(GraphObs(v, obs.edge_src, obs.edge_features / OTHER_SCALE))

    def collate(self, batch):
        return batch_graphs(list(batch))

    def encode(self, batch):
        return gnn_encode_batch(batch, self.gnn)

    def backward(self, tape, d_feat):
        return gnn_backward(self.gnn, tape, d_feat)

    def params(self):
        return self.gnn.params()

    def touch(self):
        self.gnn.touch()

    def copy(self):
        return GraphEncoder(self.gnn.copy())


def make_encoder(kind, rng, cfg, obs_dim=None):
    if kind == "graph":
        return GraphEncoder(init_gnn(rng, hidden=cfg.gnn_width, width=cfg.gnn_width, out_dim=cfg.feature_dim))
    if kind == "state_vector":
        return StateVectorEncoder(init_state_encoder(rng, obs_dim or STATE_VECTOR_DIM, cfg.encoder_hidden,
                                                     cfg.feature_dim))
    if kind == "none":
        return IdentityEncoder(obs_dim, observation_scale(obs_dim))
    raise ValueError(f"unknown encoder {kind!r}")


# -- squashed Gaussian ----------------------------------------------------------

def _log1m_tanh_sq(x):
    """log(1 - tanh(x)^2) without cancellation."""
    return 2.0 * (math.log(2.0) - x - np.logaddexp(0.0, -2.0 * x))


def squashed_sample(mean, log_std, eps, scale):
    """Reparameterized action ``scale * tanh(mean + std * eps)`` and its log-density."""
    std = np.exp(log_std)
    pre = mean + std * eps
    u = np.tanh(pre)
    logp = (-0.5 * eps ** 2 - log_std - 0.5 * math.log(2 * math.pi) - _log1m_tanh_sq(pre)
            - np.log(scale)).sum(axis=-1)
    return scale * u, logp, pre, u


def squashed_log_prob(action, mean, log_std, scale):
    """Density of ``action`` under the squashed Gaussian (for checking against quadrature)."""
    u = np.clip(np.asarray(action) / scale, -1 + 1e-12, 1 - 1e-12)
    pre = np.arctanh(u)
    z = (pre - mean) / np.exp(log_std)
    return (-0.5 * z ** 2 - log_std - 0.5 * math.log(2 * math.pi) - _log1m_tanh_sq(pre) - np.log(scale)).sum(axis=-1)


# -- agent ------------------------------------------------------------------------

@dataclass
class SacAgent:
    """Critic and actor each own an encoder; the critic's has a Polyak target copy."""
    encoder: object
    target_encoder: object
    actor_encoder: object
    actor: object
    q1: object
    q2: object
    target_q1: object
    target_q2: object
    action_scale: np.ndarray
    cfg: SacConfig
    opt_critic: Adam = field(init=False)
    opt_actor: Adam = field(init=False)

    def __post_init__(self):
        self.opt_critic = Adam(self.critic_params(), lr=self.cfg.lr)
        self.opt_actor = Adam(self.actor_params(), lr=self.cfg.lr)

    @property
    def dim_a(self):
        return len(self.action_scale)

    def critic_params(self):
        return self.q1.params() + self.q2.params() + self.encoder.params()

    def actor_params(self):
        return self.actor.params() + self.actor_encoder.params()

    def target_params(self):
        return self.target_q1.params() + self.target_q2.params() + self.target_encoder.params()

    def policy_head(self, feat):
        out, tape = mlp_forward(self.actor, feat)
        mean = out[..., :self.dim_a]
        raw_log_std = out[..., self.dim_a:]
        return mean, np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX), raw_log_std, tape

    def act(self, obs, rng=None, deterministic=False):
        """Action for a raw environment observation."""
        return self.act_prepared(self.actor_encoder.prepare(obs), rng, deterministic)

    def act_prepared(self, x, rng=None, deterministic=False):
        """Action for an observation already passed through ``prepare``."""
        feat, _ = self.actor_encoder.encode(self.actor_encoder.collate([x]))
        mean, log_std, _, _ = self.policy_head(feat)
        if deterministic:
            return (self.action_scale * np.tanh(mean))[0]
        eps = rng.standard_normal(mean.shape)
        return squashed_sample(mean, log_std, eps, self.action_scale)[0][0]


def make_agent(encoder, dim_a, action_scale, cfg, rng):
    h, fdim = cfg.hidden, encoder.out_dim
    actor = init_mlp([fdim, h, h, 2 * dim_a], rng, out_scale=0.1)
    q1 = init_mlp([fdim + dim_a, h, h, 1], rng)
    q2 = init_mlp([fdim + dim_a, h, h, 1], rng)
    return SacAgent(encoder, encoder.copy(), encoder.copy(), actor, q1, q2, q1.copy(), q2.copy(),
                    np.asarray(action_scale, dtype=float), cfg)


def _twin_q(agent, q1, q2, feat, action):
    x = np.concatenate([feat, action], axis=1)
    y1, t1 = mlp_forward(q1, x)
    y2, t2 = mlp_forward(q2, x)
    return y1[:, 0], y2[:, 0], t1, t2


def sac_update(agent, batch, rng):
    """One critic step, one actor step and a Polyak target update (in place).

    Returns the losses and the policy entropy estimate of this update.
    """
    cfg = agent.cfg
    alpha, gamma = cfg.entropy_coeff, cfg.discount
    obs, actions, rewards, next_obs, dones = batch
    obs_x, next_x = agent.encoder.collate(obs), agent.target_encoder.collate(next_obs)
    n = len(actions)

    # critic target: next actions from the current actor, values from the target critic
    f_next, _ = agent.target_encoder.encode(next_x)
    mean_n, log_std_n, _, _ = agent.policy_head(agent.actor_encoder.encode(next_x)[0])
    a_next, logp_next, _, _ = squashed_sample(mean_n, log_std_n, rng.standard_normal(mean_n.shape),
                                              agent.action_scale)
    tq1, tq2, _, _ = _twin_q(agent, agent.target_q1, agent.target_q2, f_next, a_next)
    y = rewards + gamma * (1.0 - dones) * (np.minimum(tq1, tq2) - alpha * logp_next)

    feat, enc_tape = agent.encoder.encode(obs_x)
    q1, q2, t1, t2 = _twin_q(agent, agent.q1, agent.q2, feat, actions)
    loss_q = 0.5 * (np.mean((q1 - y) ** 2) + np.mean((q2 - y) ** 2))
    dx1, g1 = mlp_backward(agent.q1, t1, ((q1 - y) / n)[:, None])
    dx2, g2 = mlp_backward(agent.q2, t2, ((q2 - y) / n)[:, None])
    fdim = feat.shape[1]
    g_enc = agent.encoder.backward(enc_tape, dx1[:, :fdim] + dx2[:, :fdim])

    # actor step through its own encoder; the critic sees its (pre-step) features
    f_pi, pi_tape = agent.actor_encoder.encode(obs_x)
    mean, log_std, raw_log_std, a_tape = agent.policy_head(f_pi)
    eps = rng.standard_normal(mean.shape)
    a_new, logp, pre, u = squashed_sample(mean, log_std, eps, agent.action_scale)

    agent.opt_critic.step(g1 + g2 + g_enc)
    for net in (agent.q1, agent.q2, agent.encoder):
        net.touch()

    p1, p2, s1, s2 = _twin_q(agent, agent.q1, agent.q2, feat, a_new)
    qmin = np.minimum(p1, p2)
    loss_pi = float(np.mean(alpha * logp - qmin))
    use1 = (p1 <= p2).astype(float)
    da1, _ = mlp_backward(agent.q1, s1, use1[:, None])
    da2, _ = mlp_backward(agent.q2, s2, (1.0 - use1)[:, None])
    dq_da = da1[:, fdim:] + da2[:, fdim:]
    std = np.exp(log_std)
    dpre = agent.action_scale * (1.0 - u ** 2)
    # d logp / d pre through the squash term is 2 u; d logp / d log_std also has the -1
    d_mean = (alpha * 2.0 * u - dq_da * dpre) / n
    d_log_std = (alpha * (-1.0 + 2.0 * u * std * eps) - dq_da * dpre * std * eps) / n
    d_log_std *= (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
    d_feat, g_actor = mlp_backward(agent.actor, a_tape, np.concatenate([d_mean, d_log_std], axis=1))
    agent.opt_actor.step(g_actor + agent.actor_encoder.backward(pi_tape, d_feat))
    agent.actor.touch()
    agent.actor_encoder.touch()

    polyak(agent.target_params(), agent.critic_params(), cfg.tau)
    for net in (agent.target_q1, agent.target_q2, agent.target_encoder):
        net.touch()

    entropy = float(-np.mean(logp))
    if not (np.isfinite(loss_q) and np.isfinite(loss_pi)):
        raise SacDiverged("diverged")
    return {"loss_q": float(loss_q), "loss_pi": loss_pi, "entropy": entropy}


# -- environment -------------------------------------------------------------------

@dataclass(frozen=True)
class SacEnvConfig:
    scenario: ScenarioConfig = field(default_factory=lambda: ScenarioConfig("town", n_vehicles=8, horizon=500))
    weights: CostWeights = field(default_factory=CostWeights)
    observation: str = "graph"  # graph | state_vector | mb | mb_obstacle


class DrivingEnv:
    """Episodic wrapper with reward = -cost; time-limit truncation is not a terminal."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.world = None

    def observe(self, w):
        kind = self.cfg.observation
        if kind == "graph":
            return observe_graph(w)
        if kind == "state_vector":
            return observe_state_vector(w)
        try:
            return observe_mb(w, with_obstacle=kind == "mb_obstacle")
        except OffMapError:
            # only reachable after a terminal off-road step; the value is never used
            return np.zeros(7 if kind == "mb_obstacle" else 3)

    def reset(self, seed):
        self.world = spawn_scenario(self.cfg.scenario, seed)
        return self.observe(self.world)

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=float), ACTION_LOW, ACTION_HIGH)
        act = Action(float(a[0]), float(a[1]))
        w, ev = step_world(self.world, act)
        cost, _ = step_cost(self.world, act, self.cfg.weights, ev)
        self.world = w
        terminal = ev.collision or ev.off_road
        truncated = ev.done and not terminal
        info = {"collision": ev.collision, "off_road": ev.off_road}
        return self.observe(w), -cost, terminal, truncated, info


def sac_train(env_cfg, encoder="graph", cfg=None, total_steps=50_000, seed=0, on_log=None):
    """Train SAC; returns ``(agent, rows)`` with rows following SAC_COLUMNS."""
    cfg = SacConfig() if cfg is None else cfg
    if encoder not in ENCODERS:
        raise ValueError(f"unknown encoder {encoder!r}")
    env_cfg = SacEnvConfig(env_cfg.scenario, env_cfg.weights,
                           "mb" if encoder == "none" else encoder)
    env = DrivingEnv(env_cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    obs_dim = 3 if encoder == "none" else None
    agent = make_agent(make_encoder(encoder, rng, cfg, obs_dim), 2, ACTION_HIGH, cfg, rng)
    buf = ReplayBuffer(cfg.buffer_capacity)
    rows, returns, stats = [], [], []
    episode = 0
    obs = agent.encoder.prepare(env.reset(int(rng.integers(2 ** 63))))
    ep_return = 0.0
    for step in range(1, total_steps + 1):
        if step <= cfg.warmup:
            a = rng.uniform(ACTION_LOW, ACTION_HIGH)
        else:
            a = agent.act_prepared(obs, rng)
        nxt, r, terminal, truncated, _ = env.step(a)
        nxt = agent.encoder.prepare(nxt)
        buf.add(obs, a, cfg.reward_scale * r, nxt, terminal)
        ep_return += r
        obs = nxt
        if terminal or truncated:
            returns.append(ep_return)
            episode += 1
            ep_return = 0.0
            obs = agent.encoder.prepare(env.reset(int(rng.integers(2 ** 63))))
        if step > cfg.warmup and buf.size >= min(cfg.batch, buf.capacity):
            stats.append(sac_update(agent, buf.sample(cfg.batch, rng), rng))
        if step % cfg.log_every == 0:
            recent = returns[-cfg.return_window:]
            row = {"env_steps": step,
                   "mean_return": float(np.mean(recent)) if recent else float("nan")}
            for key in ("loss_q", "loss_pi", "entropy"):
                row[key] = float(np.mean([s[key] for s in stats])) if stats else float("nan")
            rows.append(row)
            stats = []
            log.debug("sac step %d return %.2f episodes %d", step, row["mean_return"], episode)
            if on_log is not None:
                on_log(row, agent)
    return agent, rows


def sac_policy_fn(agent, deterministic=True):
    """Adapter to the ``policy(t, obs, rng)`` convention of DrivingTask rollouts."""
    def act(t, obs, rng):
        return agent.act(obs, rng, deterministic)
    return act


def evaluate_agent(agent, env_cfg, seeds, deterministic=True, rng=None):
    """Roll out ``agent`` once per seed: returns (returns, collisions, off_roads)."""
    env = DrivingEnv(SacEnvConfig(env_cfg.scenario, env_cfg.weights,
                                  "mb" if agent.encoder.kind == "none" else agent.encoder.kind))
    rets, cols, offs = [], [], []
    for s in seeds:
        obs = env.reset(s)
        total, info = 0.0, {"collision": False, "off_road": False}
        while True:
            obs, r, terminal, truncated, info = env.step(agent.act(obs, rng, deterministic))
            total += r
            if terminal or truncated:
                break
        rets.append(total)
        cols.append(info["collision"])
        offs.append(info["off_road"])
    return np.array(rets), np.array(cols), np.array(offs)
