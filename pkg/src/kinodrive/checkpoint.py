"""Plain-text policy checkpoints.

Linear-Gaussian policies (gps, cem): a tag line, ``T ds da``, then per time
step three lines holding K, k and C row-major. SAC: a tag line naming the
encoder, the action scale, then every network in MLP text format.
"""

import numpy as np

from .lingauss import LinearGaussianPolicy
from .neural import GnnParams, mlp_from_lines, mlp_to_text
from .sac import GraphEncoder, IdentityEncoder, SacConfig, StateVectorEncoder, make_agent, observation_scale

MAGIC = "kinodrive-checkpoint"


class CheckpointMismatch(ValueError):
    pass


def _floats(xs):
    return " ".join(repr(float(x)) for x in np.ravel(xs))


def linear_policy_to_text(pol, algorithm):
    lines = [f"{MAGIC} {algorithm}", f"{pol.T} {pol.dim_s} {pol.dim_a}"]
    for t in range(pol.T):
        lines += [_floats(pol.K[t]), _floats(pol.k[t]), _floats(pol.C[t])]
    return "\n".join(lines) + "\n"


def sac_to_text(agent):
    enc = agent.actor_encoder
    nets = []
    if enc.kind == "graph":
        nets = enc.gnn.networks()
        extra = str(len(enc.gnn.layers))
    elif enc.kind == "state_vector":
        nets = [enc.net]
        extra = "1"
    else:
        extra = str(enc.out_dim)
    lines = [f"{MAGIC} sac {enc.kind} {extra}", _floats(agent.action_scale)]
    text = "\n".join(lines) + "\n"
    for net in nets + [agent.actor]:
        text += mlp_to_text(net)
    return text


def save_checkpoint(path, policy, algorithm):
    text = sac_to_text(policy) if algorithm == "sac" else linear_policy_to_text(policy, algorithm)
    with open(path, "w") as fh:
        fh.write(text)


def load_checkpoint(path):
    """Returns ``(algorithm, policy)``; SAC policies come back as an inference-only agent."""
    with open(path) as fh:
        lines = iter(fh.read().splitlines())
    head = next(lines, "").split()
    if len(head) < 2 or head[0] != MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint")
    algorithm = head[1]
    if algorithm in ("gps", "cem"):
        T, ds, da = (int(x) for x in next(lines).split())
        K, k, C = np.zeros((T, da, ds)), np.zeros((T, da)), np.zeros((T, da, da))
        for t in range(T):
            K[t] = np.array(next(lines).split(), dtype=float).reshape(da, ds)
            k[t] = np.array(next(lines).split(), dtype=float)
            C[t] = np.array(next(lines).split(), dtype=float).reshape(da, da)
        return algorithm, LinearGaussianPolicy(K, k, C)
    if algorithm == "sac":
        kind, extra = head[2], int(head[3])
        scale = np.array(next(lines).split(), dtype=float)
        if kind == "graph":
            nets = [mlp_from_lines(lines) for _ in range(2 * extra + 1)]
            encoder = GraphEncoder(GnnParams([(nets[2 * i], nets[2 * i + 1]) for i in range(extra)], nets[-1]))
        elif kind == "state_vector":
            encoder = StateVectorEncoder(mlp_from_lines(lines))
        else:
            encoder = IdentityEncoder(extra, observation_scale(extra))
        actor = mlp_from_lines(lines)
        cfg = SacConfig(hidden=actor.sizes[1])
        agent = make_agent(encoder, len(scale), scale, cfg, np.random.default_rng(0))
        agent.actor = actor
        return algorithm, agent
    raise CheckpointMismatch(f"{path}: unknown algorithm {algorithm!r}")
