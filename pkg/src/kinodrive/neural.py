"""Small numpy networks with explicit reverse-mode gradients, and the ego-centric graph encoder.

Everything is batch-first: a vector input of shape (d,) is treated as a batch
of one and squeezed back on the way out.
"""

from dataclasses import dataclass
import itertools

import numpy as np
from scipy import sparse

ACTIVATIONS = ("relu", "tanh", "identity")
_version_counter = itertools.count(1)


class StaleTape(RuntimeError):
    pass


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, y):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - y * y
    return np.ones_like(z)


class MlpParams:
    """Dense layers ``y = act(x @ W + b)``; the last layer uses ``out_activation``."""

    def __init__(self, weights, biases, activation="relu", out_activation="identity"):
        if activation not in ACTIVATIONS or out_activation not in ACTIVATIONS:
            raise ValueError("unknown activation")
        for W, b, W_next in zip(weights, biases, list(weights[1:]) + [None]):
            if W.shape[1] != b.shape[0] or (W_next is not None and W_next.shape[0] != W.shape[1]):
                raise ValueError("inconsistent layer dimensions")
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.activation = activation
        self.out_activation = out_activation
        self.version = next(_version_counter)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def params(self):
        """Flat list [W0, b0, W1, b1, ...]; arrays are shared, not copied."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def touch(self):
        """Mark parameters as modified so tapes recorded earlier become stale."""
        self.version = next(_version_counter)

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.activation, self.out_activation)

    def activation_of(self, layer):
        return self.out_activation if layer == len(self.weights) - 1 else self.activation


def init_mlp(sizes, rng, activation="relu", out_activation="identity", out_scale=1.0):
    """Fan-in scaled uniform initialization, zero biases."""
    Ws, bs = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        if i == len(sizes) - 2:
            bound *= out_scale
        Ws.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        bs.append(np.zeros(n_out))
    return MlpParams(Ws, bs, activation, out_activation)


@dataclass
class MlpTape:
    version: int
    inputs: list  # input to each layer
    pre: list  # pre-activations
    outs: list  # post-activations
    squeeze: bool


def mlp_forward(p, x):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None] if squeeze else x
    if h.shape[-1] != p.weights[0].shape[0]:
        raise ValueError(f"input dim {h.shape[-1]} != {p.weights[0].shape[0]}")
    inputs, pre, outs = [], [], []
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        z = h @ W + b
        h = _act(p.activation_of(i), z)
        pre.append(z)
        outs.append(h)
    tape = MlpTape(p.version, inputs, pre, outs, squeeze)
    return (h[0] if squeeze else h), tape


def mlp_backward(p, tape, dy):
    """Gradients of sum(y * dy): ``(dx, grads)`` with grads aligned to ``p.params()``."""
    if tape.version != p.version:
        raise StaleTape("tape does not match current parameters")
    g = np.asarray(dy, dtype=float)
    if tape.squeeze:
        g = g[None]
    grads = [None] * (2 * len(p.weights))
    for i in range(len(p.weights) - 1, -1, -1):
        g = g * _act_grad(p.activation_of(i), tape.pre[i], tape.outs[i])
        grads[2 * i] = tape.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ p.weights[i].T
    return (g[0] if tape.squeeze else g), grads


class Adam:
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def polyak(target, online, tau):
    for pt, po in zip(target, online):
        pt *= 1.0 - tau
        pt += tau * po


# -- graph layers -------------------------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of star graphs; ``ego`` holds each graph's vertex-0 index."""
    vertices: np.ndarray  # (NV, v)
    edges: np.ndarray  # (NE, e)
    src: np.ndarray  # (NE,)
    dst: np.ndarray  # (NE,)
    ego: np.ndarray  # (B,)

    def __post_init__(self):
        self.scatter_src = scatter_matrix(self.src, len(self.vertices))
        self.scatter_dst = scatter_matrix(self.dst, len(self.vertices))


def scatter_matrix(index, n_rows):
    """Sparse (n_rows, n_edges) one-hot map; ``M @ X`` sums rows of X into ``index`` in edge order."""
    n = len(index)
    return sparse.csr_matrix((np.ones(n), (np.asarray(index, dtype=int), np.arange(n))), shape=(n_rows, n))


def canonical_graph(g):
    """Reorder surrounding vehicles lexicographically by (edge, vertex) features.

    Sums over incoming edges then always run in the same order, which makes
    the encoder exactly invariant to how the vehicles were listed.
    """
    from .world import GraphObs
    n = g.n_edges
    if n <= 1:
        return g
    keys = np.concatenate([g.edge_features, g.vertex_features[g.edge_src]], axis=1)
    order = np.lexsort(keys.T[::-1])
    src = g.edge_src[order]
    if g.n_vertices != n + 1 or len(set(src.tolist())) != n:
        # not a plain star: keep the vertices, only fix the summation order
        return GraphObs(g.vertex_features, src, g.edge_features[order])
    new_index = np.arange(1, n + 1)
    vertices = np.concatenate([g.vertex_features[:1], g.vertex_features[src]])
    return GraphObs(vertices, new_index, g.edge_features[order])


def batch_graphs(graphs):
    """Stack already-canonical graphs into one GraphBatch."""
    nv = np.array([len(g.vertex_features) for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(nv)[:-1]])
    vertices = np.concatenate([g.vertex_features for g in graphs])
    ne = np.array([g.n_edges for g in graphs])
    if ne.sum():
        edges = np.concatenate([g.edge_features for g in graphs if g.n_edges])
        src = np.concatenate([g.edge_src + o for g, o in zip(graphs, offsets) if g.n_edges])
    else:
        edges = np.zeros((0, graphs[0].edge_features.shape[1] if graphs[0].edge_features.ndim == 2 else 4))
        src = np.zeros(0, dtype=int)
    dst = np.repeat(offsets, ne)
    return GraphBatch(vertices, edges, src.astype(int), dst.astype(int), offsets.astype(int))


@dataclass
class GraphLayerTape:
    phi_e: MlpTape
    phi_v: MlpTape
    scatter_src: object
    scatter_dst: object
    dst: np.ndarray
    dims: tuple  # (e, v)


def graph_conv_layer(vertices, edges, src, dst, phi_e, phi_v, scatter=None):
    """One edge update followed by one vertex update.

    E'_ij = phi_e([E_ij, V_i, V_j]); V'_i = phi_v([V_i, sum of E' over edges into i]).
    Vertices without incoming edges aggregate the zero vector. ``scatter`` may
    carry precomputed (src, dst) scatter matrices.
    """
    vertices = np.asarray(vertices, dtype=float)
    edges = np.asarray(edges, dtype=float)
    if scatter is None:
        scatter = scatter_matrix(src, len(vertices)), scatter_matrix(dst, len(vertices))
    e_dim, v_dim = edges.shape[1], vertices.shape[1]
    e_in = np.concatenate([edges, vertices[src], vertices[dst]], axis=1)
    if len(e_in):
        new_edges, te = mlp_forward(phi_e, e_in)
    else:
        new_edges = np.zeros((0, phi_e.sizes[-1]))
        te = None
    agg = scatter[1] @ new_edges
    new_vertices, tv = mlp_forward(phi_v, np.concatenate([vertices, agg], axis=1))
    return new_vertices, new_edges, GraphLayerTape(te, tv, scatter[0], scatter[1], np.asarray(dst), (e_dim, v_dim))


def graph_conv_backward(phi_e, phi_v, tape, d_vertices, d_edges=None):
    """Returns ``(d_vertices_in, d_edges_in, grads_e, grads_v)``."""
    e_dim, v_dim = tape.dims
    d_vin, grads_v = mlp_backward(phi_v, tape.phi_v, d_vertices)
    d_v = d_vin[:, :v_dim].copy()
    d_new_edges = d_vin[tape.dst, v_dim:]
    if d_edges is not None:
        d_new_edges = d_new_edges + d_edges
    if tape.phi_e is None:
        grads_e = [np.zeros_like(p) for p in phi_e.params()]
        return d_v, np.zeros((0, e_dim)), grads_e, grads_v
    d_ein, grads_e = mlp_backward(phi_e, tape.phi_e, d_new_edges)
    d_v += tape.scatter_src @ d_ein[:, e_dim:e_dim + v_dim]
    d_v += tape.scatter_dst @ d_ein[:, e_dim + v_dim:]
    return d_v, d_ein[:, :e_dim], grads_e, grads_v


class GnnParams:
    """Stacked graph layers plus a readout head applied to the ego vertex."""

    def __init__(self, layers, readout):
        self.layers = layers  # list of (phi_e, phi_v)
        self.readout = readout

    @property
    def out_dim(self):
        return self.readout.sizes[-1]

    def networks(self):
        return [net for pair in self.layers for net in pair] + [self.readout]

    def params(self):
        return [p for net in self.networks() for p in net.params()]

    def touch(self):
        for net in self.networks():
            net.touch()

    def copy(self):
        return GnnParams([(e.copy(), v.copy()) for e, v in self.layers], self.readout.copy())


def init_gnn(rng, v_dim=4, e_dim=4, n_layers=2, hidden=32, width=32, out_dim=64):
    layers = []
    for _ in range(n_layers):
        phi_e = init_mlp([e_dim + 2 * v_dim, hidden, width], rng)
        phi_v = init_mlp([v_dim + width, hidden, width], rng)
        layers.append((phi_e, phi_v))
        e_dim = v_dim = width
    readout = init_mlp([v_dim, out_dim], rng, out_activation="relu")
    return GnnParams(layers, readout)


@dataclass
class GnnTape:
    layers: list
    readout: MlpTape
    ego: np.ndarray
    n_vertices: int
    squeeze: bool


def gnn_encode_batch(batch, p):
    v, e = batch.vertices, batch.edges
    tapes = []
    for phi_e, phi_v in p.layers:
        v, e, t = graph_conv_layer(v, e, batch.src, batch.dst, phi_e, phi_v,
                                   (batch.scatter_src, batch.scatter_dst))
        tapes.append(t)
    feat, tr = mlp_forward(p.readout, v[batch.ego])
    return feat, GnnTape(tapes, tr, batch.ego, len(v), False)


def gnn_encode(obs, p):
    """Encode one GraphObs (or a list of them) into 64-dim features."""
    if isinstance(obs, (list, tuple)):
        return gnn_encode_batch(batch_graphs([canonical_graph(g) for g in obs]), p)
    feat, tape = gnn_encode_batch(batch_graphs([canonical_graph(obs)]), p)
    tape.squeeze = True
    return feat[0], tape


def gnn_backward(p, tape, d_feat):
    """Parameter gradients aligned with ``p.params()`` (input gradients are not needed)."""
    d_feat = np.asarray(d_feat, dtype=float)
    if tape.squeeze:
        d_feat = d_feat[None]
    d_ego, g_read = mlp_backward(p.readout, tape.readout, d_feat)
    d_v = np.zeros((tape.n_vertices, d_ego.shape[1]))
    d_v[tape.ego] = d_ego  # ego indices are distinct
    d_e = None
    grads = []
    for (phi_e, phi_v), t in zip(reversed(p.layers), reversed(tape.layers)):
        d_v, d_e, ge, gv = graph_conv_backward(phi_e, phi_v, t, d_v, d_e)
        grads = ge + gv + grads
    return grads + g_read


# -- state-vector encoder -------------------------------------------------------

def init_state_encoder(rng, in_dim=43, hidden=128, out_dim=64):
    return init_mlp([in_dim, hidden, hidden, out_dim], rng, out_activation="relu")


def encode_state_vector(obs, p):
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != p.sizes[0]:
        raise ValueError(f"state vector must have dim {p.sizes[0]}")
    return mlp_forward(p, obs)


# -- text checkpoints -----------------------------------------------------------

def mlp_to_text(p):
    """Header of layer sizes and activations, then each layer's W (row-major) and b."""
    lines = [" ".join(str(s) for s in p.sizes) + f" {p.activation} {p.out_activation}"]
    for W, b in zip(p.weights, p.biases):
        lines.append(" ".join(repr(float(x)) for x in W.ravel()))
        lines.append(" ".join(repr(float(x)) for x in b))
    return "\n".join(lines) + "\n"


def mlp_from_lines(lines):
    """Parse one MLP from an iterator of lines; consumes exactly its lines."""
    head = next(lines).split()
    sizes = [int(s) for s in head[:-2]]
    Ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        Ws.append(np.array(next(lines).split(), dtype=float).reshape(n_in, n_out))
        bs.append(np.array(next(lines).split(), dtype=float).reshape(n_out))
    return MlpParams(Ws, bs, head[-2], head[-1])
