"""Oracle suite: every derived check recomputed from an independent reference."""

from fractions import Fraction
import time

import mpmath
import numpy as np

from .cost import QuadraticCost
from .dynfit import GmmModel, condition_gaussian, gmm_em_update
from .lingauss import LinearGaussianDynamics, LinearGaussianPolicy
from .neural import gnn_backward, gnn_encode, init_gnn, init_mlp, mlp_backward, mlp_forward
from .trajopt import forward_marginals, lqg_backward, traj_kl
from .world import GraphObs


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def scalar_riccati_oracle(a, b, q, r, v_final, T):
    """Exact rational recursion for s' = a s + b u, cost sum q s^2/2 + r u^2/2 + v_final s_T^2/2."""
    a, b, q, r, V = (Fraction(x) for x in (a, b, q, r, v_final))
    gains, covs = [], []
    for _ in range(T):
        Qss, Qsu, Quu = q + a * a * V, a * b * V, r + b * b * V
        gains.append(-Qsu / Quu)
        covs.append(1 / Quu)
        V = Qss - Qsu * Qsu / Quu
    return [float(g) for g in gains[::-1]], [float(c) for c in covs[::-1]]


def check_scalar_riccati():
    a, b, q, r, vT, T = "1.1", "0.5", "1", "0.3", "2", 6
    gains, covs = scalar_riccati_oracle(a, b, q, r, vT, T)
    f = float
    dyn = LinearGaussianDynamics(np.full((T, 1, 1), f(a)), np.full((T, 1, 1), f(b)), np.zeros((T, 1)),
                                 np.full((T, 1, 1), 1e-3))
    C = np.zeros((T, 2, 2))
    C[:, 0, 0], C[:, 1, 1] = f(q), f(r)
    qc = QuadraticCost(C, np.zeros((T, 2)), np.zeros(T), np.zeros((T, 2)), 1)
    pol = lqg_backward(dyn, qc, terminal=(np.array([[f(vT)]]), np.zeros(1)))
    err = max(rel_err(pol.K[:, 0, 0], gains), rel_err(pol.C[:, 0, 0], covs), float(np.abs(pol.k).max()))
    return err <= 1e-6, f"max rel err {err:.2e}"


def brute_force_open_loop(dyn, qc, s0):
    """Minimize the summed quadratic cost over the stacked action sequence directly."""
    T, ds, da = dyn.T, dyn.dim_s, dyn.dim_a

    def total(u):
        s, J = np.array(s0, dtype=float), 0.0
        for t in range(T):
            x = np.concatenate([s, u[t * da:(t + 1) * da]])
            J += float(qc.evaluate(np.broadcast_to(x, (T, ds + da)))[t])
            s = dyn.A[t] @ s + dyn.B[t] @ x[ds:] + dyn.f[t]
        return J

    n = T * da
    eye = np.eye(n)
    J0 = total(np.zeros(n))
    # a quadratic is recovered exactly from unit-step evaluations
    g = np.array([(total(eye[i]) - total(-eye[i])) / 2 for i in range(n)])
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            H[i, j] = (total(eye[i] + eye[j]) - total(eye[i]) - total(eye[j]) + J0)
    return np.linalg.solve(0.5 * (H + H.T), -g)


def check_lqg_brute_force(seed=0):
    rng = np.random.default_rng(seed)
    T, ds, da = 3, 2, 1
    A = np.eye(ds) + 0.3 * rng.standard_normal((T, ds, ds))
    B = rng.standard_normal((T, ds, da))
    f = 0.2 * rng.standard_normal((T, ds))
    dyn = LinearGaussianDynamics(A, B, f, np.broadcast_to(0.01 * np.eye(ds), (T, ds, ds)).copy())
    M = rng.standard_normal((T, ds + da, ds + da))
    C = np.einsum("tij,tkj->tik", M, M) + 0.5 * np.eye(ds + da)
    qc = QuadraticCost(C, rng.standard_normal((T, ds + da)), np.zeros(T), rng.standard_normal((T, ds + da)), ds)
    pol = lqg_backward(dyn, qc)
    s0 = rng.standard_normal(ds)
    u_star = brute_force_open_loop(dyn, qc, s0)
    s, u_lqg = s0.copy(), []
    for t in range(T):
        a = pol.mean_action(t, s)
        u_lqg.append(a)
        s = A[t] @ s + B[t] @ a + f[t]
    err = float(np.abs(np.concatenate(u_lqg) - u_star).max())
    return err <= 1e-6, f"max abs err {err:.2e}"


def random_lg_problem(rng, T=3, ds=2, da=2):
    A = np.eye(ds) + 0.2 * rng.standard_normal((T, ds, ds))
    B = 0.5 * rng.standard_normal((T, ds, da))
    f = 0.1 * rng.standard_normal((T, ds))
    F = np.broadcast_to(0.05 * np.eye(ds), (T, ds, ds)).copy()
    dyn = LinearGaussianDynamics(A, B, f, F)

    def policy(scale):
        K = scale * rng.standard_normal((T, da, ds))
        k = scale * rng.standard_normal((T, da))
        L = 0.3 * rng.standard_normal((T, da, da))
        C = np.einsum("tij,tkj->tik", L, L) + 0.2 * np.eye(da)
        return LinearGaussianPolicy(K, k, C)
    return dyn, policy(0.5), policy(0.5)


def monte_carlo_kl(dyn, pol_new, pol_old, m0, S0, n, rng):
    """Average of sum_t log pi_new(a|s) - log pi_old(a|s) over trajectories drawn from pi_new."""
    T, da = pol_new.T, pol_new.dim_a
    s = rng.multivariate_normal(m0, S0, size=n)
    total = np.zeros(n)
    for t in range(T):
        mean_new = s @ pol_new.K[t].T + pol_new.k[t]
        a = mean_new + rng.standard_normal((n, da)) @ np.linalg.cholesky(pol_new.C[t]).T
        mean_old = s @ pol_old.K[t].T + pol_old.k[t]
        for mean, C, sign in ((mean_new, pol_new.C[t], 1.0), (mean_old, pol_old.C[t], -1.0)):
            r = a - mean
            P = np.linalg.inv(C)
            total += sign * (-0.5 * np.einsum("ni,ij,nj->n", r, P, r) - 0.5 * np.linalg.slogdet(C)[1])
        noise = rng.standard_normal((n, dyn.dim_s)) @ np.linalg.cholesky(dyn.F[t]).T
        s = s @ dyn.A[t].T + a @ dyn.B[t].T + dyn.f[t] + noise
    return float(total.mean()), float(total.std() / np.sqrt(n))


def check_traj_kl(seed=1, n=100_000):
    rng = np.random.default_rng(seed)
    dyn, pol_new, pol_old = random_lg_problem(rng)
    m0, S0 = np.array([0.5, -0.3]), 0.1 * np.eye(2)
    kl = traj_kl(dyn, pol_new, pol_old, forward_marginals(dyn, pol_new, m0, S0))
    mc, se = monte_carlo_kl(dyn, pol_new, pol_old, m0, S0, n, rng)
    err = abs(kl - mc) / abs(mc)
    return err <= 1e-2, f"kl {kl:.4f} mc {mc:.4f} (se {se:.4f}) rel err {err:.2e}"


def check_condition_gaussian(seed=2):
    rng = np.random.default_rng(seed)
    d, split = 6, 4
    M = rng.standard_normal((d, d))
    S = M @ M.T + 0.5 * np.eye(d)
    mu = rng.standard_normal(d)
    gain, offset, cov = condition_gaussian(mu, S, split)
    with mpmath.workdps(50):
        Sm = mpmath.matrix(S.tolist())
        S11 = Sm[:split, :split]
        S12 = Sm[:split, split:]
        S21 = Sm[split:, :split]
        S22 = Sm[split:, split:]
        G = S21 * mpmath.inverse(S11)
        ref_gain = np.array((G).tolist(), dtype=float)
        ref_cov = np.array((S22 - G * S12).tolist(), dtype=float)
        mum = mpmath.matrix(mu.tolist())
        ref_off = np.array((mum[split:, 0] - G * mum[:split, 0]).tolist(), dtype=float).ravel()
    err = max(float(np.abs(gain - ref_gain).max()), float(np.abs(cov - ref_cov).max()),
              float(np.abs(offset - ref_off).max()))
    return err <= 1e-10, f"max abs err {err:.2e}"


def check_em_monotone(seed=3):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=4.0, size=(4, 3))
    X = np.concatenate([c + rng.standard_normal((150, 3)) * rng.uniform(0.3, 1.5) for c in centers])
    gmm = gmm_em_update(GmmModel(5), X, iters=30, rng=rng)
    ll = np.asarray(gmm.ll_history)
    worst = float(np.min(np.diff(ll)))
    return worst >= -1e-9, f"{len(ll)} sweeps, worst step {worst:.2e}"


def _fd_check(params, grads, value, rng, per_array=4, h=1e-5):
    worst = 0.0
    for P, G in zip(params, grads):
        for _ in range(per_array):
            idx = tuple(int(rng.integers(0, s)) for s in P.shape)
            old = P[idx]
            P[idx] = old + h
            fp = value()
            P[idx] = old - h
            fm = value()
            P[idx] = old
            worst = max(worst, rel_err((fp - fm) / (2 * h), G[idx], floor=1e-6))
    return worst


def check_mlp_gradients(seed=4, instances=10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        sizes = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
        act = ("tanh", "identity")[int(rng.integers(0, 2))]
        p = init_mlp(sizes, rng, activation=act, out_activation="tanh")
        for b in p.biases:
            b[:] = rng.standard_normal(b.shape)
        x = rng.standard_normal((3, sizes[0]))
        w = rng.standard_normal((3, sizes[-1]))

        def value():
            return float(np.sum(mlp_forward(p, x)[0] * w))
        y, tape = mlp_forward(p, x)
        dx, grads = mlp_backward(p, tape, w)
        worst = max(worst, _fd_check(p.params(), grads, value, rng))
        worst = max(worst, _fd_check([x], [dx], value, rng))
    return worst <= 1e-4, f"worst rel err {worst:.2e}"


def random_graph(rng, n):
    return GraphObs(rng.standard_normal((n + 1, 4)), np.arange(1, n + 1), rng.standard_normal((n, 4)))


def check_gnn_gradients(seed=5, instances=10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        p = init_gnn(rng, hidden=8, width=6, out_dim=64)
        g = random_graph(rng, i % 5)
        w = rng.standard_normal(64)

        def value():
            return float(gnn_encode(g, p)[0] @ w)
        feat, tape = gnn_encode(g, p)
        grads = gnn_backward(p, tape, w)
        worst = max(worst, _fd_check(p.params(), grads, value, rng, per_array=3))
    return worst <= 1e-4, f"worst rel err {worst:.2e}"


def check_gnn_permutation(seed=6, trials=10):
    rng = np.random.default_rng(seed)
    p = init_gnn(rng)
    for _ in range(trials):
        n = int(rng.integers(2, 12))
        g = random_graph(rng, n)
        perm = rng.permutation(n)
        h = GraphObs(np.concatenate([g.vertex_features[:1], g.vertex_features[1:][perm]]),
                     np.arange(1, n + 1), g.edge_features[perm])
        if not np.array_equal(gnn_encode(g, p)[0], gnn_encode(h, p)[0]):
            return False, "outputs differ under permutation"
    return True, f"{trials} permutations bit-identical"


CHECKS = (
    ("lqg_scalar_riccati", check_scalar_riccati),
    ("lqg_t3_brute_force", check_lqg_brute_force),
    ("traj_kl_monte_carlo", check_traj_kl),
    ("condition_gaussian_mpmath", check_condition_gaussian),
    ("em_loglik_monotone", check_em_monotone),
    ("mlp_gradients_fd", check_mlp_gradients),
    ("gnn_gradients_fd", check_gnn_gradients),
    ("gnn_permutation_invariance", check_gnn_permutation),
)


def run_selftest(echo=print):
    """Run every oracle; returns ``(all_passed, results, seconds)``."""
    t0 = time.perf_counter()
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
        if echo is not None:
            echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    elapsed = time.perf_counter() - t0
    return all(ok for _, ok, _ in results), results, elapsed
