import mpmath
import numpy as np
import pytest

from kinodrive.dynfit import (GmmModel, NiwPrior, PriorUnavailable, RankDeficientData, SingularConditioning,
                              Trajectory, condition_gaussian, fit_local_dynamics, gmm_em_update,
                              gmm_prior_moments, niw_posterior)


def random_spd(rng, d, scale=1.0):
    M = rng.normal(size=(d, d))
    return scale * (M @ M.T / d + 0.5 * np.eye(d))


# -- condition_gaussian ---------------------------------------------------------------------

def test_condition_block_diagonal():
    mu = np.array([1.0, 2.0, 3.0])
    S = np.diag([1.0, 2.0, 3.0])
    gain, off, cov = condition_gaussian(mu, S, 2)
    assert np.all(gain == 0) and np.allclose(off, [3.0]) and np.allclose(cov, [[3.0]])


def test_condition_near_perfect_correlation():
    covs = []
    for eps in (1e-2, 1e-4, 1e-6):
        rho = 1 - eps
        _, _, cov = condition_gaussian(np.zeros(2), np.array([[1, rho], [rho, 1]]), 1)
        covs.append(cov[0, 0])
    assert covs[0] > covs[1] > covs[2] and covs[2] < 1e-5


def test_condition_extended_precision():
    rng = np.random.default_rng(5)
    S = random_spd(rng, 4)
    mu = rng.normal(size=4)
    gain, off, cov = condition_gaussian(mu, S, 2)
    with mpmath.workdps(50):
        Sm = mpmath.matrix(S.tolist())
        S11, S21, S22 = Sm[0:2, 0:2], Sm[2:4, 0:2], Sm[2:4, 2:4]
        G = S21 * mpmath.inverse(S11)
        C = S22 - G * S21.T
        o = mpmath.matrix(mu[2:].tolist()) - G * mpmath.matrix(mu[:2].tolist())
        G, C, o = (np.array(x.tolist(), dtype=float) for x in (G, C, o))
    assert np.abs(gain - G).max() < 1e-10
    assert np.abs(cov - C).max() < 1e-10
    assert np.abs(off - o.ravel()).max() < 1e-10


def test_condition_singular_block():
    with pytest.raises(SingularConditioning, match="singular conditioning block"):
        condition_gaussian(np.zeros(3), np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1.0]]), 2)


def test_conditioning_monte_carlo_consistency():
    rng = np.random.default_rng(6)
    S = random_spd(rng, 3)
    mu = rng.normal(size=3)
    gain, off, cov = condition_gaussian(mu, S, 2)
    n = 100_000
    x1 = rng.multivariate_normal(mu[:2], S[:2, :2], size=n)
    x2 = x1 @ gain.T + off + rng.normal(size=(n, 1)) * np.sqrt(cov[0, 0])
    X = np.column_stack([x1, x2])
    se_mean = np.sqrt(np.diag(S) / n)
    assert np.all(np.abs(X.mean(0) - mu) < 3 * se_mean + 1e-12)
    emp = np.cov(X.T)
    # standard error of a covariance entry: sqrt((S_ii S_jj + S_ij^2) / n)
    se_cov = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S ** 2) / n)
    assert np.all(np.abs(emp - S) < 3 * se_cov)


# -- EM ---------------------------------------------------------------------------------

def test_em_single_component_fixed_point():
    X = np.random.default_rng(0).normal(size=(200, 3)) @ np.array([[1, 0.3, 0], [0, 1, 0.2], [0, 0, 1.0]])
    g = gmm_em_update(GmmModel(1), X, iters=1)
    assert np.allclose(g.means[0], X.mean(0), atol=1e-12)
    assert np.allclose(g.covariances[0], np.cov(X.T, bias=True), atol=1e-7)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_em_two_separated_gaussians():
    rng = np.random.default_rng(1)
    true = np.array([[-5.0, 0.0], [5.0, 2.0]])
    X = np.concatenate([rng.normal(size=(300, 2)) + true[0], rng.normal(size=(300, 2)) + true[1]])
    g = gmm_em_update(GmmModel(2), X, iters=30, rng=np.random.default_rng(2))
    found = g.means[np.argsort(g.means[:, 0])]
    assert np.abs(found - true).max() < 0.1 + 3 / np.sqrt(300)


def test_em_monotone():
    rng = np.random.default_rng(3)
    X = np.concatenate([rng.normal(size=(150, 4)) + c for c in (0, 3, -2)])
    g = gmm_em_update(GmmModel(5), X, iters=25, rng=rng)
    ll = np.array(g.ll_history)
    assert np.all(np.diff(ll) >= -1e-9)


def test_em_warm_start_continues():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(100, 2))
    g1 = gmm_em_update(GmmModel(3), X, iters=5, rng=rng)
    g2 = gmm_em_update(g1, X, iters=5, rng=rng)
    assert g2.ll_history[0] == pytest.approx(g1.ll_history[-1])
    assert g2.total_points == 200


def test_em_fewer_samples_than_components():
    X = np.random.default_rng(0).normal(size=(5, 2))
    g = gmm_em_update(GmmModel(20), X, iters=3)
    assert g.K == 5 and g.n_components == 20


def test_em_covariances_pd_and_weights_simplex():
    X = np.random.default_rng(0).normal(size=(60, 3))
    X[:, 2] = X[:, 0]  # rank-deficient data still gives PD components
    g = gmm_em_update(GmmModel(4), X, iters=10)
    assert abs(g.weights.sum() - 1) < 1e-9
    for c in g.covariances:
        assert np.linalg.eigvalsh(c).min() >= 1e-8 * (1 - 1e-6)


def test_em_deterministic_given_seed():
    X = np.random.default_rng(0).normal(size=(80, 3))
    a = gmm_em_update(GmmModel(4), X, 5, np.random.default_rng(9))
    b = gmm_em_update(GmmModel(4), X, 5, np.random.default_rng(9))
    assert np.array_equal(a.means, b.means) and np.array_equal(a.covariances, b.covariances)


def test_em_rejects_empty():
    with pytest.raises(ValueError):
        gmm_em_update(GmmModel(2), np.empty((0, 3)))


def test_gmm_text_round_trip():
    X = np.random.default_rng(0).normal(size=(50, 2))
    g = gmm_em_update(GmmModel(3), X, 4)
    h = GmmModel.from_text(g.to_text())
    assert np.array_equal(h.weights, g.weights) and np.array_equal(h.means, g.means)
    assert np.array_equal(h.covariances, g.covariances)
    assert len(g.to_text().splitlines()) == 3


# -- prior moments ------------------------------------------------------------------------

def two_component(sep=10.0):
    return GmmModel(2, np.array([0.5, 0.5]), np.array([[-sep, 0.0], [sep, 0.0]]),
                    np.array([np.eye(2), 2 * np.eye(2)]))


def test_prior_single_component():
    g = GmmModel(1, np.array([1.0]), np.array([[1.0, 2.0]]), np.array([[[2.0, 0.3], [0.3, 1.0]]]))
    p = gmm_prior_moments(g, np.array([[100.0, -50.0]]))
    assert np.allclose(p.mu0, [1, 2]) and np.allclose(p.Phi, g.covariances[0])
    assert p.m == p.n0 == 1.0


def test_prior_one_hot_basin():
    g = two_component()
    q = np.array([[10.0, 0.1], [9.5, -0.3]])
    p = gmm_prior_moments(g, q)
    resp = g.responsibilities(q).mean(0)
    assert resp[1] > 1 - 1e-12
    assert np.allclose(p.mu0, g.means[1], atol=1e-9)
    assert np.allclose(p.Phi, g.covariances[1], atol=1e-6)


def test_prior_symmetric_midpoint():
    g = GmmModel(2, np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([np.eye(2)] * 2))
    p = gmm_prior_moments(g, np.array([[0.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(p.mu0, [0, 0], atol=1e-12)


def test_prior_unfitted():
    with pytest.raises(PriorUnavailable, match="prior unavailable"):
        gmm_prior_moments(GmmModel(3), np.zeros((2, 2)))


# -- local dynamics -----------------------------------------------------------------------

def linear_system(rng, ds=2, da=1):
    A = np.eye(ds) + 0.1 * rng.normal(size=(ds, ds))
    B = rng.normal(size=(ds, da))
    f = rng.normal(size=ds) * 0.1
    return A, B, f


def simulate(A, B, f, F_std, n_traj, T, rng):
    ds, da = B.shape
    trajs = []
    for _ in range(n_traj):
        s = rng.normal(size=ds)
        S, U = [s], []
        for _ in range(T):
            a = rng.normal(size=da)
            s = A @ s + B @ a + f + F_std * rng.normal(size=ds)
            S.append(s)
            U.append(a)
        trajs.append(Trajectory(np.array(S), np.array(U)))
    return trajs


def weak_prior(trajs):
    X = np.concatenate([tr.tuples() for tr in trajs])
    return GmmModel(1, np.array([1.0]), X.mean(0)[None], np.cov(X.T, bias=True)[None])


def test_fit_recovers_linear_system():
    rng = np.random.default_rng(0)
    A, B, f = linear_system(rng)
    trajs = simulate(A, B, f, 0.01, 4, 50, rng)
    dyn = fit_local_dynamics(trajs, weak_prior(trajs))
    for t in range(50):
        err = np.linalg.norm(np.concatenate([dyn.A[t] - A, dyn.B[t] - B, (dyn.f[t] - f)[:, None]], axis=1))
        assert err < 0.05


def test_fit_independence():
    # the joint posterior has no s'-(s,a) cross-covariance when the prior has none and data is one point
    prior = NiwPrior(np.array([0.0, 0.0, 1.5]), np.diag([1.0, 1.0, 2.0]))
    mu, sigma = niw_posterior(np.empty((0, 3)), prior)
    gain, off, cov = condition_gaussian(mu, sigma, 2)
    assert np.all(gain == 0) and off[0] == pytest.approx(1.5) and cov[0, 0] == pytest.approx(2.0)


def test_fit_deterministic_data_floor():
    rng = np.random.default_rng(1)
    A, B, f = linear_system(rng)
    trajs = simulate(A, B, f, 0.0, 4, 30, rng)
    reg = 1e-6
    dyn = fit_local_dynamics(trajs, None, reg=reg)
    for t in range(30):
        assert np.allclose(dyn.F[t], reg * np.eye(2), atol=1e-9)


def test_fit_prior_pull_ordering():
    rng = np.random.default_rng(2)
    A, B, f = linear_system(rng)
    # a deliberately wrong prior: a different linear system
    A2, B2, f2 = linear_system(np.random.default_rng(99))
    prior_trajs = simulate(A2, B2, f2, 0.1, 4, 50, np.random.default_rng(3))
    gmm = weak_prior(prior_trajs)

    def distances(n_traj, T):
        trajs = simulate(A, B, f, 0.1, n_traj, T, rng)
        X = np.concatenate([tr.tuples() for tr in trajs])
        Z = np.column_stack([X[:, :3], np.ones(len(X))])
        W, *_ = np.linalg.lstsq(Z, X[:, 3:], rcond=None)
        ls = W.T
        dyn = fit_local_dynamics(trajs, gmm, window=T)
        t = T // 2
        fit = np.concatenate([dyn.A[t], dyn.B[t], dyn.f[t][:, None]], axis=1)
        return np.linalg.norm(fit - ls)

    # n = 10^4 pooled tuples vs n = 20
    assert distances(500, 20) < distances(2, 10)


def test_fit_rank_deficient_without_prior():
    tr = Trajectory(np.zeros((2, 2)), np.zeros((1, 1)))
    with pytest.raises(RankDeficientData, match="rank-deficient data"):
        fit_local_dynamics([tr], None)
