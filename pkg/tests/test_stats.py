import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps
from scipy.special import gammaln

from gputrack import stats as S
from gputrack.model import AuxVarSet, ClusterParams, Hyperparams, Observation


def _prior_draws(h, n, rng):
    """Independent G0 sampler built on scipy's inverse-Wishart."""
    covs = sps.invwishart(df=h.nu0, scale=h.Lambda0).rvs(size=n, random_state=rng)
    L = np.linalg.cholesky(covs)
    means = h.mu0 + np.einsum("nij,nj->ni", L, rng.standard_normal((n, 2))) / np.sqrt(h.kappa0)
    probs = rng.dirichlet(h.q0, size=n)
    return means, covs, probs


def _mvn_density(x, means, covs):
    d = x - means
    inv = np.linalg.inv(covs)
    q = np.einsum("ni,nij,nj->n", d, inv, d)
    return np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(np.linalg.det(covs)))


# ---------------------------------------------------------------- likelihood

def test_likelihood_examples():
    theta = ClusterParams([1.0, 2.0], np.eye(2), [1.0, 0.0, 0.0])
    obs = Observation(1, [1.0, 2.0], [9, 0, 0])
    assert S.likelihood_f(obs, theta) == pytest.approx(np.log(1 / (2 * np.pi)), abs=1e-12)
    obs2 = Observation(1, [2.0, 2.0], [9, 0, 0])
    assert S.likelihood_f(obs2, theta) == pytest.approx(np.log(1 / (2 * np.pi)) - 0.5, abs=1e-12)
    # zero probability on an observed bin gives -inf
    obs3 = Observation(1, [1.0, 2.0], [8, 1, 0])
    assert S.likelihood_f(obs3, theta) == -np.inf


@given(st.lists(st.integers(0, 6), min_size=2, max_size=8))
def test_uniform_multinomial_identity(counts):
    V = len(counts)
    n = sum(counts)
    coef = gammaln(n + 1) - sum(gammaln(c + 1) for c in counts)
    got = S.multinomial_logpmf(np.array(counts), np.full(V, 1.0 / V))
    assert got == pytest.approx(coef - n * np.log(V), abs=1e-10)
    assert got == pytest.approx(sps.multinomial(n, np.full(V, 1.0 / V)).logpmf(counts), abs=1e-10)


def test_likelihood_rejects_non_spd():
    with pytest.raises(np.linalg.LinAlgError):
        S.mvn_logpdf(np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(-0.9, 0.9))
def test_mvn_matches_scipy(x, y, s1, s2, r):
    cov = np.array([[s1, r * np.sqrt(s1 * s2)], [r * np.sqrt(s1 * s2), s2]])
    ref = sps.multivariate_normal([0.3, -0.2], cov).logpdf([x, y])
    assert S.mvn_logpdf(np.array([x, y]), np.array([0.3, -0.2]), cov) == pytest.approx(ref, rel=1e-9, abs=1e-9)


@settings(max_examples=30)
@given(st.floats(0.0, 4.0))
def test_mvn_monotone_along_ray(r):
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    a = S.mvn_logpdf(np.array([r, 0.0]), np.zeros(2), cov)
    b = S.mvn_logpdf(np.array([r + 0.5, 0.0]), np.zeros(2), cov)
    assert np.isfinite(a) and b < a


# ---------------------------------------------------------------- posterior update

def test_posterior_update_examples():
    h = Hyperparams()
    prior = S.prior_of(h)
    niw, dirp = S.posterior_update(prior, np.zeros((0, 2)), np.zeros((0, 10)))
    assert niw is prior[0] and dirp is prior[1]
    rng = np.random.default_rng(0)
    niw, dirp = S.posterior_update(prior, rng.normal(size=(10, 2)), rng.integers(0, 3, size=(10, 10)))
    assert niw.kappa == pytest.approx(10.05) and niw.nu == pytest.approx(15.0)

    unit = Hyperparams(kappa0=1.0, q0=np.ones(2))
    niw, dirp = S.posterior_update(S.prior_of(unit), [[2.0, 0.0]], [[1, 0]])
    np.testing.assert_allclose(niw.mu, [1.0, 0.0])
    # zero scatter; the prior-mean shrinkage term kappa0*N/(kappa0+N)(x-mu0)(x-mu0)^T remains
    np.testing.assert_allclose(niw.Lambda, np.eye(2) + np.diag([2.0, 0.0]))
    np.testing.assert_allclose(dirp.q, [2.0, 1.0])


def _random_data(rng, n, V=4):
    return rng.normal(size=(n, 2)) * 2 + 1, rng.integers(0, 4, size=(n, V))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(0, 6))
def test_posterior_update_order_independent(seed, na, nb):
    rng = np.random.default_rng(seed)
    h = Hyperparams(q0=np.full(4, 1.5), mu0=[0.5, -1.0], kappa0=0.3)
    xa, ca = _random_data(rng, na)
    xb, cb = _random_data(rng, nb)
    joint = S.posterior_update(S.prior_of(h), np.vstack([xa, xb]), np.vstack([ca, cb]))
    seq = S.posterior_update(S.posterior_update(S.prior_of(h), xa, ca), xb, cb)
    np.testing.assert_allclose(joint[0].mu, seq[0].mu, atol=1e-10)
    np.testing.assert_allclose(joint[0].Lambda, seq[0].Lambda, atol=1e-9, rtol=1e-10)
    assert joint[0].kappa == pytest.approx(seq[0].kappa)
    assert joint[0].nu == pytest.approx(seq[0].nu)
    np.testing.assert_allclose(joint[1].q, seq[1].q)


def test_batched_posterior_matches_single():
    rng = np.random.default_rng(5)
    h = Hyperparams(q0=np.full(4, 2.0))
    sets = [_random_data(rng, n) for n in (0, 1, 3, 7)]
    stats = [S.suff_stats(x, c) if len(x) else (0.0, np.zeros(2), np.zeros((2, 2)), np.zeros(4)) for x, c in sets]
    N = np.array([s[0] for s in stats])
    batch = S.posterior_from_stats(h, N, np.array([s[1] for s in stats]), np.array([s[2] for s in stats]),
                                   np.array([s[3] for s in stats]))
    for i, (x, c) in enumerate(sets):
        niw, dirp = S.posterior_update(S.prior_of(h), x, c)
        np.testing.assert_allclose(batch[0][i], niw.mu, atol=1e-12)
        np.testing.assert_allclose(batch[3][i], niw.Lambda, atol=1e-10)
        np.testing.assert_allclose(batch[4][i], dirp.q)


# ---------------------------------------------------------------- sampling

def test_sample_posterior_means():
    rng = np.random.default_rng(7)
    niw = S.NiwParams([1.0, -2.0], 3.0, 8.0, [[2.0, 0.4], [0.4, 1.0]])
    dirp = S.DirParams([1.0, 2.0, 3.0])
    n = 100_000
    mean, cov, probs = S.sample_niw_dir(np.broadcast_to(niw.mu, (n, 2)), np.full(n, niw.kappa),
                                        np.full(n, niw.nu), np.broadcast_to(niw.Lambda, (n, 2, 2)),
                                        np.broadcast_to(dirp.q, (n, 3)), rng)
    se = mean.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(mean.mean(axis=0) - niw.mu) < 3 * se)
    se_p = probs.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(probs.mean(axis=0) - dirp.q / dirp.q.sum()) < 3 * se_p)
    np.testing.assert_allclose(cov.mean(axis=0), niw.Lambda / (niw.nu - 3), rtol=0.03)
    one = S.sample_posterior_params((niw, dirp), rng)
    assert isinstance(one, ClusterParams)


def test_inverse_wishart_matches_scipy_distribution():
    rng = np.random.default_rng(8)
    Lam = np.array([[1.5, -0.3], [-0.3, 0.7]])
    draws = S.sample_inv_wishart(np.full(20_000, 6.0), Lam, rng)
    ref = sps.invwishart(df=6.0, scale=Lam).rvs(size=20_000, random_state=rng)
    for idx in [(0, 0), (0, 1), (1, 1)]:
        _, p = sps.ks_2samp(draws[:, idx[0], idx[1]], ref[:, idx[0], idx[1]])
        assert p > 1e-3


def test_concentration_limit():
    rng = np.random.default_rng(9)
    niw = S.NiwParams([0.5, 0.5], 1e9, 50.0, 47.0 * np.eye(2))
    mean, _, _ = S.sample_niw_dir(np.broadcast_to(niw.mu, (1000, 2)), np.full(1000, niw.kappa),
                                  np.full(1000, niw.nu), np.broadcast_to(niw.Lambda, (1000, 2, 2)),
                                  np.ones((1000, 2)), rng)
    assert np.abs(mean - 0.5).max() < 1e-3


# ---------------------------------------------------------------- marginal of a new cluster

def test_marginal_color_examples():
    assert np.exp(S.dirmult_logpmf([1, 0], [1.0, 1.0])) == pytest.approx(0.5, abs=1e-12)
    assert np.exp(S.dirmult_logpmf([2, 0], [1.0, 1.0])) == pytest.approx(1 / 3, abs=1e-12)
    ref = sps.dirichlet_multinomial(alpha=[2.0, 0.5, 1.0], n=5).logpmf([2, 1, 2])
    assert S.dirmult_logpmf([2, 1, 2], [2.0, 0.5, 1.0]) == pytest.approx(ref, abs=1e-12)


def test_marginal_spatial_mode():
    h = Hyperparams(q0=np.ones(2))
    total = S.log_marginal_new_cluster(np.zeros(2), np.array([1, 0]), h)
    spatial = np.exp(total) / 0.5
    assert spatial == pytest.approx(2.0 / (4 * np.pi * 5.25), rel=1e-12)
    assert spatial == pytest.approx(0.0303, abs=1e-4)
    ref = sps.multivariate_t(loc=[0, 0], shape=np.eye(2) * 1.05 / (0.05 * 4), df=4).logpdf([1.3, -0.4])
    got = S.log_marginal_new_cluster(np.array([1.3, -0.4]), np.array([1, 0]), h) - np.log(0.5)
    assert got == pytest.approx(ref, abs=1e-12)


def test_marginal_rejects_small_dof():
    with pytest.raises(ValueError):
        S.predictive_logpdf(np.zeros(2), np.array([1, 0]), np.zeros(2), 1.0, 1.0, np.eye(2), np.ones(2))


def test_marginal_monte_carlo_oracle():
    """Closed-form marginal vs 10^6 G0 draws on 5 random observations."""
    rng = np.random.default_rng(11)
    h = Hyperparams()
    means, covs, probs = _prior_draws(h, 1_000_000, rng)
    for _ in range(5):
        x = rng.normal(size=2) * 1.5
        c = rng.multinomial(9, rng.dirichlet(np.ones(10)))
        dens = _mvn_density(x, means, covs)
        color = np.exp(sps.multinomial.logpmf(c, 9, probs))
        mc = np.mean(dens * color)
        closed = np.exp(S.log_marginal_new_cluster(x, c, h))
        assert abs(closed - mc) / closed < 0.02


def test_joint_marginal_chain_rule():
    rng = np.random.default_rng(12)
    h = Hyperparams(q0=np.full(3, 1.2))
    x, c = rng.normal(size=(4, 2)), rng.integers(0, 3, size=(4, 3))
    chain = 0.0
    post = S.prior_of(h)
    for i in range(4):
        niw, dirp = post
        chain += float(S.predictive_logpdf(x[i], c[i], niw.mu, niw.kappa, niw.nu, niw.Lambda, dirp.q))
        post = S.posterior_update(post, x[i:i + 1], c[i:i + 1])
    assert S.log_marginal_likelihood(x, c, h) == pytest.approx(chain, abs=1e-9)
    assert S.log_marginal_likelihood(x[:1], c[:1], h) == pytest.approx(
        float(S.log_marginal_new_cluster(x[0], c[0], h)), abs=1e-10)


# ---------------------------------------------------------------- transition kernel

def test_transition_updates():
    h = Hyperparams()
    rng = np.random.default_rng(13)
    theta = ClusterParams([1.0, 1.0], np.eye(2), np.full(10, 0.1))
    aux, new = S.sample_transitioned_params(theta, h, rng)
    assert aux.pos.shape == (10, 2) and np.all(aux.color_counts.sum(axis=1) == 9)
    mu, kappa, nu, Lam, q = S.posterior_from_stats(h, *S.aux_stats(aux.pos, aux.color_counts))
    assert kappa == pytest.approx(10.05) and nu == pytest.approx(15.0)
    same = np.tile([[0.0, 0.0]], (10, 1))
    _, _, _, Lam0, _ = S.posterior_from_stats(h, *S.aux_stats(same, np.zeros((10, 10))))
    np.testing.assert_allclose(Lam0, h.Lambda0)


def test_kernel_invariance_moments():
    rng = np.random.default_rng(14)
    h = Hyperparams()
    n = 10_000
    mean, cov, probs = _prior_draws(h, n, rng)
    for _ in range(50):
        zs, zc = S.sample_aux(mean, cov, probs, h.M, h.aux_trials, rng)
        mean, cov, probs = S.sample_niw_dir(*S.posterior_from_stats(h, *S.aux_stats(zs, zc)), rng)
    e_cov = h.Lambda0 / (h.nu0 - 3)
    np.testing.assert_allclose(np.diag(cov.mean(axis=0)), np.diag(e_cov), rtol=0.05)
    assert abs(cov.mean(axis=0)[0, 1]) < 0.05 * e_cov[0, 0]
    np.testing.assert_allclose(mean.mean(axis=0), h.mu0, atol=0.05 * np.sqrt(e_cov[0, 0] / h.kappa0))
    np.testing.assert_allclose((mean ** 2).mean(axis=0), np.diag(e_cov) / h.kappa0, rtol=0.05)
    np.testing.assert_allclose(probs.mean(axis=0), h.q0 / h.q0.sum(), rtol=0.05)


def test_niw_logpdf_matches_scipy():
    m, c, p = np.array([0.2, -0.1]), np.array([[1.2, 0.3], [0.3, 0.8]]), np.array([0.2, 0.5, 0.3])
    mu, kappa, nu, Lam, q = np.array([0.0, 0.5]), 2.5, 6.0, np.array([[2.0, 0.1], [0.1, 1.0]]), np.array([1.0, 2.0, 4.0])
    ref = (sps.multivariate_normal(mu, c / kappa).logpdf(m) + sps.invwishart(nu, Lam).logpdf(c)
           + sps.dirichlet(q).logpdf(p))
    assert S.niw_dir_logpdf(m, c, p, mu, kappa, nu, Lam, q) == pytest.approx(ref, abs=1e-10)


def test_transition_density_mode_dominance():
    rng = np.random.default_rng(15)
    h = Hyperparams(q0=np.full(3, 2.0))
    aux = AuxVarSet(rng.normal(size=(10, 2)), rng.multinomial(9, [0.2, 0.3, 0.5], size=10))
    mu, kappa, nu, Lam, q = S.posterior_from_stats(h, *S.aux_stats(aux.pos, aux.color_counts))
    # joint mode of NiW: Sigma = Lam/(nu+2+2), mu = mu; Dirichlet mode (q-1)/(sum q - V)
    mode = ClusterParams(mu, Lam / (nu + 4), (q - 1) / (q.sum() - 3))
    best = S.transition_density_given_aux(mode, aux, h)
    for _ in range(100):
        A = rng.normal(scale=0.05, size=(2, 2))
        cov = mode.cov + 0.5 * (A + A.T) * 0.1
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            continue
        probs = np.abs(mode.color_probs + rng.normal(scale=0.02, size=3))
        pert = ClusterParams(mode.mean + rng.normal(scale=0.05, size=2), cov, probs / probs.sum())
        assert S.transition_density_given_aux(pert, aux, h) <= best


def test_aux_density_definitional():
    theta = ClusterParams([0.3, 0.4], np.eye(2) * 0.5, [0.0, 1.0])
    pos = np.array([[0.3, 0.4]])
    cnt = np.array([[0, 9]])
    got = S.aux_density_given_theta(pos, cnt, theta)[0]
    assert got == pytest.approx(S.likelihood_f(Observation(1, pos[0], cnt[0]), theta), abs=1e-14)


def test_scaling_lambda_lowers_density_when_scale_exceeds_cov():
    # d/dc log IW(Sigma | nu, c Lam) = nu/c - tr(Lam Sigma^{-1})/2 < 0 when tr(Lam Sigma^-1) > 2 nu / c
    cov = np.eye(2) * 0.1
    args = (np.zeros(2), cov, np.array([0.5, 0.5]), np.zeros(2), 1.0, 5.0)
    lo = S.niw_dir_logpdf(*args, np.eye(2), np.ones(2))
    hi = S.niw_dir_logpdf(*args, 1.5 * np.eye(2), np.ones(2))
    assert hi < lo
