"""Distribution primitives and conjugate updates for the normal x multinomial model.

Everything is 2-D in space and works in log space. Most routines are batched:
leading axes of the parameter arrays are broadcast, which lets the samplers
update every (cluster, frame) pair in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import gammaln

from .model import AuxVarSet, ClusterParams, Hyperparams, Observation

LOG_2PI = np.log(2.0 * np.pi)
LOG_PI = np.log(np.pi)


@dataclass(frozen=True)
class NiwParams:
    mu: np.ndarray
    kappa: float
    nu: float
    Lambda: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(2))
        object.__setattr__(self, "Lambda", np.asarray(self.Lambda, dtype=float).reshape(2, 2))
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.nu > 1:
            raise ValueError("nu must exceed dimension - 1")
        np.linalg.cholesky(self.Lambda)


@dataclass(frozen=True)
class DirParams:
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).ravel())
        if np.any(self.q <= 0):
            raise ValueError("Dirichlet parameters must be positive")


def prior_of(hyper: Hyperparams) -> tuple[NiwParams, DirParams]:
    return NiwParams(hyper.mu0, hyper.kappa0, hyper.nu0, hyper.Lambda0), DirParams(hyper.q0)


# ---------------------------------------------------------------------------
# 2x2 helpers (batched over leading axes)

def _det2(A):
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def _inv2(A):
    det = _det2(A)
    out = np.empty(np.broadcast_shapes(A.shape), dtype=float)
    out[..., 0, 0] = A[..., 1, 1]
    out[..., 1, 1] = A[..., 0, 0]
    out[..., 0, 1] = -A[..., 0, 1]
    out[..., 1, 0] = -A[..., 1, 0]
    return out / det[..., None, None]


def _quad2(diff, Ainv):
    # diff^T Ainv diff for 2-vectors
    return (
        Ainv[..., 0, 0] * diff[..., 0] ** 2
        + (Ainv[..., 0, 1] + Ainv[..., 1, 0]) * diff[..., 0] * diff[..., 1]
        + Ainv[..., 1, 1] * diff[..., 1] ** 2
    )


def _chol2(A):
    """Lower Cholesky factor of SPD 2x2 matrices; raises on failure."""
    A = np.asarray(A, dtype=float)
    shape = A.shape[:-2]
    out = np.zeros((int(np.prod(shape, dtype=np.int64)), 2, 2))
    if not _chol_kernel(_flat(shape, A, (2, 2)), out):
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return out.reshape(shape + (2, 2))


def _logmvgamma2(a):
    return 0.5 * LOG_PI + gammaln(a) + gammaln(a - 0.5)


def _flat(shape, arr, tail):
    """Broadcast ``arr`` to ``shape + tail`` and view it as ``(n,) + tail`` float64."""
    arr = np.asarray(arr, dtype=float)
    full = shape + tail
    if arr.shape != full:
        arr = np.broadcast_to(arr, full)
    return np.ascontiguousarray(arr).reshape((-1,) + tail)


# Compiled per-item loops over flattened batches. Random numbers are always drawn
# by the caller's numpy Generator so that streams do not depend on compilation.

@njit(cache=True, nogil=True)
def _mvn_kernel(x, mean, cov, out):
    ok = True
    for i in range(out.shape[0]):
        a, b, c = cov[i, 0, 0], cov[i, 0, 1], cov[i, 1, 1]
        b2 = cov[i, 1, 0]
        det = a * c - b * b2
        if not (det > 0.0 and a > 0.0):
            ok = False
            out[i] = np.nan
            continue
        d0 = x[i, 0] - mean[i, 0]
        d1 = x[i, 1] - mean[i, 1]
        quad = (c * d0 * d0 - (b + b2) * d0 * d1 + a * d1 * d1) / det
        out[i] = -1.8378770664093453 - 0.5 * math.log(det) - 0.5 * quad
    return ok


@njit(cache=True, nogil=True)
def _chol_kernel(A, out):
    ok = True
    for i in range(A.shape[0]):
        a = A[i, 0, 0]
        if not a > 0.0:
            ok = False
            continue
        l11 = math.sqrt(a)
        l21 = A[i, 1, 0] / l11
        rem = A[i, 1, 1] - l21 * l21
        if not rem > 0.0:
            ok = False
            continue
        out[i, 0, 0] = l11
        out[i, 0, 1] = 0.0
        out[i, 1, 0] = l21
        out[i, 1, 1] = math.sqrt(rem)
    return ok


@njit(cache=True, nogil=True)
def _posterior_kernel(kappa0, mu0, Lam0, N, sx, sxx, mu, kappa, Lam):
    for i in range(N.shape[0]):
        n = N[i]
        k = kappa0 + n
        kappa[i] = k
        mu[i, 0] = (kappa0 * mu0[0] + sx[i, 0]) / k
        mu[i, 1] = (kappa0 * mu0[1] + sx[i, 1]) / k
        safe = n if n > 1.0 else 1.0
        x0 = sx[i, 0] / safe
        x1 = sx[i, 1] / safe
        e0 = x0 - mu0[0]
        e1 = x1 - mu0[1]
        shrink = kappa0 * n / k
        s00 = sxx[i, 0, 0] - n * x0 * x0
        s11 = sxx[i, 1, 1] - n * x1 * x1
        s01 = 0.5 * (sxx[i, 0, 1] + sxx[i, 1, 0]) - n * x0 * x1
        Lam[i, 0, 0] = Lam0[0, 0] + s00 + shrink * e0 * e0
        Lam[i, 1, 1] = Lam0[1, 1] + s11 + shrink * e1 * e1
        off = 0.5 * (Lam0[0, 1] + Lam0[1, 0]) + s01 + shrink * e0 * e1
        Lam[i, 0, 1] = off
        Lam[i, 1, 0] = off


@njit(cache=True, nogil=True)
def _niw_kernel(mean, cov, mu, kappa, nu, Lam, out):
    for i in range(out.shape[0]):
        a, b, b2, c = cov[i, 0, 0], cov[i, 0, 1], cov[i, 1, 0], cov[i, 1, 1]
        det = a * c - b * b2
        # inverse entries
        i00 = c / det
        i11 = a / det
        i01 = -b / det
        i10 = -b2 / det
        d0 = mean[i, 0] - mu[i, 0]
        d1 = mean[i, 1] - mu[i, 1]
        quad = i00 * d0 * d0 + (i01 + i10) * d0 * d1 + i11 * d1 * d1
        k = kappa[i]
        n = nu[i]
        normal = -1.8378770664093453 - 0.5 * math.log(det) + math.log(k) - 0.5 * k * quad
        L = Lam[i]
        tr = L[0, 0] * i00 + L[0, 1] * i10 + L[1, 0] * i01 + L[1, 1] * i11
        detL = L[0, 0] * L[1, 1] - L[0, 1] * L[1, 0]
        lmg = 0.5 * 1.1447298858494002 + math.lgamma(n / 2.0) + math.lgamma(n / 2.0 - 0.5)
        out[i] = (normal + n / 2.0 * math.log(detL) - n * 0.6931471805599453 - lmg
                  - (n + 3.0) / 2.0 * math.log(det) - 0.5 * tr)


@njit(cache=True, nogil=True)
def _inv_wishart_kernel(Lam, a11, a22, a21, out):
    ok = True
    for i in range(out.shape[0]):
        L = Lam[i]
        det = L[0, 0] * L[1, 1] - L[0, 1] * L[1, 0]
        # Cholesky factor of Lam^{-1}
        p = L[1, 1] / det
        r = -L[1, 0] / det
        s = L[0, 0] / det
        if not p > 0.0:
            ok = False
            continue
        c11 = math.sqrt(p)
        c21 = r / c11
        rem = s - c21 * c21
        if not rem > 0.0:
            ok = False
            continue
        c22 = math.sqrt(rem)
        b11 = c11 * a11[i]
        b21 = c21 * a11[i] + c22 * a21[i]
        b22 = c22 * a22[i]
        i11 = 1.0 / b11
        i22 = 1.0 / b22
        i21 = -b21 / (b11 * b22)
        out[i, 0, 0] = i11 * i11 + i21 * i21
        out[i, 0, 1] = i21 * i22
        out[i, 1, 0] = i21 * i22
        out[i, 1, 1] = i22 * i22
    return ok


@njit(cache=True, nogil=True)
def _shift_kernel(base, cov, scale, eps, out):
    """out[i, m] = base[i] + scale[i] * chol(cov[i]) @ eps[i, m]; False if a cov is not SPD."""
    ok = True
    for i in range(out.shape[0]):
        a = cov[i, 0, 0]
        if not a > 0.0:
            ok = False
            continue
        l11 = math.sqrt(a)
        l21 = cov[i, 1, 0] / l11
        rem = cov[i, 1, 1] - l21 * l21
        if not rem > 0.0:
            ok = False
            continue
        l22 = math.sqrt(rem)
        f = scale[i]
        for m in range(out.shape[1]):
            e0 = eps[i, m, 0]
            e1 = eps[i, m, 1]
            out[i, m, 0] = base[i, 0] + f * l11 * e0
            out[i, m, 1] = base[i, 1] + f * (l21 * e0 + l22 * e1)
    return ok


# ---------------------------------------------------------------------------
# densities

def mvn_logpdf(x, mean, cov):
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], mean.shape[:-1], cov.shape[:-2])
    out = np.empty(int(np.prod(shape, dtype=np.int64)))
    if not _mvn_kernel(_flat(shape, x, (2,)), _flat(shape, mean, (2,)), _flat(shape, cov, (2, 2)), out):
        raise np.linalg.LinAlgError("covariance is not positive definite")
    return out.reshape(shape) if shape else out[0]


def log_multinomial_coef(counts):
    counts = np.asarray(counts)
    return gammaln(counts.sum(axis=-1) + 1.0) - gammaln(counts + 1.0).sum(axis=-1)


def multinomial_logpmf(counts, probs, coef=None):
    """Multinomial log-pmf including the coefficient; -inf where a positive count meets p = 0."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(counts > 0, counts * np.log(probs), 0.0)
    if coef is None:
        coef = log_multinomial_coef(counts)
    return coef + terms.sum(axis=-1)


def likelihood_f(obs: Observation, theta: ClusterParams) -> float:
    """log F(x | theta) for one observation."""
    return float(
        mvn_logpdf(obs.pos, theta.mean, theta.cov)
        + multinomial_logpmf(obs.color_counts, theta.color_probs)
    )


def log_f(pos, counts, mean, cov, probs, coef=None):
    """Vectorised log F over observations for one parameter set (or broadcastable batches)."""
    return mvn_logpdf(pos, mean, cov) + multinomial_logpmf(counts, probs, coef)


def aux_density_given_theta(pos, counts, theta: ClusterParams) -> np.ndarray:
    return log_f(pos, counts, theta.mean, theta.cov, theta.color_probs)


def mvt_logpdf(x, loc, scale, dof):
    """Bivariate t with location, scale matrix and degrees of freedom."""
    x = np.asarray(x, dtype=float)
    scale = np.asarray(scale, dtype=float)
    delta = _quad2(x - loc, _inv2(scale))
    return (
        gammaln((dof + 2.0) / 2.0)
        - gammaln(dof / 2.0)
        - np.log(dof * np.pi)
        - 0.5 * np.log(_det2(scale))
        - (dof + 2.0) / 2.0 * np.log1p(delta / dof)
    )


def dirmult_logpmf(counts, q):
    """Dirichlet-multinomial log-pmf of count vectors, multinomial coefficient included."""
    counts = np.asarray(counts, dtype=float)
    q = np.asarray(q, dtype=float)
    n = counts.sum(axis=-1)
    Q = q.sum(axis=-1)
    return (
        log_multinomial_coef(counts)
        + gammaln(Q)
        - gammaln(n + Q)
        + (gammaln(counts + q) - gammaln(q)).sum(axis=-1)
    )


def predictive_logpdf(pos, counts, mu, kappa, nu, Lam, q):
    """Posterior predictive of single observations under NiW x Dir parameters (batched)."""
    kappa = np.asarray(kappa, dtype=float)
    nu = np.asarray(nu, dtype=float)
    dof = nu - 1.0
    if np.any(dof <= 0):
        raise ValueError("predictive degrees of freedom must be positive (nu > 1)")
    scale = np.asarray(Lam) * ((kappa + 1.0) / (kappa * dof))[..., None, None]
    return mvt_logpdf(pos, mu, scale, dof) + dirmult_logpmf(counts, q)


def log_marginal_new_cluster(pos, counts, hyper: Hyperparams):
    """log of the integral of F(x | theta) G0(theta) over theta, per observation."""
    if not hyper.nu0 > 1:
        raise ValueError("nu0 must exceed 1")
    return predictive_logpdf(pos, counts, hyper.mu0, hyper.kappa0, hyper.nu0, hyper.Lambda0, hyper.q0)


def log_marginal_likelihood(pos, counts, hyper: Hyperparams) -> float:
    """Joint marginal likelihood of a set of observations under G0 (closed form)."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    counts = np.asarray(counts, dtype=float).reshape(pos.shape[0], -1)
    if pos.shape[0] == 0:
        return 0.0
    coef = log_multinomial_coef(counts).sum()
    return float(log_marginal_from_stats(hyper, *suff_stats(pos, counts), coef))


def log_marginal_from_stats(hyper: Hyperparams, N, sx, sxx, sc, coef_sum):
    """Batched joint marginal likelihood from sufficient statistics.

    ``coef_sum`` is the summed log multinomial coefficient of the sets.
    """
    N = np.asarray(N, dtype=float)
    mu, kappa, nu, Lam, q = posterior_from_stats(hyper, N, sx, sxx, sc)
    spatial = (
        -N * LOG_PI
        + _logmvgamma2(nu / 2.0)
        - _logmvgamma2(hyper.nu0 / 2.0)
        + hyper.nu0 / 2.0 * np.log(_det2(hyper.Lambda0))
        - nu / 2.0 * np.log(_det2(Lam))
        + np.log(hyper.kappa0 / kappa)
    )
    Q0 = hyper.q0.sum()
    sc = np.asarray(sc, dtype=float)
    color = (
        np.asarray(coef_sum, dtype=float)
        + gammaln(Q0)
        - gammaln(Q0 + sc.sum(axis=-1))
        + (gammaln(hyper.q0 + sc) - gammaln(hyper.q0)).sum(axis=-1)
    )
    return spatial + color


# ---------------------------------------------------------------------------
# conjugate updates

def suff_stats(pos, counts):
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    counts = np.asarray(counts, dtype=float).reshape(pos.shape[0], -1)
    return (
        float(pos.shape[0]),
        pos.sum(axis=0),
        np.einsum("ni,nj->ij", pos, pos),
        counts.sum(axis=0),
    )


def posterior_from_stats(hyper: Hyperparams, N, sx, sxx, sc):
    """Batched NiW x Dir posterior from sufficient statistics.

    ``N (...)``, ``sx (..., 2)``, ``sxx (..., 2, 2)``, ``sc (..., V)``. The scale
    update includes the prior-mean term, which keeps the update exactly
    sequential and leaves G0 invariant under the auxiliary-variable kernel.
    The returned scale matrices are exactly symmetric.
    """
    N = np.asarray(N, dtype=float)
    sx = np.asarray(sx, dtype=float)
    sxx = np.asarray(sxx, dtype=float)
    shape = np.broadcast_shapes(N.shape, sx.shape[:-1], sxx.shape[:-2])
    n = int(np.prod(shape, dtype=np.int64))
    mu = np.empty((n, 2))
    kappa = np.empty(n)
    Lam = np.empty((n, 2, 2))
    _posterior_kernel(float(hyper.kappa0), np.asarray(hyper.mu0, dtype=float),
                      np.asarray(hyper.Lambda0, dtype=float), _flat(shape, N, ()), _flat(shape, sx, (2,)),
                      _flat(shape, sxx, (2, 2)), mu, kappa, Lam)
    kappa = kappa.reshape(shape)
    nu = hyper.nu0 + np.broadcast_to(N, shape)
    q = hyper.q0 + np.asarray(sc, dtype=float)
    if not shape:
        return mu[0], kappa[()], nu[()], Lam[0], q
    return mu.reshape(shape + (2,)), kappa, nu, Lam.reshape(shape + (2, 2)), q


def posterior_update(prior: tuple[NiwParams, DirParams], pos, counts) -> tuple[NiwParams, DirParams]:
    """Conjugate update of a NiW x Dir prior with observations (possibly none)."""
    niw, dirp = prior
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    if pos.shape[0] == 0:
        return niw, dirp
    hyper = Hyperparams(mu0=niw.mu, kappa0=niw.kappa, nu0=niw.nu, Lambda0=niw.Lambda, q0=dirp.q)
    mu, kappa, nu, Lam, q = posterior_from_stats(hyper, *suff_stats(pos, counts))
    return NiwParams(mu, float(kappa), float(nu), Lam), DirParams(q)


def sample_inv_wishart(nu, Lam, rng):
    """Inverse-Wishart(nu, Lam) draws in 2-D via the Bartlett decomposition (batched).

    Sigma^{-1} ~ Wishart(nu, Lam^{-1}) is written as B B^T with B = chol(Lam^{-1}) A
    and A lower triangular with chi and normal entries; Sigma = B^{-T} B^{-1}.
    """
    nu = np.asarray(nu, dtype=float)
    Lam = np.asarray(Lam, dtype=float)
    shape = np.broadcast_shapes(nu.shape, Lam.shape[:-2])
    a11 = np.sqrt(rng.chisquare(np.broadcast_to(nu, shape)))
    a22 = np.sqrt(rng.chisquare(np.broadcast_to(nu - 1.0, shape)))
    a21 = rng.standard_normal(shape)
    n = int(np.prod(shape, dtype=np.int64))
    out = np.zeros((n, 2, 2))
    if not _inv_wishart_kernel(_flat(shape, Lam, (2, 2)), _flat(shape, a11, ()), _flat(shape, a22, ()),
                               _flat(shape, a21, ()), out):
        raise np.linalg.LinAlgError("scale matrix is not positive definite")
    return out.reshape(shape + (2, 2))


def sample_dirichlet(q, rng):
    q = np.asarray(q, dtype=float)
    g = rng.standard_gamma(q)
    s = g.sum(axis=-1, keepdims=True)
    bad = ~(s > 0)
    if np.any(bad):
        # all-underflow rows; only reachable with tiny concentrations
        g = np.where(bad, q, g)
        s = g.sum(axis=-1, keepdims=True)
    return g / s


def sample_niw_dir(mu, kappa, nu, Lam, q, rng):
    """Batched draws of (mean, cov, probs) from NiW(mu, kappa, nu, Lam) x Dir(q)."""
    cov = sample_inv_wishart(nu, Lam, rng)
    shape = cov.shape[:-2]
    z = rng.standard_normal(shape + (2,))
    scale = 1.0 / np.sqrt(np.asarray(kappa, dtype=float))
    out = np.empty((int(np.prod(shape, dtype=np.int64)), 1, 2))
    _shift_kernel(_flat(shape, mu, (2,)), _flat(shape, cov, (2, 2)), _flat(shape, scale, ()),
                  _flat(shape, z, (2,))[:, None, :], out)
    probs = sample_dirichlet(q, rng)
    return out.reshape(shape + (2,)), cov, probs


def sample_posterior_params(posterior: tuple[NiwParams, DirParams], rng) -> ClusterParams:
    niw, dirp = posterior
    mean, cov, probs = sample_niw_dir(niw.mu, niw.kappa, niw.nu, niw.Lambda, dirp.q, rng)
    return ClusterParams(mean, cov, probs)


def niw_dir_logpdf(mean, cov, probs, mu, kappa, nu, Lam, q):
    """log NiW(mean, cov | mu, kappa, nu, Lam) + log Dir(probs | q), batched."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    probs = np.asarray(probs, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    nu = np.asarray(nu, dtype=float)
    Lam = np.asarray(Lam, dtype=float)
    q = np.asarray(q, dtype=float)
    shape = np.broadcast_shapes(mean.shape[:-1], cov.shape[:-2], np.shape(mu)[:-1], kappa.shape, nu.shape,
                                Lam.shape[:-2])
    out = np.empty(int(np.prod(shape, dtype=np.int64)))
    _niw_kernel(_flat(shape, mean, (2,)), _flat(shape, cov, (2, 2)), _flat(shape, mu, (2,)),
                _flat(shape, kappa, ()), _flat(shape, nu, ()), _flat(shape, Lam, (2, 2)), out)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where((q - 1.0) != 0.0, (q - 1.0) * np.log(probs), 0.0)
    dirichlet = gammaln(q.sum(axis=-1)) - gammaln(q).sum(axis=-1) + logp.sum(axis=-1)
    return (out.reshape(shape) if shape else out[0]) + dirichlet


# ---------------------------------------------------------------------------
# auxiliary-variable transition kernel

def sample_aux(mean, cov, probs, M: int, trials: int, rng):
    """Draw M auxiliary variables from F(theta) for a batch of parameter sets.

    Returns ``zs (..., M, 2)`` and ``zc (..., M, V)``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    probs = np.asarray(probs, dtype=float)
    shape = np.broadcast_shapes(mean.shape[:-1], cov.shape[:-2])
    eps = rng.standard_normal(mean.shape[:-1] + (M, 2))
    n = int(np.prod(shape, dtype=np.int64))
    out = np.empty((n, M, 2))
    if not _shift_kernel(_flat(shape, mean, (2,)), _flat(shape, cov, (2, 2)), np.ones(n),
                         _flat(shape, eps, (M, 2)), out):
        raise np.linalg.LinAlgError("matrix is not positive definite")
    zs = out.reshape(shape + (M, 2))
    p = np.broadcast_to(probs[..., None, :], probs.shape[:-1] + (M, probs.shape[-1]))
    zc = rng.multinomial(trials, p)
    return zs, zc


def aux_stats(zs, zc):
    """Sufficient statistics of auxiliary sets along the M axis."""
    zs = np.asarray(zs, dtype=float)
    return (
        np.full(zs.shape[:-2], float(zs.shape[-2])),
        zs.sum(axis=-2),
        np.einsum("...mi,...mj->...ij", zs, zs),
        np.asarray(zc, dtype=float).sum(axis=-2),
    )


def sample_transitioned_params(prev: ClusterParams, hyper: Hyperparams, rng) -> tuple[AuxVarSet, ClusterParams]:
    """One step of the G0-invariant kernel: z ~ F(prev)^M, then theta ~ P(theta | z)."""
    zs, zc = sample_aux(prev.mean, prev.cov, prev.color_probs, hyper.M, hyper.aux_trials, rng)
    post = posterior_from_stats(hyper, *aux_stats(zs, zc))
    mean, cov, probs = sample_niw_dir(*post, rng)
    return AuxVarSet(zs, zc), ClusterParams(mean, cov, probs)


def transition_density_given_aux(theta: ClusterParams, aux: AuxVarSet, hyper: Hyperparams) -> float:
    """log P(theta | z): NiW x Dir density at theta under the aux-updated parameters."""
    post = posterior_from_stats(hyper, *aux_stats(aux.pos, aux.color_counts))
    return float(niw_dir_logpdf(theta.mean, theta.cov, theta.color_probs, *post))
