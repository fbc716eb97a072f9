"""Compiled per-cluster routines for parameter timelines and auxiliary sets.

All randomness is drawn from the numpy ``Generator`` passed in, so a run is
fully determined by the generator's seed. Hyperparameters are passed as the
tuple ``(kappa0, nu0, mu0, Lam0, q0)``. Routines that can meet a covariance
that is not positive definite return ``False`` instead of raising; callers
turn that into ``LinAlgError``.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_PI = math.log(math.pi)
LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, nogil=True)
def log_coef(cnt):
    n = 0.0
    out = 0.0
    for v in range(cnt.shape[0]):
        n += cnt[v]
        out -= math.lgamma(cnt[v] + 1.0)
    return out + math.lgamma(n + 1.0)


@njit(cache=True, nogil=True)
def log_f(x, cnt, coef, mean, cov, probs):
    """log F(x | theta): bivariate normal times multinomial (coefficient passed in)."""
    a, b, b2, c = cov[0, 0], cov[0, 1], cov[1, 0], cov[1, 1]
    det = a * c - b * b2
    d0 = x[0] - mean[0]
    d1 = x[1] - mean[1]
    out = -LOG_2PI - 0.5 * math.log(det) - 0.5 * (c * d0 * d0 - (b + b2) * d0 * d1 + a * d1 * d1) / det + coef
    for v in range(cnt.shape[0]):
        if cnt[v] > 0:
            if probs[v] <= 0.0:
                return -np.inf
            out += cnt[v] * math.log(probs[v])
    return out


@njit(cache=True, nogil=True)
def add_item(x, cnt, sign, st_sx, st_sxx, st_sc):
    """Add (sign=1) or remove (sign=-1) one item from sufficient statistics, except the count."""
    st_sx[0] += sign * x[0]
    st_sx[1] += sign * x[1]
    st_sxx[0, 0] += sign * x[0] * x[0]
    st_sxx[0, 1] += sign * x[0] * x[1]
    st_sxx[1, 0] += sign * x[0] * x[1]
    st_sxx[1, 1] += sign * x[1] * x[1]
    for v in range(cnt.shape[0]):
        st_sc[v] += sign * cnt[v]


@njit(cache=True, nogil=True)
def posterior(hyper, N, sx, sxx, sc, mu, Lam, q):
    """NiW x Dir posterior from statistics; fills ``mu``, ``Lam``, ``q`` and returns (kappa, nu)."""
    kappa0, nu0, mu0, Lam0, q0 = hyper
    k = kappa0 + N
    mu[0] = (kappa0 * mu0[0] + sx[0]) / k
    mu[1] = (kappa0 * mu0[1] + sx[1]) / k
    safe = N if N > 1.0 else 1.0
    x0 = sx[0] / safe
    x1 = sx[1] / safe
    e0 = x0 - mu0[0]
    e1 = x1 - mu0[1]
    shrink = kappa0 * N / k
    Lam[0, 0] = Lam0[0, 0] + sxx[0, 0] - N * x0 * x0 + shrink * e0 * e0
    Lam[1, 1] = Lam0[1, 1] + sxx[1, 1] - N * x1 * x1 + shrink * e1 * e1
    off = 0.5 * (Lam0[0, 1] + Lam0[1, 0]) + 0.5 * (sxx[0, 1] + sxx[1, 0]) - N * x0 * x1 + shrink * e0 * e1
    Lam[0, 1] = off
    Lam[1, 0] = off
    for v in range(q0.shape[0]):
        q[v] = q0[v] + sc[v]
    return k, nu0 + N


@njit(cache=True, nogil=True)
def log_ml(hyper, N, sx, sxx, sc):
    """log marginal likelihood of a set under G0 from its statistics, without multinomial coefficients."""
    if N == 0.0:
        return 0.0
    kappa0, nu0, mu0, Lam0, q0 = hyper
    mu = np.empty(2)
    Lam = np.empty((2, 2))
    q = np.empty(q0.shape[0])
    k, nu = posterior(hyper, N, sx, sxx, sc, mu, Lam, q)
    det_n = Lam[0, 0] * Lam[1, 1] - Lam[0, 1] * Lam[1, 0]
    det_0 = Lam0[0, 0] * Lam0[1, 1] - Lam0[0, 1] * Lam0[1, 0]
    out = (-N * LOG_PI + math.lgamma(nu / 2.0) + math.lgamma(nu / 2.0 - 0.5)
           - math.lgamma(nu0 / 2.0) - math.lgamma(nu0 / 2.0 - 0.5)
           + nu0 / 2.0 * math.log(det_0) - nu / 2.0 * math.log(det_n) + math.log(kappa0 / k))
    Q0 = 0.0
    n = 0.0
    for v in range(q0.shape[0]):
        Q0 += q0[v]
        n += sc[v]
        out += math.lgamma(q[v]) - math.lgamma(q0[v])
    return out + math.lgamma(Q0) - math.lgamma(Q0 + n)


@njit(cache=True, nogil=True)
def niw_dir_logpdf(mean, cov, probs, mu, kappa, nu, Lam, q):
    a, b, b2, c = cov[0, 0], cov[0, 1], cov[1, 0], cov[1, 1]
    det = a * c - b * b2
    i00 = c / det
    i11 = a / det
    i01 = -b / det
    i10 = -b2 / det
    d0 = mean[0] - mu[0]
    d1 = mean[1] - mu[1]
    quad = i00 * d0 * d0 + (i01 + i10) * d0 * d1 + i11 * d1 * d1
    normal = -LOG_2PI - 0.5 * math.log(det) + math.log(kappa) - 0.5 * kappa * quad
    tr = Lam[0, 0] * i00 + Lam[0, 1] * i10 + Lam[1, 0] * i01 + Lam[1, 1] * i11
    detL = Lam[0, 0] * Lam[1, 1] - Lam[0, 1] * Lam[1, 0]
    lmg = 0.5 * LOG_PI + math.lgamma(nu / 2.0) + math.lgamma(nu / 2.0 - 0.5)
    out = (normal + nu / 2.0 * math.log(detL) - nu * math.log(2.0) - lmg
           - (nu + 3.0) / 2.0 * math.log(det) - 0.5 * tr)
    Q = 0.0
    for v in range(q.shape[0]):
        Q += q[v]
        out -= math.lgamma(q[v])
        if q[v] != 1.0:
            out += (q[v] - 1.0) * math.log(probs[v])
    return out + math.lgamma(Q)


@njit(cache=True, nogil=True)
def draw_niw_dir(g, mu, kappa, nu, Lam, q, mean, cov, probs):
    """(mean, cov, probs) ~ NiW(mu, kappa, nu, Lam) x Dir(q); inverse Wishart by Bartlett."""
    a11 = math.sqrt(g.chisquare(nu))
    a22 = math.sqrt(g.chisquare(nu - 1.0))
    a21 = g.standard_normal()
    det = Lam[0, 0] * Lam[1, 1] - Lam[0, 1] * Lam[1, 0]
    p = Lam[1, 1] / det
    r = -Lam[1, 0] / det
    s = Lam[0, 0] / det
    if not p > 0.0:
        return False
    c11 = math.sqrt(p)
    c21 = r / c11
    rem = s - c21 * c21
    if not rem > 0.0:
        return False
    c22 = math.sqrt(rem)
    b11 = c11 * a11
    b21 = c21 * a11 + c22 * a21
    b22 = c22 * a22
    i11 = 1.0 / b11
    i22 = 1.0 / b22
    i21 = -b21 / (b11 * b22)
    cov[0, 0] = i11 * i11 + i21 * i21
    cov[0, 1] = i21 * i22
    cov[1, 0] = i21 * i22
    cov[1, 1] = i22 * i22
    l11 = math.sqrt(cov[0, 0])
    l21 = cov[1, 0] / l11
    l22 = math.sqrt(max(cov[1, 1] - l21 * l21, 0.0))
    f = 1.0 / math.sqrt(kappa)
    e0 = g.standard_normal()
    e1 = g.standard_normal()
    mean[0] = mu[0] + f * l11 * e0
    mean[1] = mu[1] + f * (l21 * e0 + l22 * e1)
    total = 0.0
    for v in range(q.shape[0]):
        probs[v] = g.standard_gamma(q[v])
        total += probs[v]
    if not total > 0.0:
        # all draws underflowed; only reachable with tiny concentrations
        total = 0.0
        for v in range(q.shape[0]):
            probs[v] = q[v]
            total += q[v]
    for v in range(q.shape[0]):
        probs[v] /= total
    return True


@njit(cache=True, nogil=True)
def draw_posterior(g, hyper, N, sx, sxx, sc, mean, cov, probs):
    V = hyper[4].shape[0]
    mu = np.empty(2)
    Lam = np.empty((2, 2))
    q = np.empty(V)
    kappa, nu = posterior(hyper, N, sx, sxx, sc, mu, Lam, q)
    return draw_niw_dir(g, mu, kappa, nu, Lam, q, mean, cov, probs)


@njit(cache=True, nogil=True)
def draw_item(g, mean, cov, probs, trials, zs, zc):
    """One item from F(theta): a normal position and multinomial counts (by conditional binomials)."""
    a = cov[0, 0]
    if not a > 0.0:
        return False
    l11 = math.sqrt(a)
    l21 = cov[1, 0] / l11
    rem = cov[1, 1] - l21 * l21
    if not rem > 0.0:
        return False
    l22 = math.sqrt(rem)
    e0 = g.standard_normal()
    e1 = g.standard_normal()
    zs[0] = mean[0] + l11 * e0
    zs[1] = mean[1] + l21 * e0 + l22 * e1
    left = trials
    mass = 1.0
    V = probs.shape[0]
    for v in range(V - 1):
        if left == 0:
            zc[v] = 0
            continue
        p = probs[v] / mass if mass > 0.0 else 0.0
        p = min(max(p, 0.0), 1.0)
        x = g.binomial(left, p)
        zc[v] = x
        left -= x
        mass -= probs[v]
    zc[V - 1] = left
    return True


@njit(cache=True, nogil=True)
def aux_stats(zs, zc, sx, sxx, sc):
    """Statistics of one auxiliary set (M items); returns M."""
    sx[:] = 0.0
    sxx[:] = 0.0
    sc[:] = 0.0
    for m in range(zs.shape[0]):
        add_item(zs[m], zc[m], 1.0, sx, sxx, sc)
    return float(zs.shape[0])


@njit(cache=True, nogil=True)
def chain_logp(hyper, zs, zc, mean, cov, probs):
    """log density of one cluster's (z, theta) timeline under the auxiliary-variable chain.

    ``zs (T, M, 2)``, ``zc (T, M, V)``: z_1 ~ its G0 marginal, theta_t | z_t, and
    z_t ~ F(theta_{t-1}) for t > 1.
    """
    T, M = zs.shape[0], zs.shape[1]
    V = zc.shape[2]
    sx = np.empty(2)
    sxx = np.empty((2, 2))
    sc = np.empty(V)
    mu = np.empty(2)
    Lam = np.empty((2, 2))
    q = np.empty(V)
    N = aux_stats(zs[0], zc[0], sx, sxx, sc)
    lp = log_ml(hyper, N, sx, sxx, sc)
    for m in range(M):
        lp += log_coef(zc[0, m])
    for t in range(T):
        N = aux_stats(zs[t], zc[t], sx, sxx, sc)
        kappa, nu = posterior(hyper, N, sx, sxx, sc, mu, Lam, q)
        lp += niw_dir_logpdf(mean[t], cov[t], probs[t], mu, kappa, nu, Lam, q)
        if t > 0:
            for m in range(M):
                lp += log_f(zs[t, m], zc[t, m], log_coef(zc[t, m]), mean[t - 1], cov[t - 1], probs[t - 1])
    return lp


@njit(cache=True, nogil=True)
def propagate(g, hyper, M, trials, t0, zs, zc, mean, cov, probs):
    """Fill frames other than ``t0`` of one cluster by running the kernel forward and backward."""
    T = mean.shape[0]
    V = probs.shape[1]
    sx = np.empty(2)
    sxx = np.empty((2, 2))
    sc = np.empty(V)
    for t in range(t0 + 1, T):
        for m in range(M):
            if not draw_item(g, mean[t - 1], cov[t - 1], probs[t - 1], trials, zs[t, m], zc[t, m]):
                return False
        N = aux_stats(zs[t], zc[t], sx, sxx, sc)
        if not draw_posterior(g, hyper, N, sx, sxx, sc, mean[t], cov[t], probs[t]):
            return False
    for t in range(t0, -1, -1):
        # z_t given theta_t is F(theta_t) by reversibility; theta_{t-1} | z_t is the conjugate posterior
        for m in range(M):
            if not draw_item(g, mean[t], cov[t], probs[t], trials, zs[t, m], zc[t, m]):
                return False
        if t > 0:
            N = aux_stats(zs[t], zc[t], sx, sxx, sc)
            if not draw_posterior(g, hyper, N, sx, sxx, sc, mean[t - 1], cov[t - 1], probs[t - 1]):
                return False
    return True


@njit(cache=True, nogil=True)
def open_cluster(g, hyper, M, trials, t0, x, cnt, zs, zc, mean, cov, probs):
    """Draw a new cluster's parameters at ``t0`` from its single member, then its whole timeline."""
    V = cnt.shape[0]
    sx = np.zeros(2)
    sxx = np.zeros((2, 2))
    sc = np.zeros(V)
    add_item(x, cnt, 1.0, sx, sxx, sc)
    if not draw_posterior(g, hyper, 1.0, sx, sxx, sc, mean[t0], cov[t0], probs[t0]):
        return False
    return propagate(g, hyper, M, trials, t0, zs, zc, mean, cov, probs)


@njit(cache=True, nogil=True)
def member_stats(cap, T, c, f, pos, counts):
    V = counts.shape[1]
    N = np.zeros((cap, T))
    sx = np.zeros((cap, T, 2))
    sxx = np.zeros((cap, T, 2, 2))
    sc = np.zeros((cap, T, V))
    for i in range(c.shape[0]):
        k, t = c[i], f[i]
        N[k, t] += 1.0
        add_item(pos[i], counts[i], 1.0, sx[k, t], sxx[k, t], sc[k, t])
    return N, sx, sxx, sc


@njit(cache=True, nogil=True)
def sample_params(g, hyper, ks, c, f, pos, counts, zs, zc, mean, cov, probs):
    """Exact Gibbs draw of every theta_{k,t} given members and the adjacent auxiliary sets."""
    T = mean.shape[1]
    V = probs.shape[2]
    N, sx, sxx, sc = member_stats(mean.shape[0], T, c, f, pos, counts)
    zsx = np.empty(2)
    zsxx = np.empty((2, 2))
    zsc = np.empty(V)
    for k in ks:
        for t in range(T):
            n = N[k, t] + aux_stats(zs[k, t], zc[k, t], zsx, zsxx, zsc)
            sx[k, t] += zsx
            sxx[k, t] += zsxx
            sc[k, t] += zsc
            if t + 1 < T:
                n += aux_stats(zs[k, t + 1], zc[k, t + 1], zsx, zsxx, zsc)
                sx[k, t] += zsx
                sxx[k, t] += zsxx
                sc[k, t] += zsc
            if not draw_posterior(g, hyper, n, sx[k, t], sxx[k, t], sc[k, t], mean[k, t], cov[k, t], probs[k, t]):
                return False
    return True


@njit(cache=True, nogil=True)
def sample_aux(g, hyper, trials, ks, zs, zc, mean, cov, probs):
    """Auxiliary updates: exact draw at the first frame, single-item MH at later frames.

    Returns (proposals, accepts) of the MH steps, or (-1, -1) on a covariance
    that is not positive definite.
    """
    T, M = zs.shape[1], zs.shape[2]
    V = zc.shape[3]
    sx = np.empty(2)
    sxx = np.empty((2, 2))
    sc = np.empty(V)
    mu = np.empty(2)
    Lam = np.empty((2, 2))
    q = np.empty(V)
    ps = np.empty(2)
    pc = np.empty(V, dtype=zc.dtype)
    proposed = 0
    accepted = 0
    for k in ks:
        # frame 1: the conditional is F(theta_1) itself
        for m in range(M):
            if not draw_item(g, mean[k, 0], cov[k, 0], probs[k, 0], trials, zs[k, 0, m], zc[k, 0, m]):
                return -1, -1
        for t in range(1, T):
            if M == 0:
                break
            N = aux_stats(zs[k, t], zc[k, t], sx, sxx, sc)
            kappa, nu = posterior(hyper, N, sx, sxx, sc, mu, Lam, q)
            lp_cur = niw_dir_logpdf(mean[k, t - 1], cov[k, t - 1], probs[k, t - 1], mu, kappa, nu, Lam, q)
            for m in range(M):
                # the proposal F(theta_t) cancels the target's F terms
                if not draw_item(g, mean[k, t], cov[k, t], probs[k, t], trials, ps, pc):
                    return -1, -1
                add_item(zs[k, t, m], zc[k, t, m], -1.0, sx, sxx, sc)
                add_item(ps, pc, 1.0, sx, sxx, sc)
                kappa, nu = posterior(hyper, N, sx, sxx, sc, mu, Lam, q)
                lp_new = niw_dir_logpdf(mean[k, t - 1], cov[k, t - 1], probs[k, t - 1], mu, kappa, nu, Lam, q)
                proposed += 1
                if math.log(g.random()) < lp_new - lp_cur:
                    zs[k, t, m, 0] = ps[0]
                    zs[k, t, m, 1] = ps[1]
                    zc[k, t, m] = pc
                    lp_cur = lp_new
                    accepted += 1
                else:
                    add_item(ps, pc, -1.0, sx, sxx, sc)
                    add_item(zs[k, t, m], zc[k, t, m], 1.0, sx, sxx, sc)
    return proposed, accepted


@njit(cache=True, nogil=True)
def frame_loglik(t, lo, hi, ks, pos, counts, coef, mean, cov, probs, out):
    """out[k, j] = log F(x_{lo+j} | theta_{k,t}) for k in ``ks``."""
    for k in ks:
        for j in range(hi - lo):
            i = lo + j
            out[k, j] = log_f(pos[i], counts[i], coef[i], mean[k, t], cov[k, t], probs[k, t])


@njit(cache=True, nogil=True)
def total_loglik(c, f, pos, counts, coef, mean, cov, probs):
    out = 0.0
    for i in range(c.shape[0]):
        out += log_f(pos[i], counts[i], coef[i], mean[c[i], f[i]], cov[c[i], f[i]], probs[c[i], f[i]])
    return out
