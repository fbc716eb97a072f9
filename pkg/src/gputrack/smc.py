"""Particle filter in the size formulation with per-frame Gibbs-refined proposals.

Each particle carries, for every cluster it has ever opened, the size after the
last deletion step and the parameters at the previous frame. One frame of one
particle is processed by a compiled kernel:

1. Every alive older cluster draws its ``M`` auxiliary items from its
   previous-frame parameters, once per frame.
2. The first sweep assigns the frame's observations in order. A cluster is
   scored by its urn weight times the predictive density of the observation
   given the cluster's auxiliary items and the members assigned so far; "new"
   is scored by the concentration times the marginal likelihood under the base
   measure. The incremental log-weight is the urn-and-collapsed-likelihood
   score of these assignments minus the log-probability of proposing them.
3. Parameters are refreshed after every sweep: clusters opened in this frame
   draw from the posterior given their members (q1), occupied older clusters
   from the posterior given members and auxiliary items (q2), and alive
   unoccupied clusters from the posterior given the auxiliary items alone.
   Later sweeps remove and reassign each observation with the refreshed
   parameters. These moves leave the frame's target invariant, so they do not
   change the weight.
4. Sizes are thinned by binomial deletion for the next frame.

Randomness inside the kernel comes from numba's generator, reseeded for every
(frame, particle) pair from ``SeedSequence(seed, spawn_key=(1, t, l))`` so that
results do not depend on scheduling; resampling draws come from a separate
stream per frame.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import __version__
from . import stats as S
from . import timeline as TL
from .model import Hyperparams, LatentState, ObservationSet

log = logging.getLogger(__name__)

RESAMPLE_MODES = ("every-step", "ess-threshold")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SmcConfig:
    particles: int = 100
    gibbs_sweeps: int = 3
    resample_mode: str = "every-step"
    ess_fraction: float = 0.5
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    workers: int = 1

    def __post_init__(self):
        if self.particles < 1:
            raise ValueError("particles must be >= 1")
        if self.gibbs_sweeps < 1:
            raise ValueError("gibbs_sweeps must be >= 1")
        if self.resample_mode not in RESAMPLE_MODES:
            raise ValueError(f"resample_mode must be one of {RESAMPLE_MODES}")
        if not 0 < self.ess_fraction <= 1:
            raise ValueError("ess_fraction must lie in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "particles": self.particles,
            "gibbs_sweeps": self.gibbs_sweeps,
            "resample_mode": self.resample_mode,
            "ess_fraction": self.ess_fraction,
            "seed": self.seed,
            "hyper": self.hyper.to_dict(),
        }


@dataclass
class FrameDiagnostics:
    frame: int  # 1-based
    ess: float
    K_best: int  # clusters alive at this frame in the highest-weight particle
    weight_sum: float  # normalized weights, should be 1
    resampled: bool
    seconds: float


# ---------------------------------------------------------------------------
# compiled scalar helpers


_logf = TL.log_f


@njit(cache=True, nogil=True)
def _draw_from_stats(kappa0, nu0, mu0, Lam0, q0, N, sx, sxx, sc, mean, cov, probs):
    """Draw (mean, cov, probs) from the NiW x Dir posterior given sufficient statistics."""
    k = kappa0 + N
    nu = nu0 + N
    mu0_ = (kappa0 * mu0[0] + sx[0]) / k
    mu1_ = (kappa0 * mu0[1] + sx[1]) / k
    safe = N if N > 1.0 else 1.0
    x0 = sx[0] / safe
    x1 = sx[1] / safe
    e0 = x0 - mu0[0]
    e1 = x1 - mu0[1]
    shrink = kappa0 * N / k
    L00 = Lam0[0, 0] + sxx[0, 0] - N * x0 * x0 + shrink * e0 * e0
    L11 = Lam0[1, 1] + sxx[1, 1] - N * x1 * x1 + shrink * e1 * e1
    L01 = 0.5 * (Lam0[0, 1] + Lam0[1, 0]) + 0.5 * (sxx[0, 1] + sxx[1, 0]) - N * x0 * x1 + shrink * e0 * e1
    # inverse-Wishart by Bartlett: chol(Lam^{-1}) times the triangular chi/normal factor
    det = L00 * L11 - L01 * L01
    p = L11 / det
    r = -L01 / det
    s = L00 / det
    c11 = math.sqrt(p)
    c21 = r / c11
    c22 = math.sqrt(s - c21 * c21)
    a11 = math.sqrt(np.random.chisquare(nu))
    a22 = math.sqrt(np.random.chisquare(nu - 1.0))
    a21 = np.random.standard_normal()
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
    l22 = math.sqrt(cov[1, 1] - l21 * l21)
    f = 1.0 / math.sqrt(k)
    z0 = np.random.standard_normal()
    z1 = np.random.standard_normal()
    mean[0] = mu0_ + f * l11 * z0
    mean[1] = mu1_ + f * (l21 * z0 + l22 * z1)
    total = 0.0
    for v in range(q0.shape[0]):
        g = np.random.gamma(q0[v] + sc[v], 1.0)
        probs[v] = g
        total += g
    if total > 0.0:
        for v in range(q0.shape[0]):
            probs[v] /= total
    else:  # all draws underflowed; only reachable with tiny concentrations
        total = 0.0
        for v in range(q0.shape[0]):
            total += q0[v] + sc[v]
        for v in range(q0.shape[0]):
            probs[v] = (q0[v] + sc[v]) / total


@njit(cache=True, nogil=True)
def _add_aux(mean, cov, probs, M, trials, sx, sxx, sc):
    """Draw M auxiliary items from F(mean, cov, probs) and add their statistics."""
    l11 = math.sqrt(cov[0, 0])
    l21 = cov[1, 0] / l11
    l22 = math.sqrt(cov[1, 1] - l21 * l21)
    for _ in range(M):
        e0 = np.random.standard_normal()
        e1 = np.random.standard_normal()
        z0 = mean[0] + l11 * e0
        z1 = mean[1] + l21 * e0 + l22 * e1
        sx[0] += z0
        sx[1] += z1
        sxx[0, 0] += z0 * z0
        sxx[0, 1] += z0 * z1
        sxx[1, 0] += z0 * z1
        sxx[1, 1] += z1 * z1
        zc = np.random.multinomial(trials, probs)
        for v in range(sc.shape[0]):
            sc[v] += zc[v]


@njit(cache=True, nogil=True)
def _seed(seed):
    np.random.seed(seed)


@njit(cache=True, nogil=True)
def _q_draw(seed, kappa0, nu0, mu0, Lam0, q0, pos, cnt, prev_mean, prev_cov, prev_probs, M, trials,
            mean, cov, probs):
    """Standalone q1 (``M == 0``) or q2 draw, seeded, for the public wrappers."""
    np.random.seed(seed)
    V = q0.shape[0]
    sx = np.zeros(2)
    sxx = np.zeros((2, 2))
    sc = np.zeros(V)
    N = float(pos.shape[0])
    for i in range(pos.shape[0]):
        sx[0] += pos[i, 0]
        sx[1] += pos[i, 1]
        sxx[0, 0] += pos[i, 0] * pos[i, 0]
        sxx[0, 1] += pos[i, 0] * pos[i, 1]
        sxx[1, 0] += pos[i, 0] * pos[i, 1]
        sxx[1, 1] += pos[i, 1] * pos[i, 1]
        for v in range(V):
            sc[v] += cnt[i, v]
    if M > 0:
        _add_aux(prev_mean, prev_cov, prev_probs, M, trials, sx, sxx, sc)
        N += M
    _draw_from_stats(kappa0, nu0, mu0, Lam0, q0, N, sx, sxx, sc, mean, cov, probs)


@njit(cache=True, nogil=True)
def _assignment_logits(x, cnt, coef, log_marg, sizes, K, mean, cov, probs, log_alpha, out):
    """Unnormalized log-probabilities over clusters ``0..K-1`` and "new" (slot K)."""
    for k in range(K):
        if sizes[k] > 0:
            out[k] = math.log(sizes[k]) + _logf(x, cnt, coef, mean[k], cov[k], probs[k])
        else:
            out[k] = -np.inf
    out[K] = log_alpha + log_marg


@njit(cache=True, nogil=True)
def _add_obs(x, cnt, sign, N, sx, sxx, sc, k):
    N[k] += sign
    sx[k, 0] += sign * x[0]
    sx[k, 1] += sign * x[1]
    sxx[k, 0, 0] += sign * x[0] * x[0]
    sxx[k, 0, 1] += sign * x[0] * x[1]
    sxx[k, 1, 0] += sign * x[0] * x[1]
    sxx[k, 1, 1] += sign * x[1] * x[1]
    for v in range(cnt.shape[0]):
        sc[k, v] += sign * cnt[v]


@njit(cache=True, nogil=True)
def _sample_index(logits, n):
    mx = -np.inf
    for k in range(n):
        if logits[k] > mx:
            mx = logits[k]
    total = 0.0
    for k in range(n):
        total += math.exp(logits[k] - mx)
    u = np.random.random() * total
    acc = 0.0
    choice = n - 1
    for k in range(n):
        w = math.exp(logits[k] - mx)
        if w > 0.0:
            acc += w
            if u < acc:
                choice = k
                break
    return choice, logits[choice] - mx - math.log(total)


@njit(cache=True, nogil=True)
def _particle_frame(seed, pos, cnt, coef, log_marg, K_prev, sizes_in, prev_mean, prev_cov, prev_probs,
                    alpha, rho, M, trials, kappa0, nu0, mu0, Lam0, q0, n_sweeps, thin,
                    c, sizes, mean, cov, probs, sizes_next, theta_set):
    """Advance one particle through one frame; returns (K, log target increment, log proposal).

    Arrays ``sizes``, ``mean``, ``cov``, ``probs``, ``sizes_next`` and ``theta_set``
    have capacity ``K_prev + N``; ``theta_set[k]`` marks clusters with parameters
    at this frame. Clusters ``k >= K_prev`` are opened in this frame.
    """
    np.random.seed(seed)
    hyper = (kappa0, nu0, mu0, Lam0, q0)
    N = pos.shape[0]
    V = q0.shape[0]
    cap = K_prev + N
    log_alpha = math.log(alpha)
    K = K_prev
    # auxiliary statistics (first half of the kernel) for every alive older cluster
    zN = np.zeros(cap)
    zsx = np.zeros((cap, 2))
    zsxx = np.zeros((cap, 2, 2))
    zsc = np.zeros((cap, V))
    for k in range(K_prev):
        sizes[k] = sizes_in[k]
        mean[k] = prev_mean[k]
        cov[k] = prev_cov[k]
        probs[k] = prev_probs[k]
        if sizes_in[k] > 0 and M > 0:
            _add_aux(prev_mean[k], prev_cov[k], prev_probs[k], M, trials, zsx[k], zsxx[k], zsc[k])
            zN[k] = M
    # member statistics
    mN = np.zeros(cap)
    msx = np.zeros((cap, 2))
    msxx = np.zeros((cap, 2, 2))
    msc = np.zeros((cap, V))
    logits = np.empty(cap + 1)
    # sweep 1: sequential proposal from the predictive of each cluster given its
    # auxiliary set (drawn from the previous parameters) and its members so far
    log_prop = 0.0
    run_total = 0.0
    for k in range(K_prev):
        run_total += sizes_in[k]
    log_urn = 0.0
    tN = np.zeros(1)
    tsx = np.zeros((1, 2))
    tsxx = np.zeros((1, 2, 2))
    tsc = np.zeros((1, V))
    for i in range(N):
        for k in range(K):
            if sizes[k] <= 0:
                logits[k] = -np.inf
                continue
            tN[0] = zN[k] + mN[k]
            for a in range(2):
                tsx[0, a] = zsx[k, a] + msx[k, a]
                for b in range(2):
                    tsxx[0, a, b] = zsxx[k, a, b] + msxx[k, a, b]
            for v in range(V):
                tsc[0, v] = zsc[k, v] + msc[k, v]
            before = TL.log_ml(hyper, tN[0], tsx[0], tsxx[0], tsc[0])
            _add_obs(pos[i], cnt[i], 1.0, tN, tsx, tsxx, tsc, 0)
            after = TL.log_ml(hyper, tN[0], tsx[0], tsxx[0], tsc[0])
            logits[k] = math.log(sizes[k]) + after - before + coef[i]
        logits[K] = log_alpha + log_marg[i]
        choice, lp = _sample_index(logits, K + 1)
        log_prop += lp
        if choice == K:
            log_urn += log_alpha - math.log(run_total + alpha)
            sizes[K] = 0
            K += 1
        else:
            log_urn += math.log(sizes[choice]) - math.log(run_total + alpha)
        run_total += 1.0
        c[i] = choice
        sizes[choice] += 1
        _add_obs(pos[i], cnt[i], 1.0, mN, msx, msxx, msc, choice)
    # target increment: urn terms times each occupied cluster's collapsed likelihood
    log_target = log_urn
    for i in range(N):
        log_target += coef[i]
    for k in range(K):
        if mN[k] == 0.0:
            continue
        tN[0] = zN[k] + mN[k]
        for a in range(2):
            tsx[0, a] = zsx[k, a] + msx[k, a]
            for b in range(2):
                tsxx[0, a, b] = zsxx[k, a, b] + msxx[k, a, b]
        for v in range(V):
            tsc[0, v] = zsc[k, v] + msc[k, v]
        log_target += TL.log_ml(hyper, tN[0], tsx[0], tsxx[0], tsc[0])
        if zN[k] > 0.0:
            log_target -= TL.log_ml(hyper, zN[k], zsx[k], zsxx[k], zsc[k])
    # refresh and further sweeps: Gibbs moves that leave the frame's target invariant
    for s in range(n_sweeps):
        if s > 0:
            for i in range(N):
                k_old = c[i]
                sizes[k_old] -= 1
                _add_obs(pos[i], cnt[i], -1.0, mN, msx, msxx, msc, k_old)
                for k in range(K):
                    if sizes[k] > 0:
                        logits[k] = math.log(sizes[k]) + _logf(pos[i], cnt[i], coef[i], mean[k], cov[k], probs[k])
                    else:
                        logits[k] = -np.inf
                logits[K] = log_alpha + log_marg[i]
                choice, lp = _sample_index(logits, K + 1)
                if choice == K:
                    # reuse a slot emptied in this frame; at most N opened clusters are occupied at once
                    slot = K
                    for k in range(K_prev, K):
                        if sizes[k] == 0:
                            slot = k
                            break
                    one = np.zeros(1)
                    ox = np.zeros((1, 2))
                    oxx = np.zeros((1, 2, 2))
                    oc = np.zeros((1, V))
                    _add_obs(pos[i], cnt[i], 1.0, one, ox, oxx, oc, 0)
                    _draw_from_stats(kappa0, nu0, mu0, Lam0, q0, 1.0, ox[0], oxx[0], oc[0], mean[slot],
                                     cov[slot], probs[slot])
                    sizes[slot] = 0
                    if slot == K:
                        K += 1
                    choice = slot
                c[i] = choice
                sizes[choice] += 1
                _add_obs(pos[i], cnt[i], 1.0, mN, msx, msxx, msc, choice)
        for k in range(K):
            if sizes[k] <= 0:
                continue
            tN[0] = zN[k] + mN[k]
            for a in range(2):
                tsx[0, a] = zsx[k, a] + msx[k, a]
                for b in range(2):
                    tsxx[0, a, b] = zsxx[k, a, b] + msxx[k, a, b]
            for v in range(V):
                tsc[0, v] = zsc[k, v] + msc[k, v]
            _draw_from_stats(kappa0, nu0, mu0, Lam0, q0, tN[0], tsx[0], tsxx[0], tsc[0], mean[k], cov[k], probs[k])
    for k in range(K):
        theta_set[k] = sizes[k] > 0
        if thin and sizes[k] > 0:
            sizes_next[k] = sizes[k] - np.random.binomial(sizes[k], rho)
        else:
            sizes_next[k] = sizes[k]
    return K, log_target, log_prop


# ---------------------------------------------------------------------------
# public building blocks


def _hyper_args(h: Hyperparams):
    return (float(h.kappa0), float(h.nu0), np.asarray(h.mu0, dtype=float), np.asarray(h.Lambda0, dtype=float),
            np.asarray(h.q0, dtype=float))


def _seed_from(rng) -> int:
    return int(rng.integers(0, 2 ** 32))


def proposal_q1(pos, counts, hyper: Hyperparams, rng):
    """Posterior draw of (mean, cov, probs) given one or more member observations."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    if pos.shape[0] == 0:
        raise ValueError("q1 needs at least one member")
    counts = np.asarray(counts, dtype=float).reshape(pos.shape[0], -1)
    hyper = hyper.with_bins(counts.shape[1])
    V = counts.shape[1]
    mean, cov, probs = np.zeros(2), np.zeros((2, 2)), np.zeros(V)
    _q_draw(_seed_from(rng), *_hyper_args(hyper), pos, counts, np.zeros(2), np.eye(2), np.full(V, 1.0 / V), 0, 1,
            mean, cov, probs)
    return mean, cov, probs


def proposal_q2(prev, pos, counts, hyper: Hyperparams, rng, M: int | None = None):
    """Posterior draw given members and M auxiliary items drawn from F(prev).

    ``prev`` is ``(mean, cov, probs)``; ``M`` defaults to ``hyper.M`` and may be
    set to zero, which reduces the draw to :func:`proposal_q1`.
    """
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    if pos.shape[0] == 0:
        raise ValueError("q2 needs at least one member")
    counts = np.asarray(counts, dtype=float).reshape(pos.shape[0], -1)
    hyper = hyper.with_bins(counts.shape[1])
    M = hyper.M if M is None else int(M)
    pm, pc, pp = (np.asarray(a, dtype=float) for a in prev)
    V = counts.shape[1]
    mean, cov, probs = np.zeros(2), np.zeros((2, 2)), np.zeros(V)
    _q_draw(_seed_from(rng), *_hyper_args(hyper), pos, counts, pm, pc, pp, M, int(hyper.aux_trials),
            mean, cov, probs)
    return mean, cov, probs


def smc_assignment_pmf(pos, counts, sizes, means, covs, probs, hyper: Hyperparams) -> np.ndarray:
    """Normalized (K+1)-vector: urn weight times F for existing clusters, marginal for "new" (last)."""
    pos = np.asarray(pos, dtype=float).reshape(2)
    counts = np.asarray(counts, dtype=float).ravel()
    sizes = np.asarray(sizes, dtype=float).ravel()
    K = sizes.size
    hyper = hyper.with_bins(counts.size)
    coef = float(S.log_multinomial_coef(counts))
    log_marg = float(S.log_marginal_new_cluster(pos, counts, hyper))
    out = np.empty(K + 1)
    _assignment_logits(pos, counts, coef, log_marg, sizes, K,
                       np.asarray(means, dtype=float).reshape(K, 2), np.asarray(covs, dtype=float).reshape(K, 2, 2),
                       np.asarray(probs, dtype=float).reshape(K, counts.size), float(np.log(hyper.alpha)), out)
    p = np.exp(out - out.max())
    return p / p.sum()


def systematic_resample(weights, rng) -> np.ndarray:
    """Ancestor indices by systematic resampling (one uniform for the whole population)."""
    w = np.asarray(weights, dtype=float)
    L = w.size
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    points = (rng.random() + np.arange(L)) / L
    return np.searchsorted(cdf, points, side="right").astype(np.int64)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def resample(weights, mode: str, ess_fraction: float, rng) -> np.ndarray | None:
    """Ancestor indices, or None when the ESS rule keeps the current population."""
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"unknown resample mode {mode!r}")
    if mode == "ess-threshold" and effective_sample_size(weights) >= ess_fraction * len(weights):
        return None
    return systematic_resample(weights, rng)


# ---------------------------------------------------------------------------
# driver


@dataclass
class Particle:
    sizes: np.ndarray  # (K,) sizes after the last deletion step
    mean: np.ndarray  # (K, 2) parameters at the last processed frame
    cov: np.ndarray
    probs: np.ndarray
    log_weight: float = 0.0  # normalized-population log weight
    log_score: float = 0.0  # cumulative unnormalized log weight along the lineage

    @property
    def K(self) -> int:
        return self.sizes.size

    def copy(self) -> "Particle":
        return Particle(self.sizes.copy(), self.mean.copy(), self.cov.copy(), self.probs.copy(),
                        self.log_weight, self.log_score)


@dataclass
class FrameRecord:
    parent: int
    assign: np.ndarray  # cluster of each observation of the frame
    sizes: np.ndarray  # (K,) sizes at the frame, after assignments
    mean: np.ndarray  # (K, 2), NaN where the cluster has no parameters at this frame
    cov: np.ndarray
    probs: np.ndarray
    log_increment: float


@dataclass
class SmcResult:
    map_state: LatentState
    diagnostics: list[FrameDiagnostics]
    config: SmcConfig
    final_particles: list[Particle]
    final_log_weights: np.ndarray  # normalized, log scale
    final_K: np.ndarray  # clusters alive at the last frame, per particle


def _frame_seed(seed: int, t: int, l: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(1, t, l)).generate_state(1)[0])


def _resample_rng(seed: int, t: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, t)))


def _step_particle(p: Particle, seed: int, pos, cnt, coef, log_marg, hyper_args, config: SmcConfig, thin: bool):
    h = config.hyper
    N = pos.shape[0]
    K0 = p.K
    cap = K0 + N
    V = cnt.shape[1]
    c = np.zeros(N, dtype=np.int64)
    sizes = np.zeros(cap, dtype=np.int64)
    mean = np.zeros((cap, 2))
    cov = np.zeros((cap, 2, 2))
    probs = np.zeros((cap, V))
    sizes_next = np.zeros(cap, dtype=np.int64)
    theta_set = np.zeros(cap, dtype=np.bool_)
    K, log_target, log_prop = _particle_frame(
        seed, pos, cnt, coef, log_marg, K0, p.sizes, p.mean, p.cov, p.probs, float(h.alpha), float(h.rho),
        int(h.M), int(h.aux_trials), *hyper_args, config.gibbs_sweeps, thin,
        c, sizes, mean, cov, probs, sizes_next, theta_set)
    inc = log_target - log_prop
    # clusters without parameters at this frame keep their previous ones for later transitions
    keep = ~theta_set[:K]
    keep[K0:] = False
    new_mean, new_cov, new_probs = mean[:K].copy(), cov[:K].copy(), probs[:K].copy()
    carry = np.nonzero(keep[:K0])[0]
    new_mean[carry], new_cov[carry], new_probs[carry] = p.mean[carry], p.cov[carry], p.probs[carry]
    rec_mean, rec_cov, rec_probs = mean[:K].copy(), cov[:K].copy(), probs[:K].copy()
    rec_mean[~theta_set[:K]] = np.nan
    rec_cov[~theta_set[:K]] = np.nan
    rec_probs[~theta_set[:K]] = np.nan
    child = Particle(sizes_next[:K].copy(), new_mean, new_cov, new_probs, p.log_weight + inc, p.log_score + inc)
    record = FrameRecord(-1, c, sizes[:K].copy(), rec_mean, rec_cov, rec_probs, inc)
    return child, record


def _trace(records: list[list[FrameRecord]], index: int, T: int) -> list[FrameRecord]:
    lineage = []
    for t in range(T - 1, -1, -1):
        rec = records[t][index]
        lineage.append(rec)
        index = rec.parent
    return lineage[::-1]


def _lineage_to_state(obs: ObservationSet, lineage: list[FrameRecord], score: float, meta: dict) -> LatentState:
    T, V = obs.T, obs.V
    K = lineage[-1].sizes.size if lineage else 0
    sizes = np.zeros((K, T), dtype=np.int64)
    means = np.full((K, T, 2), np.nan)
    covs = np.full((K, T, 2, 2), np.nan)
    probs = np.full((K, T, V), np.nan)
    assign = np.zeros(obs.N, dtype=np.int64)
    for t, (rec, sl) in enumerate(zip(lineage, obs.frame_slices())):
        k = rec.sizes.size
        sizes[:k, t] = rec.sizes
        means[:k, t], covs[:k, t], probs[:k, t] = rec.mean, rec.cov, rec.probs
        assign[sl] = rec.assign
    used = [k for k in range(K) if sizes[k].any()]
    return LatentState(
        T=T,
        frames=obs.frames.copy(),
        assignments=assign,
        sizes={k: sizes[k] for k in used},
        means={k: means[k] for k in used},
        covs={k: covs[k] for k in used},
        probs={k: probs[k] for k in used},
        deletion_times=None,
        log_score=float(score),
        meta=meta,
    )


def run_smc(obs: ObservationSet, config: SmcConfig, callback=None) -> SmcResult:
    """Run the particle filter over all frames and return the MAP lineage as a latent state."""
    if obs.N == 0:
        raise ValueError("observation set is empty")
    h = config.hyper.with_bins(obs.V)
    config = SmcConfig(config.particles, config.gibbs_sweeps, config.resample_mode, config.ess_fraction,
                       config.seed, h, config.workers)
    L = config.particles
    hyper_args = _hyper_args(h)
    coef_all = S.log_multinomial_coef(obs.counts)
    marg_all = S.log_marginal_new_cluster(obs.pos, obs.counts.astype(float), h)
    counts_all = obs.counts.astype(float)
    empty = Particle(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, obs.V)),
                     -np.log(L), 0.0)
    particles = [empty.copy() for _ in range(L)]
    records: list[list[FrameRecord]] = []
    diags: list[FrameDiagnostics] = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for t, sl in enumerate(obs.frame_slices()):
            start = time.perf_counter()
            pos = np.ascontiguousarray(obs.pos[sl])
            cnt = np.ascontiguousarray(counts_all[sl])
            coef = np.ascontiguousarray(coef_all[sl])
            log_marg = np.ascontiguousarray(marg_all[sl])
            thin = t < obs.T - 1
            jobs = [(particles[l], _frame_seed(config.seed, t, l)) for l in range(L)]

            def step(job):
                return _step_particle(job[0], job[1], pos, cnt, coef, log_marg, hyper_args, config, thin)

            out = list(pool.map(step, jobs)) if pool is not None else [step(j) for j in jobs]
            particles = [o[0] for o in out]
            frame_records = [o[1] for o in out]
            for l, rec in enumerate(frame_records):
                rec.parent = l
            logw = np.array([p.log_weight for p in particles])
            if not np.any(np.isfinite(logw)):
                raise FloatingPointError(f"weight collapse at frame {t + 1}: every particle has zero weight")
            logw = logw - logw.max()
            w = np.exp(logw)
            w /= w.sum()
            for p, wi in zip(particles, w):
                p.log_weight = float(np.log(wi)) if wi > 0 else -np.inf
            ess = effective_sample_size(w)
            best = int(np.argmax(w))
            K_best = int(np.count_nonzero(frame_records[best].sizes))
            ancestors = resample(w, config.resample_mode, config.ess_fraction, _resample_rng(config.seed, t))
            if ancestors is not None:
                particles = [particles[a].copy() for a in ancestors]
                for p in particles:
                    p.log_weight = -np.log(L)
                frame_records = [_relink(frame_records[a]) for a in ancestors]
            records.append(frame_records)
            diag = FrameDiagnostics(t + 1, ess, K_best, float(w.sum()), ancestors is not None,
                                    time.perf_counter() - start)
            diags.append(diag)
            if callback is not None:
                callback(t + 1, particles, diag)
            log.debug("frame %d ess %.1f K %d", t + 1, ess, K_best)
    finally:
        if pool is not None:
            pool.shutdown()
    scores = np.array([p.log_score for p in particles])
    map_index = int(np.argmax(scores))
    lineage = _trace(records, map_index, obs.T)
    meta = {"sampler": "smc", "config": config.to_dict()}
    state = _lineage_to_state(obs, lineage, scores[map_index], meta)
    final_K = np.array([int(np.count_nonzero(records[-1][l].sizes)) for l in range(L)])
    return SmcResult(state, diags, config, particles, np.array([p.log_weight for p in particles]), final_K)


def _relink(rec: FrameRecord) -> FrameRecord:
    """Records are shared between offspring; only the parent pointer is per-offspring."""
    return FrameRecord(rec.parent, rec.assign, rec.sizes, rec.mean, rec.cov, rec.probs, rec.log_increment)


def write_diagnostics(path, diags: list[FrameDiagnostics], config_dict: dict, include_timing=False) -> None:
    """Per-frame CSV; wall time is opt-in because it breaks byte-identical re-runs."""
    header = {"tool": "gputrack", "version": __version__, "config": config_dict, "seed": config_dict.get("seed")}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh)
        cols = ["frame", "ess", "K_best", "weight_sum", "resampled"]
        w.writerow(cols + (["seconds"] if include_timing else []))
        for d in diags:
            row = [d.frame, repr(d.ess), d.K_best, repr(d.weight_sum), int(d.resampled)]
            w.writerow(row + ([f"{d.seconds:.6f}"] if include_timing else []))
