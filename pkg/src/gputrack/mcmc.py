"""Batch Gibbs sampler in the deletion-variable formulation.

Each observation ``i`` carries a cluster label ``assign[i]`` and a deletion
time ``death[i]``: it counts toward its cluster's size at frames
``frame0[i] .. death[i] - 1``.
Per cluster and frame the sampler keeps

* ``n[k, t]``    observations assigned at ``t``,
* ``surv[k, t]`` observations assigned before ``t`` that are still alive at ``t``,

so the urn size seen at frame ``t`` before any assignment is ``surv[k, t]``.
Frames are 0-based inside this module (``death`` shifts with them).

The urn probability of one frame's assignments does not depend on the order in
which they are made: a cluster with ``s`` survivors receiving ``n`` new members
contributes ``Gamma(s + n) / Gamma(s)``, a cluster born in the frame contributes
``alpha * Gamma(n)``, and the frame as a whole is divided by
``Gamma(S + alpha + N) / Gamma(S + alpha)``. A cluster that has died may not be
joined again, which keeps labels and parameter timelines aligned with the
urn's notion of identity.

Every cluster owns a parameter timeline over all frames, linked by auxiliary
variables ``z``: ``z_1 ~ P(z)``, ``theta_t | z_t`` conjugate, and
``z_t | theta_{t-1} ~ F``.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import gammaln

from . import __version__
from . import stats as S
from . import timeline as TL
from .model import Hyperparams, LatentState, ObservationSet

log = logging.getLogger(__name__)

INIT_STRATEGIES = ("single-cluster", "sequential-urn")


@dataclass(frozen=True)
class McmcConfig:
    sweeps: int = 200
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    init_strategy: str = "sequential-urn"
    lifetime_slack: int = 50
    record_every: int = 1

    def __post_init__(self):
        if self.sweeps < 1:
            raise ValueError("sweeps must be >= 1")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}")
        if self.lifetime_slack < 1:
            raise ValueError("lifetime_slack must be >= 1")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "sweeps": self.sweeps,
            "seed": self.seed,
            "hyper": self.hyper.to_dict(),
            "init_strategy": self.init_strategy,
            "lifetime_slack": self.lifetime_slack,
        }


@dataclass
class SweepDiagnostics:
    sweep: int
    log_joint: float
    K_alive: np.ndarray
    aux_accept: float
    deletion_accept: float
    seconds: float

    @property
    def K(self) -> int:
        return int(self.K_alive.max()) if self.K_alive.size else 0


# ---------------------------------------------------------------------------
# numba kernel: assignment Gibbs and deletion MH for the observations of one frame


@njit(cache=True)
def _add_delta(k, t0, end, n, surv, log_alpha):
    """Change in the log urn numerator when one observation at ``t0`` alive until ``end`` joins ``k``."""
    s = surv[k, t0]
    m = n[k, t0]
    if s > 0:
        out = np.log(s + m)
    elif m > 0:
        out = np.log(m)
    else:
        out = log_alpha
    for tp in range(t0 + 1, end):
        m = n[k, tp]
        if m == 0:
            continue
        s = surv[k, tp]
        if s > 0:
            out += np.log((s + m) / s)
        else:
            out += np.log(m) - log_alpha
    return out


@njit(cache=True)
def _log_del_prior(dd, t0, log_rho, log1m_rho, dcap):
    life = dd - t0 - 1
    if life == 0 and dd < dcap:
        return log_rho
    tail = life * log1m_rho if life > 0 else 0.0
    if dd >= dcap:
        return tail
    return log_rho + tail


@njit(cache=True, nogil=True)
def _frame_kernel(t0, obs_idx, j0, j1, skip_first_c, do_c, do_d,
                  c, d, n, surv, Ssum, Nt, birth, alive, total_n, chain_lp,
                  logF, log_marg, U, alpha, log_rho, log1m_rho, dcap, T, acc, counts):
    """Sweep observations ``obs_idx[j0:j1]`` of frame ``t0``.

    Returns the local index of an observation that chose a new cluster (the
    caller creates the cluster and resumes with ``skip_first_c``), or -1.
    ``acc[0]`` accumulates the change in the log joint; ``counts`` holds
    (deletion proposals, deletion accepts).
    """
    log_alpha = np.log(alpha)
    cap = n.shape[0]
    scores = np.empty(cap + 1)
    for j in range(j0, j1):
        i = obs_idx[j]
        if do_c and not (skip_first_c and j == j0):
            a = c[i]
            di = d[i]
            end = min(di, T)
            b_old = birth[a]
            n[a, t0] -= 1
            for tp in range(t0 + 1, end):
                surv[a, tp] -= 1
            total_n[a] -= 1
            singleton = total_n[a] == 0
            b_new = b_old
            if singleton:
                b_new = -1
            elif b_old == t0 and n[a, t0] == 0:
                b_new = -1
                for tp in range(t0 + 1, T):
                    if n[a, tp] > 0:
                        b_new = tp
                        break
            valid = True
            if not singleton:
                for tp in range(t0 + 1, end):
                    if tp > b_new and n[a, tp] > 0 and surv[a, tp] == 0:
                        valid = False
                        break
            if not valid:
                n[a, t0] += 1
                for tp in range(t0 + 1, end):
                    surv[a, tp] += 1
                total_n[a] += 1
            else:
                birth[a] = b_new
                remove_delta = _add_delta(a, t0, end, n, surv, log_alpha) + logF[a, j]
                if singleton:
                    alive[a] = False
                best = -np.inf
                for k in range(cap):
                    scores[k] = -np.inf
                    if not alive[k]:
                        continue
                    bk = birth[k]
                    ok = False
                    if bk >= 0:
                        if bk <= t0:
                            ok = bk == t0 or surv[k, t0] > 0
                        else:
                            ok = bk < di
                    if not ok:
                        continue
                    sc = _add_delta(k, t0, end, n, surv, log_alpha) + logF[k, j]
                    scores[k] = sc
                    if sc > best:
                        best = sc
                scores[cap] = log_alpha + log_marg[j]
                if scores[cap] > best:
                    best = scores[cap]
                total = 0.0
                for k in range(cap + 1):
                    if scores[k] > -np.inf:
                        total += np.exp(scores[k] - best)
                target = U[j, 0] * total
                chosen = -1
                run = 0.0
                for k in range(cap + 1):
                    if scores[k] > -np.inf:
                        run += np.exp(scores[k] - best)
                        chosen = k
                        if run >= target:
                            break
                if chosen == a:
                    birth[a] = b_old
                    n[a, t0] += 1
                    for tp in range(t0 + 1, end):
                        surv[a, tp] += 1
                    total_n[a] += 1
                else:
                    acc[0] -= remove_delta
                    if singleton:
                        acc[0] -= chain_lp[a]
                    if chosen == cap:
                        return j
                    k = chosen
                    acc[0] += scores[k]
                    n[k, t0] += 1
                    for tp in range(t0 + 1, end):
                        surv[k, tp] += 1
                    total_n[k] += 1
                    if birth[k] < 0 or t0 < birth[k]:
                        birth[k] = t0
                    c[i] = k
        if do_d:
            a = c[i]
            di = d[i]
            if log1m_rho == -np.inf:
                life = 0
            else:
                life = int(np.floor(np.log1p(-U[j, 1]) / log1m_rho))
            ds = min(t0 + 1 + life, dcap)
            counts[0] += 1
            dprior = _log_del_prior(ds, t0, log_rho, log1m_rho, dcap) - _log_del_prior(di, t0, log_rho, log1m_rho, dcap)
            old_end = min(di, T)
            new_end = min(ds, T)
            if new_end == old_end:
                d[i] = ds
                acc[0] += dprior
                counts[1] += 1
                continue
            delta = 0.0
            reject = False
            if new_end > old_end:
                for tp in range(old_end, new_end):
                    s = surv[a, tp]
                    m = n[a, tp]
                    if m > 0:
                        if s > 0:
                            delta += np.log((s + m) / s)
                        else:
                            delta += np.log(m) - log_alpha
                    delta += np.log(Ssum[tp] + alpha) - np.log(Ssum[tp] + alpha + Nt[tp])
            else:
                for tp in range(new_end, old_end):
                    s = surv[a, tp] - 1
                    m = n[a, tp]
                    if m > 0:
                        if s == 0:
                            reject = True
                            break
                        delta += np.log(s / (s + m))
                    delta += np.log(Ssum[tp] - 1 + alpha + Nt[tp]) - np.log(Ssum[tp] - 1 + alpha)
            if reject:
                continue
            if np.log(U[j, 2]) < delta:
                step = 1 if new_end > old_end else -1
                lo = min(old_end, new_end)
                hi = max(old_end, new_end)
                for tp in range(lo, hi):
                    surv[a, tp] += step
                    Ssum[tp] += step
                d[i] = ds
                acc[0] += delta + dprior
                counts[1] += 1
    return -1


# ---------------------------------------------------------------------------
# chain state


class ChainState:
    """Mutable sampler state with per-(cluster, frame) bookkeeping."""

    def __init__(self, obs: ObservationSet, hyper: Hyperparams, lifetime_slack: int = 50, capacity: int = 8):
        hyper = hyper.with_bins(obs.V)
        self.obs = obs
        self.hyper = hyper
        self.T = obs.T
        self.V = obs.V
        self.M = hyper.M
        self.N = obs.N
        self.frame0 = obs.frames - 1
        self.pos = obs.pos
        self.counts = obs.counts
        self.coef = S.log_multinomial_coef(obs.counts) if obs.N else np.zeros(0)
        self.slices = obs.frame_slices()
        self.dcap = self.T + lifetime_slack - 1
        self.assign = np.zeros(self.N, dtype=np.int64)
        self.death = np.zeros(self.N, dtype=np.int64)
        self.Nt = np.bincount(self.frame0, minlength=self.T).astype(np.int64)
        self.Ssum = np.zeros(self.T, dtype=np.int64)
        self.cap = 0
        self.n = np.zeros((0, self.T), dtype=np.int64)
        self.surv = np.zeros((0, self.T), dtype=np.int64)
        self.birth = np.zeros(0, dtype=np.int64)
        self.alive = np.zeros(0, dtype=np.bool_)
        self.total_n = np.zeros(0, dtype=np.int64)
        self.chain_lp = np.zeros(0)
        self.mean = np.zeros((0, self.T, 2))
        self.cov = np.zeros((0, self.T, 2, 2))
        self.probs = np.zeros((0, self.T, self.V))
        self.zs = np.zeros((0, self.T, self.M, 2))
        self.zc = np.zeros((0, self.T, self.M, self.V), dtype=np.int64)
        self.next_label = 0
        self.log_joint = np.nan
        self._log_marg = S.log_marginal_new_cluster(obs.pos, obs.counts, hyper) if obs.N else np.zeros(0)
        self.hyper_tuple = (float(hyper.kappa0), float(hyper.nu0), np.asarray(hyper.mu0, dtype=float),
                            np.asarray(hyper.Lambda0, dtype=float), np.asarray(hyper.q0, dtype=float))
        self._grow(capacity)

    # -- storage ------------------------------------------------------------

    def _grow(self, new_cap: int) -> None:
        extra = new_cap - self.cap
        if extra <= 0:
            return

        def pad(a, fill=0):
            shape = (extra,) + a.shape[1:]
            return np.concatenate([a, np.full(shape, fill, dtype=a.dtype)])

        self.n = pad(self.n)
        self.surv = pad(self.surv)
        self.birth = pad(self.birth, -1)
        self.alive = pad(self.alive, False)
        self.total_n = pad(self.total_n)
        self.chain_lp = pad(self.chain_lp, 0.0)
        self.mean = pad(self.mean, np.nan)
        self.cov = pad(self.cov, np.nan)
        self.probs = pad(self.probs, np.nan)
        self.zs = pad(self.zs, 0.0)
        self.zc = pad(self.zc, 0)
        self.cap = new_cap

    def new_slot(self) -> int:
        """A free cluster slot: the lowest dead slot, else a fresh one.

        The slot is marked alive on return. A dead slot has all-zero counts, and opening a cluster overwrites its
        whole parameter and auxiliary timeline, so reuse leaves no residue.
        Reuse keeps per-sweep cost bounded by the number of live clusters.
        """
        free = np.nonzero(~self.alive[:self.next_label])[0]
        if free.size:
            k = int(free[0])
        else:
            if self.next_label >= self.cap:
                self._grow(max(2 * self.cap, 8))
            k = self.next_label
            self.next_label += 1
        self.alive[k] = True
        return k

    @property
    def labels(self) -> np.ndarray:
        return np.nonzero(self.alive)[0]

    # -- recounting ---------------------------------------------------------

    def recount(self):
        """(n, surv) recomputed from (f, c, d)."""
        n = np.zeros_like(self.n)
        surv = np.zeros_like(self.surv)
        np.add.at(n, (self.assign, self.frame0), 1)
        for i in range(self.N):
            surv[self.assign[i], self.frame0[i] + 1:min(self.death[i], self.T)] += 1
        return n, surv

    def rebuild_counts(self) -> None:
        self.n, self.surv = self.recount()
        self.Ssum = self.surv.sum(axis=0)
        self.total_n = self.n.sum(axis=1)
        self.birth = np.where(self.n.any(axis=1), np.argmax(self.n > 0, axis=1), -1).astype(np.int64)
        self.alive = self.total_n > 0

    def is_valid(self) -> bool:
        """No cluster receives members at a frame after its birth with zero survivors."""
        for k in self.labels:
            b = self.birth[k]
            bad = (np.arange(self.T) > b) & (self.n[k] > 0) & (self.surv[k] == 0)
            if bad.any():
                return False
        return True

    # -- densities ----------------------------------------------------------

    def log_f_obs(self, idx, labels) -> np.ndarray:
        """log F of observations ``idx`` under their given labels (same length)."""
        t = self.frame0[idx]
        return S.log_f(self.pos[idx], self.counts[idx], self.mean[labels, t], self.cov[labels, t],
                       self.probs[labels, t], self.coef[idx])

    def log_f_frame(self, t: int, sl: slice, ks) -> np.ndarray:
        """(len(ks), N_t) log-likelihood table of frame ``t`` under clusters ``ks``."""
        ks = np.asarray(ks, dtype=np.int64)
        if ks.size == 0 or sl.stop == sl.start:
            return np.zeros((ks.size, sl.stop - sl.start))
        return S.log_f(self.pos[sl][None], self.counts[sl][None], self.mean[ks, t][:, None],
                       self.cov[ks, t][:, None], self.probs[ks, t][:, None], self.coef[sl][None])

    def chain_logp(self, ks) -> np.ndarray:
        """log density of each cluster's (z, theta) timeline under the kernel chain."""
        ks = np.asarray(ks, dtype=np.int64)
        return np.array([TL.chain_logp(self.hyper_tuple, self.zs[k], self.zc[k], self.mean[k], self.cov[k],
                                       self.probs[k]) for k in ks])

    def urn_logp(self) -> float:
        """Urn log-probability of all assignments given deletion times (from stored counts)."""
        return _urn_logp(self.n, self.surv, self.hyper.alpha)

    def deletion_logprior(self) -> float:
        h = self.hyper
        life = self.death - self.frame0 - 1
        log1m = np.log1p(-h.rho) if h.rho < 1 else -np.inf
        with np.errstate(invalid="ignore"):
            tail = np.where(life > 0, life * log1m, 0.0)
        capped = self.death >= self.dcap
        return float(np.sum(np.where(capped, tail, np.log(h.rho) + tail)))

    def log_joint_from_scratch(self) -> float:
        n, surv = self.recount()
        ks = self.labels
        lik = float(self.log_f_obs(np.arange(self.N), self.assign).sum()) if self.N else 0.0
        return (_urn_logp(n, surv, self.hyper.alpha) + self.deletion_logprior() + lik
                + float(self.chain_logp(ks).sum()))

    # -- export -------------------------------------------------------------

    def snapshot(self) -> dict:
        ks = self.labels
        return {
            "assign": self.assign.copy(),
            "death": self.death.copy(),
            "labels": ks.copy(),
            "n": self.n[ks].copy(),
            "surv": self.surv[ks].copy(),
            "mean": self.mean[ks].copy(),
            "cov": self.cov[ks].copy(),
            "probs": self.probs[ks].copy(),
            "log_joint": float(self.log_joint),
        }


def _urn_logp(n, surv, alpha) -> float:
    n = n.astype(float)
    s = surv.astype(float)
    occupied = n > 0
    old = occupied & (s > 0)
    born = occupied & (s == 0)
    num = np.where(old, gammaln(s + n) - gammaln(np.where(old, s, 1.0)), 0.0).sum()
    num += np.where(born, np.log(alpha) + gammaln(np.where(born, n, 1.0)), 0.0).sum()
    St = s.sum(axis=0)
    Nt = n.sum(axis=0)
    den = (gammaln(St + alpha + Nt) - gammaln(St + alpha)).sum()
    return float(num - den)


# ---------------------------------------------------------------------------
# parameter timelines


def propagate_timeline(state: ChainState, k: int, t0: int, rng) -> None:
    """Fill frames other than ``t0`` of cluster ``k`` by running the kernel forward and backward."""
    h = state.hyper
    if not TL.propagate(rng, state.hyper_tuple, h.M, h.aux_trials, t0, state.zs[k], state.zc[k], state.mean[k],
                        state.cov[k], state.probs[k]):
        raise np.linalg.LinAlgError("covariance is not positive definite")


def _create_cluster(state: ChainState, i: int, rng) -> int:
    """Open a new cluster for observation ``i`` (already removed from its old cluster)."""
    k = state.new_slot()
    t0 = int(state.frame0[i])
    h = state.hyper
    if not TL.open_cluster(rng, state.hyper_tuple, h.M, h.aux_trials, t0, state.pos[i], state.counts[i],
                           state.zs[k], state.zc[k], state.mean[k], state.cov[k], state.probs[k]):
        raise np.linalg.LinAlgError("covariance is not positive definite")
    end = min(int(state.death[i]), state.T)
    state.n[k, t0] += 1
    state.surv[k, t0 + 1:end] += 1
    state.total_n[k] = 1
    state.birth[k] = t0
    state.alive[k] = True
    state.assign[i] = k
    state.chain_lp[k] = TL.chain_logp(state.hyper_tuple, state.zs[k], state.zc[k], state.mean[k], state.cov[k],
                                      state.probs[k])
    return k


def sweep_assignments(state: ChainState, rng, do_c=True, do_d=True, frames=None) -> tuple[int, int]:
    """One pass over observations (frames ascending); returns deletion (proposals, accepts)."""
    h = state.hyper
    log_rho = np.log(h.rho)
    log1m_rho = np.log1p(-h.rho) if h.rho < 1 else -np.inf
    acc = np.zeros(1)
    counts = np.zeros(2, dtype=np.int64)
    log_marg = state._log_marg
    for t in (range(state.T) if frames is None else frames):
        sl = state.slices[t]
        nt = sl.stop - sl.start
        if nt == 0:
            continue
        obs_idx = np.arange(sl.start, sl.stop, dtype=np.int64)
        U = rng.random((nt, 3))
        logF = np.full((state.cap, nt), -np.inf)
        TL.frame_loglik(t, sl.start, sl.stop, state.labels, state.pos, state.counts, state.coef, state.mean,
                        state.cov, state.probs, logF)
        j, skip = 0, False
        while True:
            r = _frame_kernel(t, obs_idx, j, nt, skip, do_c, do_d, state.assign, state.death, state.n, state.surv,
                              state.Ssum, state.Nt, state.birth, state.alive, state.total_n, state.chain_lp,
                              logF, log_marg[sl], U, h.alpha, log_rho, log1m_rho, state.dcap, state.T, acc,
                              counts)
            if r < 0:
                break
            i = int(obs_idx[r])
            old_cap = state.cap
            k = _create_cluster(state, i, rng)
            if state.cap != old_cap:
                grown = np.full((state.cap, nt), -np.inf)
                grown[:old_cap] = logF
                logF = grown
            TL.frame_loglik(t, sl.start, sl.stop, np.array([k]), state.pos, state.counts, state.coef, state.mean,
                            state.cov, state.probs, logF)
            acc[0] += np.log(h.alpha) + logF[k, r] + state.chain_lp[k]
            j, skip = r, True
    state.log_joint += acc[0]
    return int(counts[0]), int(counts[1])


def _member_stats(state: ChainState):
    K, T = state.cap, state.T
    idx = state.assign * T + state.frame0
    size = K * T
    N = np.bincount(idx, minlength=size).astype(float).reshape(K, T)
    sx = np.stack([np.bincount(idx, state.pos[:, j], minlength=size) for j in range(2)], -1).reshape(K, T, 2)
    outer = state.pos[:, :, None] * state.pos[:, None, :]
    sxx = np.stack([np.bincount(idx, outer[:, a, b], minlength=size) for a in range(2) for b in range(2)],
                   -1).reshape(K, T, 2, 2)
    sc = np.stack([np.bincount(idx, state.counts[:, v], minlength=size) for v in range(state.V)],
                  -1).reshape(K, T, state.V)
    return N, sx, sxx, sc


def sample_params(state: ChainState, rng) -> None:
    """Exact Gibbs draw of every theta_{k,t} given members and the adjacent auxiliary sets."""
    if not TL.sample_params(rng, state.hyper_tuple, state.labels, state.assign, state.frame0, state.pos, state.counts,
                            state.zs, state.zc, state.mean, state.cov, state.probs):
        raise np.linalg.LinAlgError("scale matrix is not positive definite")


def aux_log_ratio(hyper: Hyperparams, prev, current, proposed):
    """log MH ratio for replacing the auxiliary set ``current`` by ``proposed``.

    ``prev`` is ``(mean, cov, probs)`` of the previous frame's parameters and each
    auxiliary set is ``(zs, zc)``. The proposal is F(theta_t), which cancels the
    F terms of the target, so the ratio is P(theta_{t-1} | z*) / P(theta_{t-1} | z).
    """
    lp_new = S.niw_dir_logpdf(*prev, *S.posterior_from_stats(hyper, *S.aux_stats(*proposed)))
    lp_cur = S.niw_dir_logpdf(*prev, *S.posterior_from_stats(hyper, *S.aux_stats(*current)))
    return lp_new - lp_cur


def sample_aux_variables(state: ChainState, rng) -> tuple[int, int]:
    """Single-item MH updates of all auxiliary variables; returns (proposals, accepts) for t > 1."""
    h = state.hyper
    proposed, accepted = TL.sample_aux(rng, state.hyper_tuple, h.aux_trials, state.labels, state.zs, state.zc,
                                       state.mean, state.cov, state.probs)
    if proposed < 0:
        raise np.linalg.LinAlgError("covariance is not positive definite")
    return int(proposed), int(accepted)


def _total_loglik(state: ChainState) -> float:
    return TL.total_loglik(state.assign, state.frame0, state.pos, state.counts, state.coef, state.mean, state.cov,
                           state.probs)


def refresh_params_and_aux(state: ChainState, rng) -> tuple[int, int]:
    """Theta Gibbs then auxiliary MH, keeping the incremental log joint exact."""
    ks = state.labels
    old_lik = _total_loglik(state)
    old_chain = float(state.chain_lp[ks].sum())
    sample_params(state, rng)
    acc = sample_aux_variables(state, rng)
    state.chain_lp[ks] = state.chain_logp(ks)
    new_lik = _total_loglik(state)
    state.log_joint += (new_lik - old_lik) + (float(state.chain_lp[ks].sum()) - old_chain)
    return acc


# ---------------------------------------------------------------------------
# initialization


def _sample_lifetimes(state: ChainState, idx, rng) -> np.ndarray:
    h = state.hyper
    life = rng.geometric(h.rho, size=len(idx)) - 1
    return np.minimum(state.frame0[idx] + 1 + life, state.dcap)


def _init_single_cluster(state: ChainState, rng) -> None:
    state.assign[:] = state.new_slot()
    state.death[:] = _sample_lifetimes(state, np.arange(state.N), rng)
    # extend lifetimes where a frame would otherwise restart a dead cluster
    nonempty = np.nonzero(state.Nt > 0)[0]
    for prev, t in zip(nonempty[:-1], nonempty[1:]):
        sl = state.slices[prev]
        if not np.any(state.death[sl] > t):
            state.death[sl.stop - 1] = t + 1


def _init_sequential(state: ChainState, rng) -> None:
    """Sequential urn pass with conjugate predictive scores from recent members."""
    h = state.hyper
    log_alpha = np.log(h.alpha)
    survivors: dict[int, np.ndarray] = {}  # label -> deletion times of live members
    prev_stats: dict[int, list] = {}
    for t in range(state.T):
        sl = state.slices[t]
        for k in list(survivors):
            survivors[k] = survivors[k][survivors[k] > t]
        cur_stats: dict[int, list] = {}
        labels = [k for k in survivors if survivors[k].size > 0]
        sizes = {k: survivors[k].size for k in labels}
        for i in range(sl.start, sl.stop):
            x, cnt = state.pos[i], state.counts[i]
            scores = []
            for k in labels:
                st = _merge_stats(prev_stats.get(k), cur_stats.get(k), state.V)
                mu, kappa, nu, Lam, q = S.posterior_from_stats(h, *st)
                scores.append(np.log(sizes[k]) + float(S.predictive_logpdf(x, cnt, mu, kappa, nu, Lam, q)))
            scores.append(log_alpha + state._log_marg[i])
            scores = np.array(scores)
            p = np.exp(scores - scores.max())
            choice = int(rng.choice(len(p), p=p / p.sum()))
            if choice == len(labels):
                k = state.new_slot()
                labels.append(k)
                sizes[k] = 0
                survivors[k] = np.zeros(0, dtype=np.int64)
            else:
                k = labels[choice]
            state.assign[i] = k
            sizes[k] += 1
            di = int(_sample_lifetimes(state, [i], rng)[0])
            state.death[i] = di
            survivors[k] = np.append(survivors[k], di)
            one = S.suff_stats(x[None], cnt[None])
            cur_stats[k] = one if k not in cur_stats else [a + b for a, b in zip(cur_stats[k], one)]
        prev_stats = cur_stats


def _merge_stats(a, b, V):
    zero = [0.0, np.zeros(2), np.zeros((2, 2)), np.zeros(V)]
    a = a or zero
    b = b or zero
    return [x + y for x, y in zip(a, b)]


def _init_params(state: ChainState, rng) -> None:
    h = state.hyper
    ks = state.labels
    N, sx, sxx, sc = _member_stats(state)
    for k in ks:
        frames = np.nonzero(N[k] > 0)[0]
        post = S.posterior_from_stats(h, N[k, frames], sx[k, frames], sxx[k, frames], sc[k, frames])
        state.mean[k, frames], state.cov[k, frames], state.probs[k, frames] = S.sample_niw_dir(*post, rng)
        first, last = frames[0], frames[-1]
        # fill gaps forward from each populated frame and before the first one backward
        for t in range(first + 1, state.T):
            if N[k, t] > 0:
                continue
            zs, zc = S.sample_aux(state.mean[k, t - 1], state.cov[k, t - 1], state.probs[k, t - 1], h.M,
                                  h.aux_trials, rng)
            post_t = S.posterior_from_stats(h, *S.aux_stats(zs, zc))
            state.mean[k, t], state.cov[k, t], state.probs[k, t] = S.sample_niw_dir(*post_t, rng)
        for t in range(first - 1, -1, -1):
            zs, zc = S.sample_aux(state.mean[k, t + 1], state.cov[k, t + 1], state.probs[k, t + 1], h.M,
                                  h.aux_trials, rng)
            post_t = S.posterior_from_stats(h, *S.aux_stats(zs, zc))
            state.mean[k, t], state.cov[k, t], state.probs[k, t] = S.sample_niw_dir(*post_t, rng)
        del last
    if ks.size:
        prev = (state.mean[ks], state.cov[ks], state.probs[ks])
        zs, zc = S.sample_aux(*prev, h.M, h.aux_trials, rng)
        # z_t follows theta_{t-1}; z_1 follows theta_1
        state.zs[ks, 1:], state.zc[ks, 1:] = zs[:, :-1], zc[:, :-1]
        state.zs[ks, 0], state.zc[ks, 0] = zs[:, 0], zc[:, 0]


def init_state(obs: ObservationSet, config: McmcConfig, rng) -> ChainState:
    state = ChainState(obs, config.hyper, config.lifetime_slack)
    if config.init_strategy == "single-cluster":
        _init_single_cluster(state, rng)
    else:
        _init_sequential(state, rng)
    state.rebuild_counts()
    _init_params(state, rng)
    ks = state.labels
    state.chain_lp[ks] = state.chain_logp(ks)
    state.log_joint = state.log_joint_from_scratch()
    return state


# ---------------------------------------------------------------------------
# driver


@dataclass
class McmcResult:
    map_state: LatentState
    diagnostics: list[SweepDiagnostics]
    config: McmcConfig
    final_state: ChainState | None = None


def snapshot_to_latent(state: ChainState, snap: dict, meta: dict | None = None) -> LatentState:
    labels = snap["labels"]
    sizes = {int(k): (snap["n"][j] + snap["surv"][j]).astype(np.int64) for j, k in enumerate(labels)}
    return LatentState(
        T=state.T,
        frames=state.frame0 + 1,
        assignments=snap["assign"].copy(),
        sizes=sizes,
        means={int(k): snap["mean"][j] for j, k in enumerate(labels)},
        covs={int(k): snap["cov"][j] for j, k in enumerate(labels)},
        probs={int(k): snap["probs"][j] for j, k in enumerate(labels)},
        deletion_times=snap["death"] + 1,
        log_score=snap["log_joint"],
        meta=dict(meta or {}),
    )


def run_mcmc(obs: ObservationSet, config: McmcConfig, callback=None, keep_state=False) -> McmcResult:
    """Run ``config.sweeps`` Gibbs sweeps and return the maximum-log-joint sample."""
    if obs.N == 0:
        raise ValueError("observation set is empty")
    rng = np.random.default_rng(config.seed)
    state = init_state(obs, config, rng)
    best = state.snapshot()
    diags = []
    for sweep in range(1, config.sweeps + 1):
        t_start = time.perf_counter()
        dprop, dacc = sweep_assignments(state, rng)
        aprop, aacc = refresh_params_and_aux(state, rng)
        if not np.isfinite(state.log_joint):
            raise FloatingPointError(f"log joint became non-finite at sweep {sweep}")
        if state.log_joint > best["log_joint"]:
            best = state.snapshot()
        K_alive = ((state.n + state.surv)[state.labels] > 0).sum(axis=0)
        diag = SweepDiagnostics(sweep, float(state.log_joint), K_alive, aacc / max(aprop, 1), dacc / max(dprop, 1),
                                time.perf_counter() - t_start)
        if sweep % config.record_every == 0 or sweep == config.sweeps:
            diags.append(diag)
        if callback is not None:
            callback(state, diag)
        log.debug("sweep %d logjoint %.3f K %d", sweep, diag.log_joint, len(state.labels))
    meta = {"sampler": "mcmc", "config": config.to_dict()}
    return McmcResult(snapshot_to_latent(state, best, meta), diags, config, state if keep_state else None)


def run_chains(obs: ObservationSet, config: McmcConfig, n_chains: int, workers: int = 1) -> McmcResult:
    """Independent chains seeded ``seed, seed+1, ...``; the global MAP wins (ties: lowest seed)."""
    configs = [McmcConfig(config.sweeps, config.seed + j, config.hyper, config.init_strategy,
                          config.lifetime_slack, config.record_every) for j in range(n_chains)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: run_mcmc(obs, c), configs))
    else:
        results = [run_mcmc(obs, c) for c in configs]
    return max(results, key=lambda r: (r.map_state.log_score, -r.config.seed))


# ---------------------------------------------------------------------------
# single-observation operations (used by tests and for inspection)


def sample_assignment(state: ChainState, i: int, rng) -> int:
    """Gibbs update of ``c[i]`` with ``d[i]`` held fixed; returns the new label."""
    _single(state, i, rng, True, False)
    return int(state.assign[i])


def sample_deletion(state: ChainState, i: int, rng) -> int:
    """Metropolis-Hastings update of ``d[i]`` (1-based result) with the lifetime prior as proposal."""
    return deletion_move(state, i, rng)[0]


def deletion_move(state: ChainState, i: int, rng) -> tuple[int, bool]:
    """As :func:`sample_deletion`, also reporting whether the proposal was accepted."""
    counts = _single(state, i, rng, False, True)
    return int(state.death[i]) + 1, bool(counts[1])


def _single(state, i, rng, do_c, do_d) -> np.ndarray:
    t = int(state.frame0[i])
    sl = state.slices[t]
    j = i - sl.start
    h = state.hyper
    obs_idx = np.arange(sl.start, sl.stop, dtype=np.int64)
    U = rng.random((sl.stop - sl.start, 3))
    logF = np.full((state.cap, sl.stop - sl.start), -np.inf)
    ks = state.labels
    logF[ks] = state.log_f_frame(t, sl, ks)
    acc = np.zeros(1)
    counts = np.zeros(2, dtype=np.int64)
    log1m = np.log1p(-h.rho) if h.rho < 1 else -np.inf
    r = _frame_kernel(t, obs_idx, j, j + 1, False, do_c, do_d, state.assign, state.death, state.n, state.surv,
                      state.Ssum, state.Nt, state.birth, state.alive, state.total_n, state.chain_lp, logF,
                      state._log_marg[sl], U, h.alpha, np.log(h.rho), log1m, state.dcap, state.T, acc, counts)
    if r >= 0:
        k = _create_cluster(state, i, rng)
        acc[0] += np.log(h.alpha) + float(state.log_f_obs(np.array([i]), np.array([k]))[0]) + state.chain_lp[k]
        if do_d:
            r2 = _frame_kernel(t, obs_idx, j, j + 1, True, False, True, state.assign, state.death, state.n, state.surv,
                               state.Ssum, state.Nt, state.birth, state.alive, state.total_n, state.chain_lp,
                               np.full((state.cap, sl.stop - sl.start), -np.inf), state._log_marg[sl], U,
                               h.alpha, np.log(h.rho), log1m, state.dcap, state.T, acc, counts)
            assert r2 < 0
    state.log_joint += acc[0]
    return counts


# ---------------------------------------------------------------------------
# IO


def _header(config_dict: dict) -> dict:
    return {"tool": "gputrack", "version": __version__, "config": config_dict,
            "seed": config_dict.get("seed")}


def write_state(path, state: LatentState, config_dict: dict) -> None:
    doc = {
        "header": _header(config_dict),
        "T": state.T,
        "frames": np.asarray(state.frames).tolist(),
        "assignments": np.asarray(state.assignments).tolist(),
        "deletion_times": None if state.deletion_times is None else np.asarray(state.deletion_times).tolist(),
        "log_score": float(state.log_score),
        "meta": state.meta,
        "clusters": [
            {
                "id": int(k),
                "sizes": state.sizes[k].tolist(),
                "mean": state.means[k].tolist(),
                "cov": state.covs[k].tolist(),
                "probs": state.probs[k].tolist(),
            }
            for k in state.labels
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_state(path) -> LatentState:
    doc = json.loads(Path(path).read_text())
    try:
        clusters = doc["clusters"]
        return LatentState(
            T=int(doc["T"]),
            frames=np.array(doc["frames"], dtype=np.int64),
            assignments=np.array(doc["assignments"], dtype=np.int64),
            sizes={int(c["id"]): np.array(c["sizes"], dtype=np.int64) for c in clusters},
            means={int(c["id"]): np.array(c["mean"], dtype=float) for c in clusters},
            covs={int(c["id"]): np.array(c["cov"], dtype=float) for c in clusters},
            probs={int(c["id"]): np.array(c["probs"], dtype=float) for c in clusters},
            deletion_times=None if doc.get("deletion_times") is None else np.array(doc["deletion_times"]),
            log_score=float(doc.get("log_score", np.nan)),
            meta=doc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed state file ({exc})") from exc


def write_diagnostics(path, diags: list[SweepDiagnostics], config_dict: dict, include_timing=False) -> None:
    """Per-sweep CSV; wall time is opt-in because it breaks byte-identical re-runs."""
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(_header(config_dict), sort_keys=True) + "\n")
        w = csv.writer(fh)
        cols = ["sweep", "log_joint", "K", "K_mean", "aux_accept", "deletion_accept"]
        w.writerow(cols + (["seconds"] if include_timing else []))
        for d in diags:
            row = [d.sweep, repr(d.log_joint), d.K, repr(float(d.K_alive.mean())),
                   repr(d.aux_accept), repr(d.deletion_accept)]
            w.writerow(row + ([f"{d.seconds:.6f}"] if include_timing else []))
