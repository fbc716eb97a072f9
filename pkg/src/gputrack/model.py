"""Latent-state types and the two Generalized Polya Urn distributions.

Frame indices are 1-based in every public function of this module, matching
the observation files. Samplers work with 0-based frame offsets internally;
the relation ``d = t + lifetime + 1`` holds in either convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

__all__ = [
    "Observation",
    "ClusterParams",
    "Hyperparams",
    "AuxVarSet",
    "LatentState",
    "ObservationSet",
    "urn_assignment_pmf",
    "sample_size_transition",
    "size_transition_pmf",
    "reconstruct_sizes",
    "sample_lifetime",
    "deletion_time_from_lifetime",
    "PRESET_SYNTHETIC",
    "PRESET_PETS",
]


@dataclass(frozen=True)
class Observation:
    frame: int
    pos: np.ndarray
    color_counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float).reshape(2))
        object.__setattr__(self, "color_counts", np.asarray(self.color_counts, dtype=np.int64))
        if self.frame < 1:
            raise ValueError(f"frame must be >= 1, got {self.frame}")
        if np.any(self.color_counts < 0):
            raise ValueError("color counts must be nonnegative")


@dataclass(frozen=True)
class ClusterParams:
    """Appearance of one object at one time step: mean, covariance, color probabilities."""

    mean: np.ndarray
    cov: np.ndarray
    color_probs: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        probs = np.asarray(self.color_probs, dtype=float)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("color probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "color_probs", probs)


@dataclass(frozen=True)
class Hyperparams:
    """Model hyperparameters.

    ``aux_trials`` is the multinomial trial count of each auxiliary variable's
    color draw; it defaults to the 3x3 patch size used for observations.
    """

    alpha: float = 0.1
    rho: float = 0.3
    M: int = 10
    mu0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    kappa0: float = 0.05
    nu0: float = 5.0
    Lambda0: np.ndarray = field(default_factory=lambda: np.eye(2))
    q0: np.ndarray = field(default_factory=lambda: np.full(10, 5.0))
    aux_trials: int = 9

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float).reshape(2))
        object.__setattr__(self, "Lambda0", np.asarray(self.Lambda0, dtype=float).reshape(2, 2))
        object.__setattr__(self, "q0", np.asarray(self.q0, dtype=float).ravel())
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if int(self.M) != self.M or self.M < 0:
            raise ValueError(f"M must be a nonnegative integer, got {self.M}")
        if not self.kappa0 > 0:
            raise ValueError(f"kappa0 must be positive, got {self.kappa0}")
        if not self.nu0 > 1:
            raise ValueError(f"nu0 must exceed 1, got {self.nu0}")
        if not np.allclose(self.Lambda0, self.Lambda0.T):
            raise ValueError("Lambda0 must be symmetric")
        try:
            np.linalg.cholesky(self.Lambda0)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Lambda0 must be positive definite") from exc
        if np.any(self.q0 <= 0):
            raise ValueError("q0 entries must be positive")
        if self.aux_trials < 1:
            raise ValueError("aux_trials must be >= 1")

    @property
    def V(self) -> int:
        return self.q0.size

    def with_bins(self, V: int) -> "Hyperparams":
        """Return a copy whose q0 is broadcast to ``V`` bins (uniform value)."""
        if V == self.V:
            return self
        if not np.all(self.q0 == self.q0[0]):
            raise ValueError(f"cannot resize non-uniform q0 of length {self.V} to {V}")
        return self.replace(q0=np.full(V, self.q0[0]))

    def replace(self, **changes) -> "Hyperparams":
        values = self.to_dict()
        values.update(changes)
        return Hyperparams(**values)

    def to_dict(self) -> dict:
        return {
            "alpha": float(self.alpha),
            "rho": float(self.rho),
            "M": int(self.M),
            "mu0": self.mu0.tolist(),
            "kappa0": float(self.kappa0),
            "nu0": float(self.nu0),
            "Lambda0": self.Lambda0.tolist(),
            "q0": self.q0.tolist(),
            "aux_trials": int(self.aux_trials),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


# alpha=0.1, rho=0.3, M=10, mu0=0, kappa0=0.05, nu0=5, Lambda0=I, q0=5 (synthetic squares)
PRESET_SYNTHETIC = Hyperparams()
# alpha=0.1, rho=0.8, M=10, mu0=0, kappa0=0.05, nu0=6, Lambda0=I, q0=3 (PETS2009/2010)
PRESET_PETS = Hyperparams(rho=0.8, nu0=6.0, q0=np.full(10, 3.0))


@dataclass
class AuxVarSet:
    """The M auxiliary pseudo-observations of one cluster at one time step."""

    pos: np.ndarray  # (M, 2)
    color_counts: np.ndarray  # (M, V)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(-1, 2)
        self.color_counts = np.asarray(self.color_counts, dtype=np.int64)
        if self.color_counts.shape[0] != self.pos.shape[0]:
            raise ValueError("aux positions and color counts disagree on M")

    @property
    def M(self) -> int:
        return self.pos.shape[0]


@dataclass
class LatentState:
    """Inference output in either the deletion-time or the size formulation.

    ``frames`` holds the 1-based frame of each observation, ``assignments`` its
    cluster label. ``deletion_times`` (1-based) is set by the batch sampler;
    ``sizes`` maps label -> per-frame sizes m_{k,t} (length T, index t-1) and is
    always populated. Parameter timelines are stored per label as arrays
    ``mean (T, 2)``, ``cov (T, 2, 2)``, ``probs (T, V)``; frames where a cluster
    has no parameters hold NaN.
    """

    T: int
    frames: np.ndarray
    assignments: np.ndarray
    sizes: dict[int, np.ndarray]
    means: dict[int, np.ndarray]
    covs: dict[int, np.ndarray]
    probs: dict[int, np.ndarray]
    deletion_times: np.ndarray | None = None
    log_score: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[int]:
        return sorted(self.sizes)

    def K_per_frame(self) -> np.ndarray:
        if not self.sizes:
            return np.zeros(self.T, dtype=int)
        return np.sum([m > 0 for m in self.sizes.values()], axis=0)

    def check_sizes(self) -> bool:
        """True when stored sizes equal the indicator-sum reconstruction."""
        if self.deletion_times is None:
            return True
        for k, m in self.sizes.items():
            for t in range(1, self.T + 1):
                if reconstruct_sizes(self.frames, self.assignments, self.deletion_times, k, t) != m[t - 1]:
                    return False
        return True


def urn_assignment_pmf(sizes, alpha: float) -> np.ndarray:
    """Probabilities of joining each existing cluster, with the "new" cluster last."""
    m = np.asarray(sizes, dtype=float).ravel()
    if np.any(m < 0):
        raise ValueError("cluster sizes must be nonnegative")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    total = m.sum() + alpha
    return np.append(m, alpha) / total


def sample_size_transition(prev_size: int, new_assign_count: int, rho: float, rng) -> int:
    """Draw m_{k,t} = m_{k,t-1} - Binomial(m_{k,t-1}, rho) + new assignments."""
    _check_sizes(prev_size, new_assign_count, rho)
    deleted = rng.binomial(prev_size, rho) if prev_size > 0 else 0
    return int(prev_size - deleted + new_assign_count)


def size_transition_pmf(prev_size: int, new_size: int, new_assign_count: int, rho: float) -> float:
    _check_sizes(prev_size, new_assign_count, rho)
    deleted = prev_size - new_size + new_assign_count
    if deleted < 0 or deleted > prev_size:
        return 0.0
    return float(binom.pmf(deleted, prev_size, rho))


def _check_sizes(prev_size, new_assign_count, rho):
    if prev_size < 0 or new_assign_count < 0:
        raise ValueError("sizes and assignment counts must be nonnegative")
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")


def reconstruct_sizes(frames, assignments, deletion_times, cluster: int, t: int) -> int:
    """m_{k,t}: observations at frames <= t assigned to ``cluster`` and not yet deleted."""
    frames = np.asarray(frames)
    assignments = np.asarray(assignments)
    deletion_times = np.asarray(deletion_times)
    if frames.size == 0:
        return 0
    mask = (frames <= t) & (assignments == cluster) & (t < deletion_times)
    return int(np.count_nonzero(mask))


def sample_lifetime(rho: float, rng, size=None):
    """Geometric lifetime on {0, 1, ...} with P(l) = rho (1 - rho)^l."""
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    # numpy's geometric counts trials (support starts at 1)
    out = rng.geometric(rho, size=size) - 1
    return int(out) if size is None else out


def deletion_time_from_lifetime(t, lifetime):
    return t + lifetime + 1


@dataclass
class ObservationSet:
    """All observations of a video, flattened and ordered by frame.

    ``frames`` holds 1-based frame indices (non-decreasing), ``pos`` normalized
    positions ``(N, 2)``, ``counts`` color counts ``(N, V)``. ``T`` is the
    number of frames, including frames without observations.
    """

    T: int
    frames: np.ndarray
    pos: np.ndarray
    counts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).ravel()
        self.pos = np.asarray(self.pos, dtype=float).reshape(-1, 2)
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            counts = counts.reshape(self.pos.shape[0], -1)
        self.counts = counts
        if self.counts.shape[0] != self.pos.shape[0]:
            raise ValueError("positions and color counts disagree on N")
        if self.frames.size != self.pos.shape[0]:
            raise ValueError("frames and positions disagree on N")
        if self.frames.size and (self.frames.min() < 1 or self.frames.max() > self.T):
            raise ValueError("frame index outside [1, T]")
        if np.any(np.diff(self.frames) < 0):
            raise ValueError("observations must be ordered by frame")
        if np.any(self.counts < 0):
            raise ValueError("color counts must be nonnegative")

    @property
    def N(self) -> int:
        return int(self.frames.size)

    @property
    def V(self) -> int:
        return int(self.counts.shape[1])

    def frame_slices(self) -> list[slice]:
        """Slice of observation indices for each frame (index t-1)."""
        edges = np.searchsorted(self.frames, np.arange(1, self.T + 2))
        return [slice(int(edges[t]), int(edges[t + 1])) for t in range(self.T)]

    def observations(self):
        for i in range(self.N):
            yield Observation(int(self.frames[i]), self.pos[i], self.counts[i])

    @classmethod
    def from_observations(cls, obs, T: int | None = None, meta=None) -> "ObservationSet":
        obs = sorted(obs, key=lambda o: o.frame)
        if T is None:
            T = max((o.frame for o in obs), default=1)
        V = obs[0].color_counts.size if obs else 1
        return cls(
            T,
            np.array([o.frame for o in obs], dtype=np.int64),
            np.array([o.pos for o in obs], dtype=float).reshape(-1, 2),
            np.array([o.color_counts for o in obs], dtype=np.int64).reshape(-1, V),
            dict(meta or {}),
        )
