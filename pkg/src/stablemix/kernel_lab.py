"""Monte-Carlo transition kernels on grids and probes of their regularity.

Total variation between continuous laws is only ever computed between
histograms on a declared common grid; the grid is reported with every number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ModelSpec, norm_eps, simulate_ensemble

DEFAULT_BINS = 64
DEFAULT_SCALES = 8.0


@dataclass(frozen=True)
class Grid:
    """Product of ``bins`` equal cells per retained coordinate, plus one overflow cell.

    Only the first ``m = len(lower)`` coordinates of a state are binned.
    """

    lower: np.ndarray
    upper: np.ndarray
    bins: int

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or not (1 <= lo.size <= 3):
            raise ValueError("grid box must cover 1 to 3 retained coordinates")
        if np.any(hi <= lo):
            raise ValueError("grid box must have positive widths")
        if int(self.bins) < 1:
            raise ValueError("bins must be a positive integer")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "bins", int(self.bins))

    @classmethod
    def symmetric(cls, half_widths, bins: int = DEFAULT_BINS) -> "Grid":
        h = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return cls(-h, h, bins)

    @classmethod
    def default_for(cls, model: ModelSpec, m: Optional[int] = None, bins: int = DEFAULT_BINS,
                    scales: float = DEFAULT_SCALES) -> "Grid":
        """``[-L, L]^m`` with ``L`` = ``scales`` stationary scales per coordinate."""
        m = min(model.K, 2) if m is None else m
        return cls.symmetric(scales * model.stationary_scales()[:m], bins)

    @property
    def m(self) -> int:
        return self.lower.size

    @property
    def n_cells(self) -> int:
        return self.bins**self.m + 1

    @property
    def overflow(self) -> int:
        return self.bins**self.m

    @property
    def widths(self) -> np.ndarray:
        return (self.upper - self.lower) / self.bins

    def cell_index(self, x) -> np.ndarray:
        """Flat cell index of each state (rows of ``x``); outside the box -> overflow."""
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, : self.m]
        z = np.floor((x - self.lower) / self.widths)
        inside = np.all((z >= 0) & (z < self.bins), axis=1)
        z = np.clip(z, 0, self.bins - 1).astype(np.int64)
        idx = np.zeros(len(x), dtype=np.int64)
        for j in range(self.m):
            idx = idx * self.bins + z[:, j]
        return np.where(inside, idx, self.overflow)

    def counts(self, x) -> np.ndarray:
        return np.bincount(self.cell_index(x), minlength=self.n_cells)

    def coarsen(self, factor: int) -> "Grid":
        if self.bins % factor:
            raise ValueError("factor must divide bins")
        return Grid(self.lower, self.upper, self.bins // factor)

    def coarsen_weights(self, w, factor: int) -> np.ndarray:
        """Merge blocks of ``factor`` adjacent cells per axis; overflow is kept."""
        w = np.asarray(w)
        b = self.bins
        inner = w[:-1].reshape((b,) * self.m)
        for ax in range(self.m):
            shape = list(inner.shape)
            shape[ax : ax + 1] = [b // factor, factor]
            inner = inner.reshape(shape).sum(axis=ax + 1)
        return np.concatenate([inner.reshape(-1), w[-1:]])

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "bins": self.bins, "retained": self.m}

    @classmethod
    def from_dict(cls, d) -> "Grid":
        return cls(d["lower"], d["upper"], d["bins"])


@dataclass
class EmpiricalKernel:
    """Normalised histogram of ``sample_count`` endpoints of ``X_T^x``."""

    grid: Grid
    origin: np.ndarray
    horizon: float
    weights: np.ndarray
    sample_count: int
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "origin": np.asarray(self.origin),
            "horizon": float(self.horizon),
            "weights": self.weights,
            "sample_count": int(self.sample_count),
        }


def estimate_kernel(model: ModelSpec, x, T: float, N: int, grid: Grid, rng, workers: int = 1,
                    keep_samples: bool = False) -> EmpiricalKernel:
    """Histogram of ``N`` draws of ``X_T^x`` on ``grid``."""
    if N < 1:
        raise ValueError("N must be positive")
    ends = simulate_ensemble(model, x, T, N, rng, workers=workers)
    counts = grid.counts(ends)
    return EmpiricalKernel(grid, np.asarray(x, dtype=float), T, counts / N, N, ends if keep_samples else None)


def _check_prob(p, name):
    p = np.asarray(p, dtype=float)
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a normalised probability vector")
    return p


def tv_discrete(p, q) -> float:
    """``0.5 * sum |p_i - q_i|`` for probability vectors on a common cell set."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    _check_prob(p, "p")
    _check_prob(q, "q")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def tv_standard_error(p, q, n_p: int, n_q: int) -> float:
    """Sum of per-cell standard errors, halved; bounds ``E|TV_hat - TV|`` to first order."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    return float(0.5 * np.sum(np.sqrt(p * (1 - p) / n_p + q * (1 - q) / n_q)))


# ------------------------------------------------------------------ test functions


class HalfSpaceIndicator:
    """``f(x) = 1{<u, x> > c}``, a bounded test function with a jump."""

    def __init__(self, u, c: float = 0.0):
        self.u, self.c = np.asarray(u, dtype=float), float(c)

    def __call__(self, x):
        return (np.asarray(x) @ self.u > self.c).astype(float)


class CosineTest:
    """``f(x) = cos(lam * x_coord)``."""

    def __init__(self, lam: float, coord: int = 0):
        self.lam, self.coord = float(lam), int(coord)

    def __call__(self, x):
        return np.cos(self.lam * np.asarray(x)[..., self.coord])


class ConstantTest:
    def __init__(self, c: float = 1.0):
        self.c = float(c)

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], self.c)


@dataclass
class GradientEstimate:
    T: float
    ratio: float
    se: float
    flagged: bool


@dataclass
class GradientScan:
    estimates: list
    slope: float
    intercept: float

    def rows(self):
        return [(e.T, e.ratio, e.se, int(e.flagged)) for e in self.estimates]


def _gradient_from(fx, fy, dist, T, crn):
    n = len(fx)
    diff = fx.mean() - fy.mean()
    if crn:
        se = (fx - fy).std(ddof=1) / math.sqrt(n) if n > 1 else math.inf
    else:
        se = math.sqrt(fx.var(ddof=1) / n + fy.var(ddof=1) / n) if n > 1 else math.inf
    ratio = abs(diff) / dist
    se = se / dist
    return GradientEstimate(float(T), float(ratio), float(se), bool(se > ratio))


def gradient_scan(model: ModelSpec, f: Callable, x, y, times: Sequence[float], N: int, rng,
                  crn: bool = True, workers: int = 1) -> GradientScan:
    """``|P_T f(x) - P_T f(y)| / |x - y|`` at each ``T`` with a log-log slope fit.

    With ``crn`` both starts are driven by the same noise (common random numbers).
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    dist = float(np.linalg.norm(x - y))
    if dist == 0:
        raise ValueError("x and y must differ")
    times = sorted(float(t) for t in times)
    if crn:
        paths = simulate_ensemble(model, np.stack([x, y]), times[-1], N, rng, times=times,
                                  workers=workers, common_noise_pair=True)
        ests = [_gradient_from(f(paths[t][0]), f(paths[t][1]), dist, t, True) for t in times]
    else:
        px = simulate_ensemble(model, x, times[-1], N, rng, times=times, workers=workers)
        py = simulate_ensemble(model, y, times[-1], N, rng, times=times, workers=workers)
        ests = [_gradient_from(f(px[t]), f(py[t]), dist, t, False) for t in times]
    good = [e for e in ests if e.ratio > 0 and e.T > 0]
    if len(good) >= 2:
        slope, intercept = np.polyfit(np.log([e.T for e in good]), np.log([e.ratio for e in good]), 1)
    else:
        slope, intercept = math.nan, math.nan
    return GradientScan(ests, float(slope), float(intercept))


def gradient_probe(model: ModelSpec, f: Callable, x, y, T: float, N: int, rng, crn: bool = True,
                   workers: int = 1) -> GradientEstimate:
    """Single-horizon version of :func:`gradient_scan`."""
    return gradient_scan(model, f, x, y, [T], N, rng, crn, workers).estimates[0]


def wilson_interval(hits: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    ph = hits / n
    den = 1 + z * z / n
    centre = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class HitFrequency:
    hits: int
    n: int
    frequency: float
    lower: float
    upper: float


def irreducibility_probe(model: ModelSpec, x, y, r: float, T: float, N: int, rng,
                         workers: int = 1, z: float = 1.959963984540054) -> HitFrequency:
    """Empirical ``P(X_T^x in B(y, r))`` with a Wilson interval."""
    if not r > 0:
        raise ValueError("radius must be positive")
    if N < 1000:
        raise ValueError("N must be at least 1000")
    ends = simulate_ensemble(model, x, T, N, rng, workers=workers)
    hits = int(np.count_nonzero(np.linalg.norm(ends - np.asarray(y, dtype=float), axis=1) <= r))
    lo, hi = wilson_interval(hits, N, z)
    return HitFrequency(hits, N, hits / N, lo, hi)


@dataclass
class MomentEstimate:
    mean: float
    se: float
    n: int


def moment_probe(model: ModelSpec, x, T: float, p: float, e: float, N: int, rng,
                 workers: int = 1) -> MomentEstimate:
    """``E|X_T^x|_e^p`` over ``N`` trajectories, ``0 < p < alpha``."""
    if p >= model.alpha:
        raise ValueError(f"moment may be infinite: p={p} >= alpha={model.alpha}")
    if not p > 0:
        raise ValueError("p must be positive")
    ends = simulate_ensemble(model, x, T, N, rng, workers=workers)
    v = norm_eps(ends, model.generator, e) ** p
    se = float(v.std(ddof=1) / math.sqrt(N)) if N > 1 else math.inf
    return MomentEstimate(float(v.mean()), se, N)
