"""Numerical certification of the drift and minorization conditions, and
exponential-mixing fits of total variation between evolved laws."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ModelSpec, norm_eps, simulate_ensemble
from .kernel_lab import Grid, tv_discrete, tv_standard_error

VERDICTS = ("certified", "failed", "inconclusive")


def drift_constant(p: float) -> float:
    """Prefactor of the contracting term in the moment bound: 1 for p <= 1, else 3^(p-1)."""
    return 1.0 if p <= 1 else 3.0 ** (p - 1.0)


def default_T0(model: ModelSpec, p: float) -> float:
    """Smallest multiple of ``dt`` above ``log(2 (1 + C1)) / (p gamma_1)``.

    With ``C1 = 1`` this is ``ln 4 / (p gamma_1)``: the contracting factor
    ``C1 exp(-p gamma_1 T0)`` is then at most 1/4.
    """
    t = math.log(2.0 * (1.0 + drift_constant(p))) / (p * model.gamma1)
    return math.ceil(t / model.dt - 1e-9) * model.dt


def default_probe_points(model: ModelSpec, p: float, n: int = 8, spread: float = 100.0) -> np.ndarray:
    """``n`` points along the slowest mode with ``|x|^p`` spanning ``spread``."""
    s = model.stationary_scale()
    radii = s * np.geomspace(1.0, spread ** (1.0 / p), n)
    pts = np.zeros((n, model.K))
    pts[:, 0] = radii
    return pts


@dataclass
class LyapunovFit:
    gamma_hat: float
    K_hat: float
    gamma_se: float
    K_se: float
    V_probe: list
    means: list
    ses: list


def _linfit(x, y, se):
    x, y, se = map(np.asarray, (x, y, se))
    X = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    XtX_inv = np.linalg.inv(X.T @ X)
    dof = max(len(x) - 2, 1)
    cov_res = XtX_inv * float(resid @ resid) / dof
    # propagate the per-point Monte-Carlo errors through the OLS estimator
    H = XtX_inv @ X.T
    cov_mc = H @ np.diag(se**2) @ H.T
    cov = np.maximum(cov_res, cov_mc)
    return coef, np.sqrt(np.diag(cov))


def lyapunov_check(model: ModelSpec, p: float, T0: float, probe_points, N: int, rng,
                   workers: int = 1) -> LyapunovFit:
    """Fit ``E_x |X_T0|^p ~ gamma |x|^p + K`` over the probe points (least squares)."""
    if not (0 < p < model.alpha):
        raise ValueError(f"moment may be infinite: need 0 < p < alpha={model.alpha}, got p={p}")
    pts = np.atleast_2d(np.asarray(probe_points, dtype=float))
    V = np.linalg.norm(pts, axis=1) ** p
    if V.max() < 10 * V.min() or len(pts) < 3:
        raise ValueError("insufficient probe spread: need at least 3 points with max/min |x|^p >= 10")
    means, ses = [], []
    for x in pts:
        if model.n_steps(T0) == 0:
            means.append(float(np.linalg.norm(x) ** p))
            ses.append(0.0)
            continue
        v = np.linalg.norm(simulate_ensemble(model, x, T0, N, rng, workers=workers), axis=1) ** p
        means.append(float(v.mean()))
        ses.append(float(v.std(ddof=1) / math.sqrt(N)))
    (g, k), (gse, kse) = _linfit(V, means, ses)
    return LyapunovFit(float(g), float(k), float(gse), float(kse), V.tolist(), means, ses)


@dataclass
class MinorizationResult:
    delta_hat: float
    se: float
    horizon: float
    worst_pair: tuple
    n_pairs: int
    grid: Grid
    verdict: str

    def to_dict(self) -> dict:
        return {"delta_hat": self.delta_hat, "se": self.se, "horizon": self.horizon,
                "worst_pair": [np.asarray(v) for v in self.worst_pair], "n_pairs": self.n_pairs,
                "grid": self.grid.to_dict(), "verdict": self.verdict}


def level_set_pairs(model: ModelSpec, R: float, p: float, n_pairs: int, rng) -> list:
    """Pairs with ``|x|^p + |y|^p <= R``; the antipodal extreme along the slowest mode comes first."""
    K = model.K
    a = (R / 2.0) ** (1.0 / p)
    e1 = np.zeros(K)
    e1[0] = a
    pairs = [(e1, -e1)]
    while len(pairs) < n_pairs:
        share = rng.random()
        pts = []
        for budget in (share * R, (1 - share) * R):
            v = rng.standard_normal(K)
            v *= budget ** (1.0 / p) / np.linalg.norm(v)
            pts.append(v)
        pairs.append(tuple(pts))
    return pairs


def _overlap(model, pairs, T, N, grid, rng, workers):
    cache = {}

    def kernel(x):
        key = np.asarray(x, dtype=float).tobytes()
        if key not in cache:
            ends = simulate_ensemble(model, x, T, N, rng, workers=workers)
            cache[key] = grid.counts(ends) / N
        return cache[key]

    worst, worst_pair, worst_se = -1.0, None, 0.0
    for x, y in pairs:
        px, py = kernel(x), kernel(y)
        tv = tv_discrete(px, py)
        if tv > worst:
            se = 0.0 if np.array_equal(x, y) else tv_standard_error(px, py, N, N)
            worst, worst_pair, worst_se = tv, (x, y), se
    return 1.0 - worst, worst_se, worst_pair


def minorization_check(model: ModelSpec, T0: float, R: float, n_pairs: int, N: int, grid: Grid, rng,
                       p: Optional[float] = None, pairs=None, workers: int = 1,
                       escalate: bool = True) -> MinorizationResult:
    """``delta_hat = 1 - max_pairs TV(P_T0(x, .), P_T0(y, .))`` on ``grid``.

    When ``delta_hat - 3 SE <= 0`` at ``T0`` and ``escalate`` is set, the check is
    repeated at ``3 T0``.  A nonpositive overlap is reported as inconclusive
    because grid TV only bounds the true TV from below.
    """
    p = model.alpha / 2.0 if p is None else p
    if pairs is None:
        pairs = level_set_pairs(model, R, p, n_pairs, rng)
    horizons = [T0, 3 * T0] if escalate else [T0]
    for T in horizons:
        T = model.n_steps(T) * model.dt
        d, se, wp = _overlap(model, pairs, T, N, grid, rng, workers)
        if d - 3 * se > 0:
            return MinorizationResult(d, se, T, wp, len(pairs), grid, "certified")
    return MinorizationResult(d, se, T, wp, len(pairs), grid, "inconclusive at this grid")


@dataclass
class InvariantMoment:
    m_p_hat: float
    checkpoints: dict
    rel_change: float
    stabilized: bool
    verdict: str


def invariant_moment(model: ModelSpec, p: float, burn_in: float, n_samples: int, rng,
                     e: float = 0.0, chunk: int = 4096) -> InvariantMoment:
    """Time average of ``|X_t|_e^p`` along one long trajectory after ``burn_in``.

    ``burn_in`` is rounded up to a whole number of steps; ``n_samples`` counts
    consecutive steps after it.
    """
    if p >= model.alpha:
        raise ValueError(f"moment may be infinite: p={p} >= alpha={model.alpha}")
    if p == 0:
        return InvariantMoment(1.0, {}, 0.0, True, "exact")
    if burn_in < 10.0 / model.gamma1 - 1e-12:
        raise ValueError(f"burn_in must be at least 10 contraction times (10/gamma_1 = {10 / model.gamma1:.6g})")
    n_burn = math.ceil(burn_in / model.dt - 1e-9)
    total = n_burn + n_samples
    x = np.zeros((1, model.K))
    vals = np.empty(n_samples)
    done = 0
    while done < total:
        m = min(chunk, total - done)
        dz = model.noise_increments(rng, m)
        for i in range(m):
            x = model.advance(x, dz[i : i + 1])
            j = done + i - n_burn
            if j >= 0:
                vals[j] = norm_eps(x[0], model.generator, e) ** p
        if not np.all(np.isfinite(x)):
            from .errors import NumericalError

            raise NumericalError("non-finite state", step=done + m)
        done += m
    cps = {n_samples // 4: float(vals[: n_samples // 4].mean()),
           n_samples // 2: float(vals[: n_samples // 2].mean()),
           n_samples: float(vals.mean())}
    seq = list(cps.values())
    rel = max(abs(seq[1] - seq[0]), abs(seq[2] - seq[1])) / abs(seq[2])
    ok = rel < 0.1
    return InvariantMoment(seq[2], cps, float(rel), ok, "stabilized" if ok else "not stabilized")


# ------------------------------------------------------------------ mixing


class PointMass:
    def __init__(self, x):
        self.x = np.asarray(x, dtype=float)

    def __call__(self, rng, n):
        return np.broadcast_to(self.x, (n, self.x.size)).copy()


@dataclass
class MixingFit:
    times: list
    tv_values: list
    se_values: list
    floor_values: list
    fit_mask: list
    C_hat: float
    c_hat: float
    r_squared: float
    verdict: str
    grid: Optional[Grid] = field(default=None, repr=False)

    def rows(self):
        return list(zip(self.times, self.tv_values, self.se_values))

    def to_dict(self) -> dict:
        return {"times": self.times, "tv_values": self.tv_values, "se_values": self.se_values,
                "floor_values": self.floor_values, "fit_mask": self.fit_mask, "C_hat": self.C_hat,
                "c_hat": self.c_hat, "r_squared": self.r_squared, "verdict": self.verdict,
                "grid": self.grid.to_dict() if self.grid is not None else None}


def noise_floor(pbar, N: int) -> float:
    """Expected grid TV between two independent ``N``-sample histograms of ``pbar``."""
    pbar = np.asarray(pbar, dtype=float)
    return float(np.sum(np.sqrt(pbar * (1 - pbar) / (math.pi * N))))


def mixing_fit(model: ModelSpec, nu1_sampler: Callable, nu2_sampler: Callable, times: Sequence[float], N: int,
               grid: Grid, period: float, rng, workers: int = 1, upper: float = 0.9) -> MixingFit:
    """TV between the two evolved empirical laws at each time, with a log-linear fit.

    The fit uses the points with ``10 * floor <= TV <= upper``, where ``floor`` is
    :func:`noise_floor` of the pooled histogram (so the lower limit is
    ``10 / sqrt(N)`` times the grid factor ``sum sqrt(p(1-p)/pi)``), weighted by
    ``TV / SE``.  Returns ``TV ~ C_hat exp(-c_hat t)``.
    """
    times = [float(t) for t in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be increasing")
    for t in times:
        k = round(t / period)
        if abs(k * period - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a multiple of the period {period}")
    x1 = nu1_sampler(rng, N)
    x2 = nu2_sampler(rng, N)
    e1 = simulate_ensemble(model, x1, times[-1], N, rng, times=times, workers=workers)
    e2 = simulate_ensemble(model, x2, times[-1], N, rng, times=times, workers=workers)
    tvs, ses, floors = [], [], []
    for t in times:
        p1, p2 = grid.counts(e1[t]) / N, grid.counts(e2[t]) / N
        tvs.append(tv_discrete(p1, p2))
        ses.append(tv_standard_error(p1, p2, N, N))
        floors.append(noise_floor(0.5 * (p1 + p2), N))
    tv, se, fl = np.array(tvs), np.array(ses), np.array(floors)
    mask = (tv >= 10 * fl) & (tv <= upper)
    if not np.any(tv >= 10 * fl):
        verdict = "already mixed; increase initial separation"
        return MixingFit(times, tvs, ses, floors, mask.tolist(), math.nan, math.nan, math.nan, verdict, grid)
    if mask.sum() < 3:
        return MixingFit(times, tvs, ses, floors, mask.tolist(), math.nan, math.nan, math.nan,
                         "too few points in the fit range", grid)
    t_arr = np.array(times)[mask]
    y = np.log(tv[mask])
    w = tv[mask] / np.maximum(se[mask], 1e-300)
    slope, intercept = np.polyfit(t_arr, y, 1, w=w)
    pred = slope * t_arr + intercept
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 0.0
    c = -float(slope)
    return MixingFit(times, tvs, ses, floors, mask.tolist(), float(math.exp(intercept)), c, float(r2),
                     "decaying" if c > 0 else "not decaying", grid)


# ------------------------------------------------------------------ report


@dataclass
class HarrisReport:
    T0: float
    p: float
    gamma_hat: float
    gamma_se: float
    K_hat: float
    K_se: float
    R_levels: list
    delta_hat: dict
    delta_se: dict
    delta_horizon: dict
    n_pairs: int
    grid: Grid
    verdict: str
    detail: dict

    def to_dict(self) -> dict:
        return {"T0": self.T0, "p": self.p, "gamma_hat": self.gamma_hat, "gamma_se": self.gamma_se,
                "K_hat": self.K_hat, "K_se": self.K_se, "R_levels": self.R_levels,
                "delta_hat": {str(k): v for k, v in self.delta_hat.items()},
                "delta_se": {str(k): v for k, v in self.delta_se.items()},
                "delta_horizon": {str(k): v for k, v in self.delta_horizon.items()},
                "n_pairs": self.n_pairs, "grid": self.grid.to_dict(), "verdict": self.verdict,
                "detail": self.detail}


def harris_report(model: ModelSpec, p: Optional[float] = None, T0: Optional[float] = None,
                  R_levels: Sequence[float] = (4.0,), probe_points=None, N: int = 10_000,
                  n_pairs: int = 32, N_kernel: int = 100_000, grid: Optional[Grid] = None, rng=None,
                  workers: int = 1) -> HarrisReport:
    """Run both checks and combine them into a verdict.

    ``certified`` needs ``gamma_hat + 3 SE < 1`` and ``delta_hat(R) - 3 SE > 0``
    for every level; ``failed`` means ``gamma_hat - 3 SE >= 1``; anything else is
    ``inconclusive``.
    """
    rng = np.random.default_rng() if rng is None else rng
    p = model.alpha / 2.0 if p is None else p
    T0 = default_T0(model, p) if T0 is None else T0
    grid = Grid.default_for(model) if grid is None else grid
    pts = default_probe_points(model, p) if probe_points is None else probe_points
    lyap = lyapunov_check(model, p, T0, pts, N, rng, workers)
    dh, ds, dhz, dv = {}, {}, {}, {}
    for R in R_levels:
        res = minorization_check(model, T0, R, n_pairs, N_kernel, grid, rng, p=p, workers=workers)
        dh[R], ds[R], dhz[R], dv[R] = res.delta_hat, res.se, res.horizon, res.verdict
    drift_ok = lyap.gamma_hat + 3 * lyap.gamma_se < 1
    minor_ok = all(dh[R] - 3 * ds[R] > 0 for R in R_levels)
    if drift_ok and minor_ok:
        verdict = "certified"
    elif lyap.gamma_hat - 3 * lyap.gamma_se >= 1:
        verdict = "failed"
    else:
        verdict = "inconclusive"
    detail = {"drift": "pass" if drift_ok else "fail",
              "minorization": {str(R): dv[R] for R in R_levels},
              "lyapunov_probe": {"V": lyap.V_probe, "mean": lyap.means, "se": lyap.ses}}
    return HarrisReport(T0, p, lyap.gamma_hat, lyap.gamma_se, lyap.K_hat, lyap.K_se, list(R_levels), dh, ds,
                        dhz, n_pairs, grid, verdict, detail)
