"""Coupled chains, hitting and coalescence times, and tail-rate fits.

The coupled chain ``(X1(kT), X2(kT))`` moves by one of three branches:

* ``synchronous``  -- the components are equal; one simulation drives both.
* ``maximal``      -- both components lie in the ball ``B(r)``; the two grid
  kernels are maximally coupled, so the components land in the same cell with
  probability ``1 - TV``.  On success both take the same endpoint sample.
* ``independent``  -- otherwise; two independent simulations.

Censored stopping times (not reached within ``max_steps``) are ``math.inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import streams
from .dynamics import ModelSpec, norm_eps, propagate
from .kernel_lab import Grid, moment_probe, tv_discrete

INF = math.inf
BRANCHES = ("synchronous", "maximal", "independent")


# ------------------------------------------------------------- maximal coupling


def maximal_coupling_joint(p, q):
    """Joint law of the maximal coupling of two laws on a common finite cell set.

    ``joint[i, j]`` is ``min(p, q)_i`` on the diagonal plus the product of the
    normalised residuals ``(p - q)^+`` and ``(q - p)^+`` weighted by the total
    variation.  Works with any exact numeric type held in object arrays
    (e.g. ``fractions.Fraction``).
    """
    p, q = np.asarray(p), np.asarray(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be vectors on the same cells")
    overlap = np.minimum(p, q)
    rp, rq = p - overlap, q - overlap
    tv = rp.sum()
    joint = np.diag(overlap)
    if tv != 0:
        joint = joint + np.outer(rp, rq) / tv
    return joint


def maximal_coupling_discrete(p, q, rng: np.random.Generator) -> tuple[int, int, bool]:
    """Draw ``(i, j, coalesced)`` from the maximal coupling of ``p`` and ``q``."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    tv = tv_discrete(p, q)
    overlap = np.minimum(p, q)
    if tv == 0 or rng.random() < 1.0 - tv:
        i = int(rng.choice(len(p), p=overlap / overlap.sum()))
        return i, i, True
    rp, rq = p - overlap, q - overlap
    i = int(rng.choice(len(p), p=rp / rp.sum()))
    j = int(rng.choice(len(q), p=rq / rq.sum()))
    return i, j, False


# ---------------------------------------------------------------- coupled chain


@dataclass
class CoupledChainState:
    x1: np.ndarray
    x2: np.ndarray
    coalesced: bool = False
    k: int = 0

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=float)
        self.x2 = np.asarray(self.x2, dtype=float)
        if self.coalesced and not np.array_equal(self.x1, self.x2):
            raise ValueError("a coalesced state must have identical components")


@dataclass
class CouplingConfig:
    """Parameters of the coupled chain.

    ``T`` is the coupling period, ``r`` the radius of the ball where kernels are
    maximally coupled, ``M`` the ``eps``-norm level defining ``tau_eps``.
    """

    T: float
    r: float
    M: float
    eps: float
    grid: Grid
    N_kernel: int = 2000
    calibration: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.T > 0 and self.r > 0 and self.M > 0):
            raise ValueError("T, r and M must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.N_kernel < 1:
            raise ValueError("N_kernel must be positive")

    def to_dict(self) -> dict:
        return {"T": self.T, "r": self.r, "M": self.M, "eps": self.eps, "grid": self.grid.to_dict(),
                "N_kernel": self.N_kernel, "calibration": self.calibration}


def _kernel_samples(model, x, T, n, grid, rng):
    ends = propagate(model, np.broadcast_to(x, (n, model.K)), T, rng)
    idx = grid.cell_index(ends)
    return ends, idx, np.bincount(idx, minlength=grid.n_cells) / n


def calibrate_radius(model: ModelSpec, T: float, grid: Grid, N_kernel: int, r0: float, rng,
                     n_pairs: int = 8, max_halvings: int = 30) -> tuple[float, list]:
    """Halve ``r`` from ``r0`` until every probe pair in ``B(r)`` has kernel TV <= 1/2.

    Probe pairs include the antipodal pair ``(r e1, -r e1)``; the rest are drawn
    uniformly from the ball.  Returns ``(r, trace)``.
    """
    trace = []
    r = float(r0)
    K = model.K
    for _ in range(max_halvings + 1):
        e1 = np.zeros(K)
        e1[0] = r
        pairs = [(e1, -e1), (e1, np.zeros(K))]
        while len(pairs) < n_pairs:
            pts = []
            for _ in range(2):
                v = rng.standard_normal(K)
                v *= r * rng.random() ** (1.0 / K) / np.linalg.norm(v)
                pts.append(v)
            pairs.append(tuple(pts))
        worst = 0.0
        for a, b in pairs:
            _, _, pa = _kernel_samples(model, a, T, N_kernel, grid, rng)
            _, _, pb = _kernel_samples(model, b, T, N_kernel, grid, rng)
            worst = max(worst, tv_discrete(pa, pb))
        trace.append({"r": r, "max_tv": worst})
        if worst <= 0.5:
            return r, trace
        r /= 2.0
    raise RuntimeError("radius calibration failed to reach max TV <= 1/2")


def coupled_step(s: CoupledChainState, model: ModelSpec, cfg: CouplingConfig, rng) -> tuple[CoupledChainState, str]:
    """One transition of the coupled chain over the period ``cfg.T``."""
    if s.coalesced or np.array_equal(s.x1, s.x2):
        x = propagate(model, s.x1, cfg.T, rng)[0]
        return CoupledChainState(x, x.copy(), True, s.k + 1), "synchronous"
    n1 = float(np.linalg.norm(s.x1))
    n2 = float(np.linalg.norm(s.x2))
    if n1 <= cfg.r and n2 <= cfg.r:
        e1, i1, p1 = _kernel_samples(model, s.x1, cfg.T, cfg.N_kernel, cfg.grid, rng)
        e2, i2, p2 = _kernel_samples(model, s.x2, cfg.T, cfg.N_kernel, cfg.grid, rng)
        i, j, hit = maximal_coupling_discrete(p1, p2, rng)
        y1 = e1[rng.choice(np.flatnonzero(i1 == i))]
        if hit:
            return CoupledChainState(y1, y1.copy(), True, s.k + 1), "maximal"
        y2 = e2[rng.choice(np.flatnonzero(i2 == j))]
        return CoupledChainState(y1, y2, False, s.k + 1), "maximal"
    y1 = propagate(model, s.x1, cfg.T, rng)[0]
    y2 = propagate(model, s.x2, cfg.T, rng)[0]
    return CoupledChainState(y1, y2, False, s.k + 1), "independent"


@dataclass
class CoupledRun:
    states: list
    tau_eps: float
    tau: float
    rho: float
    branches: list

    def branch_histogram(self) -> dict:
        return {b: self.branches.count(b) for b in BRANCHES}

    def to_record(self, calibration: Optional[dict] = None) -> dict:
        rec = {"tau_eps": self.tau_eps, "tau": self.tau, "rho": self.rho,
               "steps": len(self.branches), "branches": self.branch_histogram()}
        if calibration is not None:
            rec["calibration"] = calibration
        return rec


def _hit_times(s, model, cfg, k, times):
    tau_eps, tau, rho = times
    if tau_eps == INF:
        e = cfg.eps if model.is_diagonal else 0.0
        if norm_eps(s.x1, model.generator, e) + norm_eps(s.x2, model.generator, e) <= cfg.M:
            tau_eps = k
    if tau == INF and np.linalg.norm(s.x1) + np.linalg.norm(s.x2) <= cfg.r:
        tau = k
    if rho == INF and (s.coalesced or np.array_equal(s.x1, s.x2)):
        rho = k
    return tau_eps, tau, rho


def run_coupled(x1, x2, model: ModelSpec, cfg: CouplingConfig, max_steps: int, rng,
                keep_states: bool = True) -> CoupledRun:
    """Run the coupled chain until all three stopping times are seen or ``max_steps``."""
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    s = CoupledChainState(x1, x2, np.array_equal(np.asarray(x1), np.asarray(x2)), 0)
    times = _hit_times(s, model, cfg, 0, (INF, INF, INF))
    states = [s] if keep_states else []
    branches = []
    for k in range(1, max_steps + 1):
        if all(t != INF for t in times):
            break
        s, b = coupled_step(s, model, cfg, rng)
        branches.append(b)
        if keep_states:
            states.append(s)
        times = _hit_times(s, model, cfg, k, times)
    return CoupledRun(states, *times, branches)


def _run_one(rng, i, x1, x2, model, cfg, max_steps, keep_states):
    return run_coupled(x1, x2, model, cfg, max_steps, rng, keep_states)


def run_coupled_ensemble(x1, x2, model: ModelSpec, cfg: CouplingConfig, max_steps: int, n_runs: int,
                         rng, workers: int = 1, keep_states: bool = False) -> list[CoupledRun]:
    """``n_runs`` independent coupled runs, run ``i`` on stream ``split(root, i)``."""
    root = streams.root_from(rng)
    return streams.map_streams(_run_one, n_runs, root, (x1, x2, model, cfg, max_steps, keep_states), workers)


# ----------------------------------------------------------------- tail fits


def survival(times: Sequence[float], k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """``P_hat(tau > k)`` and its binomial standard error for ``k = 0..k_max``."""
    t = np.asarray(times, dtype=float)
    n = t.size
    ks = np.arange(k_max + 1)
    S = np.array([(t > k).sum() / n for k in ks])
    return S, np.sqrt(S * (1 - S) / n)


@dataclass
class ExpMomentFit:
    eta_hat: float
    C_hat: float
    r_squared: float
    n_points: int
    degenerate: bool
    exp_moment: float
    ks: list
    survival: list


def exp_moment_fit(times: Sequence[float], T: float, censor_at: Optional[int] = None,
                   min_finite: int = 100) -> ExpMomentFit:
    """Fit ``log P_hat(tau > kT) ~ log C - eta k T`` over the range ``P_hat >= 10/n``.

    ``times`` are step counts ``k`` (``inf`` for censored runs).  The survival
    curve is only used below the censoring step.  ``exp_moment`` is the plug-in
    mean of ``exp(eta_hat tau / 2)`` with censored runs evaluated at the
    censoring time (a lower bound).
    """
    t = np.asarray(times, dtype=float)
    finite = t[np.isfinite(t)]
    if finite.size < min_finite:
        raise ValueError(f"insufficient tail data: {finite.size} finite samples (need {min_finite})")
    n = t.size
    if censor_at is None:
        censor_at = int(finite.max()) + 1
    S, _ = survival(t, censor_at - 1)
    ks = np.arange(S.size)
    use = S >= 10.0 / n
    x, y = ks[use] * T, np.log(S[use])
    degenerate = use.sum() < 3 or np.unique(y).size < 3
    if use.sum() >= 2 and np.ptp(x) > 0:
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        ss = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 0.0
    else:
        slope, intercept, r2 = 0.0, 0.0, 0.0
    eta = -float(slope)
    if eta <= 0:
        degenerate = True
    tt = np.where(np.isfinite(t), t, censor_at) * T
    em = float(np.mean(np.exp(0.5 * max(eta, 0.0) * tt)))
    return ExpMomentFit(eta, float(math.exp(intercept)), float(r2), int(use.sum()), bool(degenerate), em,
                        ks.tolist(), S.tolist())


# ------------------------------------------------------------ drift recursion


def minimal_M(q: float, C2: float, p: float) -> float:
    """Smallest ``M`` with ``q^2 + 2 C2 / M^p <= q``."""
    return (2.0 * C2 / (q - q * q)) ** (1.0 / p)


def _round_up(x: Fraction) -> float:
    f = float(x)
    return f if Fraction(f) >= x else math.nextafter(f, math.inf)


def _power_lower(M: float, p: float) -> Fraction:
    """A rational lower bound for ``M^p`` (exact for integral ``p``)."""
    if float(p).is_integer():
        return Fraction(M) ** int(p)
    # libm pow is within one ulp, so the next float down is below the true power
    return Fraction(math.nextafter(M**p, 0.0))


def drift_recursion_bound(q: float, C2: float, M: float, p: float, e0: float, p0: float,
                          k_max: int) -> list[tuple[float, float]]:
    """Upper bounds ``(e_k, p_k)`` from the two-term drift recursion.

    ``e_{k+1} = q^2 e_k + 2 C2 p_k`` and ``p_{k+1} = e_{k+1} / M^p`` (Chebyshev),
    where ``p_k`` bounds ``P(tau_eps > kT)`` and ``e_k`` the truncated moment.
    Each step is evaluated in exact rational arithmetic on the float inputs and
    rounded up, so the returned floats are guaranteed upper bounds.  ``M`` is
    admissible when ``q^2 + 2 C2 / M^p <= q`` holds with ``M^p`` bounded from
    below; then ``q^2 e_k + 2 C2 p_k`` contracts by ``q`` per step.
    """
    if not (0 < q < 1):
        raise ValueError("q must lie in (0, 1)")
    if not C2 > 1:
        raise ValueError("C2 must exceed 1")
    if not (M > 0 and p > 0):
        raise ValueError("M and p must be positive")
    fq, fc = Fraction(q), Fraction(C2)
    mp = _power_lower(M, p)
    if fq * fq + 2 * fc / mp > fq:
        raise ValueError(f"inadmissible M={M}: need q^2 + 2*C2/M^p <= q, i.e. M >= {minimal_M(q, C2, p)!r}")
    out = [(float(e0), float(p0))]
    e, pk = float(e0), float(p0)
    for _ in range(k_max):
        e = _round_up(fq * fq * Fraction(e) + 2 * fc * Fraction(pk))
        pk = _round_up(Fraction(e) / mp)
        out.append((e, pk))
    return out


def hitting_tail_bound(q: float, k, x1, x2, p: float, e: float, model: ModelSpec):
    """``q^k (1 + |x1|_e^p + |x2|_e^p)``."""
    g = model.generator
    base = 1.0 + norm_eps(x1, g, e) ** p + norm_eps(x2, g, e) ** p
    return q ** np.asarray(k, dtype=float) * base


def estimate_C2(model: ModelSpec, T: float, p: float, e: float, probe_points, N: int, rng,
                workers: int = 1) -> tuple[float, list]:
    """Measured offset of the one-period moment bound.

    Returns ``max(1 + 1e-9, max_x (E|X_T^x|_e^p - exp(-p gamma_1 T) |x|_e^p + 3 SE))``
    over the probe points, and the per-point rows ``(|x|_e^p, mean, se)``.
    """
    g = model.generator
    e = e if model.is_diagonal else 0.0
    contraction = math.exp(-p * model.gamma1 * T)
    worst, rows = -math.inf, []
    for x in np.atleast_2d(np.asarray(probe_points, dtype=float)):
        est = moment_probe(model, x, T, p, e, N, rng, workers)
        v0 = float(norm_eps(x, g, e)) ** p
        rows.append((v0, est.mean, est.se))
        worst = max(worst, est.mean - contraction * v0 + 3 * est.se)
    return max(1.0 + 1e-9, worst), rows


def configure_coupling(model: ModelSpec, T: float, grid: Grid, rng, p: Optional[float] = None,
                       eps: float = 0.0, N_kernel: int = 2000, r0: Optional[float] = None,
                       probe_points=None, N_probe: int = 10_000, workers: int = 1) -> CouplingConfig:
    """Build a :class:`CouplingConfig`: calibrated ``r`` and ``M = minimal_M(q, C2, p)``.

    ``q`` is ``exp(-p gamma_1 T / 2)`` and ``C2`` comes from :func:`estimate_C2`.
    """
    p = model.alpha / 2.0 if p is None else p
    r0 = 4.0 * model.stationary_scale() if r0 is None else r0
    r, trace = calibrate_radius(model, T, grid, N_kernel, r0, rng)
    if probe_points is None:
        s = model.stationary_scale()
        probe_points = np.zeros((5, model.K))
        probe_points[:, 0] = s * np.array([0.0, 1.0, 4.0, 16.0, 64.0])
    C2, rows = estimate_C2(model, T, p, eps, probe_points, N_probe, rng, workers)
    q = math.exp(-0.5 * p * model.gamma1 * T)
    M = minimal_M(q, C2, p)
    calib = [{"stage": "radius", **row} for row in trace]
    calib.append({"stage": "drift", "p": p, "q": q, "C2": C2, "M": M,
                  "probe": [list(r) for r in rows]})
    return CouplingConfig(T, r, M, eps, grid, N_kernel, calib)
