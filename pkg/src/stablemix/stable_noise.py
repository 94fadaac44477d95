"""Exact samplers for symmetric alpha-stable noise.

Conventions
-----------
A standard symmetric alpha-stable variable ``xi`` has characteristic function
``E exp(i lam xi) = exp(-|lam|**alpha)``.  A multivariate increment over a time
``dt`` driven by an atomic spectral measure ``{(a_j, w_j)}`` has characteristic
exponent ``dt * sum_j w_j |<u, a_j>|**alpha`` (the normalising constant in front
of the exponent is fixed to 1 and absorbed in the weights).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

OVERFLOW_LIMIT = 1e12

_resampled = 0


def resample_count() -> int:
    """Number of draws rejected by the overflow guard in this process."""
    return _resampled


def add_resampled(k: int) -> None:
    """Fold in counts tallied by other processes."""
    global _resampled
    _resampled += int(k)


def reset_resample_count() -> None:
    global _resampled
    _resampled = 0


def validate_alpha(alpha: float, finite_dim: bool = False) -> float:
    """Check a stability index; ``finite_dim`` additionally demands ``1 < alpha``."""
    alpha = float(alpha)
    if not (0.0 < alpha < 2.0) or math.isnan(alpha):
        raise ValueError(f"stable index out of range: alpha={alpha} (need 0 < alpha < 2)")
    if finite_dim and alpha <= 1.0:
        raise ValueError(
            f"stable index out of range for finite-dimensional SDE: alpha={alpha} (need 1 < alpha < 2)"
        )
    return alpha


def _cms(alpha: float, rng: np.random.Generator, n: int) -> np.ndarray:
    u = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, n)
    if alpha == 1.0:
        return np.tan(u)
    w = rng.standard_exponential(n)
    return (
        np.sin(alpha * u)
        / np.cos(u) ** (1.0 / alpha)
        * (np.cos((1.0 - alpha) * u) / w) ** ((1.0 - alpha) / alpha)
    )


def sample_standard_stable(alpha: float, rng: np.random.Generator, size=None):
    """Draw standard symmetric alpha-stable variates (Chambers-Mallows-Stuck).

    Parameters
    ----------
    alpha : float
        Stability index in (0, 2).
    rng : numpy.random.Generator
        Random stream.
    size : int or tuple, optional
        Output shape; ``None`` returns a float.

    Draws with magnitude above ``OVERFLOW_LIMIT`` are redrawn and tallied in
    :func:`resample_count`.
    """
    global _resampled
    alpha = validate_alpha(alpha)
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(shape, dtype=np.int64))
    out = _cms(alpha, rng, n)
    bad = ~(np.abs(out) <= OVERFLOW_LIMIT)
    while bad.any():
        k = int(bad.sum())
        _resampled += k
        out[bad] = _cms(alpha, rng, k)
        bad = ~(np.abs(out) <= OVERFLOW_LIMIT)
    if size is None:
        return float(out[0])
    return out.reshape(shape)


def stable_abs_moment(alpha: float, p: float) -> float:
    """Closed-form ``E|xi|**p`` of a standard symmetric stable variable, ``p < alpha``."""
    alpha = validate_alpha(alpha)
    if not (0.0 <= p < alpha):
        raise ValueError(f"moment may be infinite: p={p} >= alpha={alpha}")
    return float(
        2.0**p
        * special.gamma((1.0 + p) / 2.0)
        * special.gamma(1.0 - p / alpha)
        / (math.sqrt(math.pi) * special.gamma(1.0 - p / 2.0))
    )


@dataclass(frozen=True)
class SpectralMeasure:
    """Symmetric atomic measure on the unit sphere of R^n.

    Missing mirror atoms ``(-a, w)`` are added on construction.  The directions
    must span R^n, which is exactly the non-degeneracy of the resulting noise.
    """

    directions: np.ndarray
    weights: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if d.shape[0] != w.shape[0]:
            raise ValueError("directions and weights differ in length")
        if d.shape[0] == 0:
            raise ValueError("spectral measure needs at least one atom")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("atom weights must be positive and finite")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("atom directions must be unit vectors (tolerance 1e-12)")
        dirs, wts = _symmetrize(d, w)
        n = d.shape[1]
        if np.linalg.matrix_rank(dirs, tol=1e-10) < n:
            raise ValueError("degenerate spectral measure: directions do not span R^n")
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "weights", wts)
        object.__setattr__(self, "dim", n)

    @classmethod
    def from_atoms(cls, atoms) -> "SpectralMeasure":
        """Build from an iterable of ``(direction, weight)`` pairs."""
        atoms = list(atoms)
        return cls(np.array([a for a, _ in atoms], dtype=float), np.array([w for _, w in atoms], dtype=float))

    @classmethod
    def axes(cls, n: int, weight: float = 0.5) -> "SpectralMeasure":
        """Independent coordinates: atoms ``(+-e_i, weight)``."""
        return cls(np.eye(n), np.full(n, weight))

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def psi(self, u, alpha: float) -> np.ndarray:
        """Characteristic exponent ``sum_j w_j |<u, a_j>|**alpha``."""
        u = np.asarray(u, dtype=float)
        return np.abs(u @ self.directions.T) ** alpha @ self.weights

    def nondegeneracy_constant(self, alpha: float) -> float:
        """Largest ``C`` with ``psi(u) >= C |u|**alpha``, i.e. min of psi on the sphere."""
        alpha = validate_alpha(alpha)
        n = self.dim
        if n == 1:
            return self.total_mass
        if n == 2:
            th = np.linspace(0.0, np.pi, 20001)
            vals = self.psi(np.column_stack([np.cos(th), np.sin(th)]), alpha)
            i = int(np.argmin(vals))
            res = optimize.minimize_scalar(
                lambda t: float(self.psi(np.array([math.cos(t), math.sin(t)]), alpha)),
                bounds=(th[max(i - 1, 0)], th[min(i + 1, len(th) - 1)]),
                method="bounded",
            )
            return float(min(res.fun, vals[i]))
        rng = np.random.default_rng(0)
        u = rng.standard_normal((20000, n))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        vals = self.psi(u, alpha)
        best = float(vals.min())
        for start in u[np.argsort(vals)[:8]]:
            res = optimize.minimize(
                lambda v: float(self.psi(v / np.linalg.norm(v), alpha)), start, method="Nelder-Mead"
            )
            best = min(best, float(res.fun))
        return best


def _symmetrize(d: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dirs = [row for row in d]
    wts = list(w)
    for a, wa in zip(d, w):
        matches = [j for j, b in enumerate(dirs) if np.allclose(b, -a, atol=1e-12)]
        if not matches:
            dirs.append(-a)
            wts.append(wa)
        elif not any(math.isclose(wts[j], wa, rel_tol=1e-12) for j in matches):
            raise ValueError("mirror atoms must carry equal weights")
    return np.array(dirs), np.array(wts)


def sample_spectral_increment(
    mu: SpectralMeasure, alpha: float, dt: float, rng: np.random.Generator, size=None
) -> np.ndarray:
    """Noise increment over ``dt``: ``sum_j (dt w_j)**(1/alpha) xi_j a_j``.

    Returns shape ``(n,)`` or ``(size, n)``.
    """
    alpha = validate_alpha(alpha)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    sig = (dt * mu.weights) ** (1.0 / alpha)
    m = len(sig)
    if size is None:
        xi = sample_standard_stable(alpha, rng, m)
        return (sig * xi) @ mu.directions
    xi = sample_standard_stable(alpha, rng, (int(size), m))
    return (xi * sig) @ mu.directions


def ou_scale(gamma, beta, alpha: float, t):
    """Scale of the one-mode stochastic convolution at time ``t``.

    ``beta * ((1 - exp(-alpha gamma t)) / (alpha gamma))**(1/alpha)``; vectorises
    over ``gamma`` and ``beta``; ``t = inf`` gives the stationary scale.
    """
    alpha = validate_alpha(alpha)
    gamma = np.asarray(gamma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(gamma <= 0) or np.any(beta <= 0):
        raise ValueError("gamma and beta must be positive")
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    frac = -np.expm1(-alpha * gamma * t) / (alpha * gamma)
    out = beta * frac ** (1.0 / alpha)
    return float(out) if out.ndim == 0 else out


def sample_ou_marginal(gamma: float, beta: float, alpha: float, t: float, rng, size=None):
    """Exact draw of ``int_0^t exp(-gamma (t-s)) beta dz_s``."""
    c = ou_scale(gamma, beta, alpha, t)
    if t == 0:
        return 0.0 if size is None else np.zeros(size)
    return c * sample_standard_stable(alpha, rng, size)


def empirical_cf(samples: np.ndarray, lams) -> np.ndarray:
    """Real part of the empirical characteristic function at each ``lam``."""
    samples = np.asarray(samples, dtype=float)
    return np.array([np.cos(lam * samples).mean() for lam in np.atleast_1d(lams)])


def noise_selftest(alpha: float, lams, n: int, rng: np.random.Generator) -> list[tuple[float, float, float]]:
    """Rows ``(lam, empirical CF, exp(-|lam|**alpha))`` from ``n`` standard draws."""
    xs = sample_standard_stable(alpha, rng, n)
    emp = empirical_cf(xs, lams)
    return [(float(l), float(e), math.exp(-abs(l) ** alpha)) for l, e in zip(np.atleast_1d(lams), emp)]
