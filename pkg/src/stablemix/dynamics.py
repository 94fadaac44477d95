"""Models and time stepping for ``dX = (A X + F(X)) dt + dZ``.

Two generator kinds are supported: a stable ``n x n`` matrix (finite-dimensional
SDE) and a diagonal operator ``-diag(gamma_k)`` on the first ``K`` eigenmodes
(Galerkin truncation of the SPDE).  The state space is always ``R^K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np
from scipy import integrate, linalg

from . import streams
from .errors import NumericalError
from .io import write_csv
from .stable_noise import (
    SpectralMeasure,
    add_resampled,
    ou_scale,
    resample_count,
    sample_standard_stable,
    validate_alpha,
)

DEFAULT_DT = 1e-2
DEFAULT_MODES = 64
TIME_TOL = 1e-12


# --------------------------------------------------------------------- generators


@dataclass(frozen=True)
class DiagonalGenerator:
    """Diagonal drift operator with cylindrical noise weights.

    ``family`` optionally records a power law ``gamma_k = c k**a``,
    ``beta_k = gamma_k**b`` as ``(a, b)``; the infinite admissibility series is
    then tested in closed form.
    """

    gammas: np.ndarray
    betas: np.ndarray
    alpha: float
    eps: float
    theta: float
    lower_const: Optional[float] = None
    family: Optional[tuple[float, float]] = None

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float).reshape(-1)
        b = np.asarray(self.betas, dtype=float).reshape(-1)
        alpha = validate_alpha(self.alpha)
        if g.shape != b.shape or g.size == 0:
            raise ValueError("gammas and betas must be nonempty and of equal length")
        if np.any(g <= 0) or np.any(np.diff(g) < 0):
            raise ValueError("gammas must be positive and nondecreasing")
        if np.any(b <= 0):
            raise ValueError("betas must be positive")
        if not (0 < self.eps < 1):
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not (0 < self.theta < 1):
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        best = float(np.min(b * g ** (self.theta - 1.0 / alpha)))
        if self.lower_const is None:
            object.__setattr__(self, "lower_const", best)
        elif not (0 < self.lower_const <= best * (1 + 1e-12)):
            raise ValueError(
                f"lower bound beta_k >= C gamma_k^(-theta+1/alpha) fails for C={self.lower_const} (max admissible {best:.6g})"
            )
        if self.family is not None and not self.series_converges():
            raise ValueError("admissibility series sum beta_k^alpha / gamma_k^(1-alpha*eps) diverges")
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alpha", alpha)

    @property
    def K(self) -> int:
        return self.gammas.size

    @property
    def gamma1(self) -> float:
        return float(self.gammas[0])

    def admissibility_sum(self) -> float:
        """Truncated series ``sum_{k<=K} beta_k^alpha / gamma_k^(1 - alpha eps)``."""
        a = self.alpha
        return float(np.sum(self.betas**a / self.gammas ** (1.0 - a * self.eps)))

    def series_converges(self) -> bool:
        """Closed-form test of the infinite series for a power-law family."""
        if self.family is None:
            raise ValueError("no power-law family recorded")
        a_exp, b_exp = self.family
        a = self.alpha
        return a_exp * (b_exp * a - 1.0 + a * self.eps) < -1.0

    def stationary_scales(self) -> np.ndarray:
        """Per-mode scale of the stationary linear (F = 0) law."""
        return ou_scale(self.gammas, self.betas, self.alpha, math.inf)

    def truncation_tail(self, K: int) -> float:
        """``sum_{k>K} beta_k^alpha / (alpha gamma_k)`` over the stored modes beyond ``K``."""
        g, b = self.gammas[K:], self.betas[K:]
        return float(np.sum(b**self.alpha / (self.alpha * g)))

    def truncated(self, K: int) -> "DiagonalGenerator":
        return DiagonalGenerator(
            self.gammas[:K], self.betas[:K], self.alpha, self.eps, self.theta, self.lower_const, self.family
        )


@dataclass(frozen=True)
class MatrixGenerator:
    """Finite-dimensional drift matrix whose spectrum lies in ``Re < 0``."""

    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if np.max(np.linalg.eigvals(A).real) >= -1e-9:
            raise ValueError("A must have all eigenvalues with strictly negative real part")
        object.__setattr__(self, "A", A)

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def gamma1(self) -> float:
        return float(-np.max(np.linalg.eigvals(self.A).real))


def heat_example_config(d: int, alpha: float, theta: float, eps: float, K: int = DEFAULT_MODES) -> DiagonalGenerator:
    """Dirichlet heat equation on the unit interval truncated to ``K`` modes.

    ``gamma_k = pi^2 k^2`` and ``beta_k = gamma_k^(-theta + 1/alpha)``.  Requires
    ``2 alpha (theta - eps) > d``.
    """
    if d != 1:
        raise ValueError(f"only d=1 is supported, got d={d}")
    alpha = validate_alpha(alpha)
    if not (0 < eps < 1 and 0 < theta < 1):
        raise ValueError("theta and eps must lie in (0, 1)")
    if not 2 * alpha * (theta - eps) > d:
        raise ValueError(
            f"2*alpha*(theta-eps) > d violated: 2*{alpha}*({theta}-{eps}) = {2 * alpha * (theta - eps):.6g} <= {d}"
        )
    if K < 1:
        raise ValueError("K must be positive")
    k = np.arange(1, K + 1, dtype=float)
    gammas = np.pi**2 * k**2
    betas = gammas ** (-theta + 1.0 / alpha)
    return DiagonalGenerator(gammas, betas, alpha, eps, theta, lower_const=1.0, family=(2.0 / d, -theta + 1.0 / alpha))


# -------------------------------------------------------------------------- drift


class ZeroField:
    def __call__(self, x):
        return np.zeros_like(x)


class ConstantField:
    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    def __call__(self, x):
        return np.broadcast_to(self.c, np.shape(x)).copy()


class TanhField:
    """``F_k(x) = s c_k tanh(<v_k, x>)`` with ``sum c_k^2 = 1``."""

    def __init__(self, s, V, c):
        self.s, self.V, self.c = float(s), np.asarray(V, float), np.asarray(c, float)

    def __call__(self, x):
        return self.s * self.c * np.tanh(x @ self.V.T)


class HolderSinField:
    """``F_k(x) = s c_k |sin(<v_k, x>)|^eta sign(sin(<v_k, x>))``."""

    def __init__(self, s, eta, V, c):
        self.s, self.eta = float(s), float(eta)
        self.V, self.c = np.asarray(V, float), np.asarray(c, float)

    def __call__(self, x):
        u = np.sin(x @ self.V.T)
        return self.s * self.c * np.abs(u) ** self.eta * np.sign(u)


@dataclass(frozen=True)
class DriftSpec:
    """Bounded drift together with its declared constants."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    sup_norm: float
    holder_exponent: float = 1.0
    holder_constant: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        if self.sup_norm < 0 or not math.isfinite(self.sup_norm):
            raise ValueError("sup_norm must be finite and nonnegative")
        if not (0 < self.holder_exponent <= 1):
            raise ValueError("holder_exponent must lie in (0, 1]")

    def __call__(self, x):
        return self.evaluator(x)


def _coupling_matrix(K: int, gain: float) -> np.ndarray:
    V = np.eye(K)
    if K > 1:
        V = V + np.roll(np.eye(K), 1, axis=1)
        V /= math.sqrt(2.0)
    return gain * V


def _mode_weights(K: int) -> np.ndarray:
    c = 1.0 / np.arange(1, K + 1)
    return c / np.linalg.norm(c)


def zero_drift() -> DriftSpec:
    return DriftSpec(ZeroField(), 0.0, 1.0, 0.0, "zero")


def constant_drift(c) -> DriftSpec:
    c = np.asarray(c, dtype=float)
    return DriftSpec(ConstantField(c), float(np.linalg.norm(c)), 1.0, 0.0, "constant")


def tanh_drift(K: int, sup_norm: float = 1.0, gain: float = 1.0) -> DriftSpec:
    """Lipschitz family; ``|F(x)| <= sup_norm`` and Lipschitz constant ``sup_norm * gain``."""
    V = _coupling_matrix(K, gain)
    lip = sup_norm * float(np.max(np.linalg.norm(V, axis=1)))
    return DriftSpec(TanhField(sup_norm, V, _mode_weights(K)), float(sup_norm), 1.0, lip, "tanh")


def holder_drift(K: int, eta: float, sup_norm: float = 1.0, gain: float = 1.0) -> DriftSpec:
    """Hoelder family with exponent ``eta`` and constant ``s 2^(1-eta) max|v_k|^eta``."""
    V = _coupling_matrix(K, gain)
    const = sup_norm * 2.0 ** (1.0 - eta) * float(np.max(np.linalg.norm(V, axis=1))) ** eta
    return DriftSpec(HolderSinField(sup_norm, eta, V, _mode_weights(K)), float(sup_norm), float(eta), const, "holder")


# -------------------------------------------------------------------------- model

Generator = Union[MatrixGenerator, DiagonalGenerator]
SCHEMES = ("euler", "exponential_euler")


@dataclass(frozen=True)
class ModelSpec:
    """Complete dynamical system and its integration scheme.

    ``noise`` is either a :class:`SpectralMeasure` or the string ``"cylindrical"``
    (independent mode noise with the diagonal generator's ``betas``).  ``alpha``
    must be given for a matrix generator and defaults to the generator's index
    otherwise.
    """

    generator: Generator
    drift: DriftSpec
    noise: Union[SpectralMeasure, str] = "cylindrical"
    scheme: str = "exponential_euler"
    dt: float = DEFAULT_DT
    alpha: Optional[float] = None

    def __post_init__(self):
        gen = self.generator
        diagonal = isinstance(gen, DiagonalGenerator)
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if diagonal:
            if self.alpha is not None and not math.isclose(self.alpha, gen.alpha):
                raise ValueError("alpha disagrees with the diagonal generator")
            object.__setattr__(self, "alpha", gen.alpha)
        else:
            if self.alpha is None:
                raise ValueError("alpha is required with a matrix generator")
            object.__setattr__(self, "alpha", validate_alpha(self.alpha, finite_dim=True))
        if isinstance(self.noise, str):
            if self.noise != "cylindrical":
                raise ValueError(f"unknown noise kind {self.noise!r}")
            if not diagonal:
                raise ValueError("cylindrical noise requires a DiagonalGenerator")
        elif isinstance(self.noise, SpectralMeasure):
            if self.noise.dim != gen.K:
                raise ValueError("spectral measure dimension does not match the state dimension")
        else:
            raise TypeError("noise must be a SpectralMeasure or 'cylindrical'")
        if self.scheme == "exponential_euler" and not (diagonal and self.noise == "cylindrical"):
            raise ValueError("exponential_euler requires a DiagonalGenerator with cylindrical noise")
        eta = self.drift.holder_exponent
        if diagonal:
            if eta != 1.0:
                raise ValueError("Galerkin mode requires a Lipschitz drift (holder_exponent = 1)")
        elif not eta > 1.0 - self.alpha / 2.0:
            raise ValueError(
                f"holder_exponent must exceed 1 - alpha/2 = {1 - self.alpha / 2:.6g}, got {eta}"
            )

    @property
    def K(self) -> int:
        return self.generator.K

    @property
    def gamma1(self) -> float:
        return self.generator.gamma1

    @property
    def is_diagonal(self) -> bool:
        return isinstance(self.generator, DiagonalGenerator)

    @cached_property
    def matrix(self) -> np.ndarray:
        if self.is_diagonal:
            return -np.diag(self.generator.gammas)
        return self.generator.A

    @cached_property
    def _coeffs(self):
        dt, a = self.dt, self.alpha
        if self.scheme == "exponential_euler":
            g = self.generator.gammas
            return np.exp(-g * dt), -np.expm1(-g * dt) / g, ou_scale(g, self.generator.betas, a, dt)
        if self.noise == "cylindrical":
            return None, None, self.generator.betas * dt ** (1.0 / a)
        return None, None, (dt * self.noise.weights) ** (1.0 / a)

    def n_steps(self, T: float) -> int:
        """Number of steps covering ``T``; ``T`` must be a multiple of ``dt``."""
        if T < 0:
            raise ValueError("horizon must be nonnegative")
        k = int(round(T / self.dt))
        if abs(k * self.dt - T) > TIME_TOL * max(1.0, T):
            raise ValueError(f"horizon {T} is not an integer multiple of dt={self.dt}")
        return k

    def noise_increments(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Stochastic part of one step for ``n`` trajectories, shape ``(n, K)``."""
        _, _, scale = self._coeffs
        if isinstance(self.noise, SpectralMeasure):
            xi = sample_standard_stable(self.alpha, rng, (n, scale.size))
            return (xi * scale) @ self.noise.directions
        return sample_standard_stable(self.alpha, rng, (n, self.K)) * scale

    def advance(self, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Deterministic update plus a pre-drawn noise increment."""
        decay, phi, _ = self._coeffs
        f = self.drift(x)
        if self.scheme == "exponential_euler":
            return decay * x + phi * f + noise
        return x + (x @ self.matrix.T + f) * self.dt + noise

    def drift_accumulate(self, acc: np.ndarray, x: np.ndarray) -> np.ndarray:
        """One step of the scheme's drift convolution ``int e^{A(t-s)} F(X_s) ds``."""
        decay, phi, _ = self._coeffs
        if self.scheme == "exponential_euler":
            return decay * acc + phi * self.drift(x)
        return acc + (acc @ self.matrix.T + self.drift(x)) * self.dt

    def stationary_scales(self) -> np.ndarray:
        """Per-coordinate scale of the stationary law of the linear part (F = 0)."""
        if self.is_diagonal and self.noise == "cylindrical":
            return self.generator.stationary_scales()
        return _matrix_stationary_scales(self.matrix, self._spectral(), self.alpha)

    def stationary_scale(self) -> float:
        """Euclidean norm of :meth:`stationary_scales`."""
        return float(np.linalg.norm(self.stationary_scales()))

    def _spectral(self) -> SpectralMeasure:
        if isinstance(self.noise, SpectralMeasure):
            return self.noise
        b = self.generator.betas**self.alpha / 2.0
        return SpectralMeasure(np.eye(self.K), b)


def _matrix_stationary_scales(A: np.ndarray, mu: SpectralMeasure, alpha: float) -> np.ndarray:
    re = -np.linalg.eigvals(A).real
    upper = 60.0 / float(re.min())
    # split geometrically from the fastest time scale so stiff modes are resolved
    start = 0.01 / float(re.max())
    edges = [0.0, *np.geomspace(start, upper, max(2, math.ceil(math.log10(upper / start)) + 1))]
    out = []
    for i in range(A.shape[0]):

        def integrand(s, i=i):
            v = linalg.expm(A * s) @ mu.directions.T
            return float(np.abs(v[i]) ** alpha @ mu.weights)

        val = sum(integrate.quad(integrand, a, b, limit=200)[0] for a, b in zip(edges, edges[1:]))
        out.append(val ** (1.0 / alpha))
    return np.array(out)


def norm_eps(x, gen: Generator, e: float):
    """``(sum_k gamma_k^(2e) x_k^2)^(1/2)``, vectorised over leading axes.

    A matrix generator only supports ``e = 0`` (Euclidean norm).
    """
    if e < 0:
        raise ValueError("e must be nonnegative")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != gen.K:
        raise ValueError(f"dimension mismatch: state has {x.shape[-1]} coordinates, generator {gen.K}")
    if e == 0:
        return np.linalg.norm(x, axis=-1)
    if not isinstance(gen, DiagonalGenerator):
        raise ValueError("eps-norms need a diagonal generator")
    return np.sqrt(np.sum(gen.gammas ** (2 * e) * x * x, axis=-1))


# --------------------------------------------------------------------- simulation


def step(model: ModelSpec, x, rng: np.random.Generator) -> np.ndarray:
    """Advance one state ``(K,)`` or a batch ``(n, K)`` by one time step."""
    x = np.asarray(x, dtype=float)
    batch = x.reshape(-1, model.K)
    out = model.advance(batch, model.noise_increments(rng, batch.shape[0]))
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite state", step=1, time=model.dt)
    return out.reshape(x.shape)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    drift_part: Optional[np.ndarray] = field(default=None, repr=False)

    def to_csv(self, path) -> None:
        K = self.states.shape[1]
        header = ["t"] + [f"x_{k + 1}" for k in range(K)]
        write_csv(path, header, np.column_stack([self.times, self.states]))


def simulate_path(model: ModelSpec, x0, T: float, rng: np.random.Generator, track_drift: bool = False) -> Trajectory:
    """Iterate :func:`step` from ``x0`` to time ``T``."""
    n = model.n_steps(T)
    x = np.asarray(x0, dtype=float).reshape(1, model.K).copy()
    states = np.empty((n + 1, model.K))
    states[0] = x[0]
    acc = np.zeros_like(x) if track_drift else None
    drift = np.zeros((n + 1, model.K)) if track_drift else None
    for k in range(n):
        if track_drift:
            acc = model.drift_accumulate(acc, x)
            drift[k + 1] = acc[0]
        x = model.advance(x, model.noise_increments(rng, 1))
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite state", step=k + 1, time=(k + 1) * model.dt)
        states[k + 1] = x[0]
    return Trajectory(np.arange(n + 1) * model.dt, states, drift)


def _run_block(model: ModelSpec, x: np.ndarray, n_steps: int, record: tuple[int, ...], rng, noise_pair: bool):
    out = {}
    if 0 in record:
        out[0] = x.copy()
    for k in range(1, n_steps + 1):
        if noise_pair:
            # common random numbers: x has shape (2, m, K), both halves share the noise
            dz = model.noise_increments(rng, x.shape[1])
            x = np.stack([model.advance(x[0], dz), model.advance(x[1], dz)])
        else:
            x = model.advance(x, model.noise_increments(rng, x.shape[0]))
        if not np.all(np.isfinite(x)):
            raise NumericalError("non-finite state", step=k, time=k * model.dt)
        if k in record:
            out[k] = x.copy()
    return out


def _ensemble_block(rng, i, model, x0, offsets, n_steps, record, noise_pair):
    before = resample_count()
    lo, hi = offsets[i], offsets[i + 1]
    if noise_pair:
        x = np.stack([np.broadcast_to(x0[0], (hi - lo, model.K)), np.broadcast_to(x0[1], (hi - lo, model.K))]).copy()
    elif x0.ndim == 1:
        x = np.broadcast_to(x0, (hi - lo, model.K)).copy()
    else:
        x = x0[lo:hi].copy()
    return _run_block(model, x, n_steps, record, rng, noise_pair), resample_count() - before


def simulate_ensemble(
    model: ModelSpec,
    x0,
    T: float,
    n: int,
    rng: np.random.Generator,
    times=None,
    workers: int = 1,
    common_noise_pair: bool = False,
):
    """Endpoints of ``n`` independent trajectories.

    Parameters
    ----------
    x0 : array
        One start ``(K,)`` shared by all trajectories, or ``(n, K)`` starts.
        With ``common_noise_pair`` it is a pair ``(2, K)`` driven by the same
        noise (common random numbers); results then have shape ``(2, n, K)``.
    times : sequence of float, optional
        Record these times (multiples of ``dt``) instead of just ``T``; a dict
        ``time -> states`` is returned.

    The result depends only on ``(model, x0, T, n, rng state)``, not on
    ``workers``.
    """
    x0 = np.asarray(x0, dtype=float)
    if n < 1:
        raise ValueError("n must be positive")
    n_steps = model.n_steps(T)
    want = [T] if times is None else list(times)
    rec = tuple(sorted({model.n_steps(t) for t in want}))
    if rec and rec[-1] > n_steps:
        raise ValueError("recorded times exceed the horizon")
    sizes = streams.block_sizes(n)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    root = streams.root_from(rng)
    parts = streams.map_streams(
        _ensemble_block, len(sizes), root, (model, x0, offsets, n_steps, rec, common_noise_pair), workers
    )
    axis = 1 if common_noise_pair else 0
    merged = {k: np.concatenate([p[0][k] for p in parts], axis=axis) for k in rec}
    simulate_ensemble.last_resampled = sum(p[1] for p in parts)
    if workers > 1 and len(sizes) > 1:
        add_resampled(simulate_ensemble.last_resampled)
    if times is None:
        return merged[n_steps]
    return {t: merged[model.n_steps(t)] for t in want}


simulate_ensemble.last_resampled = 0


def propagate(model: ModelSpec, x, T: float, rng: np.random.Generator) -> np.ndarray:
    """Advance a batch ``(n, K)`` to time ``T`` on a single stream (no block splitting)."""
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    n = model.n_steps(T)
    return _run_block(model, x, n, (n,), rng, False)[n]
