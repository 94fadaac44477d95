import math
from functools import lru_cache

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import levy_stable

from stablemix.dynamics import (MatrixGenerator, ModelSpec, heat_example_config, holder_drift, tanh_drift,
                                zero_drift)
from stablemix.stable_noise import SpectralMeasure

ALPHA = 1.5


def ou_1d(alpha=ALPHA, drift=None, dt=0.01):
    """One-mode heat model (gamma = pi^2)."""
    gen = heat_example_config(1, alpha, 0.5, 0.1, K=1)
    return ModelSpec(gen, drift if drift is not None else zero_drift(), dt=dt)


def galerkin(K=32, drift="tanh"):
    gen = heat_example_config(1, ALPHA, 0.5, 0.1, K=K)
    return ModelSpec(gen, tanh_drift(K) if drift == "tanh" else zero_drift())


def finite_dim(drift="holder"):
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    mu = SpectralMeasure.from_atoms([([1.0, 0.0], 0.5), ([2**-0.5, 2**-0.5], 0.5)])
    F = holder_drift(2, 0.5) if drift == "holder" else zero_drift()
    return ModelSpec(MatrixGenerator(A), F, noise=mu, scheme="euler", dt=0.01, alpha=ALPHA)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def model_1d():
    return ou_1d(drift=tanh_drift(1))


@pytest.fixture(scope="session")
def model_ou():
    return ou_1d()


@pytest.fixture(scope="session")
def model_fd():
    return finite_dim()


# ------------------------------------------------------------------ oracles


def stable_cf(lam, alpha, scale=1.0):
    return np.exp(-np.abs(np.asarray(lam) * scale) ** alpha)


def stable_abs_moment_quad(alpha, p):
    """E|xi|^p by quadrature of the scipy stable density (independent of the closed form)."""
    f = lambda x: 2 * x**p * levy_stable.pdf(x, alpha, 0.0)
    L = 5000.0
    edges = [0.0, 1.0, 10.0, 100.0, 1000.0, L]
    head = sum(integrate.quad(f, a, b, limit=400)[0] for a, b in zip(edges, edges[1:]))
    # tail from the Pareto asymptote of the density
    c = math.gamma(alpha) * math.sin(math.pi * alpha / 2) / math.pi
    tail = 2 * c * alpha * L ** (p - alpha) / (alpha - p)
    return head + tail


@lru_cache(maxsize=None)
def _cdf_table(alpha):
    x = np.sinh(np.linspace(-np.arcsinh(1e4), np.arcsinh(1e4), 4001))
    return x, levy_stable.cdf(x, alpha, 0.0)


def stable_cdf(x, alpha, scale=1.0):
    """CDF of ``scale * xi`` from a dense table of the scipy stable CDF."""
    gx, gc = _cdf_table(alpha)
    return np.interp(np.asarray(x) / scale, gx, gc, left=0.0, right=1.0)


def ks_statistic(samples, cdf):
    s = np.sort(np.asarray(samples))
    n = s.size
    c = cdf(s)
    return max(np.max(np.arange(1, n + 1) / n - c), np.max(c - np.arange(n) / n))


def stable_cell_probs(edges, alpha, scale, loc=0.0):
    """Probabilities of the cells between ``edges`` plus the overflow mass (last entry)."""
    c = stable_cdf(np.asarray(edges) - loc, alpha, scale)
    inner = np.diff(c)
    return np.concatenate([inner, [1.0 - inner.sum()]])
