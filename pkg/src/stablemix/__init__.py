"""Simulation and ergodicity diagnostics for SDEs and SPDEs driven by
symmetric alpha-stable noise."""

from .coupling import (CoupledChainState, CoupledRun, CouplingConfig, configure_coupling, coupled_step,
                       drift_recursion_bound, exp_moment_fit, maximal_coupling_discrete, maximal_coupling_joint,
                       minimal_M, run_coupled, run_coupled_ensemble)
from .dynamics import (DiagonalGenerator, MatrixGenerator, ModelSpec, Trajectory, heat_example_config, norm_eps,
                       simulate_ensemble, simulate_path, step)
from .errors import ConfigError, NumericalError
from .harris import (HarrisReport, MixingFit, PointMass, harris_report, invariant_moment, lyapunov_check,
                     minorization_check, mixing_fit)
from .kernel_lab import (EmpiricalKernel, Grid, estimate_kernel, gradient_probe, irreducibility_probe,
                         moment_probe, tv_discrete)
from .stable_noise import (SpectralMeasure, ou_scale, sample_ou_marginal, sample_spectral_increment,
                           sample_standard_stable)

__version__ = "0.1.0"
