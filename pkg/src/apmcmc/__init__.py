"""Composable MCMC for unbiased density estimators.

Clamp the random numbers inside an unbiased estimator and the noisy target
becomes an ordinary deterministic one: slice sampling and well-tuned
Metropolis apply again. This package provides the keyed random store that
makes clamping precise, perturbation kernels that move the stored randomness
without breaking it, parameter kernels that move against the clamped
estimate, and an experiment harness around three model families (a Gaussian
toy, lattice Ising posteriors with exact sampling, Gaussian-process probit
classification).
"""

from apmcmc.diagnostics import (
    autocorrelation,
    cost_scaled_lags,
    ess,
    max_stick_run,
    r_hat,
    summarize_chains,
)
from apmcmc.estimators import (
    AisEstimator,
    CountingEstimator,
    DiIsEstimator,
    GpIsEstimator,
    ToyGaussianEstimator,
)
from apmcmc.harness import (
    diagnose_traces,
    run_experiment,
    validate_config,
    validate_config_dict,
)
from apmcmc.mcmc_core import (
    AdaptationConfig,
    ChainState,
    Kernel,
    ProposalConfig,
    StepInfo,
    TraceRecord,
    build_kernel,
    init_chain_state,
    records_to_arrays,
    run_chain,
)
from apmcmc.models.gp_probit import (
    CovarianceError,
    GpProbitModel,
    gp_covariance,
    gp_laplace_fit,
    gp_synthetic_data,
    load_csv_dataset,
)
from apmcmc.models.ising import (
    CoalescenceError,
    IsingSpec,
    cftp_exact_sample,
    ising_enumerate_logZ,
    ising_log_g,
)
from apmcmc.random_db import (
    BaseSpace,
    RandomDb,
    SeedContext,
    perturb_elliptical,
    perturb_reflective,
    reflect,
)
from apmcmc.slice_kernels import (
    SliceConfig,
    slice_elliptical_db,
    slice_linear,
    slice_reflective_db,
)

__all__ = [
    "AdaptationConfig",
    "AisEstimator",
    "BaseSpace",
    "ChainState",
    "CoalescenceError",
    "CountingEstimator",
    "CovarianceError",
    "DiIsEstimator",
    "GpIsEstimator",
    "GpProbitModel",
    "IsingSpec",
    "Kernel",
    "ProposalConfig",
    "RandomDb",
    "SeedContext",
    "SliceConfig",
    "StepInfo",
    "ToyGaussianEstimator",
    "TraceRecord",
    "autocorrelation",
    "build_kernel",
    "cftp_exact_sample",
    "cost_scaled_lags",
    "diagnose_traces",
    "ess",
    "gp_covariance",
    "gp_laplace_fit",
    "gp_synthetic_data",
    "init_chain_state",
    "ising_enumerate_logZ",
    "ising_log_g",
    "load_csv_dataset",
    "max_stick_run",
    "perturb_elliptical",
    "perturb_reflective",
    "r_hat",
    "records_to_arrays",
    "reflect",
    "run_chain",
    "run_experiment",
    "slice_elliptical_db",
    "slice_linear",
    "slice_reflective_db",
    "summarize_chains",
    "validate_config",
    "validate_config_dict",
]

__version__ = "0.1.0"
