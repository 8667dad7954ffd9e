"""Structured-sparse Bayesian linear regression with latent-GP relevance priors."""

from .baselines import BaselineResult, ard_fit, asd_fit, lasso_fit
from .bench import (
    PhaseCell,
    PhaseConfig,
    RecoveryConfig,
    RuntimeConfig,
    gen_group_sparse_signal,
    metric_auc,
    metric_r2,
    run_phase_grid,
    run_recovery_suite,
    run_runtime_bench,
)
from .convex import (
    ConvexConfig,
    ObjectiveSplit,
    dual_update,
    eval_upper_bound,
    fit_convex,
    inner_convex_solve,
)
from .kernels import (
    FourierBasis,
    GpHypers,
    LocationGrid,
    build_fourier_basis,
    se_kernel,
    smoothing_kernel,
    whiten_sample,
)
from .laplace import (
    EbConfig,
    FitResult,
    LaplaceState,
    WeightPosterior,
    conditional_posterior,
    find_mode,
    fit_empirical_bayes,
    hessian_neg_log_evidence,
    laplace_log_marginal,
    log_conditional_evidence,
    log_gp_prior,
)
from .linalg import (
    CholeskyFactor,
    PSDError,
    cholesky_with_jitter,
    dft_real,
    idft_real,
    logdet_psd,
    solve_psd,
)
from .mcmc import (
    ChainConfig,
    ChainSample,
    HyperPriors,
    ess_step,
    posterior_mean_weights,
    run_gibbs,
    slice_step_hyper,
)
from .prior import (
    Dataset,
    ModelHypers,
    PriorCovariance,
    apply_link,
    build_covariance,
    sample_dataset,
    sample_prior,
)

__version__ = "0.1.0"
