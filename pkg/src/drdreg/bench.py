"""Benchmark harness: recovery metrics, group-sparse signal generation, the
noiseless phase-transition protocol, synthetic recovery comparisons, and
runtime measurement.

Every trial derives its own seed from the master seed and its grid indices,
so grids are reproducible and trials are order-independent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import ard_fit, asd_fit, lasso_fit
from .kernels import GpHypers, LocationGrid, se_kernel
from .laplace import EbConfig, FitResult, fit_best_of, fit_empirical_bayes
from .linalg import cholesky_with_jitter
from .mcmc import ChainConfig, HyperPriors, posterior_mean_weights, run_gibbs
from .prior import Dataset, ModelHypers, sample_dataset, sample_prior


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metric_r2(truth: np.ndarray, estimate: np.ndarray) -> float:
    """Coefficient of determination against the truth's own mean."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError("truth and estimate must have equal length")
    denom = float(np.sum((truth - truth.mean()) ** 2))
    if denom == 0.0:
        raise ValueError("truth is constant; R^2 undefined")
    return 1.0 - float(np.sum((truth - estimate) ** 2)) / denom


def metric_auc(
    truth: np.ndarray, estimate: np.ndarray, support_threshold: float = 0.005
) -> float:
    """Rank-based AUC of |estimate| against the thresholded support of truth.

    Ties in the scores are handled by midranks.
    """
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError("truth and estimate must have equal length")
    labels = np.abs(truth) > support_threshold
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    scores = np.abs(estimate)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Group-sparse signals and the phase-transition protocol
# ---------------------------------------------------------------------------


@dataclass
class PhaseConfig:
    p: int = 128
    alphas: tuple = (0.1, 0.15, 0.2)
    gammas: tuple = tuple(np.round(np.linspace(0.05, 1.0, 20), 4))
    g: int = 1
    smooth_len: float = 0.0
    trials: int = 10
    r2_threshold: float = 0.95
    seed: int = 0

    def __post_init__(self):
        for alpha in self.alphas:
            k = int(round(alpha * self.p))
            if k < self.g:
                raise ValueError("need k >= g non-zeros")
        for gamma in self.gammas:
            if gamma * self.p < 1:
                raise ValueError("need at least one measurement")


@dataclass
class PhaseCell:
    alpha: float
    gamma: float
    successes: int
    trials: int

    @property
    def classification(self) -> str:
        if self.successes == self.trials:
            return "perfect"
        if self.successes == 0:
            return "failure"
        return "transition"


def gen_group_sparse_signal(config: PhaseConfig, alpha: float, seed) -> np.ndarray:
    """Signal with exactly k = round(alpha p) non-zeros in g disjoint blocks.

    Block sizes split k as evenly as possible (remainder to the first
    blocks); placements are drawn uniformly and rejected until disjoint.
    Non-zero values are iid standard normal, or, when ``smooth_len`` is
    positive, drawn per block from a unit-variance squared-exponential
    Gaussian at that length scale.
    """
    rng = np.random.default_rng(seed)
    p, g = config.p, config.g
    k = int(round(alpha * p))
    if k < g:
        raise ValueError("need k >= g")
    base = k // g
    sizes = [base + (1 if i < k - base * g else 0) for i in range(g)]
    for _ in range(1000):
        starts = [int(rng.integers(0, p - size + 1)) for size in sizes]
        spans = sorted(zip(starts, sizes))
        if all(
            spans[i][0] + spans[i][1] <= spans[i + 1][0] for i in range(g - 1)
        ):
            break
    else:
        raise RuntimeError("could not place disjoint blocks in 1000 attempts")
    w = np.zeros(p)
    for start, size in spans:
        if config.smooth_len > 0:
            grid = LocationGrid.regular_1d(size)
            kern = se_kernel(grid, 1.0, config.smooth_len)
            vals = cholesky_with_jitter(kern, 1e-10).lower @ rng.standard_normal(size)
        else:
            vals = rng.standard_normal(size)
        w[start : start + size] = vals
    return w


def _cell_seed(master: int, i_alpha: int, i_gamma: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=(i_alpha, i_gamma, trial))


@dataclass
class PhaseGridResult:
    cells: dict  # solver -> list[PhaseCell]
    centers: dict  # solver -> {alpha: transition-center gamma}
    config: PhaseConfig


def run_phase_grid(config: PhaseConfig, solvers: dict) -> PhaseGridResult:
    """Noiseless recovery grid over sparsity and measurement fractions.

    ``solvers`` maps names to callables ``(dataset, seed) -> weights``.  A
    solver exception counts the trial as failed.  For each sparsity level
    the transition center is the mean measurement fraction of the cells in
    the transition band (or the midpoint of the failure-to-perfect jump when
    the band is empty).
    """
    cells = {name: [] for name in solvers}
    for i_a, alpha in enumerate(config.alphas):
        for i_g, gamma in enumerate(config.gammas):
            n = max(1, int(round(gamma * config.p)))
            successes = {name: 0 for name in solvers}
            for trial in range(config.trials):
                seq = _cell_seed(config.seed, i_a, i_g, trial)
                child = seq.spawn(2)
                w = gen_group_sparse_signal(config, alpha, child[0])
                rng = np.random.default_rng(child[1])
                X = rng.standard_normal((n, config.p))
                data = Dataset(
                    X=X, y=X @ w, grid=LocationGrid.regular_1d(config.p), w_true=w
                )
                for name, solver in solvers.items():
                    try:
                        w_hat = solver(data, trial)
                        score = metric_r2(w, w_hat)
                    except Exception:
                        score = -np.inf
                    if score > config.r2_threshold:
                        successes[name] += 1
            for name in solvers:
                cells[name].append(
                    PhaseCell(
                        alpha=alpha,
                        gamma=gamma,
                        successes=successes[name],
                        trials=config.trials,
                    )
                )
    centers = {
        name: _transition_centers(cells[name], config) for name in solvers
    }
    return PhaseGridResult(cells=cells, centers=centers, config=config)


def _transition_centers(cells: list, config: PhaseConfig) -> dict:
    centers = {}
    for alpha in config.alphas:
        row = sorted(
            (c for c in cells if c.alpha == alpha), key=lambda c: c.gamma
        )
        trans = [c.gamma for c in row if c.classification == "transition"]
        if trans:
            centers[alpha] = float(np.mean(trans))
            continue
        fail = [c.gamma for c in row if c.classification == "failure"]
        perf = [c.gamma for c in row if c.classification == "perfect"]
        hi = max(fail) if fail else row[0].gamma
        lo = min(perf) if perf else row[-1].gamma
        centers[alpha] = 0.5 * (hi + lo)
    return centers


# ---------------------------------------------------------------------------
# Estimator registry
# ---------------------------------------------------------------------------


def paper_hypers(p: int, sigma2: float = 5.0, smooth: bool = True) -> ModelHypers:
    """Generative hyperparameters of the synthetic experiments, scaled to p."""
    return ModelHypers(
        gp=GpHypers(b=-8.0, rho=36.0, length_scale=p / 40.0),
        sigma2=sigma2,
        delta=p / 20.0 if smooth else None,
    )


def default_eb_configs(
    data: Dataset, smooth: bool, link: str = "exp", restarts: int = 1, **overrides
) -> list[EbConfig]:
    """Data-driven initializations for the evidence-optimization loop."""
    p = data.p
    var_y = max(float(np.var(data.y)), 1e-8)
    variants = [
        (-4.0, 9.0, p / 20.0, 0.5 * var_y, p / 30.0),
        (-6.0, 16.0, p / 40.0, 0.1 * var_y, p / 15.0),
        (-2.0, 4.0, p / 10.0, 0.9 * var_y, p / 40.0),
    ]
    configs = []
    for b0, rho0, l0, s20, d0 in variants[: max(1, restarts)]:
        hyp = ModelHypers(
            gp=GpHypers(b=b0, rho=rho0, length_scale=max(l0, 2.0)),
            sigma2=max(s20, 1e-8),
            delta=max(d0, 2.0) if smooth else None,
            link=link,
        )
        configs.append(EbConfig(hypers0=hyp, **overrides))
    return configs


def make_estimators(
    names: list[str],
    seed: int = 0,
    eb_overrides: dict | None = None,
    chain_config: ChainConfig | None = None,
    lasso_kwargs: dict | None = None,
    imported: dict | None = None,
) -> dict:
    """Solver callables ``(dataset, trial_index) -> weights`` by estimator name.

    ``imported`` maps names to fixed weight vectors supplied externally,
    allowing third-party estimates to flow through the same metrics.
    """
    eb_overrides = eb_overrides or {}
    lasso_kwargs = lasso_kwargs or {}
    solvers = {}
    for name in names:
        if imported and name in imported:
            vec = np.asarray(imported[name], dtype=float)
            solvers[name] = lambda data, t, v=vec: v
            continue
        if name in ("drd-laplace", "sdrd-laplace"):
            smooth = name.startswith("sdrd")

            def eb_solver(data, t, smooth=smooth):
                cfgs = default_eb_configs(data, smooth=smooth, restarts=1, **eb_overrides)
                return fit_empirical_bayes(data, cfgs[0]).w

            solvers[name] = eb_solver
        elif name == "drd-convex":

            def convex_solver(data, t):
                from .convex import fit_convex
                from .kernels import build_fourier_basis, whiten_sample

                cfg = default_eb_configs(data, smooth=False, restarts=1, **eb_overrides)[0]
                fit = fit_empirical_bayes(data, cfg)
                res = fit_convex(data, fit.hypers)
                from .laplace import conditional_posterior
                from .prior import build_covariance

                cov = build_covariance(res.u, fit.hypers, data.grid)
                return conditional_posterior(data, cov, fit.hypers.sigma2).mean

            solvers[name] = convex_solver
        elif name in ("drd-mcmc", "sdrd-mcmc"):
            smooth = name.startswith("sdrd")

            def mcmc_solver(data, t, smooth=smooth):
                cfg = chain_config or ChainConfig(seed=seed)
                cfg = ChainConfig(
                    n_samples=cfg.n_samples,
                    burn_in_max=cfg.burn_in_max,
                    thin=cfg.thin,
                    burn_in_tol=cfg.burn_in_tol,
                    burn_in_window=cfg.burn_in_window,
                    seed=cfg.seed + 7919 * t,
                    fourier_tol=cfg.fourier_tol,
                )
                res = run_gibbs(
                    data, HyperPriors(), cfg, kind="smooth-drd" if smooth else "drd"
                )
                return posterior_mean_weights(res.samples, data)[0]

            solvers[name] = mcmc_solver
        elif name == "ard":
            solvers[name] = lambda data, t: ard_fit(data).w
        elif name == "asd":
            solvers[name] = lambda data, t: asd_fit(data).w
        elif name == "lasso":
            solvers[name] = lambda data, t: lasso_fit(
                data, seed=seed + t, **lasso_kwargs
            ).w
        else:
            raise ValueError(f"unknown estimator {name!r}")
    return solvers


# ---------------------------------------------------------------------------
# Recovery suite
# ---------------------------------------------------------------------------


@dataclass
class RecoveryConfig:
    p: int = 500
    n: int = 300
    n_test: int = 100
    sigma2: float = 5.0
    seeds: tuple = (0, 1, 2, 3, 4)
    estimators: tuple = ("lasso", "ard", "asd", "drd-laplace", "sdrd-laplace")
    support_threshold: float = 0.005
    eb_overrides: dict = field(default_factory=dict)
    chain_config: ChainConfig | None = None
    imported: dict | None = None


@dataclass
class RecoveryRow:
    estimator: str
    seed: int
    r2_w: float
    r2_y_test: float
    auc: float
    seconds: float


def run_recovery_suite(config: RecoveryConfig) -> list[RecoveryRow]:
    """Fit every estimator on draws from the smooth generative model.

    Returns one row per (estimator, seed) with weight recovery, held-out
    prediction, and support-ranking scores.
    """
    truth_hypers = paper_hypers(config.p, config.sigma2, smooth=True)
    grid = LocationGrid.regular_1d(config.p)
    rows: list[RecoveryRow] = []
    for seed in config.seeds:
        seq = np.random.SeedSequence(entropy=seed, spawn_key=(101,))
        kids = seq.spawn(3)
        _, w = sample_prior(truth_hypers, grid, kids[0])
        data = sample_dataset(w, config.n, config.sigma2, kids[1], grid=grid)
        test = sample_dataset(w, config.n_test, config.sigma2, kids[2], grid=grid)
        solvers = make_estimators(
            list(config.estimators),
            seed=seed,
            eb_overrides=config.eb_overrides,
            chain_config=config.chain_config,
            imported=config.imported,
        )
        for name, solver in solvers.items():
            t0 = time.perf_counter()
            w_hat = solver(data, seed)
            seconds = time.perf_counter() - t0
            rows.append(
                RecoveryRow(
                    estimator=name,
                    seed=seed,
                    r2_w=metric_r2(w, w_hat),
                    r2_y_test=metric_r2(test.y, test.X @ w_hat),
                    auc=metric_auc(w, w_hat, config.support_threshold),
                    seconds=seconds,
                )
            )
    return rows


def summarize_recovery(rows: list[RecoveryRow]) -> dict:
    """Mean and standard error of each metric per estimator."""
    out = {}
    names = sorted({r.estimator for r in rows})
    for name in names:
        sel = [r for r in rows if r.estimator == name]
        out[name] = {}
        for metric in ("r2_w", "r2_y_test", "auc", "seconds"):
            vals = np.array([getattr(r, metric) for r in sel])
            out[name][metric] = (
                float(vals.mean()),
                float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0,
            )
    return out


# ---------------------------------------------------------------------------
# Runtime bench
# ---------------------------------------------------------------------------


@dataclass
class RuntimeConfig:
    p_values: tuple = (64, 128, 256, 512)
    n_values: tuple = (100,)
    sigma2: float = 5.0
    reps: int = 5
    estimators: tuple = ("drd-laplace", "sdrd-laplace")
    seed: int = 0
    weight_tol: float = 1e-4
    mcmc_samples: int = 100


@dataclass
class RuntimeRecord:
    estimator: str
    p: int
    n: int
    rep: int
    seconds: float
    stopping: str


def run_runtime_bench(config: RuntimeConfig) -> list[RuntimeRecord]:
    """Wall-clock per fit across problem sizes.

    The evidence-optimization loop stops on a max weight change below 1e-4;
    sampling runs are timed to the collection of the configured number of
    post-burn-in samples.
    """
    records: list[RuntimeRecord] = []
    for p in config.p_values:
        for n in config.n_values:
            truth = paper_hypers(p, config.sigma2, smooth=True)
            grid = LocationGrid.regular_1d(p)
            for rep in range(config.reps):
                seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(p, n, rep))
                kids = seq.spawn(2)
                _, w = sample_prior(truth, grid, kids[0])
                data = sample_dataset(w, n, config.sigma2, kids[1], grid=grid)
                for name in config.estimators:
                    t0 = time.perf_counter()
                    stopping = ""
                    if name in ("drd-laplace", "sdrd-laplace"):
                        smooth = name.startswith("sdrd")
                        cfg = default_eb_configs(
                            data, smooth=smooth, restarts=1,
                            weight_tol=config.weight_tol,
                        )[0]
                        fit_empirical_bayes(data, cfg)
                        stopping = f"weight_change<{config.weight_tol}"
                    elif name in ("drd-mcmc", "sdrd-mcmc"):
                        smooth = name.startswith("sdrd")
                        res = run_gibbs(
                            data,
                            HyperPriors(),
                            ChainConfig(
                                n_samples=config.mcmc_samples,
                                seed=config.seed + rep,
                            ),
                            kind="smooth-drd" if smooth else "drd",
                        )
                        stopping = f"{config.mcmc_samples} samples after burn-in"
                    elif name == "noop":
                        stopping = "noop"
                    else:
                        solver = make_estimators([name], seed=config.seed)[name]
                        solver(data, rep)
                        stopping = "estimator default"
                    records.append(
                        RuntimeRecord(
                            estimator=name,
                            p=p,
                            n=n,
                            rep=rep,
                            seconds=time.perf_counter() - t0,
                            stopping=stopping,
                        )
                    )
    return records
