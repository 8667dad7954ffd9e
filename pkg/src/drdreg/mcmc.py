"""Fully Bayesian inference by Gibbs sampling.

The latent field is updated by elliptical slice sampling in whitened
truncated-Fourier coordinates, where its prior is an exact standard normal;
each hyperparameter is then updated by univariate slice sampling conditioned
on everything else (positive parameters in the log domain).  Weight
estimates come from averaging the conditional Gaussian posteriors over the
retained samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import FourierBasis, GpHypers, LocationGrid, build_fourier_basis, whiten_sample
from .laplace import LikelihoodOps, posterior_mean_diag_var, smoothing_root
from .linalg import cholesky_with_jitter, solve_psd
from .prior import Dataset, ModelHypers, apply_link, build_covariance


@dataclass(frozen=True)
class HyperPriors:
    """Priors on the hyperparameters: Gaussians on log-noise and the GP mean,
    gamma (shape/scale) on the positive kernel parameters."""

    m_n: float = -2.0
    s2_n: float = 5.0
    m_b: float = -10.0
    s2_b: float = 8.0
    a_rho: float = 4.0
    b_rho: float = 5.0
    a_l: float = 4.0
    b_l: float = 25.0
    a_delta: float = 4.0
    b_delta: float = 25.0

    def __post_init__(self):
        for name in ("s2_n", "s2_b", "a_rho", "b_rho", "a_l", "b_l", "a_delta", "b_delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ChainConfig:
    n_samples: int = 100
    burn_in_max: int = 500
    thin: int = 1
    burn_in_tol: float = 0.01
    burn_in_window: int = 100
    seed: int = 0
    fourier_tol: float = 1e-7

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class ChainSample:
    v_tilde: np.ndarray
    hypers: ModelHypers
    log_post: float


@dataclass
class GibbsResult:
    samples: list[ChainSample]
    burned_in: bool
    burn_in_sweeps: int
    n_sweeps: int


def ess_step(
    v_tilde: np.ndarray,
    loglik,
    rng: np.random.Generator,
    cur_loglik: float | None = None,
) -> tuple[np.ndarray, float]:
    """One elliptical slice sampling transition under a standard-normal prior.

    Rejection free: the angular bracket shrinks toward the current state, so
    the loop terminates with probability one.  Returns the new state and its
    log likelihood.
    """
    if cur_loglik is None:
        cur_loglik = loglik(v_tilde)
    if not np.isfinite(cur_loglik):
        raise ValueError("log likelihood must be finite at the current state")
    nu = rng.standard_normal(v_tilde.shape[0])
    log_y = cur_loglik + np.log(rng.uniform())
    theta = rng.uniform(0.0, 2.0 * np.pi)
    lo, hi = theta - 2.0 * np.pi, theta
    while True:
        proposal = v_tilde * np.cos(theta) + nu * np.sin(theta)
        ll = loglik(proposal)
        if ll > log_y:
            return proposal, ll
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)


def slice_step_hyper(
    x0: float,
    log_density,
    rng: np.random.Generator,
    width: float = 1.0,
    bounds: tuple[float, float] | None = None,
    max_step_out: int = 50,
) -> tuple[float, float]:
    """One univariate stepping-out/shrinkage slice-sampling transition.

    ``bounds`` optionally clamps the bracket (useful for hard support
    limits).  Returns the new point and its log density.
    """
    f0 = log_density(x0)
    if not np.isfinite(f0):
        raise ValueError("log density must be finite at the current point")
    log_y = f0 + np.log(rng.uniform())
    u = rng.uniform()
    left = x0 - width * u
    right = left + width
    if bounds is not None:
        left, right = max(left, bounds[0]), min(right, bounds[1])
    for _ in range(max_step_out):
        if bounds is not None and left <= bounds[0]:
            left = bounds[0]
            break
        if log_density(left) <= log_y:
            break
        left -= width
    for _ in range(max_step_out):
        if bounds is not None and right >= bounds[1]:
            right = bounds[1]
            break
        if log_density(right) <= log_y:
            break
        right += width
    while True:
        x = rng.uniform(left, right)
        fx = log_density(x)
        if fx > log_y:
            return x, fx
        if x < x0:
            left = x
        else:
            right = x


def _log_gamma_logdomain(x: float, shape: float, scale: float) -> float:
    """Log density of a gamma variable expressed in its log coordinate."""
    return shape * x - np.exp(x) / scale


def _log_normal(x: float, mean: float, var: float) -> float:
    return -0.5 * (x - mean) ** 2 / var


@dataclass
class _ChainState:
    """Mutable state of one Gibbs chain."""

    v_tilde: np.ndarray
    log_sigma2: float
    b: float
    log_rho: float
    log_l: float
    log_delta: float | None
    basis: FourierBasis = field(default=None, repr=False)

    def hypers(self, link: str) -> ModelHypers:
        return ModelHypers(
            gp=GpHypers(
                b=self.b, rho=float(np.exp(self.log_rho)), length_scale=float(np.exp(self.log_l))
            ),
            sigma2=float(np.exp(self.log_sigma2)),
            delta=None if self.log_delta is None else float(np.exp(self.log_delta)),
            link=link,
        )


class _Likelihood:
    """Conditional log evidence as a function of the chain state.

    Likelihood operators are cached per (sigma2, delta) pair because slice
    moves re-evaluate the same setting many times.
    """

    def __init__(self, data: Dataset, link: str, fourier_tol: float):
        self.data = data
        self.link = link
        self.fourier_tol = fourier_tol
        self._root_cache: dict[float, np.ndarray] = {}
        self._basis_cache: dict[float, FourierBasis] = {}

    def basis_for(self, log_rho: float, log_l: float) -> FourierBasis:
        key = round(float(log_l), 12)
        basis = self._basis_cache.get(key)
        if basis is None:
            gp = GpHypers(b=0.0, rho=1.0, length_scale=float(np.exp(log_l)))
            basis = build_fourier_basis(self.data.grid, gp, self.fourier_tol)
            self._basis_cache.clear()
            self._basis_cache[key] = basis
        return basis

    def smooth_root(self, delta: float) -> np.ndarray:
        key = round(float(delta), 12)
        root = self._root_cache.get(key)
        if root is None:
            root, _ = smoothing_root(self.data.grid, delta, self.fourier_tol)
            if len(self._root_cache) > 8:
                self._root_cache.clear()
            self._root_cache[key] = root
        return root

    def expand_u(self, state: _ChainState) -> np.ndarray:
        basis = state.basis
        dens = basis.spectral_density_at(float(np.exp(state.log_rho)), float(np.exp(state.log_l)))
        coeff = np.sqrt(np.maximum(dens, 0.0)) * state.v_tilde
        coeff[basis.dc_index] += basis.dc_coefficient(state.b)
        return basis.basis @ coeff

    def log_evidence(self, state: _ChainState) -> float:
        if self.data.n == 0:
            return 0.0
        u = self.expand_u(state)
        g = apply_link(u, self.link)
        sigma2 = float(np.exp(state.log_sigma2))
        if state.log_delta is not None:
            root = self.smooth_root(float(np.exp(state.log_delta)))
            ops = LikelihoodOps(self.data.X, self.data.y, sigma2, root=root)
        else:
            ops = LikelihoodOps(self.data.X, self.data.y, sigma2)
        value, _ = ops.value_grad(g)
        return value


def run_gibbs(
    data: Dataset,
    priors: HyperPriors,
    config: ChainConfig,
    kind: str = "smooth-drd",
    link: str = "exp",
) -> GibbsResult:
    """Gibbs-sample the latent field and hyperparameters.

    Sweeps alternate an elliptical slice move on the whitened field with
    univariate slice moves on log noise, GP mean, log variance, log length
    scale, and (for the smooth model) log smoothing scale, in that order.
    Burn-in is declared when the running posterior-mean weight estimate
    changes by less than ``burn_in_tol`` (relative) over the configured
    window; sampling then continues until ``n_samples`` thinned samples are
    retained.  If burn-in is not reached within ``burn_in_max`` sweeps the
    chain is flagged and samples are collected from there anyway.
    """
    if kind not in ("drd", "smooth-drd"):
        raise ValueError("kind must be 'drd' or 'smooth-drd'")
    rng = np.random.default_rng(config.seed)
    lik = _Likelihood(data, link, config.fourier_tol)

    state = _ChainState(
        v_tilde=np.zeros(0),
        log_sigma2=priors.m_n,
        b=priors.m_b,
        log_rho=float(np.log(priors.a_rho * priors.b_rho)),
        log_l=float(np.log(min(priors.a_l * priors.b_l, max(data.p / 4.0, 2.0)))),
        log_delta=(
            float(np.log(min(priors.a_delta * priors.b_delta, max(data.p / 4.0, 2.0))))
            if kind == "smooth-drd"
            else None
        ),
    )
    state.basis = lik.basis_for(state.log_rho, state.log_l)
    state.v_tilde = np.zeros(state.basis.p_f)

    widths = {
        "log_sigma2": np.sqrt(priors.s2_n),
        "b": np.sqrt(priors.s2_b),
        "log_rho": 1.0,
        "log_l": 1.0,
        "log_delta": 1.0,
    }

    def hyper_logpost(name: str, value: float) -> float:
        old = getattr(state, name)
        setattr(state, name, value)
        try:
            if name == "log_l":
                new_basis = lik.basis_for(state.log_rho, state.log_l)
                old_basis, old_v = state.basis, state.v_tilde
                state.basis = new_basis
                state.v_tilde = _carry(old_v, new_basis.p_f)
                ll = lik.log_evidence(state)
                state.basis, state.v_tilde = old_basis, old_v
            else:
                ll = lik.log_evidence(state)
        finally:
            setattr(state, name, old)
        return ll + _hyper_prior_term(name, value, priors)

    hyper_names = ["log_sigma2", "b", "log_rho", "log_l"]
    if kind == "smooth-drd":
        hyper_names.append("log_delta")

    def one_sweep() -> float:
        def v_loglik(v):
            old = state.v_tilde
            state.v_tilde = v
            try:
                return lik.log_evidence(state)
            finally:
                state.v_tilde = old

        state.v_tilde, _ = ess_step(state.v_tilde, v_loglik, rng, one_sweep.cur_ll)
        for name in hyper_names:
            new_val, _ = slice_step_hyper(
                getattr(state, name),
                lambda x, nm=name: hyper_logpost(nm, x),
                rng,
                width=widths[name],
            )
            if name == "log_l":
                new_basis = lik.basis_for(state.log_rho, new_val)
                if new_basis.p_f != state.basis.p_f:
                    state.v_tilde = _carry(state.v_tilde, new_basis.p_f)
                state.basis = new_basis
            setattr(state, name, new_val)
        one_sweep.cur_ll = lik.log_evidence(state)
        return one_sweep.cur_ll

    one_sweep.cur_ll = lik.log_evidence(state)

    samples: list[ChainSample] = []
    burned_in = False
    burn_in_sweeps = 0
    w_running = np.zeros(data.p)
    w_mark: np.ndarray | None = None
    sweep = 0
    post_sweeps = 0

    # Burn-in phase: monitor the running posterior-mean weight estimate.
    while not burned_in and sweep < config.burn_in_max:
        sweep += 1
        one_sweep()
        mu_w = _conditional_mean(data, state, lik, link)
        w_running = w_running + (mu_w - w_running) / sweep
        if sweep % config.burn_in_window == 0:
            if w_mark is not None:
                denom = max(float(np.linalg.norm(w_mark)), 1e-12)
                if float(np.linalg.norm(w_running - w_mark)) / denom < config.burn_in_tol:
                    burned_in = True
            w_mark = w_running.copy()
    burn_in_sweeps = sweep

    # Sampling phase (entered even when burn-in was never declared).
    while len(samples) < config.n_samples:
        sweep += 1
        post_sweeps += 1
        cur_ll = one_sweep()
        if post_sweeps % config.thin == 0:
            samples.append(_snapshot(state, lik, link, cur_ll, priors, kind))
    return GibbsResult(
        samples=samples, burned_in=burned_in, burn_in_sweeps=burn_in_sweeps, n_sweeps=sweep
    )


def _carry(v: np.ndarray, p_f: int) -> np.ndarray:
    if v.shape[0] == p_f:
        return v
    out = np.zeros(p_f)
    k = min(v.shape[0], p_f)
    out[:k] = v[:k]
    return out


def _hyper_prior_term(name: str, value: float, priors: HyperPriors) -> float:
    if name == "log_sigma2":
        return _log_normal(value, priors.m_n, priors.s2_n)
    if name == "b":
        return _log_normal(value, priors.m_b, priors.s2_b)
    if name == "log_rho":
        return _log_gamma_logdomain(value, priors.a_rho, priors.b_rho)
    if name == "log_l":
        return _log_gamma_logdomain(value, priors.a_l, priors.b_l)
    if name == "log_delta":
        return _log_gamma_logdomain(value, priors.a_delta, priors.b_delta)
    raise KeyError(name)


def _conditional_mean(data: Dataset, state: _ChainState, lik: _Likelihood, link: str):
    """Conditional posterior mean at the current state (low-rank fast path)."""
    if data.n == 0:
        return np.zeros(data.p)
    u = lik.expand_u(state)
    g = apply_link(u, link)
    sigma2 = float(np.exp(state.log_sigma2))
    X, y = data.X, data.y
    root_g = np.sqrt(g)
    if state.log_delta is not None:
        root = lik.smooth_root(float(np.exp(state.log_delta)))
        z = (X * root_g[None, :]) @ root
        m = z.T @ z
        m[np.diag_indices_from(m)] += sigma2
        factor = cholesky_with_jitter(0.5 * (m + m.T))
        beta = solve_psd(factor, z.T @ y)
        q_vec = (y - z @ beta) / sigma2
        return root_g * (root @ (z.T @ q_vec))
    a = X * g[None, :]
    s = a @ X.T
    s = 0.5 * (s + s.T)
    s[np.diag_indices_from(s)] += sigma2
    factor = cholesky_with_jitter(s)
    return g * (X.T @ solve_psd(factor, y))


def _snapshot(
    state: _ChainState,
    lik: _Likelihood,
    link: str,
    cur_ll: float,
    priors: HyperPriors,
    kind: str,
) -> ChainSample:
    log_prior = (
        _hyper_prior_term("log_sigma2", state.log_sigma2, priors)
        + _hyper_prior_term("b", state.b, priors)
        + _hyper_prior_term("log_rho", state.log_rho, priors)
        + _hyper_prior_term("log_l", state.log_l, priors)
    )
    if kind == "smooth-drd":
        log_prior += _hyper_prior_term("log_delta", state.log_delta, priors)
    log_post = cur_ll + log_prior - 0.5 * float(state.v_tilde @ state.v_tilde)
    return ChainSample(
        v_tilde=state.v_tilde.copy(), hypers=state.hypers(link), log_post=float(log_post)
    )


def posterior_mean_weights(
    samples: list[ChainSample], data: Dataset
) -> tuple[np.ndarray, np.ndarray]:
    """Mixture-average the conditional weight posteriors over chain samples.

    Returns the averaged posterior mean and the mixture marginal variance
    (mean of the conditional variances plus the spread of the conditional
    means).
    """
    if not samples:
        raise ValueError("need at least one sample")
    means = np.zeros((len(samples), data.p))
    variances = np.zeros((len(samples), data.p))
    for i, sample in enumerate(samples):
        basis = build_fourier_basis(data.grid, sample.hypers.gp)
        v = _carry(sample.v_tilde, basis.p_f)
        u = whiten_sample(v, basis, sample.hypers.gp.b)
        cov = build_covariance(u, sample.hypers, data.grid)
        mu, var = posterior_mean_diag_var(data, cov, sample.hypers.sigma2)
        means[i] = mu
        variances[i] = var
    w_hat = means.mean(axis=0)
    total_var = variances.mean(axis=0) + means.var(axis=0)
    return w_hat, total_var
