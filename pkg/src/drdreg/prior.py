"""Structured-sparsity priors over regression weights and the matching
generative sampler.

The latent field ``u`` passes through a positive link to give per-coefficient
prior variances ``g = f(u)``.  The plain prior is ``C = diag(g)``; the smooth
variant wraps a unit-variance smoothing kernel in a sandwich
``C = diag(g)^(1/2) Sigma diag(g)^(1/2)``, which keeps the marginal variances
``g`` while correlating neighbouring weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import GpHypers, LocationGrid, build_fourier_basis, smoothing_kernel, whiten_sample
from .linalg import cholesky_with_jitter

LINKS = ("exp", "softplus")

# Variances below this would make the primal precision form overflow, so the
# exp link is floored here and inference switches to the dual (n x n) form.
VARIANCE_FLOOR = 1e-300
DUAL_FORM_THRESHOLD = 1e-12


def apply_link(u: np.ndarray, link: str = "exp") -> np.ndarray:
    """Elementwise positive link ``f(u)``; stable over the whole float range."""
    u = np.asarray(u, dtype=float)
    if link == "exp":
        with np.errstate(over="ignore"):
            g = np.exp(u)
        return np.clip(g, VARIANCE_FLOOR, 1e300)
    if link == "softplus":
        g = np.where(u > 0, u + np.log1p(np.exp(-np.abs(u))), np.log1p(np.exp(np.minimum(u, 0.0))))
        return np.maximum(g, VARIANCE_FLOOR)
    raise ValueError(f"unknown link {link!r}")


def link_grad(u: np.ndarray, link: str = "exp") -> np.ndarray:
    """Derivative ``f'(u)``; zero wherever the link output is floored."""
    u = np.asarray(u, dtype=float)
    if link == "exp":
        with np.errstate(over="ignore"):
            d = np.exp(u)
        d = np.clip(d, 0.0, 1e300)
        return np.where(d > VARIANCE_FLOOR, d, 0.0)
    if link == "softplus":
        return _sigmoid(u)
    raise ValueError(f"unknown link {link!r}")


def link_curvature(u: np.ndarray, link: str = "exp") -> np.ndarray:
    """Second derivative ``f''(u)``."""
    u = np.asarray(u, dtype=float)
    if link == "exp":
        return link_grad(u, "exp")
    if link == "softplus":
        s = _sigmoid(u)
        return s * (1.0 - s)
    raise ValueError(f"unknown link {link!r}")


def _sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


@dataclass(frozen=True)
class ModelHypers:
    """Full hyperparameter set: GP field, optional smoothing, noise, link."""

    gp: GpHypers
    sigma2: float
    delta: float | None = None
    link: str = "exp"

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.delta is not None and not self.delta > 0:
            raise ValueError("delta must be positive when present")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")

    @property
    def kind(self) -> str:
        return "smooth-drd" if self.delta is not None else "drd"


@dataclass
class PriorCovariance:
    """Prior covariance over weights, kept in factored form.

    ``g`` is the diagonal (marginal variances).  ``smoother`` is the unit
    smoothing kernel for the sandwich variant, or None for the plain
    diagonal prior.  The dense matrix is materialized lazily.
    """

    kind: str
    g: np.ndarray
    smoother: np.ndarray | None = None
    _full: np.ndarray | None = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.g.shape[0]

    def full(self) -> np.ndarray:
        if self._full is None:
            if self.smoother is None:
                self._full = np.diag(self.g)
            else:
                root = np.sqrt(self.g)
                c = root[:, None] * self.smoother * root[None, :]
                # The sandwich keeps the marginal variances by construction;
                # pin the diagonal so it holds bit-exactly.
                np.fill_diagonal(c, self.g)
                self._full = c
        return self._full

    def matmul_xt(self, x: np.ndarray) -> np.ndarray:
        """Compute ``C @ x.T`` without materializing C (x is n x p)."""
        if self.smoother is None:
            return self.g[:, None] * x.T
        root = np.sqrt(self.g)
        return root[:, None] * (self.smoother @ (root[:, None] * x.T))


def build_covariance(
    u: np.ndarray, hypers: ModelHypers, grid: LocationGrid
) -> PriorCovariance:
    """Prior covariance from the latent field at the model's link."""
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.p,):
        raise ValueError(f"latent field length {u.shape} does not match grid p={grid.p}")
    g = apply_link(u, hypers.link)
    if hypers.kind == "drd":
        return PriorCovariance(kind="drd", g=g)
    return PriorCovariance(
        kind="smooth-drd", g=g, smoother=smoothing_kernel(grid, hypers.delta)
    )


@dataclass
class Dataset:
    """Regression data: design matrix, responses, coefficient locations."""

    X: np.ndarray
    y: np.ndarray
    grid: LocationGrid
    w_true: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-D")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("y length must match the number of rows of X")
        if self.grid.p != self.X.shape[1]:
            raise ValueError("grid size must match the number of columns of X")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def sample_prior(
    hypers: ModelHypers,
    grid: LocationGrid,
    seed: int | np.random.Generator,
    fourier_tol: float = 1e-7,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(u, w)`` from the generative model.

    ``u`` is drawn through the whitened Fourier path of the GP prior and
    ``w`` from ``N(0, C(u))`` via a (jittered) Cholesky factor of C.  The
    draw order is fixed: the spectral coefficients of u first, then the p
    standard normals behind w.
    """
    rng = np.random.default_rng(seed)
    basis = build_fourier_basis(grid, hypers.gp, fourier_tol)
    v_tilde = rng.standard_normal(basis.p_f)
    u = whiten_sample(v_tilde, basis, hypers.gp.b)
    cov = build_covariance(u, hypers, grid)
    z = rng.standard_normal(grid.p)
    if cov.smoother is None:
        w = np.sqrt(cov.g) * z
    else:
        w = cholesky_with_jitter(cov.full()).lower @ z
    return u, w


def sample_dataset(
    w: np.ndarray,
    n: int,
    sigma2: float,
    seed: int | np.random.Generator,
    grid: LocationGrid | None = None,
) -> Dataset:
    """Standard-normal design with ``y = X w + noise`` at variance sigma2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    w = np.asarray(w, dtype=float)
    rng = np.random.default_rng(seed)
    p = w.shape[0]
    X = rng.standard_normal((n, p))
    y = X @ w
    if sigma2 > 0:
        y = y + np.sqrt(sigma2) * rng.standard_normal(n)
    if grid is None:
        grid = LocationGrid.regular_1d(p)
    return Dataset(X=X, y=y, grid=grid, w_true=w.copy())
