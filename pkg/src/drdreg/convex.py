"""Two-stage convex relaxation of the latent-mode search.

The negative log posterior in raw latent coordinates splits into a log-det
term, a data quadratic, and the GP prior quadratic.  The data quadratic is
the only non-convex piece; linearizing it in ``exp(-u)`` through a dual
vector gives a convex surrogate that upper-bounds the true objective and
touches it at the current iterate, so alternating surrogate minimization
with the closed-form dual refresh descends monotonically.

This module operates on the plain (diagonal) prior with the exponential
link, which is what makes the term-by-term convexity argument go through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .kernels import se_kernel
from .linalg import CholeskyFactor, cholesky_with_jitter, solve_psd, spd_inverse
from .optimize import OptimResult, minimize_lbfgs
from .prior import Dataset, ModelHypers

EXP_CLIP = 1e300


def _clipped_exp(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.minimum(np.exp(x), EXP_CLIP)


@dataclass
class ObjectiveSplit:
    """Term-by-term evaluators of the negative log posterior in raw coordinates.

    ``l1`` is half the log determinant of the marginal data covariance,
    ``l2`` half the data quadratic under its inverse, ``l3`` half the GP
    prior quadratic; their sum equals the negative log posterior up to an
    additive constant.
    """

    data: Dataset
    hypers: ModelHypers
    k_factor: CholeskyFactor = field(default=None, repr=False)

    def __post_init__(self):
        if self.hypers.kind != "drd" or self.hypers.link != "exp":
            raise ValueError(
                "the convex relaxation is defined for the plain prior with the exp link"
            )
        if self.k_factor is None:
            gp = self.hypers.gp
            k = se_kernel(self.data.grid, gp.rho, gp.length_scale)
            self.k_factor = cholesky_with_jitter(k, 1e-10 * gp.rho)

    # -- prior-whitened coordinates for the inner solver --------------------
    # The surrogate stays convex under this affine change of variables, and
    # the prior quadratic becomes an identity ridge, which removes the
    # kernel's conditioning from the inner problem.
    def to_whitened(self, u: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_triangular(
            self.k_factor.lower, u - self.hypers.gp.b, lower=True, check_finite=False
        )

    def from_whitened(self, r: np.ndarray) -> np.ndarray:
        return self.k_factor.lower @ r + self.hypers.gp.b

    # -- data terms --------------------------------------------------------
    def _s_solver(self, u):
        X = self.data.X
        g = _clipped_exp(u)
        s = (X * g[None, :]) @ X.T
        s = 0.5 * (s + s.T)
        s[np.diag_indices_from(s)] += self.hypers.sigma2
        return g, spd_inverse(s)

    def l1(self, u: np.ndarray) -> float:
        _, solver = self._s_solver(u)
        return 0.5 * solver.logdet

    def l2(self, u: np.ndarray) -> float:
        _, solver = self._s_solver(u)
        y = self.data.y
        return 0.5 * float(y @ (solver.inv @ y))

    def l3(self, u: np.ndarray) -> float:
        resid = u - self.hypers.gp.b
        return 0.5 * float(resid @ solve_psd(self.k_factor, resid))

    def value(self, u: np.ndarray) -> float:
        g, solver = self._s_solver(u)
        y = self.data.y
        return (
            0.5 * solver.logdet
            + 0.5 * float(y @ (solver.inv @ y))
            + self.l3(u)
        )

    def value_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        """True objective and gradient (used for curvature probes and traces)."""
        X, y = self.data.X, self.data.y
        g, solver = self._s_solver(u)
        q = solver.inv @ y
        w = solver.inv @ X
        m_diag = np.einsum("ni,ni->i", X, w)
        s_vec = X.T @ q
        resid = u - self.hypers.gp.b
        k_resid = solve_psd(self.k_factor, resid)
        value = 0.5 * solver.logdet + 0.5 * float(y @ q) + 0.5 * float(resid @ k_resid)
        grad = 0.5 * g * m_diag - 0.5 * g * s_vec**2 + k_resid
        return value, grad

    def surrogate_value_grad(
        self, u: np.ndarray, z: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Convex upper bound ``z . exp(-u) + l1 + l3`` and its gradient."""
        X = self.data.X
        g, solver = self._s_solver(u)
        h = _clipped_exp(-u)
        w = solver.inv @ X
        m_diag = np.einsum("ni,ni->i", X, w)
        resid = u - self.hypers.gp.b
        k_resid = solve_psd(self.k_factor, resid)
        value = float(z @ h) + 0.5 * solver.logdet + 0.5 * float(resid @ k_resid)
        grad = -z * h + 0.5 * g * m_diag + k_resid
        return value, grad


def eval_upper_bound(u: np.ndarray, z: np.ndarray, split: ObjectiveSplit) -> float:
    """Surrogate value ``z . exp(-u) + l1(u) + l3(u)``.

    The conjugate offset of the dual construction is constant in ``u`` and
    omitted; majorization and tangency are therefore properties of
    differences of this function.
    """
    return split.surrogate_value_grad(u, np.asarray(z, dtype=float))[0]


def dual_update(u: np.ndarray, data: Dataset, sigma2: float) -> np.ndarray:
    """Closed-form dual refresh: the gradient of the data quadratic in exp(-u).

    ``z_i = ([M^{-1} X^T y]_i)^2 / (2 sigma2^2)`` with
    ``M = X^T X / sigma2 + diag(exp(-u))``; entries are squares, hence
    always nonnegative.
    """
    u = np.asarray(u, dtype=float)
    X, y = data.X, data.y
    h = _clipped_exp(-u)
    m = X.T @ X / sigma2 + np.diag(h)
    factor = cholesky_with_jitter(0.5 * (m + m.T))
    v = solve_psd(factor, X.T @ y)
    return v**2 / (2.0 * sigma2**2)


def inner_convex_solve(
    z: np.ndarray,
    split: ObjectiveSplit,
    init_u: np.ndarray,
    max_iter: int = 200,
    tol_scale: float = 1e-6,
) -> OptimResult:
    """Minimize the convex surrogate at fixed dual variables.

    Any stationary point is the global minimizer of the surrogate, so a
    quasi-Newton descent from the touching point suffices.  The search runs
    in prior-whitened coordinates (the gradient tolerance applies there);
    the returned iterate is mapped back to raw latent coordinates.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("dual variables must be nonnegative")
    lower = split.k_factor.lower

    def fun_grad(r):
        value, grad_u = split.surrogate_value_grad(split.from_whitened(r), z)
        return value, lower.T @ grad_u

    res = minimize_lbfgs(
        fun_grad, split.to_whitened(np.asarray(init_u, dtype=float)),
        tol_scale=tol_scale, max_iter=max_iter,
    )
    res.x = split.from_whitened(res.x)
    return res


@dataclass
class ConvexConfig:
    u_tol: float = 1e-4
    max_outer: int = 100
    inner_max_iter: int = 200
    inner_tol_scale: float = 1e-6
    escape_probes: int = 5
    escape_seed: int = 0
    record_iterates: bool = False


@dataclass
class ConvexResult:
    u: np.ndarray
    trace: list[float]
    converged: bool
    n_outer: int
    u_trace: list[np.ndarray] = field(default_factory=list)


def fit_convex(
    data: Dataset,
    hypers: ModelHypers,
    config: ConvexConfig | None = None,
    init_u: np.ndarray | None = None,
) -> ConvexResult:
    """Alternate surrogate minimization and dual refresh until the latents settle.

    The recorded trace holds the true objective at each outer iterate; by
    the tangent-majorization construction it is non-increasing.  If the
    loop settles onto a point with detectable negative curvature, a single
    small perturbation is applied to escape the saddle.
    """
    config = config or ConvexConfig()
    split = ObjectiveSplit(data=data, hypers=hypers)
    if init_u is None:
        u = np.full(data.p, hypers.gp.b, dtype=float)
    else:
        u = np.asarray(init_u, dtype=float).copy()
    z = np.ones(data.p)
    # The trace holds the true objective at the outer iterates; the first
    # inner solve runs from the unit dual, so descent is guaranteed from
    # the first recorded iterate onward.
    trace: list[float] = []
    converged = False
    perturbed = False
    rng = np.random.default_rng(config.escape_seed)

    u_trace: list[np.ndarray] = []
    it = 0
    while it < config.max_outer:
        it += 1
        res = inner_convex_solve(
            z, split, u, max_iter=config.inner_max_iter, tol_scale=config.inner_tol_scale
        )
        u_new = res.x
        trace.append(split.value(u_new))
        if config.record_iterates:
            u_trace.append(u_new.copy())
        z = dual_update(u_new, data, hypers.sigma2)
        change = float(np.linalg.norm(u_new - u)) / max(float(np.linalg.norm(u)), 1e-12)
        u = u_new
        if change < config.u_tol:
            if not perturbed and _has_negative_curvature(
                split, u, config.escape_probes, rng
            ):
                u = u + 1e-3 * _random_unit(u.size, rng)
                perturbed = True
                continue
            converged = True
            break
    return ConvexResult(u=u, trace=trace, converged=converged, n_outer=it, u_trace=u_trace)


def _random_unit(p: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(p)
    return v / np.linalg.norm(v)


def _has_negative_curvature(
    split: ObjectiveSplit, u: np.ndarray, probes: int, rng: np.random.Generator
) -> bool:
    """Random Hessian-vector probes of the true objective via gradient differences."""
    eps = 1e-5
    scale = max(1.0, float(np.linalg.norm(u)))
    for _ in range(probes):
        v = _random_unit(u.size, rng)
        _, g_plus = split.value_grad(u + eps * v)
        _, g_minus = split.value_grad(u - eps * v)
        curvature = float(v @ (g_plus - g_minus)) / (2.0 * eps)
        if curvature < -1e-6 * scale:
            return True
    return False
