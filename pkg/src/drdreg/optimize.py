"""Shared quasi-Newton driver.

Thin wrapper over scipy's limited-memory BFGS that enforces this package's
convergence contract: the gradient infinity-norm at the returned point must
be below ``tol_scale * (1 + |objective|)``, and the per-iteration objective
trace is recorded so callers can assert monotone decrease.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    trace: list[float] = field(default_factory=list)
    x_trace: list[np.ndarray] = field(default_factory=list)

    @property
    def grad_inf_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


def minimize_lbfgs(
    fun_grad,
    x0: np.ndarray,
    tol_scale: float = 1e-5,
    max_iter: int = 500,
    bounds=None,
    memory: int = 20,
    record_iterates: bool = False,
) -> OptimResult:
    """Minimize ``fun_grad`` (returning ``(f, grad)``) from ``x0``.

    ``converged`` reports whether the relative-gradient contract was met;
    on hitting the iteration cap the best iterate found is still returned.
    """
    x0 = np.asarray(x0, dtype=float)
    cache: dict = {}
    trace: list[float] = []
    x_trace: list[np.ndarray] = []

    def wrapped(x):
        f, g = fun_grad(x)
        cache["x"] = np.array(x, copy=True)
        cache["f"] = float(f)
        cache["g"] = np.asarray(g, dtype=float)
        return float(f), np.asarray(g, dtype=float)

    def callback(xk):
        if record_iterates:
            x_trace.append(np.array(xk, copy=True))
        if "x" in cache and np.array_equal(cache["x"], xk):
            trace.append(cache["f"])
        else:
            f, _ = fun_grad(xk)
            trace.append(float(f))

    res = scipy.optimize.minimize(
        wrapped,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        callback=callback,
        options={
            "maxcor": memory,
            "maxiter": max_iter,
            "ftol": 1e-14,
            "gtol": 1e-9,
            "maxls": 50,
        },
    )
    f_final, g_final = fun_grad(res.x)
    gnorm = float(np.max(np.abs(g_final))) if g_final.size else 0.0
    converged = gnorm < tol_scale * (1.0 + abs(f_final))
    return OptimResult(
        x=np.asarray(res.x, dtype=float),
        fun=float(f_final),
        grad=np.asarray(g_final, dtype=float),
        n_iter=int(res.nit),
        converged=converged,
        trace=trace,
        x_trace=x_trace,
    )
