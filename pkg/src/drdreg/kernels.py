"""Squared-exponential kernels over coefficient locations and the truncated
Fourier representation of a stationary GP on a regular 1D grid.

The Fourier path embeds the grid in a circle large enough that wrap-around is
negligible, uses the closed-form spectral density of the squared-exponential
kernel (alias-summed so it stays exact for short length scales), and keeps
only frequencies whose spectral density clears a relative threshold.  The
result is a tall-skinny map ``basis`` from kept Fourier coefficients to the
space domain, with a diagonal prior in the spectral domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_FOURIER_TOL = 1e-7


class GridError(ValueError):
    """Grid does not satisfy the requirements of the requested operation."""


@dataclass(frozen=True)
class LocationGrid:
    """Spatial locations of the regression coefficients, shape ``(p, ndim)``."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if coords.ndim != 2 or coords.shape[0] < 1:
            raise GridError("coords must be a (p, ndim) array with p >= 1")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def regular_1d(cls, p: int, spacing: float = 1.0) -> "LocationGrid":
        if p < 1:
            raise GridError("p must be >= 1")
        return cls(np.arange(p, dtype=float)[:, None] * spacing)

    @property
    def p(self) -> int:
        return self.coords.shape[0]

    @property
    def ndim(self) -> int:
        return self.coords.shape[1]

    def spacing_1d(self) -> float:
        """Spacing of a regular 1D grid; raises if the grid is not one."""
        if self.ndim != 1:
            raise GridError("grid is not one-dimensional")
        x = self.coords[:, 0]
        if self.p == 1:
            return 1.0
        diffs = np.diff(x)
        step = diffs[0]
        if step <= 0 or not np.allclose(diffs, step, rtol=1e-9, atol=0.0):
            raise GridError("grid is not a regular 1D lattice")
        return float(step)


@dataclass(frozen=True)
class GpHypers:
    """Mean, marginal variance, and length scale of the latent GP."""

    b: float
    rho: float
    length_scale: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")


def squared_distances(grid: LocationGrid) -> np.ndarray:
    """Pairwise squared Euclidean distances between grid locations."""
    x = grid.coords
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def se_kernel(grid: LocationGrid, rho: float, length_scale: float) -> np.ndarray:
    """Squared-exponential covariance ``rho * exp(-d^2 / (2 l^2))``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    if not length_scale > 0:
        raise ValueError("length_scale must be positive")
    return rho * np.exp(squared_distances(grid) / (-2.0 * length_scale**2))


def smoothing_kernel(grid: LocationGrid, delta: float) -> np.ndarray:
    """Unit-variance squared-exponential kernel with length scale ``delta``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    return np.exp(squared_distances(grid) / (-2.0 * delta**2))


def se_spectral_density(
    omega: np.ndarray, rho: float, length_scale: float
) -> np.ndarray:
    """Spectral density of the SE kernel on a unit-spaced lattice.

    ``omega`` is angular frequency in radians per grid step.  The continuous
    density ``rho * l * sqrt(2 pi) * exp(-l^2 w^2 / 2)`` is summed over alias
    images at ``omega + 2 pi m`` so that short length scales (order of the
    grid spacing or below) keep the correct marginal variance.
    """
    return se_spectral_density_with_grad(omega, rho, length_scale)[0]


def se_spectral_density_with_grad(
    omega: np.ndarray, rho: float, length_scale: float
) -> tuple[np.ndarray, np.ndarray]:
    """Spectral density and its derivative with respect to ``log length_scale``."""
    omega = np.asarray(omega, dtype=float)
    n_alias = int(np.ceil(4.0 / length_scale)) + 1
    m = 2.0 * np.pi * np.arange(-n_alias, n_alias + 1)
    w = omega[..., None] + m
    lw2 = (length_scale * w) ** 2
    e = np.exp(-0.5 * lw2)
    scale = rho * length_scale * np.sqrt(2.0 * np.pi)
    dens = scale * e.sum(axis=-1)
    d_dlogl = scale * (e * (1.0 - lw2)).sum(axis=-1)
    return dens, d_dlogl


@dataclass(frozen=True)
class FourierBasis:
    """Truncated real Fourier map for a regular 1D grid.

    ``basis`` has shape ``(p, p_f)`` and maps kept Fourier coefficients to
    the space domain; the spectral prior is diagonal with standard deviation
    ``spectral_sd``.  ``freqs`` stores the angular frequency (radians per
    grid step) of each kept column so the spectral prior can be re-evaluated
    at new hyperparameters without rebuilding the basis.
    """

    basis: np.ndarray
    spectral_sd: np.ndarray
    freqs: np.ndarray
    dc_index: int
    n_circ: int
    cutoff_fraction: float

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    @property
    def p_f(self) -> int:
        return self.basis.shape[1]

    def dc_coefficient(self, b: float) -> float:
        """Spectral-domain coefficient whose image under ``basis`` is ``b * 1``."""
        return float(b) * np.sqrt(self.n_circ)

    def mean_coefficients(self, b: float) -> np.ndarray:
        out = np.zeros(self.p_f)
        out[self.dc_index] = self.dc_coefficient(b)
        return out

    def spectral_density_at(self, rho: float, length_scale: float) -> np.ndarray:
        """Spectral densities of a different (rho, l) at this basis's frequencies."""
        return se_spectral_density(self.freqs, rho, length_scale)


def build_fourier_basis(
    grid: LocationGrid, hypers: GpHypers, tol: float = DEFAULT_FOURIER_TOL
) -> FourierBasis:
    """Construct the truncated Fourier representation of the latent GP prior.

    Keeps the frequencies whose spectral density is at least ``tol`` times
    the maximum density (capped at ``p`` components so the representation
    never exceeds the space dimension).  With standard-normal coefficients
    scaled by ``spectral_sd``, the image covariance approximates the exact
    SE kernel matrix on the grid.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    spacing = grid.spacing_1d()
    p = grid.p
    l_units = hypers.length_scale / spacing

    # Circular embedding: pad by several length scales so wrap-around decay
    # is far below the truncation threshold.
    n_circ = p + max(1, int(np.ceil(4.0 * l_units)))
    n_half = n_circ // 2
    j = np.arange(n_half + 1)
    omega = 2.0 * np.pi * j / n_circ
    dens = se_spectral_density(omega, hypers.rho, l_units)
    keep = np.flatnonzero(dens >= tol * dens.max())

    cols = []
    col_freqs = []
    col_dens = []
    x = np.arange(p, dtype=float)
    for jj in keep:
        w = omega[jj]
        if jj == 0:
            cols.append(np.full(p, 1.0 / np.sqrt(n_circ)))
            col_freqs.append(0.0)
            col_dens.append(dens[jj])
        elif 2 * jj == n_circ:
            cols.append(np.cos(np.pi * x) / np.sqrt(n_circ))
            col_freqs.append(w)
            col_dens.append(dens[jj])
        else:
            scale = np.sqrt(2.0 / n_circ)
            cols.append(scale * np.cos(w * x))
            cols.append(scale * np.sin(w * x))
            col_freqs.extend([w, w])
            col_dens.extend([dens[jj], dens[jj]])

    # Columns come out ordered by |frequency|, so a cap at p keeps the
    # largest spectral densities.
    if len(cols) > p:
        cols, col_freqs, col_dens = cols[:p], col_freqs[:p], col_dens[:p]

    basis = np.column_stack(cols)
    return FourierBasis(
        basis=basis,
        spectral_sd=np.sqrt(np.asarray(col_dens)),
        freqs=np.asarray(col_freqs),
        dc_index=0,
        n_circ=n_circ,
        cutoff_fraction=tol,
    )


def whiten_sample(v_tilde: np.ndarray, basis: FourierBasis, b: float) -> np.ndarray:
    """Map a whitened spectral vector to the space domain.

    ``u = basis @ (spectral_sd * v_tilde + b_tilde)`` where ``b_tilde`` is
    zero except for the DC entry carrying the mean ``b``.
    """
    v_tilde = np.asarray(v_tilde, dtype=float)
    if v_tilde.shape != (basis.p_f,):
        raise ValueError(
            f"expected whitened vector of length {basis.p_f}, got {v_tilde.shape}"
        )
    coeff = basis.spectral_sd * v_tilde
    coeff[basis.dc_index] += basis.dc_coefficient(b)
    return basis.basis @ coeff
