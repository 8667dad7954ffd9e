"""Dense symmetric linear algebra: jittered Cholesky factorizations, solves,
log-determinants, and unitary discrete Fourier transforms.

Everything downstream funnels its factorizations through this module so that
near-singular covariance matrices are handled by a single, uniform jitter
escalation policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import lapack


class PSDError(np.linalg.LinAlgError):
    """Matrix could not be factorized even at the maximum allowed jitter."""


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor of ``A + jitter * I``.

    ``jitter`` records the diagonal boost that was actually needed; callers
    that care about exactness can check it is zero.
    """

    lower: np.ndarray
    jitter: float

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1:
        raise ValueError("matrix dimension must be >= 1")
    if not np.array_equal(a, a.T):
        # Accept tiny asymmetries from accumulated round-off, reject real ones.
        scale = max(np.abs(a).max(), 1.0)
        if np.abs(a - a.T).max() > 1e-12 * scale:
            raise ValueError("matrix is not symmetric")
        a = 0.5 * (a + a.T)
    return a


def cholesky_with_jitter(a: np.ndarray, base_jitter: float = 0.0) -> CholeskyFactor:
    """Cholesky-factorize a symmetric matrix, escalating diagonal jitter on failure.

    The jitter starts at ``base_jitter`` and grows by factors of 10 up to
    ``1e-4 * mean(diag(a))``; the first level at which the factorization
    succeeds is recorded on the returned factor.

    Raises
    ------
    PSDError
        If the factorization still fails at the maximum jitter.
    """
    a = _check_symmetric(a)
    if base_jitter < 0:
        raise ValueError("base_jitter must be nonnegative")
    scale = float(np.mean(np.abs(np.diag(a))))
    if scale == 0.0:
        scale = 1.0
    max_jitter = 1e-4 * scale
    jitter = float(base_jitter)
    while True:
        mat = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
        c, info = lapack.dpotrf(mat, lower=1)
        if info == 0 and np.all(np.diag(c) > 0):
            return CholeskyFactor(lower=np.tril(c), jitter=jitter)
        if jitter >= max_jitter:
            raise PSDError(
                f"Cholesky failed at maximum jitter {max_jitter:.3e} "
                f"(dim {a.shape[0]})"
            )
        jitter = min(max_jitter, 1e-12 * scale if jitter == 0.0 else 10.0 * jitter)


def logdet_psd(factor: CholeskyFactor) -> float:
    """Log-determinant of the factorized matrix, ``2 * sum(log(diag(L)))``."""
    return float(2.0 * np.sum(np.log(np.diag(factor.lower))))


def solve_psd(factor: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve ``(A + jitter*I) x = b`` from the precomputed factor."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.dim:
        raise ValueError(f"shape mismatch: factor dim {factor.dim}, rhs {b.shape}")
    x, info = lapack.dpotrs(factor.lower, b, lower=1)
    if info != 0:
        raise PSDError(f"triangular solve failed with LAPACK info {info}")
    return x


def solve_spd(a: np.ndarray, b: np.ndarray, base_jitter: float = 0.0) -> np.ndarray:
    """One-shot jittered solve; convenience wrapper around the two-step API."""
    return solve_psd(cholesky_with_jitter(a, base_jitter), b)


@dataclass(frozen=True)
class SpdInverse:
    """Explicit inverse plus log-determinant of ``A + jitter * I``.

    Matrix right-hand sides then reduce to GEMMs, which on this LAPACK
    build is an order of magnitude faster than repeated triangular solves.
    """

    inv: np.ndarray
    logdet: float
    jitter: float

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.inv @ b


def spd_inverse(a: np.ndarray, base_jitter: float = 0.0) -> SpdInverse:
    """Invert a symmetric PD matrix with the same jitter policy as the factorizer."""
    a = np.asarray(a, dtype=float)
    scale = float(np.mean(np.abs(np.diag(a))))
    if scale == 0.0:
        scale = 1.0
    max_jitter = 1e-4 * scale
    jitter = float(base_jitter)
    while True:
        mat = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
        c, info = lapack.dpotrf(mat, lower=1)
        if info == 0:
            diag = np.diag(c)
            if np.all(diag > 0):
                logdet = float(2.0 * np.sum(np.log(diag)))
                inv_lower, info2 = lapack.dpotri(c, lower=1)
                if info2 == 0:
                    inv = np.tril(inv_lower)
                    inv = inv + np.tril(inv_lower, -1).T
                    return SpdInverse(inv=inv, logdet=logdet, jitter=jitter)
        if jitter >= max_jitter:
            raise PSDError(
                f"SPD inversion failed at maximum jitter {max_jitter:.3e} "
                f"(dim {a.shape[0]})"
            )
        jitter = min(max_jitter, 1e-12 * scale if jitter == 0.0 else 10.0 * jitter)


def dft_real(signal: np.ndarray) -> np.ndarray:
    """Unitary DFT of a real vector (complex output, Parseval-exact)."""
    signal = np.asarray(signal, dtype=float)
    if signal.ndim != 1 or signal.size < 1:
        raise ValueError("signal must be a vector of length >= 1")
    return np.fft.fft(signal) / np.sqrt(signal.size)


def idft_real(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft_real`; returns the real part of the reconstruction."""
    spectrum = np.asarray(spectrum, dtype=complex)
    if spectrum.ndim != 1 or spectrum.size < 1:
        raise ValueError("spectrum must be a vector of length >= 1")
    return np.real(np.fft.ifft(spectrum) * np.sqrt(spectrum.size))
