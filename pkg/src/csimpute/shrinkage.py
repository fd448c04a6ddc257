"""Singular-value soft-thresholding: the proximal operator of the nuclear norm."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = ["SvdTriple", "thin_svd", "soft_threshold", "solve_basis_lsq", "nuclear_norm"]


@dataclass(frozen=True)
class SvdTriple:
    """Thin SVD X = u @ diag(d) @ v.T with d sorted descending."""

    u: np.ndarray
    d: np.ndarray
    v: np.ndarray

    def compose(self) -> np.ndarray:
        return (self.u * self.d) @ self.v.T


def thin_svd(x: np.ndarray) -> SvdTriple:
    """Thin SVD, falling back to the slower QR-based LAPACK driver if the
    divide-and-conquer one fails to converge.
    """
    x = np.asarray(x, dtype=float)
    try:
        u, d, vt = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError:
        u, d, vt = scipy.linalg.svd(x, full_matrices=False, lapack_driver="gesvd")
    return SvdTriple(u=u, d=d, v=vt.T)


def soft_threshold(x: np.ndarray, lam: float) -> np.ndarray:
    """Shrink every singular value of x by lam, flooring at zero.

    This is the closed-form minimizer of 0.5*||x - a||_F^2 + lam*||a||_*.
    """
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    s = thin_svd(x)
    return (s.u * np.maximum(s.d - lam, 0.0)) @ s.v.T


def solve_basis_lsq(y: np.ndarray, basis, lam: float) -> np.ndarray:
    """Minimize 0.5*||y - w @ B'||_F^2 + lam*||w||_* for orthonormal-column B.

    Because B has orthonormal columns this reduces to soft-thresholding y @ B.
    """
    y = np.asarray(y, dtype=float)
    b = basis.values
    if y.shape[1] != b.shape[0]:
        raise ValueError(f"y has {y.shape[1]} columns but basis has {b.shape[0]} grid points")
    return soft_threshold(y @ b, lam)


def nuclear_norm(x: np.ndarray) -> float:
    """Sum of singular values."""
    return float(np.linalg.svd(np.asarray(x, dtype=float), compute_uv=False).sum())
