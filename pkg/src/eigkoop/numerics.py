"""Dense complex linear-algebra primitives.

Matrices are plain ``numpy`` arrays; real inputs are promoted to
``complex128`` so one code path serves real and complex data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

__all__ = [
    "JordanBlock",
    "as_cmat",
    "pinv_solve",
    "ridge_solve",
    "jordan_exp",
    "rank_rtol",
]


@dataclass(frozen=True)
class JordanBlock:
    """Single Jordan block ``lam * I + N`` of dimension ``size``."""

    lam: complex
    size: int = 1

    def __post_init__(self):
        if int(self.size) < 1:
            raise ValueError(f"Jordan block size must be >= 1, got {self.size}")
        object.__setattr__(self, "size", int(self.size))
        object.__setattr__(self, "lam", complex(self.lam))

    def matrix(self) -> np.ndarray:
        """Explicit ``size x size`` block."""
        J = np.eye(self.size, dtype=complex) * self.lam
        J += np.eye(self.size, k=1, dtype=complex)
        return J


def as_cmat(A, name: str = "A") -> np.ndarray:
    """Return ``A`` as a finite 2-D complex array (vectors become columns)."""
    A = np.asarray(A)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    elif A.ndim == 1:
        A = A.reshape(-1, 1)
    elif A.ndim != 2:
        raise DimensionError(f"{name} must be 1-D or 2-D, got ndim={A.ndim}")
    A = A.astype(complex, copy=False)
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def rank_rtol(shape) -> float:
    """Relative singular-value cutoff used by :func:`pinv_solve`."""
    return 1e-12 * max(shape)


def pinv_solve(A, b, rtol: float | None = None) -> np.ndarray:
    """Minimum-norm least-squares solution of ``A x = b``.

    Singular values below ``rtol * sigma_max`` are discarded. An all-zero
    ``A`` yields the zero solution.

    Parameters
    ----------
    A : array_like, shape (p, n)
    b : array_like, shape (p,) or (p, k)
    rtol : float, optional
        Defaults to ``1e-12 * max(p, n)``.

    Returns
    -------
    x : ndarray, shape (n,) or (n, k)
    """
    vector_rhs = np.ndim(b) == 1
    A = as_cmat(A, "A")
    B = as_cmat(b, "b")
    if A.size == 0:
        raise DimensionError("A must be nonempty")
    if B.shape[0] != A.shape[0]:
        raise DimensionError(
            f"row mismatch: A has {A.shape[0]} rows, b has {B.shape[0]}")
    if rtol is None:
        rtol = rank_rtol(A.shape)
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    x = np.zeros((A.shape[1], B.shape[1]), dtype=complex)
    if s.size and s[0] > 0:
        keep = s > rtol * s[0]
        x = Vh[keep].conj().T @ ((U[:, keep].conj().T @ B) / s[keep, None])
    return x[:, 0] if vector_rhs else x


def ridge_solve(A, b, delta2: float) -> np.ndarray:
    """Solve ``min ||A x - b||^2 + delta2 ||x||^2``.

    ``delta2 = 0`` reduces exactly to :func:`pinv_solve`.
    """
    if delta2 < 0:
        raise ValueError(f"delta2 must be nonnegative, got {delta2}")
    if delta2 == 0:
        return pinv_solve(A, b)
    vector_rhs = np.ndim(b) == 1
    A = as_cmat(A, "A")
    B = as_cmat(b, "b")
    if B.shape[0] != A.shape[0]:
        raise DimensionError(
            f"row mismatch: A has {A.shape[0]} rows, b has {B.shape[0]}")
    # Filter factors s / (s^2 + delta2) on the thin SVD.
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    x = Vh.conj().T @ ((s / (s**2 + delta2))[:, None] * (U.conj().T @ B))
    return x[:, 0] if vector_rhs else x


def jordan_exp(J: JordanBlock, t: float) -> np.ndarray:
    """Closed-form ``expm(J * t)`` for a single Jordan block.

    Entry ``(i, i+k)`` equals ``exp(lam t) t^k / k!``.
    """
    t = float(t)
    if not math.isfinite(t):
        raise ValueError(f"t must be finite, got {t}")
    n = J.size
    E = np.zeros((n, n), dtype=complex)
    base = np.exp(J.lam * t)
    coef = 1.0
    for k in range(n):
        if k:
            coef *= t / k
        idx = np.arange(n - k)
        E[idx, idx + k] = base * coef
    return E
