"""
Dense complex linear algebra for small matrices (dim <= ~64).

Matrices are plain ``complex128`` numpy arrays. Every function here is pure;
stacked inputs of shape ``(..., d, d)`` are accepted where noted so callers
can batch thousands of 2x2 or 4x4 problems into one LAPACK call.
"""

from __future__ import annotations

import numpy as np

from . import defaults
from .errors import NoConvergence, NotHermitian


def as_matrix(A) -> np.ndarray:
    """Validate and return ``A`` as a square complex128 array."""
    A = np.asarray(A, dtype=np.complex128)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


def dagger(A: np.ndarray) -> np.ndarray:
    return np.swapaxes(A, -1, -2).conj()


def identity(dim: int) -> np.ndarray:
    return np.eye(dim, dtype=np.complex128)


def pauli() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sx = np.array([[0, 1], [1, 0]], dtype=np.complex128)
    sy = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
    sz = np.array([[1, 0], [0, -1]], dtype=np.complex128)
    return sx, sy, sz


def frobenius(A: np.ndarray) -> np.ndarray | float:
    return np.sqrt(np.sum(np.abs(A) ** 2, axis=(-2, -1)))


def _check_hermitian(H: np.ndarray, tol_rel: float) -> None:
    # Frobenius norms here: this runs on every eigensolve and must stay cheap.
    skew = frobenius(H - dagger(H))
    scale = frobenius(H)
    bad = np.asarray(skew > tol_rel * scale)
    if bad.any():
        raise NotHermitian(
            f"||H - H^dag|| = {np.max(skew):.3e} exceeds {tol_rel:g} * ||H||"
        )


def herm_eig(H, tol_herm: float = defaults.TOL_HERM_REL) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a Hermitian matrix (or a stack of them).

    Returns ascending eigenvalues ``w`` and unitary ``V`` with ``H = V diag(w) V^dag``.
    The Hermitian part is decomposed after the skew part passes the tolerance check.

    Raises
    ------
    NotHermitian
        ``||H - H^dag|| > tol_herm * ||H||``.
    NoConvergence
        LAPACK's implicit-shift iteration did not converge.
    """
    H = np.asarray(H, dtype=np.complex128)
    _check_hermitian(H, tol_herm)
    Hs = 0.5 * (H + dagger(H))
    try:
        w, V = np.linalg.eigh(Hs)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return w, V


def expm_hermitian(H, scale: complex) -> np.ndarray:
    """``exp(scale * H)`` for Hermitian ``H`` via its eigendecomposition.

    Unitary whenever ``scale`` is purely imaginary. Stacks are supported; ``scale``
    may then be an array broadcasting against the stack's leading axes.
    """
    w, V = herm_eig(H)
    scale = np.asarray(scale, dtype=np.complex128)[..., None]
    phases = np.exp(scale * w)
    return (V * phases[..., None, :]) @ dagger(V)


def op_norm(A) -> float:
    """Largest singular value, as sqrt of the top eigenvalue of A^dag A."""
    A = np.asarray(A, dtype=np.complex128)
    w, _ = herm_eig(dagger(A) @ A)
    return float(np.sqrt(max(w[-1], 0.0)))


def op_norms(A: np.ndarray) -> np.ndarray:
    """Vectorised :func:`op_norm` over a stack ``(..., d, d)``."""
    A = np.asarray(A, dtype=np.complex128)
    if A.size == 0:
        return np.zeros(A.shape[:-2])
    G = dagger(A) @ A
    G = 0.5 * (G + dagger(G))
    try:
        w = np.linalg.eigvalsh(G)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return np.sqrt(np.clip(w[..., -1], 0.0, None))


def norm(A, kind: str = "op") -> float:
    """Matrix norm used for every reported deviation: ``"op"`` (default) or ``"fro"``."""
    if kind == "op":
        return op_norm(A)
    if kind == "fro":
        return float(frobenius(np.asarray(A)))
    raise ValueError(f"unknown norm {kind!r}")


def unitarity_defect(U) -> float:
    U = np.asarray(U, dtype=np.complex128)
    return op_norm(dagger(U) @ U - identity(U.shape[-1]))


def tol_unitary(dim: int) -> float:
    return defaults.TOL_UNITARY_PER_DIM * dim


def is_unitary(U, tol: float | None = None) -> bool:
    U = np.asarray(U)
    if tol is None:
        tol = tol_unitary(U.shape[-1])
    return unitarity_defect(U) <= tol


def polar_unitary(A) -> tuple[np.ndarray, float]:
    """Closest unitary to ``A`` (polar factor) and the operator-norm shift it took.

    Uses ``A (A^dag A)^{-1/2}``; ``A`` must be nonsingular.
    """
    A = np.asarray(A, dtype=np.complex128)
    w, V = herm_eig(dagger(A) @ A)
    if w[0] <= 0.0:
        raise np.linalg.LinAlgError("polar projection of a singular matrix")
    inv_sqrt = (V * (1.0 / np.sqrt(w))) @ dagger(V)
    U = A @ inv_sqrt
    return U, op_norm(U - A)


def commutator(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return A @ B - B @ A
