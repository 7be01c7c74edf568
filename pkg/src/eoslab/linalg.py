"""Dense float64 matrix kernels and small symmetric eigen-routines.

Everything at this layer is a plain 2-D numpy array (row-major, float64).
The eigensolver runs cyclic Jacobi sweeps for the small symmetric systems
the rest of the package actually produces (output-curvature blocks, Gram
matrices of a handful of rows) and hands anything larger to LAPACK so that
dense test oracles stay fast.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NotPsdError, ShapeError

# Cyclic Jacobi is competitive (and dependency-light) up to roughly this
# order; beyond it LAPACK's tridiagonal path wins by a wide margin.
_JACOBI_MAX_DIM = 64

# Off-diagonal Frobenius mass below this fraction of the input norm counts
# as diagonalized.
_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60

# Columns whose norm collapses below this fraction of their original norm
# during orthogonalization are treated as linearly dependent.
_QR_DEFICIENCY_TOL = 1e-12

# Fixed stream for re-randomized deficient columns: qr() must be a pure
# function of its input.
_QR_RESEED = 0x5EED_C01


def _as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    return a


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix.

    values are sorted descending; vectors[:, j] is the unit eigenvector
    paired with values[j], columns orthonormal.
    """

    values: np.ndarray
    vectors: np.ndarray


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with explicit conformability checking."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _check_symmetric(a: np.ndarray, tol: float = 1e-10) -> None:
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 0.0)
    if a.size and float(np.max(np.abs(a - a.T))) > tol * scale:
        raise ShapeError("matrix is not symmetric within tolerance")


def _jacobi_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi sweeps; returns (eigenvalues, eigenvectors) unsorted."""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(_JACOBI_MAX_SWEEPS):
        off_diag = a - np.diag(np.diag(a))
        if float(np.linalg.norm(off_diag)) <= _JACOBI_TOL * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                # Stable rotation angle (Golub & Van Loan style).
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    return np.diag(a).copy(), v


def sym_eig(m) -> SymEig:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    a = _as_matrix(m)
    _check_symmetric(a)
    if a.shape[0] == 0:
        return SymEig(np.zeros(0), np.zeros((0, 0)))
    sym = 0.5 * (a + a.T)
    if a.shape[0] <= _JACOBI_MAX_DIM:
        values, vectors = _jacobi_eig(sym)
    else:
        values, vectors = np.linalg.eigh(sym)
    order = np.argsort(-values, kind="stable")
    return SymEig(values[order], vectors[:, order])


def psd_sqrt(m, *, clamp_tol: float = 1e-12) -> np.ndarray:
    """Symmetric PSD square root R with R @ R = m.

    Eigenvalues in [-clamp_tol, 0) are rounding debris and are clamped to
    zero; anything more negative raises NotPsdError.
    """
    eig = sym_eig(m)
    if eig.values.size and float(eig.values[-1]) < -clamp_tol:
        raise NotPsdError(
            f"matrix has eigenvalue {eig.values[-1]:.3e} below -{clamp_tol:.0e}"
        )
    clamped = np.maximum(eig.values, 0.0)
    root = (eig.vectors * np.sqrt(clamped)) @ eig.vectors.T
    return 0.5 * (root + root.T)


def _fresh_column(n: int, attempt: int) -> np.ndarray:
    rng = np.random.default_rng((_QR_RESEED, n, attempt))
    return rng.standard_normal(n)


def qr(m) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR via modified Gram-Schmidt with one re-orthogonalization pass.

    Requires rows >= cols. Columns that collapse during orthogonalization
    (linearly dependent input) are replaced by fresh deterministic random
    directions orthogonal to the columns already accepted; their diagonal
    entry in the triangular factor is set to zero so Q @ R still
    reconstructs the input to rounding.
    """
    a = _as_matrix(m)
    nrows, ncols = a.shape
    if nrows < ncols:
        raise ShapeError(f"qr requires rows >= cols, got {a.shape}")
    q = np.zeros((nrows, ncols))
    r = np.zeros((ncols, ncols))
    for j in range(ncols):
        w = a[:, j].copy()
        col_norm = float(np.linalg.norm(w))
        for _ in range(2):  # MGS + one re-orthogonalization pass
            for i in range(j):
                h = float(q[:, i] @ w)
                r[i, j] += h
                w -= h * q[:, i]
        norm = float(np.linalg.norm(w))
        if norm > _QR_DEFICIENCY_TOL * max(col_norm, 1.0):
            r[j, j] = norm
            q[:, j] = w / norm
            continue
        # Deficient column: keep the factorization exact (r[j, j] = 0) and
        # fill the orthonormal basis with a deterministic fresh direction.
        for attempt in range(64):
            w = _fresh_column(nrows, attempt)
            for _ in range(2):
                for i in range(j):
                    w -= (q[:, i] @ w) * q[:, i]
            norm = float(np.linalg.norm(w))
            if norm > 1e-6:
                q[:, j] = w / norm
                break
        else:  # pragma: no cover - would need nrows-dim basis exhausted
            raise ShapeError("could not complete orthonormal basis")
        r[j, j] = 0.0
    return q, r


def top_singular_value_sq(m, tol: float = 1e-10, max_iters: int = 100_000) -> float:
    """Largest squared singular value of a rectangular matrix.

    Runs power iteration on the smaller-side Gram matrix with a
    Rayleigh-quotient stop: iteration ends when the extrapolated remaining
    error (geometric-tail estimate from successive increments) drops below
    tol relative to the current value.
    """
    a = _as_matrix(m)
    if a.size == 0 or not np.any(a):
        return 0.0
    g = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    g = 0.5 * (g + g.T)
    n = g.shape[0]
    if n == 1:
        return float(g[0, 0])
    rng = np.random.default_rng((_QR_RESEED, n, 0xA11))
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    ray_prev = 0.0
    delta_prev = np.inf
    for _ in range(max_iters):
        w = g @ v
        ray = float(v @ w)
        delta = abs(ray - ray_prev)
        floor = tol * max(abs(ray), 1e-300)
        if delta <= floor:
            # Geometric-tail safeguard: with contraction ratio rho the
            # remaining error is about delta * rho / (1 - rho).
            rho = delta / delta_prev if delta_prev > 0 else 0.0
            if rho < 0.999 and delta * rho / max(1.0 - rho, 1e-6) <= floor:
                return ray
            if delta <= 1e-3 * floor:
                return ray
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0  # v landed exactly in the kernel of a PSD matrix
        v = w / norm
        ray_prev = ray
        delta_prev = delta if delta > 0 else delta_prev
    return ray_prev
