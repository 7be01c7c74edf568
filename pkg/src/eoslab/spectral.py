"""Matrix-free spectral estimation for the training-loss curvature.

The central routine is block power iteration with a QR step: multiply the
current orthonormal block through the operator, re-orthonormalize, and
read eigenvalue estimates off the diagonal of the triangular factor. The
orthonormal factor's columns are sign-aligned with the previous iterate,
which makes the diagonal a signed Rayleigh-quotient estimate and keeps
warm starts from oscillating on negative eigenvalues.

Estimates converge to the eigenvalues of largest absolute value. A
genuinely negative dominant estimate is not usable as a sharpness
measurement; sanitize_spectrum replaces such entries with NaN so that
downstream aggregation can skip them.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import linalg
from .errors import ShapeError
from .model import DerivativeContext, MlpModel

_WARM_PAD_SEED = 0xB10C


@dataclass(frozen=True)
class SpectrumEstimate:
    """Top eigenpairs of a symmetric operator, by descending |eigenvalue|.

    vectors[:, j] estimates the eigenvector for values[j]; columns are
    orthonormal. values may contain NaN only after sanitize_spectrum.
    """

    values: np.ndarray
    vectors: np.ndarray
    iterations_used: int
    converged: bool


@dataclass(frozen=True)
class LinearOperator:
    """Symmetric operator on parameter space given by its matrix action."""

    dim: int
    matvec: Callable[[np.ndarray], np.ndarray]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ShapeError(f"operand has shape {v.shape}, operator dim {self.dim}")
        return self.matvec(v)

    def apply_block(self, block: np.ndarray) -> np.ndarray:
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != self.dim:
            raise ShapeError(f"block has shape {block.shape}, operator dim {self.dim}")
        out = np.empty_like(block)
        for j in range(block.shape[1]):
            out[:, j] = self.matvec(block[:, j])
        return out


def dense_operator(matrix: np.ndarray) -> LinearOperator:
    """Wrap an explicit symmetric matrix (tests and small oracles)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError("dense operator needs a square matrix")
    return LinearOperator(dim=matrix.shape[0], matvec=lambda v: matrix @ v)


def _initial_block(dim: int, k: int, warm: SpectrumEstimate | None) -> np.ndarray:
    rng = np.random.default_rng(_WARM_PAD_SEED)
    if warm is None or warm.vectors.size == 0:
        block = rng.standard_normal((dim, k))
    else:
        if warm.vectors.shape[0] != dim:
            raise ShapeError("warm-start vectors do not match operator dimension")
        cols = [warm.vectors[:, : min(k, warm.vectors.shape[1])]]
        missing = k - cols[0].shape[1]
        if missing > 0:
            cols.append(rng.standard_normal((dim, missing)))
        block = np.column_stack(cols)
    q, _ = linalg.qr(block)
    return q


def power_iterate(
    op: LinearOperator,
    k: int,
    warm: SpectrumEstimate | None = None,
    tol: float = 1e-6,
    max_iters: int = 1000,
) -> SpectrumEstimate:
    """Top-k eigenpairs by absolute value via block power iteration.

    Each iteration applies the operator to the current orthonormal block,
    takes a QR decomposition of the image, and reads the new eigenvalue
    estimates off the triangular factor's diagonal. Iteration stops when
    every estimate moves by at most tol relative to its magnitude (with an
    absolute floor of 1e-12). A warm start from a nearby operator usually
    converges in a couple of iterations.
    """
    if k < 1:
        raise ShapeError("need at least one eigenpair")
    k = min(k, op.dim)
    v = _initial_block(op.dim, k, warm)
    lam_old = np.full(k, np.inf)
    lam = np.zeros(k)
    iterations = 0
    converged = False
    for iterations in range(1, max_iters + 1):
        w = op.apply_block(v)
        q, r = linalg.qr(w)
        # Fix the QR sign ambiguity by aligning each column with the
        # previous iterate; the diagonal then carries the eigenvalue sign.
        for j in range(k):
            if float(v[:, j] @ q[:, j]) < 0.0:
                q[:, j] = -q[:, j]
                r[j, :] = -r[j, :]
        lam = np.diag(r).copy()
        v = q
        delta = np.abs(lam - lam_old)
        if np.all(delta <= tol * np.maximum(np.abs(lam), 1e-12)):
            converged = True
            break
        lam_old = lam
    order = np.argsort(-np.abs(lam), kind="stable")
    return SpectrumEstimate(
        values=lam[order],
        vectors=v[:, order],
        iterations_used=iterations,
        converged=converged,
    )


def sanitize_spectrum(estimate: SpectrumEstimate) -> SpectrumEstimate:
    """Replace negative eigenvalue estimates with NaN markers.

    Power iteration tracks eigenvalues by absolute value; when the dominant
    one is negative the estimate cannot serve as a sharpness value, so it
    is marked NaN and excluded from downstream maxima.
    """
    values = estimate.values.copy()
    values[values < 0.0] = np.nan
    return SpectrumEstimate(
        values=values,
        vectors=estimate.vectors,
        iterations_used=estimate.iterations_used,
        converged=estimate.converged,
    )


# ---------------------------------------------------------------------------
# Operators built from a model/dataset/criterion triple
# ---------------------------------------------------------------------------


def hessian_operator(model: MlpModel, dataset, criterion) -> LinearOperator:
    """Full training-loss Hessian as a matrix-free operator."""
    ctx = DerivativeContext(model, dataset.inputs, dataset.labels, criterion)
    return LinearOperator(dim=ctx.dim, matvec=ctx.hvp)


def g_operator(model: MlpModel, dataset, criterion) -> LinearOperator:
    """Gauss-Newton term: mean J^T (output curvature) J, matrix-free."""
    ctx = DerivativeContext(model, dataset.inputs, dataset.labels, criterion)
    return LinearOperator(dim=ctx.dim, matvec=ctx.gvp)


def h_operator(model: MlpModel, dataset, criterion) -> LinearOperator:
    """Remainder term: full Hessian minus the Gauss-Newton term."""
    ctx = DerivativeContext(model, dataset.inputs, dataset.labels, criterion)
    return LinearOperator(dim=ctx.dim, matvec=lambda v: ctx.hvp(v) - ctx.gvp(v))


def operator_triple(model: MlpModel, dataset, criterion):
    """(full, gauss-newton, remainder) operators sharing one cached sweep."""
    ctx = DerivativeContext(model, dataset.inputs, dataset.labels, criterion)
    full = LinearOperator(dim=ctx.dim, matvec=ctx.hvp)
    gauss = LinearOperator(dim=ctx.dim, matvec=ctx.gvp)
    rest = LinearOperator(dim=ctx.dim, matvec=lambda v: ctx.hvp(v) - ctx.gvp(v))
    return full, gauss, rest
