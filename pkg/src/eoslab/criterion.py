"""Training criteria evaluated at network outputs.

Two criteria are supported: softmax cross-entropy and mean squared error
against a one-hot target (normalized by the number of outputs). Each one
exposes its value, gradient, and output-space curvature together with a
symmetric PSD square root of that curvature.
"""

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import DataError, ShapeError

CROSS_ENTROPY = "cross_entropy"
MSE = "mse"
_TAGS = (CROSS_ENTROPY, MSE)


@dataclass(frozen=True)
class CriterionKind:
    """Which per-sample criterion to apply and how many classes it scores."""

    tag: str
    num_classes: int

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise DataError(f"unknown criterion tag {self.tag!r}")
        if self.num_classes < 2:
            raise DataError("criterion needs at least two classes")


@dataclass(frozen=True)
class OutputCurvature:
    """Curvature of the criterion in output space and its PSD square root."""

    hessian: np.ndarray
    sqrt: np.ndarray


def _check_output(kind: CriterionKind, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != kind.num_classes:
        raise ShapeError(
            f"output has {z.shape[-1]} entries, criterion expects {kind.num_classes}"
        )
    return z


def _check_label(kind: CriterionKind, y: int) -> int:
    y = int(y)
    if not 0 <= y < kind.num_classes:
        raise DataError(f"label {y} outside [0, {kind.num_classes})")
    return y


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def criterion_value(kind: CriterionKind, z, y) -> float:
    """Per-sample criterion value at output z with integer label y."""
    z = _check_output(kind, z)
    y = _check_label(kind, y)
    if kind.tag == CROSS_ENTROPY:
        shifted = z - np.max(z)
        return float(np.log(np.sum(np.exp(shifted))) - shifted[y])
    target = np.zeros(kind.num_classes)
    target[y] = 1.0
    return float(np.sum((z - target) ** 2) / kind.num_classes)


def criterion_gradient(kind: CriterionKind, z, y) -> np.ndarray:
    """Gradient of the criterion with respect to the output vector."""
    z = _check_output(kind, z)
    y = _check_label(kind, y)
    if kind.tag == CROSS_ENTROPY:
        g = softmax(z)
        g[y] -= 1.0
        return g
    target = np.zeros(kind.num_classes)
    target[y] = 1.0
    return (2.0 / kind.num_classes) * (z - target)


def output_hessian(kind: CriterionKind, z, y) -> OutputCurvature:
    """Output-space curvature with its symmetric PSD square root.

    Cross-entropy curvature is diag(p) - p p^T for the softmax vector p
    (label-independent); MSE curvature is the scaled identity.
    """
    z = _check_output(kind, z)
    _check_label(kind, y)
    if kind.tag == CROSS_ENTROPY:
        p = softmax(z)
        h = np.diag(p) - np.outer(p, p)
        h = 0.5 * (h + h.T)
    else:
        h = (2.0 / kind.num_classes) * np.eye(kind.num_classes)
    return OutputCurvature(hessian=h, sqrt=linalg.psd_sqrt(h))


# ---------------------------------------------------------------------------
# Batched helpers used on dataset-sized sweeps. Semantics match the
# per-sample functions above; cross-checked in tests.
# ---------------------------------------------------------------------------


def _check_batch(kind: CriterionKind, z: np.ndarray, y: np.ndarray):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    if z.ndim != 2 or z.shape[1] != kind.num_classes:
        raise ShapeError(f"batch outputs must be (N, {kind.num_classes})")
    if y.shape != (z.shape[0],):
        raise ShapeError("labels must be one per row of outputs")
    if y.size and (y.min() < 0 or y.max() >= kind.num_classes):
        raise DataError("label outside class range")
    return z, y.astype(np.int64)


def value_batch(kind: CriterionKind, z, y) -> np.ndarray:
    """Per-sample criterion values for a batch, shape (N,)."""
    z, y = _check_batch(kind, z, y)
    rows = np.arange(z.shape[0])
    if kind.tag == CROSS_ENTROPY:
        shifted = z - np.max(z, axis=1, keepdims=True)
        return np.log(np.sum(np.exp(shifted), axis=1)) - shifted[rows, y]
    diff = z.copy()
    diff[rows, y] -= 1.0
    return np.sum(diff * diff, axis=1) / kind.num_classes


def gradient_batch(kind: CriterionKind, z, y) -> np.ndarray:
    """Per-sample criterion gradients for a batch, shape (N, C)."""
    z, y = _check_batch(kind, z, y)
    rows = np.arange(z.shape[0])
    if kind.tag == CROSS_ENTROPY:
        g = softmax(z)
        g[rows, y] -= 1.0
        return g
    g = z.copy()
    g[rows, y] -= 1.0
    return (2.0 / kind.num_classes) * g


def hessian_apply_batch(kind: CriterionKind, z, u) -> np.ndarray:
    """Row-wise curvature-vector products H_z u without materializing H_z."""
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if z.shape != u.shape:
        raise ShapeError("outputs and tangents must have matching shapes")
    if kind.tag == CROSS_ENTROPY:
        p = softmax(z)
        return p * u - p * np.sum(p * u, axis=1, keepdims=True)
    return (2.0 / kind.num_classes) * u


def sqrt_batch(kind: CriterionKind, z) -> np.ndarray:
    """Stack of PSD curvature square roots, shape (N, C, C)."""
    z = np.asarray(z, dtype=np.float64)
    n, c = z.shape
    if kind.tag == MSE:
        root = np.sqrt(2.0 / kind.num_classes) * np.eye(c)
        return np.broadcast_to(root, (n, c, c)).copy()
    p = softmax(z)
    h = -p[:, :, None] * p[:, None, :]
    h[:, np.arange(c), np.arange(c)] += p
    h = 0.5 * (h + np.swapaxes(h, 1, 2))
    values, vectors = np.linalg.eigh(h)
    values = np.maximum(values, 0.0)
    return (vectors * np.sqrt(values)[:, None, :]) @ np.swapaxes(vectors, 1, 2)
