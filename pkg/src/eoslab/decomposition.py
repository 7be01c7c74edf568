"""Layerwise decomposition of the Gauss-Newton sharpness.

Per sample, the criterion's curvature square root times the network
Jacobian gives a small matrix K whose mean Gram matrix is the
Gauss-Newton term; the top Gauss-Newton eigenvalue factors as an overlap
ratio in [0, 1] times the mean squared operator norm of K. K splits over
layers, each layer block shares its Gram spectrum with a compact
propagator delta^i built from the output-by-preactivation Jacobian, and
the mean squared norm of delta^i telescopes into a product of five
interpretable factors: squared input-norm ratios, squared layerwise
Jacobian norms, two alignment-ratio products, and the last layer's own
norm. The alignment product between propagators and layerwise Jacobians
is the factor this lab exists to watch.

Everything here is exact linear algebra per sample followed by dataset
means; the only iterative pieces are the operator-norm routines.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import criterion as _criterion
from . import spectral
from .errors import AnalysisError, ConsistencyError, DataError, ShapeError
from .model import (
    MlpModel,
    ForwardTrace,
    forward,
    layerwise_jacobians_batch,
    param_jacobian,
    preact_jacobians_batch,
    training_loss,
)

_JAC_NORM_TOL = 1e-8
_RHO_SLACK = 1e-9


# ---------------------------------------------------------------------------
# Per-sample building blocks
# ---------------------------------------------------------------------------


def build_K(model: MlpModel, trace: ForwardTrace, curvature, sample: int = 0):
    """Per-layer slices of (curvature sqrt) @ d(output)/d(theta).

    curvature is the OutputCurvature at this sample's output. Returns a
    list of L matrices, layer i holding the columns for A^i then b^i in
    the frozen layout; their horizontal concatenation is the full K row
    block for this sample.
    """
    jac = param_jacobian(model, trace, sample)
    k_full = curvature.sqrt @ jac
    blocks = []
    pos = 0
    widths = model.widths
    for i in range(model.depth):
        size = widths[i + 1] * (widths[i] + 1)
        blocks.append(k_full[:, pos : pos + size])
        pos += size
    return blocks


def build_delta(
    model: MlpModel, trace: ForwardTrace, curvature, layer: int, sample: int = 0
) -> np.ndarray:
    """Compact propagator sqrt(1 + |x^{layer-1}|^2) R d(out)/d(xhat^layer).

    Shares its Gram spectrum with the layer's K block; layer is 1-based.
    """
    if not 1 <= layer <= model.depth:
        raise ShapeError(f"layer {layer} outside 1..{model.depth}")
    x_in = trace.acts[layer - 1][sample]
    scale = np.sqrt(1.0 + float(x_in @ x_in))
    jacs = preact_jacobians_batch(model, trace)
    return scale * (curvature.sqrt @ jacs[layer - 1][sample])


def chi_ratio(trace: ForwardTrace, layer: int) -> np.ndarray:
    """Per-sample input-norm ratio sqrt((1+|x^{layer-1}|^2)/(1+|x^layer|^2)).

    Defined for 1 <= layer <= L-1; returns one value per sample.
    """
    if not 1 <= layer <= len(trace.acts) - 1:
        raise ShapeError(f"layer {layer} outside 1..{len(trace.acts) - 1}")
    prev_sq = np.sum(trace.acts[layer - 1] ** 2, axis=1)
    next_sq = np.sum(trace.acts[layer] ** 2, axis=1)
    return np.sqrt((1.0 + prev_sq) / (1.0 + next_sq))


def overlap_ratio(lambda1_g: float, e_k_norm_sq: float) -> float:
    """Top Gauss-Newton eigenvalue over the mean squared norm of K.

    Always lands in [0, 1] up to rounding; values outside that band mean
    the two inputs were not measured at the same parameters.
    """
    if e_k_norm_sq <= 0.0:
        raise DataError("mean squared K norm must be positive")
    rho = lambda1_g / e_k_norm_sq
    if not -_RHO_SLACK <= rho <= 1.0 + _RHO_SLACK:
        raise ConsistencyError(f"overlap ratio {rho} outside [0, 1]")
    return float(rho)


def alignment_ratio(e_product_sq: float, e_left_sq: float, e_right_sq: float) -> float:
    """Mean squared norm of a product over the product of mean squared norms."""
    denom = e_left_sq * e_right_sq
    if denom <= 0.0:
        raise DataError("alignment ratio needs positive factor norms")
    return float(e_product_sq / denom)


# ---------------------------------------------------------------------------
# Batched slice computation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvatureSlices:
    """Per-sample decomposition ingredients for a whole dataset.

    Shapes: delta_norm_sq (N, L); k_norm_sq (N,); chi_sq, jac_norm_sq and
    prod_norm_sq (N, L-1). Layer axis index j holds 1-based layer j+1.
    """

    delta_norm_sq: np.ndarray
    k_norm_sq: np.ndarray
    chi_sq: np.ndarray
    jac_norm_sq: np.ndarray
    prod_norm_sq: np.ndarray


def _top_eig_psd_stack(stack: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of each PSD matrix in an (N, c, c) stack."""
    stack = 0.5 * (stack + np.swapaxes(stack, 1, 2))
    return np.maximum(np.linalg.eigvalsh(stack)[:, -1], 0.0)


def _gram_top_batch(stack: np.ndarray, tol: float = _JAC_NORM_TOL) -> np.ndarray:
    """Squared operator norm of each matrix in an (N, r, c) stack.

    Power iteration on the smaller-side Gram matrices, vectorized over the
    stack; per-slice Rayleigh values stop moving before exit.
    """
    n, rows, cols = stack.shape
    if rows <= cols:
        grams = stack @ np.swapaxes(stack, 1, 2)
    else:
        grams = np.swapaxes(stack, 1, 2) @ stack
    grams = 0.5 * (grams + np.swapaxes(grams, 1, 2))
    dim = grams.shape[1]
    if dim == 1:
        return np.maximum(grams[:, 0, 0], 0.0)
    rng = np.random.default_rng(0x6E0_12)
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ray_prev = np.zeros(n)
    delta_prev = np.full(n, np.inf)
    for _ in range(50_000):
        w = np.einsum("nij,nj->ni", grams, v)
        ray = np.einsum("ni,ni->n", v, w)
        delta = np.abs(ray - ray_prev)
        floor = tol * np.maximum(np.abs(ray), 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(delta_prev > 0, delta / delta_prev, 0.0)
        tail_ok = (rho < 0.999) & (delta * rho / np.maximum(1.0 - rho, 1e-6) <= floor)
        if np.all((delta <= floor) & (tail_ok | (delta <= 1e-3 * floor))):
            return ray
        norms = np.linalg.norm(w, axis=1, keepdims=True)
        safe = norms[:, 0] > 0
        v = np.where(safe[:, None], w / np.where(norms > 0, norms, 1.0), v)
        ray_prev = ray
        delta_prev = np.where(delta > 0, delta, delta_prev)
    return ray_prev


def curvature_slices(model: MlpModel, dataset, criterion) -> CurvatureSlices:
    """All per-sample decomposition ingredients in one batched sweep.

    Norms of the layer propagators are taken through their small Gram
    matrices (output-width side); layerwise Jacobian norms run the batched
    power iteration. The layer-i K block norm equals the delta norm by the
    shared-Gram identity, which build_K-based tests pin down separately.
    """
    trace = forward(model, dataset.inputs)
    n = trace.n_samples
    depth = model.depth
    roots = _criterion.sqrt_batch(criterion, trace.output)
    pre_jacs = preact_jacobians_batch(model, trace)
    lay_jacs = layerwise_jacobians_batch(model, trace)

    act_norm_sq = [np.sum(a * a, axis=1) for a in trace.acts]  # x^0 .. x^{L-1}

    deltas = []
    delta_norm_sq = np.empty((n, depth))
    for i in range(depth):
        scaled = roots @ pre_jacs[i]  # (N, n_L, n_i)
        scale = np.sqrt(1.0 + act_norm_sq[i])
        delta = scale[:, None, None] * scaled
        deltas.append(delta)
        delta_norm_sq[:, i] = _top_eig_psd_stack(delta @ np.swapaxes(delta, 1, 2))

    kk_t = sum(d @ np.swapaxes(d, 1, 2) for d in deltas)
    k_norm_sq = _top_eig_psd_stack(kk_t)

    chi_sq = np.empty((n, depth - 1))
    jac_norm_sq = np.empty((n, depth - 1))
    prod_norm_sq = np.empty((n, depth - 1))
    for i in range(depth - 1):
        chi_sq[:, i] = (1.0 + act_norm_sq[i]) / (1.0 + act_norm_sq[i + 1])
        jac_norm_sq[:, i] = _gram_top_batch(lay_jacs[i])
        prod = deltas[i + 1] @ lay_jacs[i]
        prod_norm_sq[:, i] = _top_eig_psd_stack(prod @ np.swapaxes(prod, 1, 2))

    return CurvatureSlices(
        delta_norm_sq=delta_norm_sq,
        k_norm_sq=k_norm_sq,
        chi_sq=chi_sq,
        jac_norm_sq=jac_norm_sq,
        prod_norm_sq=prod_norm_sq,
    )


# ---------------------------------------------------------------------------
# Factor products and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecompositionFactors:
    """Five telescoping factors for one start layer.

    Their product reproduces the mean squared norm of that layer's
    propagator exactly (the two alignment products are built from the same
    expectations they cancel against).
    """

    input_ratio_product: float  # product of mean squared chi ratios
    scalar_alignment_product: float  # chi-vs-propagator alignment ratios
    jacobian_norm_product: float  # product of mean squared Jacobian norms
    propagator_alignment_product: float  # propagator-vs-Jacobian alignment
    last_layer_norm_sq: float  # mean squared norm of the last propagator


@dataclass(frozen=True)
class DecompositionRecord:
    """One snapshot's worth of sharpness decomposition measurements.

    Per-layer arrays use 1-based layer semantics: entry j is layer j+1.
    e_ki_norm_sq has L entries; chi_sq, jac_norm_sq, align_chi and
    align_dj have L-1 (layer transitions). Factor products for any start
    layer derive from these via cumulative products from the right.
    """

    step: int
    flow_time: float
    loss: float
    lambda1_full: float
    lambda1_g: float
    lambda1_h: float
    rho_k: float
    e_k_norm_sq: float
    e_ki_norm_sq: np.ndarray
    chi_sq: np.ndarray
    jac_norm_sq: np.ndarray
    align_chi: np.ndarray
    align_dj: np.ndarray

    @property
    def depth(self) -> int:
        return int(self.e_ki_norm_sq.shape[0])

    @property
    def e_delta_last_sq(self) -> float:
        return float(self.e_ki_norm_sq[-1])

    @cached_property
    def pi_chi(self) -> np.ndarray:
        """Input-ratio factor for each start layer 1..L-1."""
        return np.cumprod(self.chi_sq[::-1])[::-1].copy()

    @cached_property
    def pi_jac(self) -> np.ndarray:
        """Jacobian-norm factor for each start layer 1..L-1."""
        return np.cumprod(self.jac_norm_sq[::-1])[::-1].copy()

    @cached_property
    def p_chi_delta(self) -> np.ndarray:
        """Scalar-alignment factor for each start layer 1..L-1."""
        return np.cumprod(self.align_chi[::-1])[::-1].copy()

    @cached_property
    def p_delta_jac(self) -> np.ndarray:
        """Propagator-alignment factor for each start layer 1..L-1."""
        return np.cumprod(self.align_dj[::-1])[::-1].copy()

    def factors(self, start_layer: int) -> DecompositionFactors:
        if not 1 <= start_layer <= self.depth - 1:
            raise ShapeError(f"start layer {start_layer} outside 1..{self.depth - 1}")
        j = start_layer - 1
        return DecompositionFactors(
            input_ratio_product=float(self.pi_chi[j]),
            scalar_alignment_product=float(self.p_chi_delta[j]),
            jacobian_norm_product=float(self.pi_jac[j]),
            propagator_alignment_product=float(self.p_delta_jac[j]),
            last_layer_norm_sq=self.e_delta_last_sq,
        )


def _slice_means(slices: CurvatureSlices):
    e_delta = slices.delta_norm_sq.mean(axis=0)
    e_chi = slices.chi_sq.mean(axis=0)
    e_jac = slices.jac_norm_sq.mean(axis=0)
    e_prod = slices.prod_norm_sq.mean(axis=0)
    depth = e_delta.shape[0]
    align_dj = np.empty(depth - 1)
    align_chi = np.empty(depth - 1)
    for i in range(depth - 1):
        align_dj[i] = alignment_ratio(e_prod[i], e_delta[i + 1], e_jac[i])
        align_chi[i] = e_delta[i] / (e_chi[i] * e_prod[i])
    return e_delta, e_chi, e_jac, align_chi, align_dj


def decomposition_factors(
    model: MlpModel, dataset, criterion, start_layer: int
) -> DecompositionFactors:
    """Telescoping factors for one start layer, measured on a dataset."""
    slices = curvature_slices(model, dataset, criterion)
    e_delta, e_chi, e_jac, align_chi, align_dj = _slice_means(slices)
    depth = e_delta.shape[0]
    if not 1 <= start_layer <= depth - 1:
        raise ShapeError(f"start layer {start_layer} outside 1..{depth - 1}")
    j = start_layer - 1
    return DecompositionFactors(
        input_ratio_product=float(np.prod(e_chi[j:])),
        scalar_alignment_product=float(np.prod(align_chi[j:])),
        jacobian_norm_product=float(np.prod(e_jac[j:])),
        propagator_alignment_product=float(np.prod(align_dj[j:])),
        last_layer_norm_sq=float(e_delta[-1]),
    )


def analyze_model(
    model: MlpModel,
    dataset,
    criterion,
    *,
    step: int = 0,
    flow_time: float = 0.0,
    tol: float = 1e-6,
    max_iters: int = 5000,
    warm: dict | None = None,
) -> tuple[DecompositionRecord, dict]:
    """Full decomposition measurement at one parameter point.

    Returns the record plus a warm-start dictionary holding the three
    spectral estimates, which the snapshot-series analyzer threads through
    consecutive calls. Negative dominant eigenvalue estimates are stored
    as NaN.
    """
    warm = dict(warm or {})
    full_op, g_op, h_op = spectral.operator_triple(model, dataset, criterion)
    estimates = {}
    for name, op in (("full", full_op), ("g", g_op), ("h", h_op)):
        estimates[name] = spectral.power_iterate(
            op, 1, warm=warm.get(name), tol=tol, max_iters=max_iters
        )
    lam = {
        name: float(spectral.sanitize_spectrum(est).values[0])
        for name, est in estimates.items()
    }

    slices = curvature_slices(model, dataset, criterion)
    e_delta, e_chi, e_jac, align_chi, align_dj = _slice_means(slices)
    e_k = float(slices.k_norm_sq.mean())
    rho = overlap_ratio(lam["g"], e_k) if np.isfinite(lam["g"]) else float("nan")

    record = DecompositionRecord(
        step=int(step),
        flow_time=float(flow_time),
        loss=training_loss(model, dataset, criterion),
        lambda1_full=lam["full"],
        lambda1_g=lam["g"],
        lambda1_h=lam["h"],
        rho_k=rho,
        e_k_norm_sq=e_k,
        e_ki_norm_sq=e_delta,
        chi_sq=e_chi,
        jac_norm_sq=e_jac,
        align_chi=align_chi,
        align_dj=align_dj,
    )
    return record, estimates


def counterfactual_bound(
    records: list[DecompositionRecord],
    at_step: int,
    baseline_step: int = 10,
) -> float:
    """Sharpness bound with propagator alignment frozen at the baseline.

    rho(t) * sum_i (P_i(t0) / P_i(t)) * E|delta^i(t)|^2, where P_i is the
    propagator-alignment product starting at layer i and t0 is the first
    record at or after baseline_step. At the baseline the ratios are one
    and the bound is rho times the sum of layer norms, which dominates the
    top Gauss-Newton eigenvalue.
    """
    if not records:
        raise AnalysisError("no records to bound")
    baseline = next((r for r in records if r.step >= baseline_step), None)
    if baseline is None:
        raise AnalysisError(f"no record at or after step {baseline_step}")
    current = next((r for r in records if r.step == at_step), None)
    if current is None:
        raise AnalysisError(f"no record at step {at_step}")
    depth = current.depth
    total = 0.0
    for layer in range(1, depth + 1):
        # The last layer has no alignment product; its ratio stays one.
        if layer <= depth - 1:
            ratio = baseline.p_delta_jac[layer - 1] / current.p_delta_jac[layer - 1]
        else:
            ratio = 1.0
        total += ratio * float(current.e_ki_norm_sq[layer - 1])
    return float(current.rho_k * total)
