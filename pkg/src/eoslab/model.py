"""Fully-connected ELU network and its hand-derived derivative objects.

The network is x^0 = input, then for layers i = 1..L (1-based throughout
the public API): xhat^i = A^i x^{i-1} + b^i, x^i = elu(xhat^i) for hidden
layers, and the raw preactivation xhat^L is the output (no final
activation).

Parameters flatten into a single vector in a frozen layout: for each layer
in order, the weight matrix row-major, then the bias. Every derivative
object here (gradient, Hessian-vector product, Jacobians) is derived by
hand against that layout; tests pin them against finite differences.

All batch arrays are (N, width) with samples along the first axis.
"""

from dataclasses import dataclass, field

import numpy as np

from . import criterion as _criterion
from .errors import ShapeError

ParamVector = np.ndarray  # 1-D float64, frozen layout described above


# ---------------------------------------------------------------------------
# Activation
# ---------------------------------------------------------------------------


def elu(x):
    """Exponential linear unit: x for x > 0, exp(x) - 1 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def elu_prime(x):
    """Derivative of elu; the value at 0 is 1 (both one-sided limits agree)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def _elu_curvature(x):
    """Second derivative of elu (0 on the linear side, exp(x) on the other)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, 0.0, np.exp(np.minimum(x, 0.0)))


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


@dataclass
class MlpModel:
    """Weights and biases of a depth-L perceptron.

    weights[i] has shape (n_{i+1}, n_i) in the package's storage
    orientation (rows index the layer's outputs); biases[i] matches the
    rows. gain records the initialization gain for provenance.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gain: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must pair up")
        if len(self.weights) < 2:
            raise ShapeError("model needs at least two layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i + 1} has inconsistent shapes")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i + 1} width does not chain")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.gain,
        )


def init_xavier_gain(widths, gain: float, seed: int) -> MlpModel:
    """Uniform Xavier initialization scaled by gain; biases start at zero.

    Each weight entry is uniform on (-a, a) with a = gain * sqrt(6 / (fan_in
    + fan_out)). Layers consume the seeded stream in order, so the full
    parameter set is a pure function of (widths, gain, seed).
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 3:
        raise ShapeError("need at least two layers (three widths)")
    if min(widths) < 1:
        raise ShapeError("all widths must be positive")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        a = gain * np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-a, a, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpModel(weights, biases, gain=float(gain))


# ---------------------------------------------------------------------------
# Parameter vector layout
# ---------------------------------------------------------------------------


def flatten_params(model: MlpModel) -> ParamVector:
    """Concatenate all parameters in the frozen layout."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_params(model: MlpModel, vec: ParamVector):
    """Split a flat vector into (weights, biases) lists matching model."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (model.param_count,):
        raise ShapeError(
            f"parameter vector has {vec.shape}, model needs ({model.param_count},)"
        )
    weights = []
    biases = []
    pos = 0
    for w, b in zip(model.weights, model.biases):
        weights.append(vec[pos : pos + w.size].reshape(w.shape))
        pos += w.size
        biases.append(vec[pos : pos + b.size])
        pos += b.size
    return weights, biases


def set_params(model: MlpModel, vec: ParamVector) -> None:
    """Overwrite model parameters in place from a flat vector."""
    weights, biases = unflatten_params(model, vec)
    for i in range(model.depth):
        model.weights[i][...] = weights[i]
        model.biases[i][...] = biases[i]


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Everything the backward passes need, for a batch of samples.

    acts[i] holds x^i for i = 0..L-1 (acts[0] is the input batch);
    preacts[i-1] holds xhat^i for i = 1..L. output is xhat^L.
    """

    acts: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.preacts[-1]

    @property
    def n_samples(self) -> int:
        return self.acts[0].shape[0]


def forward(model: MlpModel, x) -> ForwardTrace:
    """Run the network on a batch (N, n_0) or single vector (n_0,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.widths[0]:
        raise ShapeError(f"input width {x.shape} does not match {model.widths[0]}")
    acts = [x]
    preacts = []
    h = x
    last = model.depth - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        preacts.append(z)
        if i < last:
            h = elu(z)
            acts.append(h)
    return ForwardTrace(acts=acts, preacts=preacts)


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------


def training_loss(model: MlpModel, dataset, criterion) -> float:
    """Mean criterion value over the dataset."""
    trace = forward(model, dataset.inputs)
    vals = _criterion.value_batch(criterion, trace.output, dataset.labels)
    return float(np.mean(vals))


def _backward_deltas(model: MlpModel, trace: ForwardTrace, out_grads: np.ndarray):
    """Per-sample preactivation sensitivities for every layer.

    out_grads is d(loss)/d(output) per sample, shape (N, n_L). Returns a
    list deltas[i-1] = d(loss)/d(xhat^i), each (N, n_i).
    """
    deltas = [None] * model.depth
    deltas[-1] = out_grads
    for i in range(model.depth - 1, 0, -1):
        back = deltas[i] @ model.weights[i]
        deltas[i - 1] = back * elu_prime(trace.preacts[i - 1])
    return deltas


def _grads_from_deltas(model, trace, deltas) -> ParamVector:
    n = trace.n_samples
    parts = []
    for i in range(model.depth):
        parts.append((deltas[i].T @ trace.acts[i]).ravel() / n)
        parts.append(deltas[i].sum(axis=0) / n)
    return np.concatenate(parts)


def loss_gradient(model: MlpModel, dataset, criterion) -> ParamVector:
    """Gradient of the mean training loss in the flat parameter layout."""
    return loss_and_gradient(model, dataset, criterion)[1]


def loss_and_gradient(model: MlpModel, dataset, criterion):
    """(mean loss, gradient) in one pass over the dataset."""
    trace = forward(model, dataset.inputs)
    vals = _criterion.value_batch(criterion, trace.output, dataset.labels)
    gz = _criterion.gradient_batch(criterion, trace.output, dataset.labels)
    deltas = _backward_deltas(model, trace, gz)
    return float(np.mean(vals)), _grads_from_deltas(model, trace, deltas)


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


def preact_jacobians_batch(model: MlpModel, trace: ForwardTrace) -> list[np.ndarray]:
    """Output-by-preactivation Jacobians d(output)/d(xhat^i) for i = 1..L.

    Returns a list of (N, n_L, n_i) arrays; the last entry is the identity
    stack. Built by the backward chain d(out)/d(xhat^i) =
    d(out)/d(xhat^{i+1}) @ A^{i+1} diag(elu'(xhat^i)).
    """
    n = trace.n_samples
    n_out = model.widths[-1]
    jacs = [None] * model.depth
    eye = np.broadcast_to(np.eye(n_out), (n, n_out, n_out)).copy()
    jacs[-1] = eye
    for i in range(model.depth - 1, 0, -1):
        down = jacs[i] @ model.weights[i]
        jacs[i - 1] = down * elu_prime(trace.preacts[i - 1])[:, None, :]
    return jacs


def preactivation_jacobian(
    model: MlpModel, trace: ForwardTrace, layer: int, sample: int = 0
) -> np.ndarray:
    """d(output)/d(xhat^layer) for one sample; layer is 1-based."""
    if not 1 <= layer <= model.depth:
        raise ShapeError(f"layer {layer} outside 1..{model.depth}")
    return preact_jacobians_batch(model, trace)[layer - 1][sample]


def layerwise_jacobian(
    model: MlpModel, trace: ForwardTrace, layer: int, sample: int = 0
) -> np.ndarray:
    """d(xhat^{layer+1})/d(xhat^layer) for one sample; layer in 1..L-1.

    Entry (j, k) is elu'(xhat^layer_k) * A^{layer+1}_{j,k}.
    """
    if not 1 <= layer <= model.depth - 1:
        raise ShapeError(f"layer {layer} outside 1..{model.depth - 1}")
    prime = elu_prime(trace.preacts[layer - 1][sample])
    return model.weights[layer] * prime[None, :]


def layerwise_jacobians_batch(model: MlpModel, trace: ForwardTrace) -> list[np.ndarray]:
    """All d(xhat^{i+1})/d(xhat^i) stacks, list of (N, n_{i+1}, n_i)."""
    out = []
    for i in range(1, model.depth):
        prime = elu_prime(trace.preacts[i - 1])
        out.append(model.weights[i][None, :, :] * prime[:, None, :])
    return out


def param_jacobian(model: MlpModel, trace: ForwardTrace, sample: int = 0) -> np.ndarray:
    """d(output)/d(theta) for one sample, shape (n_L, P), frozen layout.

    The weight block of layer i is the outer product of d(output)/d(xhat^i)
    with x^{i-1}; the bias block is d(output)/d(xhat^i) itself.
    """
    jacs = preact_jacobians_batch(model, trace)
    n_out = model.widths[-1]
    cols = []
    for i in range(model.depth):
        d = jacs[i][sample]  # (n_L, n_i)
        x = trace.acts[i][sample]  # (n_{i-1},)
        block = d[:, :, None] * x[None, None, :]  # (n_L, n_i, n_{i-1})
        cols.append(block.reshape(n_out, -1))
        cols.append(d)
    return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------------------
# Second-order: forward-over-reverse Hessian-vector products
# ---------------------------------------------------------------------------


@dataclass
class DerivativeContext:
    """Caches one forward/backward sweep at fixed parameters.

    Repeated Hessian- and Gauss-Newton-vector products at the same
    parameter point (as in block power iteration) reuse the cached trace,
    activations derivatives, and criterion curvature, paying only the
    tangent passes per product.
    """

    model: MlpModel
    inputs: np.ndarray
    labels: np.ndarray
    criterion: "_criterion.CriterionKind"
    trace: ForwardTrace = field(init=False)
    _primes: list[np.ndarray] = field(init=False)
    _curvs: list[np.ndarray] = field(init=False)
    _deltas: list[np.ndarray] = field(init=False)
    _backs: list[np.ndarray] = field(init=False)
    loss: float = field(init=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.trace = forward(self.model, self.inputs)
        self._primes = [elu_prime(z) for z in self.trace.preacts[:-1]]
        self._curvs = [_elu_curvature(z) for z in self.trace.preacts[:-1]]
        out = self.trace.output
        vals = _criterion.value_batch(self.criterion, out, self.labels)
        self.loss = float(np.mean(vals))
        gz = _criterion.gradient_batch(self.criterion, out, self.labels)
        self._deltas = _backward_deltas(self.model, self.trace, gz)
        # Backward terms before the activation derivative, delta^{i+1} A^{i+1}.
        self._backs = [
            self._deltas[i] @ self.model.weights[i] for i in range(1, self.model.depth)
        ]

    @property
    def dim(self) -> int:
        return self.model.param_count

    def gradient(self) -> ParamVector:
        return _grads_from_deltas(self.model, self.trace, self._deltas)

    def _tangent_forward(self, v: ParamVector):
        """Directional derivative of every activation and preactivation.

        Returns (tangent preacts list, tangent acts list) where tangent
        acts[0] is the zero input tangent.
        """
        wts, bts = unflatten_params(self.model, np.asarray(v, dtype=np.float64))
        model = self.model
        n = self.trace.n_samples
        r_acts = [np.zeros((n, model.widths[0]))]
        r_pres = []
        r_h = r_acts[0]
        for i in range(model.depth):
            r_z = r_h @ model.weights[i].T + self.trace.acts[i] @ wts[i].T + bts[i]
            r_pres.append(r_z)
            if i < model.depth - 1:
                r_h = self._primes[i] * r_z
                r_acts.append(r_h)
        return r_pres, r_acts

    def jvp(self, v: ParamVector) -> np.ndarray:
        """Per-sample output tangents d(output)/d(theta) v, shape (N, n_L)."""
        return self._tangent_forward(v)[0][-1]

    def vjp(self, cotangent: np.ndarray) -> ParamVector:
        """Mean pullback (1/N) sum_s (d(output_s)/d(theta))^T c_s."""
        deltas = _backward_deltas(self.model, self.trace, cotangent)
        return _grads_from_deltas(self.model, self.trace, deltas)

    def hvp(self, v: ParamVector) -> ParamVector:
        """Hessian-vector product of the mean training loss at theta.

        Forward-over-reverse: propagate the parameter tangent through the
        forward pass, then differentiate the backward pass along it.
        """
        model = self.model
        wts, _ = unflatten_params(model, np.asarray(v, dtype=np.float64))
        r_pres, r_acts = self._tangent_forward(v)
        # Tangent of the criterion gradient at the output.
        r_delta = _criterion.hessian_apply_batch(
            self.criterion, self.trace.output, r_pres[-1]
        )
        n = self.trace.n_samples
        parts_w = [None] * model.depth
        parts_b = [None] * model.depth
        deltas = self._deltas
        for i in range(model.depth - 1, -1, -1):
            parts_w[i] = (r_delta.T @ self.trace.acts[i] + deltas[i].T @ r_acts[i]) / n
            parts_b[i] = r_delta.sum(axis=0) / n
            if i == 0:
                break
            r_back = deltas[i] @ wts[i] + r_delta @ model.weights[i]
            r_delta = (
                self._curvs[i - 1] * r_pres[i - 1] * self._backs[i - 1]
                + self._primes[i - 1] * r_back
            )
        out = []
        for w_part, b_part in zip(parts_w, parts_b):
            out.append(w_part.ravel())
            out.append(b_part)
        return np.concatenate(out)

    def gvp(self, v: ParamVector) -> ParamVector:
        """Gauss-Newton product: mean J^T (H_z) J v streamed per sample."""
        u = self.jvp(v)
        m = _criterion.hessian_apply_batch(self.criterion, self.trace.output, u)
        return self.vjp(m)


def hessian_vector_product(model, dataset, criterion, v) -> ParamVector:
    """One-shot Hessian-vector product of the mean training loss."""
    ctx = DerivativeContext(model, dataset.inputs, dataset.labels, criterion)
    return ctx.hvp(v)
