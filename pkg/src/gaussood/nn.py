"""Small dense MLP with exact manual backprop.

The embedding network is three fully connected layers: ReLU on the two
hidden layers, identity on the output, float64 throughout so gradient
checks can be tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_matrix(x, name="array"):
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class MlpNetwork:
    """Three-layer perceptron mapping input rows to latent embeddings."""

    layer_dims: tuple  # (input, hidden1, hidden2, latent)
    weights: list = field(repr=False)  # weights[l]: (dims[l], dims[l+1])
    biases: list = field(repr=False)   # biases[l]: (dims[l+1],)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) != 4:
            raise ValueError(f"expected 4 layer dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        self.layer_dims = dims
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ValueError("network must have exactly 3 weight layers")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (dims[l], dims[l + 1])
            if w.shape != want:
                raise ValueError(f"weight {l} has shape {w.shape}, expected {want}")
            if b.shape != (dims[l + 1],):
                raise ValueError(f"bias {l} has shape {b.shape}, expected ({dims[l + 1]},)")

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def latent_dim(self):
        return self.layer_dims[-1]

    @classmethod
    def initialize(cls, layer_dims, rng: np.random.Generator):
        """Glorot-uniform weights, zero biases."""
        dims = tuple(int(d) for d in layer_dims)
        weights, biases = [], []
        for l in range(3):
            fan_in, fan_out = dims[l], dims[l + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims=dims, weights=weights, biases=biases)

    def copy(self):
        return MlpNetwork(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class GradientBundle:
    """Parameter gradients shaped like the network, plus the input gradient."""

    weights: list
    biases: list
    inputs: np.ndarray

    def check_finite(self):
        for g in self.weights + self.biases + [self.inputs]:
            if not np.all(np.isfinite(g)):
                return False
        return True


def _preactivations(net: MlpNetwork, batch):
    """Forward pass keeping every layer's pre-activation for backprop."""
    pre = []
    act = batch
    for l in range(3):
        z = act @ net.weights[l] + net.biases[l]
        pre.append(z)
        act = relu(z) if l < 2 else z
    return pre


def forward(net: MlpNetwork, batch) -> np.ndarray:
    """Embed a batch: (n, input_dim) -> (n, latent_dim)."""
    batch = as_matrix(batch, "batch")
    if batch.shape[1] != net.input_dim:
        raise ValueError(
            f"batch has {batch.shape[1]} columns, network expects {net.input_dim}"
        )
    if batch.shape[0] < 1:
        raise ValueError("batch must contain at least one row")
    pre = _preactivations(net, batch)
    return pre[-1]


def backward(net: MlpNetwork, batch, upstream) -> GradientBundle:
    """Gradients of sum(upstream * forward(batch)) w.r.t. all parameters.

    Recomputes the forward intermediates; `upstream` must match the
    forward output shape (n, latent_dim).
    """
    batch = as_matrix(batch, "batch")
    upstream = as_matrix(upstream, "upstream")
    n = batch.shape[0]
    if upstream.shape != (n, net.latent_dim):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match output ({n}, {net.latent_dim})"
        )

    pre = _preactivations(net, batch)
    acts = [batch, relu(pre[0]), relu(pre[1])]  # inputs to each layer

    w_grads = [None] * 3
    b_grads = [None] * 3
    delta = upstream  # output layer is identity
    for l in (2, 1, 0):
        w_grads[l] = acts[l].T @ delta
        b_grads[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l].T
        if l > 0:
            delta = delta * (pre[l - 1] > 0)
    return GradientBundle(weights=w_grads, biases=b_grads, inputs=delta)


def _rel_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def finite_diff_check(loss_and_grad, net: MlpNetwork, step=1e-5):
    """Compare analytic network gradients against central differences.

    `loss_and_grad(net)` must return (scalar loss, GradientBundle) and be
    deterministic. Returns a dict of per-parameter-group max relative
    errors keyed "W0".."W2", "b0".."b2", plus the overall "max".
    """
    _, bundle = loss_and_grad(net)
    report = {}
    for kind, params, grads in (("W", net.weights, bundle.weights),
                                ("b", net.biases, bundle.biases)):
        for l in range(3):
            numeric = np.zeros_like(params[l])
            flat_p = params[l].ravel()
            flat_n = numeric.ravel()
            for i in range(flat_p.size):
                orig = flat_p[i]
                flat_p[i] = orig + step
                hi, _ = loss_and_grad(net)
                flat_p[i] = orig - step
                lo, _ = loss_and_grad(net)
                flat_p[i] = orig
                flat_n[i] = (hi - lo) / (2.0 * step)
            report[f"{kind}{l}"] = _rel_error(grads[l], numeric)
    report["max"] = max(v for k, v in report.items() if k != "max")
    return report
