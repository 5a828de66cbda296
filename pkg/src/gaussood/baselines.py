"""Comparison scorers: max-softmax confidence and a Mahalanobis-distance
confidence over embeddings (shared covariance, no feature ensemble).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .optim import AdamState, TrainingDivergedError


@dataclass
class SoftmaxModel:
    """Embedding network with a linear classification head on top."""

    network: nn.MlpNetwork
    head_w: np.ndarray  # (latent, k)
    head_b: np.ndarray  # (k,)

    @property
    def k(self):
        return self.head_w.shape[1]

    def logits(self, features):
        return nn.forward(self.network, features) @ self.head_w + self.head_b


def softmax_probs(logits):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_fit(features, labels, k, config):
    """Train network + head jointly with mean cross-entropy and Adam.

    Same epochs/batching/learning rate as the descriptor trainer; the
    config is any object with batch_size, max_epochs, learning_rate,
    seed, and layer_dims(). Returns (model, per-epoch mean CE list).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if n == 0:
        raise ValueError("cannot fit on an empty training set")

    rng = np.random.default_rng(config.seed)
    net = nn.MlpNetwork.initialize(config.layer_dims(features.shape[1]), rng)
    bound = np.sqrt(6.0 / (net.latent_dim + k))
    head_w = rng.uniform(-bound, bound, size=(net.latent_dim, k))
    head_b = np.zeros(k)

    slots = ([AdamState(w.shape) for w in net.weights]
             + [AdamState(b.shape) for b in net.biases]
             + [AdamState(head_w.shape), AdamState(head_b.shape)])
    history = []
    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x, y = features[idx], labels[idx]
            b = x.shape[0]
            z = nn.forward(net, x)
            logits = z @ head_w + head_b
            p = softmax_probs(logits)
            rows = np.arange(b)
            loss = float(-np.log(np.clip(p[rows, y], 1e-12, 1.0)).mean())
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"softmax: non-finite cross-entropy at epoch {epoch}"
                )
            d_logits = p.copy()
            d_logits[rows, y] -= 1.0
            d_logits /= b
            g_head_w = z.T @ d_logits
            g_head_b = d_logits.sum(axis=0)
            bundle = nn.backward(net, x, d_logits @ head_w.T)
            if not bundle.check_finite():
                raise TrainingDivergedError(
                    f"softmax: non-finite network gradient at epoch {epoch}"
                )
            lr = config.learning_rate
            params = net.weights + net.biases + [head_w, head_b]
            grads = bundle.weights + bundle.biases + [g_head_w, g_head_b]
            for slot, param, grad in zip(slots, params, grads):
                slot.step(param, grad, lr)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / n_batches)
    return SoftmaxModel(network=net, head_w=head_w, head_b=head_b), history


def softmax_confidence(model: SoftmaxModel, x):
    """Predicted class and max softmax probability for one input row."""
    p = softmax_probs(model.logits(np.atleast_2d(x)))[0]
    return int(p.argmax()), float(p.max())


@dataclass
class MahalanobisModel:
    """Class-conditional Gaussian scorer over a trained embedding network."""

    network: nn.MlpNetwork
    means: np.ndarray      # (k, d) per-class embedding means
    cov: np.ndarray        # (d, d) pooled within-class covariance (pre-ridge)
    precision: np.ndarray  # inverse of cov + ridge*I
    ridge: float

    @property
    def k(self):
        return self.means.shape[0]


def mahalanobis_fit(network: nn.MlpNetwork, features, labels, k,
                    ridge=1e-6) -> MahalanobisModel:
    """Estimate per-class means and a single shared covariance.

    The covariance is the pooled within-class estimate (1/N
    normalization). The ridge grows tenfold, up to 1e-2, until the
    regularized matrix admits a Cholesky factorization.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = nn.forward(network, features)
    d = z.shape[1]
    means = np.zeros((k, d))
    for i in range(k):
        rows = z[labels == i]
        if rows.shape[0] == 0:
            raise ValueError(f"no rows for class {i}")
        means[i] = rows.mean(axis=0)
    dev = z - means[labels]
    cov = dev.T @ dev / z.shape[0]

    while True:
        try:
            np.linalg.cholesky(cov + ridge * np.eye(d))
            break
        except np.linalg.LinAlgError:
            if ridge >= 1e-2:
                raise ValueError("covariance singular even at ridge 1e-2")
            ridge *= 10.0
    precision = np.linalg.inv(cov + ridge * np.eye(d))
    return MahalanobisModel(network=network, means=means, cov=cov,
                            precision=precision, ridge=ridge)


def mahalanobis_sq(model: MahalanobisModel, features):
    """Squared Mahalanobis distance to every class mean; (n, k)."""
    z = nn.forward(model.network, np.atleast_2d(features))
    out = np.zeros((z.shape[0], model.k))
    for i in range(model.k):
        dev = z - model.means[i]
        out[:, i] = np.einsum("nd,nd->n", dev @ model.precision, dev)
    return out

def mahalanobis_confidence(model: MahalanobisModel, x):
    """Closest-class prediction; confidence is the negated min distance."""
    m2 = mahalanobis_sq(model, np.atleast_2d(x))[0]
    return int(m2.argmin()), float(-m2.min())
