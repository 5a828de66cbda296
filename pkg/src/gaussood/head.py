"""Gaussian-descriptor classification head.

Each known class i is modeled as an isotropic Gaussian sphere in latent
space with center mu_i and radius sigma_i = exp(s_i). A sample's distance
to cluster i is

    D_i(z) = ||z - mu_i||^2 / (2 sigma_i^2) + d * log(sigma_i)

and its per-class score is zeta_i(z) = sigma_i - D_i(z): positive inside
the sphere, negative outside. A sample whose scores are all negative is
rejected as out-of-distribution; otherwise the best-scoring class wins.

Training minimizes four terms with equal weight: a pull loss (own-class
distance), a score loss (sign constraints on zeta), and two
class-balanced focal losses driven by 1/D and zeta respectively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OOD_LABEL = -1

LOSS_TERMS = ("pull", "score", "efl1", "efl2")

# Floors shared by forward losses and their gradients.
DISTANCE_FLOOR = 1e-8  # clamp on D before the 1/D reciprocal
PROB_FLOOR = 1e-12     # clamp on p_y before log


@dataclass
class GaussianDescriptorSet:
    """Per-class cluster centers and unconstrained log-radii."""

    mu: np.ndarray         # (k, d) cluster centers
    sigma_raw: np.ndarray  # (k,) s with sigma = exp(s), so sigma > 0 always

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma_raw = np.asarray(self.sigma_raw, dtype=np.float64)
        if self.mu.ndim != 2:
            raise ValueError(f"mu must be (k, d), got shape {self.mu.shape}")
        if self.sigma_raw.shape != (self.mu.shape[0],):
            raise ValueError("sigma_raw must have one entry per class")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma_raw))):
            raise ValueError("descriptor parameters must be finite")

    @property
    def k(self):
        return self.mu.shape[0]

    @property
    def d(self):
        return self.mu.shape[1]

    @property
    def sigma(self):
        return np.exp(self.sigma_raw)

    @classmethod
    def from_embeddings(cls, embeddings, labels, k):
        """Class-mean centers, unit radii (s = 0)."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels)
        mu = np.zeros((k, embeddings.shape[1]))
        for i in range(k):
            rows = embeddings[labels == i]
            if rows.shape[0] == 0:
                raise ValueError(f"no training rows for class {i}")
            mu[i] = rows.mean(axis=0)
        return cls(mu=mu, sigma_raw=np.zeros(k))

    def copy(self):
        return GaussianDescriptorSet(mu=self.mu.copy(), sigma_raw=self.sigma_raw.copy())


@dataclass
class LossBreakdown:
    pull: float
    score_loss: float
    efl1: float
    efl2: float
    net: float

    @classmethod
    def build(cls, pull, score_loss, efl1, efl2):
        return cls(pull, score_loss, efl1, efl2, pull + score_loss + efl1 + efl2)

    def is_finite(self):
        return all(np.isfinite(v) for v in (self.pull, self.score_loss, self.efl1, self.efl2))


@dataclass
class Prediction:
    label: int        # class index, or OOD_LABEL when every score is negative
    confidence: float  # max over per-class scores


@dataclass
class HeadGradients:
    """Gradients of the net loss w.r.t. embeddings and descriptor parameters."""

    embeddings: np.ndarray  # (n, d)
    mu: np.ndarray          # (k, d)
    sigma_raw: np.ndarray   # (k,)

    def is_finite(self):
        return (np.all(np.isfinite(self.embeddings))
                and np.all(np.isfinite(self.mu))
                and np.all(np.isfinite(self.sigma_raw)))


def _as_batch(desc, embeddings):
    """Accept a single (d,) vector or an (n, d) batch; return (n, d) + flag."""
    z = np.asarray(embeddings, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != desc.d:
        raise ValueError(f"embedding dim {z.shape} does not match descriptor dim {desc.d}")
    return z, single

def _check_labels(labels, k, n):
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch size {n}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def _geometry(desc, z):
    """Pairwise differences, squared distances, D and zeta matrices."""
    diff = z[:, None, :] - desc.mu[None, :, :]       # (n, k, d)
    quad = np.einsum("nkd,nkd->nk", diff, diff)      # ||z - mu_i||^2
    sigma = desc.sigma
    dist = quad / (2.0 * sigma**2) + desc.d * desc.sigma_raw
    zeta = sigma - dist
    return diff, quad, dist, zeta


def class_distances(desc: GaussianDescriptorSet, embedding) -> np.ndarray:
    """Distance D_i to every cluster; (k,) for one vector, (n, k) for a batch."""
    z, single = _as_batch(desc, embedding)
    _, _, dist, _ = _geometry(desc, z)
    return dist[0] if single else dist


def class_scores(desc: GaussianDescriptorSet, embedding) -> np.ndarray:
    """Score zeta_i = sigma_i - D_i to every cluster; shape as class_distances."""
    z, single = _as_batch(desc, embedding)
    _, _, _, zeta = _geometry(desc, z)
    return zeta[0] if single else zeta


def predict(desc: GaussianDescriptorSet, embedding) -> Prediction:
    """Label by best score; reject as OOD when every score is negative."""
    scores = class_scores(desc, embedding)
    if scores.ndim != 1:
        raise ValueError("predict takes a single embedding; use predict_batch")
    confidence = float(scores.max())
    label = OOD_LABEL if confidence < 0.0 else int(scores.argmax())
    return Prediction(label=label, confidence=confidence)


def predict_batch(desc: GaussianDescriptorSet, embeddings):
    """Vectorized predict: returns (labels, confidences) arrays."""
    zeta = class_scores(desc, np.atleast_2d(embeddings))
    confidence = zeta.max(axis=1)
    labels = zeta.argmax(axis=1).astype(np.int64)
    labels[confidence < 0.0] = OOD_LABEL
    return labels, confidence


def pull_loss(desc, embeddings, labels) -> float:
    """Sum of own-class distances over the batch."""
    z, _ = _as_batch(desc, embeddings)
    y = _check_labels(labels, desc.k, z.shape[0])
    _, _, dist, _ = _geometry(desc, z)
    return float(dist[np.arange(z.shape[0]), y].sum())


def score_loss(desc, embeddings, labels) -> float:
    """Sign penalty on scores, exactly as the two-branch definition.

    Other-class scores pay exp(zeta)/|B|; the own-class score pays
    relu(-zeta) + log(1 + zeta^2). |B| is the full mini-batch size.
    """
    z, _ = _as_batch(desc, embeddings)
    n = z.shape[0]
    y = _check_labels(labels, desc.k, n)
    _, _, _, zeta = _geometry(desc, z)
    rows = np.arange(n)
    own = zeta[rows, y]
    other = np.exp(zeta)
    other[rows, y] = 0.0
    return float(other.sum() / n + (np.maximum(-own, 0.0) + np.log1p(own**2)).sum())


def _effective_weight(beta, counts):
    """Class-balance weight (1-beta)/(1-beta^n), with limits at beta -> 0, 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if beta <= 0.0:
        return np.ones_like(counts)
    if beta >= 1.0:
        return 1.0 / counts
    return (1.0 - beta) / (1.0 - beta**counts)


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def effective_focal_loss(one_hot_label, logits, beta, gamma, n_y) -> float:
    """Class-balanced focal loss for one sample.

    p is the softmax of `logits` at the true class; the loss is
    weight * (1 - p)^gamma * (-log p) with weight (1-beta)/(1-beta^n_y),
    nonnegative and zero at p = 1.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if gamma < 0.0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if n_y < 1:
        raise ValueError(f"n_y must be at least 1, got {n_y}")
    one_hot = np.asarray(one_hot_label, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if one_hot.shape != logits.shape:
        raise ValueError("one-hot label and logits must have matching shape")
    if not np.isclose(one_hot.sum(), 1.0) or not np.all((one_hot == 0) | (one_hot == 1)):
        raise ValueError("label vector must be one-hot")
    y = int(one_hot.argmax())
    p = _softmax(logits[None, :])[0]
    p_y = float(np.clip(p[y], PROB_FLOOR, 1.0))
    weight = float(_effective_weight(beta, np.array([n_y]))[0])
    return -weight * (1.0 - p_y) ** gamma * np.log(p_y)


def _efl_batch(logits, y, weights, gamma, want_grad):
    """Summed effective focal loss over a batch, optionally with d/d logits."""
    n = logits.shape[0]
    rows = np.arange(n)
    p = _softmax(logits)
    p_y = p[rows, y]
    p_c = np.clip(p_y, PROB_FLOOR, 1.0)
    pm1 = 1.0 - p_c
    log_p = np.log(p_c)
    loss = float(-(weights * pm1**gamma * log_p).sum())
    if not want_grad:
        return loss, None
    # d loss / d p_y, with the clamp's dead zone zeroed out
    pm1_safe = np.where(pm1 > 0.0, pm1, 1.0)
    t1 = gamma * pm1_safe ** (gamma - 1.0) * log_p if gamma > 0.0 else np.zeros(n)
    t1 = np.where(pm1 > 0.0, t1, 0.0)
    t2 = pm1**gamma / p_c
    g_py = weights * (t1 - t2)
    g_py = np.where(p_y >= PROB_FLOOR, g_py, 0.0)
    # chain through softmax: d p_y / d logit_j = p_y (delta_jy - p_j)
    scale = g_py * p_y
    grad = -p * scale[:, None]
    grad[rows, y] += scale
    return loss, grad


def _batch_setup(desc, embeddings, labels, beta, gamma):
    z, _ = _as_batch(desc, embeddings)
    n = z.shape[0]
    if n < 1:
        raise ValueError("batch must contain at least one sample")
    y = _check_labels(labels, desc.k, n)
    if gamma < 0.0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    counts = np.bincount(y, minlength=desc.k)
    weights = _effective_weight(beta, counts[y])
    return z, y, weights


def efl1(desc, embeddings, labels, beta, gamma) -> float:
    """Effective focal loss on reciprocal distances (logits 1/D)."""
    z, y, weights = _batch_setup(desc, embeddings, labels, beta, gamma)
    _, _, dist, _ = _geometry(desc, z)
    loss, _ = _efl_batch(1.0 / np.maximum(dist, DISTANCE_FLOOR), y, weights, gamma, False)
    return loss


def efl2(desc, embeddings, labels, beta, gamma) -> float:
    """Effective focal loss on the raw score vector (logits zeta)."""
    z, y, weights = _batch_setup(desc, embeddings, labels, beta, gamma)
    _, _, _, zeta = _geometry(desc, z)
    loss, _ = _efl_batch(zeta, y, weights, gamma, False)
    return loss


def _check_include(include):
    if include is None:
        return LOSS_TERMS
    include = tuple(include)
    unknown = [t for t in include if t not in LOSS_TERMS]
    if unknown:
        raise ValueError(f"unknown loss terms {unknown}; valid terms are {LOSS_TERMS}")
    return include


def net_loss(desc, embeddings, labels, beta, gamma, include=None) -> LossBreakdown:
    """All four loss terms with equal weight; excluded terms report as 0."""
    include = _check_include(include)
    z, y, weights = _batch_setup(desc, embeddings, labels, beta, gamma)
    n = z.shape[0]
    rows = np.arange(n)
    _, _, dist, zeta = _geometry(desc, z)

    pull = float(dist[rows, y].sum()) if "pull" in include else 0.0

    score = 0.0
    if "score" in include:
        own = zeta[rows, y]
        other = np.exp(zeta)
        other[rows, y] = 0.0
        score = float(other.sum() / n + (np.maximum(-own, 0.0) + np.log1p(own**2)).sum())

    e1 = 0.0
    if "efl1" in include:
        e1, _ = _efl_batch(1.0 / np.maximum(dist, DISTANCE_FLOOR), y, weights, gamma, False)
    e2 = 0.0
    if "efl2" in include:
        e2, _ = _efl_batch(zeta, y, weights, gamma, False)

    return LossBreakdown.build(pull, score, e1, e2)


def loss_gradients(desc, embeddings, labels, beta, gamma, include=None) -> HeadGradients:
    """Analytic gradients of the net loss w.r.t. embeddings, mu, and sigma_raw.

    Uses the same clamping rules as the forward losses: gradients do not
    flow through the 1/D floor or the p_y floor where those clamps bind.
    """
    include = _check_include(include)
    z, y, weights = _batch_setup(desc, embeddings, labels, beta, gamma)
    n = z.shape[0]
    rows = np.arange(n)
    diff, quad, dist, zeta = _geometry(desc, z)
    sigma = desc.sigma

    g_dist = np.zeros((n, desc.k))   # d loss / d D, holding zeta fixed
    g_zeta = np.zeros((n, desc.k))   # d loss / d zeta

    if "pull" in include:
        g_dist[rows, y] += 1.0

    if "score" in include:
        own = zeta[rows, y]
        g_sl = np.exp(zeta) / n
        g_sl[rows, y] = -(own < 0.0).astype(np.float64) + 2.0 * own / (1.0 + own**2)
        g_zeta += g_sl

    if "efl1" in include:
        dist_c = np.maximum(dist, DISTANCE_FLOOR)
        _, g_logits = _efl_batch(1.0 / dist_c, y, weights, gamma, True)
        g_dist += g_logits * (-1.0 / dist_c**2) * (dist > DISTANCE_FLOOR)

    if "efl2" in include:
        _, g_logits = _efl_batch(zeta, y, weights, gamma, True)
        g_zeta += g_logits

    # zeta = sigma - D: fold the zeta gradients into D and sigma_raw.
    g_dist_total = g_dist - g_zeta
    g_sigma_raw = sigma * g_zeta.sum(axis=0)

    # D = quad / (2 sigma^2) + d * s
    scaled = g_dist_total / sigma[None, :] ** 2
    g_emb = np.einsum("nk,nkd->nd", scaled, diff)
    g_mu = -np.einsum("nk,nkd->kd", scaled, diff)
    g_sigma_raw = g_sigma_raw + (g_dist_total * (desc.d - quad / sigma[None, :] ** 2)).sum(axis=0)

    return HeadGradients(embeddings=g_emb, mu=g_mu, sigma_raw=g_sigma_raw)
