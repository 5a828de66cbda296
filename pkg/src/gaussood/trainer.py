"""Training loop for the Gaussian-descriptor head.

Each mini-batch takes two block-coordinate sub-steps: first the network
weights move with the descriptors frozen, then the descriptors (mu, s)
move with the weights frozen. Both blocks use Adam-style moment updates
and each sub-step recomputes gradients at the current point.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, data, head, metrics, nn
from .optim import AdamState, TrainingDivergedError


def stable_seed(*parts) -> int:
    """Deterministic cross-process seed from arbitrary labeled parts."""
    text = "|".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


@dataclass
class TrainConfig:
    batch_size: int = 200
    max_epochs: int = 100
    learning_rate: float = 0.001
    gamma: float = 1.0
    beta_mode: str = "effective"  # "effective": 1 - 1/|B|; "literal": 1/|B|
    seed: int = 0
    latent_dim: int = 128
    hidden_dims: tuple | None = None  # defaults to (latent_dim, latent_dim)
    loss_terms: tuple = head.LOSS_TERMS

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.beta_mode not in ("effective", "literal"):
            raise ValueError(f"beta_mode must be 'effective' or 'literal', got {self.beta_mode!r}")
        unknown = [t for t in self.loss_terms if t not in head.LOSS_TERMS]
        if unknown:
            raise ValueError(f"unknown loss terms {unknown}")

    def layer_dims(self, input_dim):
        hidden = self.hidden_dims or (self.latent_dim, self.latent_dim)
        return (input_dim, hidden[0], hidden[1], self.latent_dim)

    def batch_beta(self, batch_size):
        if self.beta_mode == "effective":
            return 1.0 - 1.0 / batch_size
        return 1.0 / batch_size

    def to_dict(self):
        out = {k: getattr(self, k) for k in (
            "batch_size", "max_epochs", "learning_rate", "gamma",
            "beta_mode", "seed", "latent_dim")}
        out["hidden_dims"] = None if self.hidden_dims is None else list(self.hidden_dims)
        out["loss_terms"] = list(self.loss_terms)
        return out


@dataclass
class TrainState:
    net: nn.MlpNetwork
    desc: head.GaussianDescriptorSet
    config: TrainConfig
    adam_weights: list = field(repr=False)
    adam_biases: list = field(repr=False)
    adam_mu: AdamState = field(repr=False)
    adam_sigma: AdamState = field(repr=False)
    epoch: int = 0
    loss_history: list = field(default_factory=list)  # per-epoch LossBreakdown


def init_state(features, labels, k, config: TrainConfig,
               rng: np.random.Generator | None = None) -> TrainState:
    """Fresh network plus class-mean descriptors from one forward pass."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    net = nn.MlpNetwork.initialize(config.layer_dims(features.shape[1]), rng)
    desc = head.GaussianDescriptorSet.from_embeddings(nn.forward(net, features), labels, k)
    return TrainState(
        net=net,
        desc=desc,
        config=config,
        adam_weights=[AdamState(w.shape) for w in net.weights],
        adam_biases=[AdamState(b.shape) for b in net.biases],
        adam_mu=AdamState(desc.mu.shape),
        adam_sigma=AdamState(desc.sigma_raw.shape),
    )


def _breakdown_or_raise(state, batch_x, batch_y, beta):
    cfg = state.config
    z = nn.forward(state.net, batch_x)
    breakdown = head.net_loss(state.desc, z, batch_y, beta, cfg.gamma, include=cfg.loss_terms)
    if not breakdown.is_finite():
        term = next(name for name in ("pull", "score_loss", "efl1", "efl2")
                    if not np.isfinite(getattr(breakdown, name)))
        raise TrainingDivergedError(f"loss term {term!r} is non-finite")
    return z, breakdown


def _update_network_block(state: TrainState, batch_x, batch_y, beta):
    """Sub-step (a): move W and biases; descriptors stay untouched."""
    cfg = state.config
    z, breakdown = _breakdown_or_raise(state, batch_x, batch_y, beta)
    grads = head.loss_gradients(state.desc, z, batch_y, beta, cfg.gamma, include=cfg.loss_terms)
    if not grads.is_finite():
        raise TrainingDivergedError("descriptor-head gradients are non-finite")
    bundle = nn.backward(state.net, batch_x, grads.embeddings)
    if not bundle.check_finite():
        raise TrainingDivergedError("network parameter gradients are non-finite")
    for slot, param, grad in zip(state.adam_weights, state.net.weights, bundle.weights):
        slot.step(param, grad, cfg.learning_rate)
    for slot, param, grad in zip(state.adam_biases, state.net.biases, bundle.biases):
        slot.step(param, grad, cfg.learning_rate)
    return breakdown


def _update_descriptor_block(state: TrainState, batch_x, batch_y, beta):
    """Sub-step (b): move (mu, s) under the just-updated network."""
    cfg = state.config
    z, _ = _breakdown_or_raise(state, batch_x, batch_y, beta)
    grads = head.loss_gradients(state.desc, z, batch_y, beta, cfg.gamma, include=cfg.loss_terms)
    if not grads.is_finite():
        raise TrainingDivergedError("descriptor gradients are non-finite")
    state.adam_mu.step(state.desc.mu, grads.mu, cfg.learning_rate)
    state.adam_sigma.step(state.desc.sigma_raw, grads.sigma_raw, cfg.learning_rate)


def bcd_step(state: TrainState, batch_x, batch_y, config: TrainConfig | None = None):
    """One block-coordinate step over a mini-batch; returns the pre-update loss."""
    if config is not None and config is not state.config:
        state.config = config
    batch_x = np.asarray(batch_x, dtype=np.float64)
    batch_y = np.asarray(batch_y, dtype=np.int64)
    beta = state.config.batch_beta(batch_x.shape[0])
    breakdown = _update_network_block(state, batch_x, batch_y, beta)
    _update_descriptor_block(state, batch_x, batch_y, beta)
    return breakdown


def fit_arrays(features, labels, k, config: TrainConfig) -> TrainState:
    """Train on contiguous-labeled arrays; deterministic for a fixed seed."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    state = init_state(features, labels, k, config, rng=rng)
    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        totals = np.zeros(4)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            try:
                breakdown = bcd_step(state, features[idx], labels[idx])
            except TrainingDivergedError as err:
                raise TrainingDivergedError(
                    f"epoch {epoch}, batch {n_batches}: {err}"
                ) from err
            totals += (breakdown.pull, breakdown.score_loss, breakdown.efl1, breakdown.efl2)
            n_batches += 1
        totals /= n_batches
        state.loss_history.append(head.LossBreakdown.build(*totals))
        state.epoch = epoch + 1
    return state


def fit(dataset: data.TabularDataset, config: TrainConfig) -> TrainState:
    """Train on the dataset's ID rows (labels remapped to 0..k-1)."""
    id_ids = dataset.id_class_ids
    remap = {c: i for i, c in enumerate(id_ids)}
    mask = ~dataset.ood_mask
    if not mask.any():
        raise ValueError("dataset has no in-distribution rows to train on")
    labels = np.array([remap[c] for c in dataset.labels[mask]], dtype=np.int64)
    return fit_arrays(dataset.features[mask], labels, len(id_ids), config)


def _contiguous_labels(dataset, rows, remap):
    out = np.full(rows.size, -1, dtype=np.int64)
    for j, r in enumerate(rows):
        c = dataset.labels[r]
        out[j] = remap.get(int(c), -1)
    return out


def train_method(dataset: data.TabularDataset, train_rows, config: TrainConfig, method):
    """Fit one scorer on the given rows; returns a checkpoint-able model.

    Normalization stats are fitted on the training rows only and stored
    with the model, so scoring always receives raw features.
    """
    from .checkpoint import TrainedModel  # local import to keep modules acyclic

    train_rows = np.asarray(train_rows)
    id_ids = dataset.id_class_ids
    remap = {c: i for i, c in enumerate(id_ids)}
    y = _contiguous_labels(dataset, train_rows, remap)
    if np.any(y < 0):
        raise ValueError("training rows must not contain OOD rows")
    scaled, mean, std = data.zscore_fit_apply(
        dataset.features[train_rows], dataset.features[train_rows])
    k = len(id_ids)

    common = dict(norm_mean=mean, norm_std=std, id_class_ids=list(id_ids),
                  class_names=list(dataset.class_names), config=config.to_dict())
    if method == "gditd":
        state = fit_arrays(scaled, y, k, config)
        history = [(b.pull, b.score_loss, b.efl1, b.efl2, b.net) for b in state.loss_history]
        return TrainedModel(kind="gditd", network=state.net, descriptors=state.desc,
                            loss_history=history, **common)
    if method == "softmax":
        model, history = baselines.softmax_fit(scaled, y, k, config)
        return TrainedModel(kind="softmax", network=model.network,
                            head_w=model.head_w, head_b=model.head_b,
                            loss_history=[(h,) for h in history], **common)
    if method == "mahalanobis":
        soft, history = baselines.softmax_fit(scaled, y, k, config)
        mahal = baselines.mahalanobis_fit(soft.network, scaled, y, k)
        return TrainedModel(kind="mahalanobis", network=soft.network,
                            mahal_means=mahal.means, mahal_cov=mahal.cov,
                            mahal_precision=mahal.precision, mahal_ridge=mahal.ridge,
                            loss_history=[(h,) for h in history], **common)
    raise ValueError(f"unknown method {method!r}")


def evaluate_model(model, dataset: data.TabularDataset, eval_rows,
                   config_echo=None) -> metrics.EvalReport:
    """Score the given rows and assemble the metrics report."""
    eval_rows = np.asarray(eval_rows)
    id_ids = model.id_class_ids
    remap = {c: i for i, c in enumerate(id_ids)}
    preds, confidence, class_scores = model.score_rows(dataset.features[eval_rows])

    is_ood = dataset.ood_mask[eval_rows]
    truths = _contiguous_labels(dataset, eval_rows, remap)
    samples = []
    for j in range(eval_rows.size):
        samples.append(metrics.ScoredSample(
            confidence=float(confidence[j]),
            is_ood=bool(is_ood[j]),
            true_class=None if is_ood[j] else int(truths[j]),
            predicted_class=int(preds[j]),
            class_scores=class_scores[j],
        ))
    minority = None
    if dataset.minority_class is not None and dataset.minority_class != dataset.ood_class:
        minority = remap[dataset.minority_class]
    report = metrics.evaluate(samples, k=len(id_ids), minority_class=minority,
                              config_echo=config_echo)
    present = set(truths[~is_ood])
    for c in range(len(id_ids)):
        if c not in present:
            report.warnings.append(
                f"class {dataset.class_names[id_ids[c]]!r} absent from this validation fold"
            )
    return report


def run_split(dataset, train_rows, eval_rows, config, method, config_echo=None):
    """Train + evaluate one split; returns (model, report)."""
    model = train_method(dataset, train_rows, config, method)
    echo = {"method": method, "beta_mode": config.beta_mode, "seed": config.seed}
    echo.update(config_echo or {})
    return model, evaluate_model(model, dataset, eval_rows, config_echo=echo)


def kfold_fit_eval(dataset: data.TabularDataset, config: TrainConfig, folds=5,
                   method="gditd", fold_seeds=None, mdsr=1.0):
    """Stratified k-fold protocol: train on k-1 folds' ID rows, evaluate
    on the held-out fold plus every OOD row.

    Returns (per-fold reports, fold-mean report). Each fold trains with
    its own derived seed.
    """
    plan = data.stratified_folds(dataset, folds, seed=config.seed, mdsr=mdsr)
    if fold_seeds is None:
        fold_seeds = [stable_seed(config.seed, "fold", f) for f in range(folds)]
    reports = []
    for fold in range(folds):
        fold_config = replace(config, seed=fold_seeds[fold])
        eval_rows = np.concatenate([plan.val_indices(fold), plan.ood_rows])
        _, report = run_split(
            dataset, plan.train_indices(fold), eval_rows, fold_config, method,
            config_echo={"mdsr": mdsr, "fold": fold},
        )
        reports.append(report)
    return reports, metrics.mean_report(reports)
