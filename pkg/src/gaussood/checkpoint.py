"""Trained-model bundle: scoring plus a round-trippable .npz checkpoint.

A checkpoint stores the model kind, layer dims, all parameters, the
z-score stats fitted at training time, and the class mapping, so that
save -> load -> score reproduces predictions exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, head, nn

KINDS = ("gditd", "softmax", "mahalanobis")


@dataclass
class TrainedModel:
    kind: str
    network: nn.MlpNetwork
    norm_mean: np.ndarray
    norm_std: np.ndarray
    id_class_ids: list          # contiguous training index -> dataset class id
    class_names: list
    config: dict
    descriptors: head.GaussianDescriptorSet | None = None
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None
    mahal_means: np.ndarray | None = None
    mahal_cov: np.ndarray | None = None
    mahal_precision: np.ndarray | None = None
    mahal_ridge: float | None = None
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def k(self):
        return len(self.id_class_ids)

    def normalize(self, features):
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return (x - self.norm_mean) / self.norm_std

    def score_rows(self, features):
        """Score raw feature rows.

        Returns (predicted class indices with OOD_LABEL for rejections,
        confidences where higher means more in-distribution, and the
        (n, k) per-class score matrix).
        """
        scaled = self.normalize(features)
        if self.kind == "gditd":
            z = nn.forward(self.network, scaled)
            zeta = head.class_scores(self.descriptors, z)
            preds, confidence = head.predict_batch(self.descriptors, z)
            return preds, confidence, zeta
        if self.kind == "softmax":
            logits = nn.forward(self.network, scaled) @ self.head_w + self.head_b
            p = baselines.softmax_probs(logits)
            return p.argmax(axis=1), p.max(axis=1), p
        model = baselines.MahalanobisModel(
            network=self.network, means=self.mahal_means, cov=self.mahal_cov,
            precision=self.mahal_precision, ridge=self.mahal_ridge)
        scores = -baselines.mahalanobis_sq(model, scaled)
        return scores.argmax(axis=1), scores.max(axis=1), scores

    def save(self, path):
        arrays = {
            "kind": np.array(self.kind),
            "layer_dims": np.array(self.network.layer_dims, dtype=np.int64),
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            "id_class_ids": np.array(self.id_class_ids, dtype=np.int64),
            "class_names": np.array(self.class_names),
            "config_json": np.array(json.dumps(self.config, sort_keys=True)),
            "loss_history": np.array(self.loss_history, dtype=np.float64)
            if self.loss_history else np.zeros((0, 0)),
        }
        for l in range(3):
            arrays[f"w{l}"] = self.network.weights[l]
            arrays[f"b{l}"] = self.network.biases[l]
        if self.kind == "gditd":
            arrays["mu"] = self.descriptors.mu
            arrays["sigma_raw"] = self.descriptors.sigma_raw
        elif self.kind == "softmax":
            arrays["head_w"] = self.head_w
            arrays["head_b"] = self.head_b
        else:
            arrays["mahal_means"] = self.mahal_means
            arrays["mahal_cov"] = self.mahal_cov
            arrays["mahal_precision"] = self.mahal_precision
            arrays["mahal_ridge"] = np.array(self.mahal_ridge)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with np.load(path, allow_pickle=False) as npz:
            kind = str(npz["kind"][()])
            dims = tuple(int(v) for v in npz["layer_dims"])
            network = nn.MlpNetwork(
                layer_dims=dims,
                weights=[npz[f"w{l}"] for l in range(3)],
                biases=[npz[f"b{l}"] for l in range(3)],
            )
            history = npz["loss_history"]
            common = dict(
                kind=kind,
                network=network,
                norm_mean=npz["norm_mean"],
                norm_std=npz["norm_std"],
                id_class_ids=[int(v) for v in npz["id_class_ids"]],
                class_names=[str(v) for v in npz["class_names"]],
                config=json.loads(str(npz["config_json"][()])),
                loss_history=[tuple(row) for row in history] if history.size else [],
            )
            if kind == "gditd":
                return cls(descriptors=head.GaussianDescriptorSet(
                    mu=npz["mu"], sigma_raw=npz["sigma_raw"]), **common)
            if kind == "softmax":
                return cls(head_w=npz["head_w"], head_b=npz["head_b"], **common)
            return cls(mahal_means=npz["mahal_means"], mahal_cov=npz["mahal_cov"],
                       mahal_precision=npz["mahal_precision"],
                       mahal_ridge=float(npz["mahal_ridge"][()]), **common)
