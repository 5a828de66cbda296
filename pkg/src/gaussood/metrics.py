"""Detection and classification metrics via exact threshold sweeps.

Conventions: a higher confidence means "more in-distribution". For OOD
detection metrics the OOD class is the positive class and its score is
the negated confidence (one shared definition, `ood_positive_score`).
TPR in TNR@TPR is measured over ID samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata


def ood_positive_score(confidence):
    """Score under which OOD is the positive class: the negated confidence."""
    return -np.asarray(confidence, dtype=np.float64)


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    return s, y


def id_accuracy(predictions, truths) -> float:
    """Fraction of ID rows predicted correctly; OOD-flagged rows count as wrong."""
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValueError("predictions and truths must have matching shape")
    if pred.size == 0:
        raise ValueError("id_accuracy of an empty set is undefined")
    return float(np.mean(pred == true))


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties at 1/2."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = rankdata(s)  # average ranks give the tie credit
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pr_operating_points(scores, labels):
    """Precision/recall at every distinct threshold, highest first."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("aupr needs at least one positive")
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order].astype(np.float64)
    s_sorted = s[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1.0 - y_sorted)
    boundary = np.ones(s.size, dtype=bool)
    boundary[:-1] = s_sorted[:-1] != s_sorted[1:]
    precision = tp[boundary] / (tp[boundary] + fp[boundary])
    recall = tp[boundary] / n_pos
    return precision, recall


def aupr(scores, labels) -> float:
    """Area under precision-recall with step-wise (threshold-sum) semantics."""
    precision, recall = _pr_operating_points(scores, labels)
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(((recall - prev) * precision).sum())


def tnr_at_tpr(scores, labels, target_tpr=0.85) -> float:
    """TNR on negatives at the largest threshold keeping TPR >= target.

    `labels` flags the positive class (ID samples in the OOD-detection
    usage); predictions are positive when score >= threshold.
    """
    s, y = _binary(scores, labels)
    pos = s[y]
    neg = s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("tnr_at_tpr needs both classes present")
    need = int(np.ceil(target_tpr * pos.size - 1e-12))
    if need <= 0:
        return 1.0
    threshold = np.sort(pos)[::-1][need - 1]
    return float(np.mean(neg < threshold))


def roc_points(scores, labels):
    """(fpr, tpr) pairs over all thresholds, from (0,0) to (1,1)."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc needs both classes present")
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order].astype(np.float64)
    s_sorted = s[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1.0 - y_sorted)
    boundary = np.ones(s.size, dtype=bool)
    boundary[:-1] = s_sorted[:-1] != s_sorted[1:]
    fpr = np.concatenate(([0.0], fp[boundary] / n_neg))
    tpr = np.concatenate(([0.0], tp[boundary] / n_pos))
    return fpr, tpr


def pr_points(scores, labels):
    """(recall, precision) pairs over all thresholds."""
    precision, recall = _pr_operating_points(scores, labels)
    return recall, precision


@dataclass
class ScoredSample:
    """One evaluated test row."""

    confidence: float
    is_ood: bool                      # ground truth
    true_class: int | None            # ID class index, None for OOD rows
    predicted_class: int              # OOD_LABEL when the model rejected
    class_scores: np.ndarray | None = None  # per-class confidence vector


@dataclass
class EvalReport:
    """Headline metrics for one evaluation run; rates all lie in [0, 1]."""

    id_accuracy: float
    minority_aupr: float | None
    ood_tnr_at_85tpr: float | None
    ood_auroc: float | None
    ood_aupr: float | None
    per_class: list = field(default_factory=list)  # dicts: class/precision/recall/support
    config: dict = field(default_factory=dict)     # echo: beta mode, mdsr, seed, ...
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)


def _per_class_table(pred, true, k):
    table = []
    for c in range(k):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        table.append({
            "class": c,
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "support": int(np.sum(true == c)),
        })
    return table


def evaluate(samples, k, minority_class=None, config_echo=None) -> EvalReport:
    """Assemble the full report from scored test rows.

    ID accuracy and the per-class table use ID rows only (rejections
    count as errors). Minority AUPR is one-vs-rest over ID rows using
    that class's score column. OOD metrics compare every row's negated
    confidence against the OOD ground truth; they are omitted with a
    warning when the split has no OOD rows.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty sample set")
    is_ood = np.array([s.is_ood for s in samples], dtype=bool)
    confidence = np.array([s.confidence for s in samples], dtype=np.float64)
    pred = np.array([s.predicted_class for s in samples], dtype=np.int64)

    warnings = []
    id_mask = ~is_ood
    if not id_mask.any():
        raise ValueError("evaluation split has no ID rows")
    true_id = np.array([s.true_class for s in samples if not s.is_ood], dtype=np.int64)
    acc = id_accuracy(pred[id_mask], true_id)
    per_class = _per_class_table(pred[id_mask], true_id, k)

    minority_score = None
    if minority_class is not None:
        have_scores = all(s.class_scores is not None for s in samples)
        if have_scores:
            col = np.array([s.class_scores[minority_class] for s in samples])[id_mask]
            positives = true_id == minority_class
            if positives.any():
                minority_score = aupr(col, positives)
            else:
                warnings.append("minority class absent from ID rows; minority AUPR omitted")
        else:
            warnings.append("class scores unavailable; minority AUPR omitted")

    tnr = roc = pr = None
    if is_ood.any():
        ood_scores = ood_positive_score(confidence)
        tnr = tnr_at_tpr(confidence, id_mask, target_tpr=0.85)
        roc = auroc(ood_scores, is_ood)
        pr = aupr(ood_scores, is_ood)
    else:
        warnings.append("no OOD rows in evaluation split; OOD metrics omitted")

    return EvalReport(
        id_accuracy=acc,
        minority_aupr=minority_score,
        ood_tnr_at_85tpr=tnr,
        ood_auroc=roc,
        ood_aupr=pr,
        per_class=per_class,
        config=dict(config_echo or {}),
        warnings=warnings,
    )


def mean_report(reports) -> EvalReport:
    """Field-wise mean across fold reports; None fields stay None."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")

    def avg(name):
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    k = len(reports[0].per_class)
    per_class = []
    for c in range(k):
        per_class.append({
            "class": c,
            "precision": float(np.mean([r.per_class[c]["precision"] for r in reports])),
            "recall": float(np.mean([r.per_class[c]["recall"] for r in reports])),
            "support": int(np.sum([r.per_class[c]["support"] for r in reports])),
        })
    config = dict(reports[0].config)
    config["folds_averaged"] = len(reports)
    warnings = [w for r in reports for w in r.warnings]
    return EvalReport(
        id_accuracy=avg("id_accuracy"),
        minority_aupr=avg("minority_aupr"),
        ood_tnr_at_85tpr=avg("ood_tnr_at_85tpr"),
        ood_auroc=avg("ood_auroc"),
        ood_aupr=avg("ood_aupr"),
        per_class=per_class,
        config=config,
        warnings=warnings,
    )
