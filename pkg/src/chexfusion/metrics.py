"""Ranking metrics and long-tail grouping: per-class average precision, mAP,
AUROC, and head/medium/tail group assignment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class PredictionSet:
    scores: np.ndarray            # (S, C)
    labels: np.ndarray            # (S, C) in {0, 1}
    class_names: list = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"scores {self.scores.shape} != labels {self.labels.shape}")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        if self.class_names is None:
            self.class_names = [f"class{i}" for i in range(self.scores.shape[1])]


@dataclass
class GroupAssignment:
    group: list                   # per class: "head" | "medium" | "tail"
    train_counts: np.ndarray


def average_precision(scores, labels) -> float | None:
    """Mean over positives of precision at that rank; descending score order
    with stable ties (original index ascending).  None when no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    npos = int(labels.sum())
    if npos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum[hits == 1] / ranks[hits == 1]).mean())


def mean_ap(preds: PredictionSet, subset=None):
    """Mean of defined per-class APs; returns (mAP, n_undefined)."""
    cols = range(preds.scores.shape[1]) if subset is None else subset
    aps = []
    undefined = 0
    for c in cols:
        ap = average_precision(preds.scores[:, c], preds.labels[:, c])
        if ap is None:
            undefined += 1
        else:
            aps.append(ap)
    if not aps:
        raise ValueError("mean_ap: no class has a defined AP")
    return float(np.mean(aps)), undefined


def auroc(scores, labels) -> float | None:
    """Probability a random positive outscores a random negative, ties = 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    npos = int(labels.sum())
    nneg = labels.size - npos
    if npos == 0 or nneg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


def mean_auroc(preds: PredictionSet, subset=None):
    cols = range(preds.scores.shape[1]) if subset is None else subset
    vals = [auroc(preds.scores[:, c], preds.labels[:, c]) for c in cols]
    vals = [v for v in vals if v is not None]
    if not vals:
        raise ValueError("mean_auroc: no class has a defined AUROC")
    return float(np.mean(vals))


def assign_groups(train_counts, sizes) -> GroupAssignment:
    """Rank classes by training count (ties by class index ascending):
    top n_head -> head, next n_medium -> medium, rest -> tail."""
    counts = np.asarray(train_counts)
    n_head, n_medium, n_tail = sizes
    if n_head + n_medium + n_tail != counts.size:
        raise ValueError(f"group sizes {sizes} do not sum to {counts.size} classes")
    order = np.lexsort((np.arange(counts.size), -counts))
    group = [""] * counts.size
    for rank, c in enumerate(order):
        if rank < n_head:
            group[c] = "head"
        elif rank < n_head + n_medium:
            group[c] = "medium"
        else:
            group[c] = "tail"
    return GroupAssignment(group, counts)


def report(preds: PredictionSet, groups: GroupAssignment) -> dict:
    """Aggregate metrics record: total and per-group mAP, total AUROC,
    per-class details."""
    rec = {}
    rec["map_total"], rec["undefined_classes"] = mean_ap(preds)
    for g in ("head", "medium", "tail"):
        cols = [c for c, gr in enumerate(groups.group) if gr == g]
        if cols:
            try:
                rec[f"map_{g}"], _ = mean_ap(preds, cols)
            except ValueError:
                rec[f"map_{g}"] = None
        else:
            rec[f"map_{g}"] = None
    rec["auroc_total"] = mean_auroc(preds)
    per_class = []
    for c, name in enumerate(preds.class_names):
        per_class.append({
            "name": name,
            "ap": average_precision(preds.scores[:, c], preds.labels[:, c]),
            "auroc": auroc(preds.scores[:, c], preds.labels[:, c]),
            "group": groups.group[c],
            "n_pos": int(preds.labels[:, c].sum()),
        })
    rec["per_class"] = per_class
    return rec


def serialize_report(rec: dict) -> str:
    return json.dumps(rec, indent=2, sort_keys=True)


def deserialize_report(text: str) -> dict:
    return json.loads(text)
