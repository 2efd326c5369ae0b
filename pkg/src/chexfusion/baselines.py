"""Comparison systems: single-view evaluation, frontal/lateral weighted
averaging of per-view probabilities, and multi-view concat with a GAP head.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as D
from . import losses as L
from . import metrics as M
from . import model as mdl
from . import training as T
from .autodiff import Parameter, Tape, Tensor


@dataclass
class WeightedAvgConfig:
    w_f: float = 0.7

    def __post_init__(self):
        if not 0 <= self.w_f <= 1:
            raise ValueError("frontal weight must be in [0, 1]")

    @property
    def w_l(self) -> float:
        return 1.0 - self.w_f


def single_view_eval(params, dataset, model_cfg, tta: bool = True) -> M.PredictionSet:
    """Per-study uniform average of per-view (TTA) probabilities."""
    return T.predict_single_view_dataset(params, model_cfg, dataset, tta=tta)


def per_view_eval(params, dataset, model_cfg, tta: bool = True) -> M.PredictionSet:
    """Single-view evaluation proper: every view is scored independently
    against its study's labels, with no cross-view aggregation."""
    study_labels, _ = D.hard_label_matrix(dataset, model_cfg.num_classes)
    rows, labs = [], []
    for st, y in zip(dataset, study_labels):
        imgs = np.stack([v.pixels for v in st.views])
        probs = (mdl.tta_predict_views(imgs, params, model_cfg) if tta
                 else mdl.predict_single_view(imgs, params, model_cfg))
        for r in probs:
            rows.append(r)
            labs.append(y)
    return M.PredictionSet(np.stack(rows), np.stack(labs))


def weighted_average_predict(per_view_probs, view_labels, cfg: WeightedAvgConfig) -> np.ndarray:
    """Weighted mean of the frontal-group and lateral-group mean probabilities,
    renormalized when one group is absent.  'unknown' views count as frontal."""
    probs = np.asarray(per_view_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need at least one view of per-class probabilities")
    if len(view_labels) != probs.shape[0]:
        raise ValueError("one view label per probability row required")
    frontal = [i for i, v in enumerate(view_labels) if v in ("frontal", "unknown")]
    lateral = [i for i, v in enumerate(view_labels) if v == "lateral"]
    num = np.zeros(probs.shape[1])
    denom = 0.0
    if frontal:
        num += cfg.w_f * probs[frontal].mean(axis=0)
        denom += cfg.w_f
    if lateral:
        num += cfg.w_l * probs[lateral].mean(axis=0)
        denom += cfg.w_l
    if denom == 0.0:
        # the only present group carries zero weight; fall back to its mean
        return probs.mean(axis=0)
    return num / denom


def weighted_average_eval(params, dataset, model_cfg, cfg: WeightedAvgConfig,
                          tta: bool = True) -> M.PredictionSet:
    scores = np.zeros((len(dataset), model_cfg.num_classes))
    for si, st in enumerate(dataset):
        imgs = np.stack([v.pixels for v in st.views])
        probs = (mdl.tta_predict_views(imgs, params, model_cfg) if tta
                 else mdl.predict_single_view(imgs, params, model_cfg))
        scores[si] = weighted_average_predict(probs, [v.view_label for v in st.views], cfg)
    labels, _ = D.hard_label_matrix(dataset, model_cfg.num_classes)
    return M.PredictionSet(scores, labels)


def train_gap_single_view(train_ds, val_ds, cfg: T.TrainConfig, model_cfg):
    """Stage-1 variant with a global-average-pool + affine head."""
    return T._train_single_view(train_ds, val_ds, cfg, model_cfg, head="gap")


def _concat_features(study, gap_params, model_cfg, rng) -> np.ndarray:
    st = D.subsample_views(study, model_cfg.max_views, rng)
    vecs = mdl.gap_feature(np.stack([v.pixels for v in st.views]), gap_params, model_cfg)
    out = np.zeros(model_cfg.max_views * model_cfg.dim)
    out[:vecs.size] = vecs.reshape(-1)   # slots in dataset order, zero padding
    return out


def concat_gap_train(gap_arrays: dict, train_ds, val_ds, cfg: T.TrainConfig,
                     model_cfg) -> dict:
    """Train the final affine layer on concatenated per-view GAP vectors with
    the backbone frozen."""
    c = model_cfg.num_classes
    params = {name: Parameter(name, arr.copy(), trainable=False)
              for name, arr in gap_arrays.items()}
    nd = model_cfg.max_views * model_cfg.dim
    rng = ad.derive_rng(cfg.seed, "concat.init")
    params["concat.w"] = Parameter("concat.w", mdl.fan_in_normal(rng, (c, nd)))
    params["concat.b"] = Parameter("concat.b", np.zeros(c))

    sub_rng = ad.derive_rng(cfg.seed, "concat.subsample")
    feats = np.stack([_concat_features(st, params, model_cfg, sub_rng) for st in train_ds])
    ys, ms = [], []
    for st in train_ds:
        y, m = D.labels_to_targets(st.labels, c)
        ys.append(y)
        ms.append(m)
    ys, ms = np.stack(ys), np.stack(ms)
    yh, mh = D.hard_label_matrix(train_ds, c)
    rho = L.positive_ratio(yh, mh)

    opt = T.AdamW(params, weight_decay=cfg.weight_decay)
    n_batches = (len(train_ds) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    step = 0
    for epoch in range(cfg.epochs):
        order = ad.derive_rng(cfg.seed, "concat.order", epoch).permutation(len(train_ds))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size].astype(int)
            lr = T.cosine_lr(step, total_steps, cfg.lr)
            with Tape() as tape:
                logits = ad.affine(Tensor(feats[idx]), params["concat.w"].value,
                                   params["concat.b"].value)
                loss = L.compute_loss(ad.sigmoid(logits), ys[idx], cfg.loss,
                                      rho=rho, mask=ms[idx])
            T.zero_grads(params)
            ad.backward(loss, tape)
            opt.step(lr)
            step += 1
    return params


def concat_gap_predict(params, study, model_cfg, rng=None) -> np.ndarray:
    if rng is None:
        rng = ad.derive_rng(0, "concat.predict")
    feat = _concat_features(study, params, model_cfg, rng)
    logits = feat @ params["concat.w"].value.data.T + params["concat.b"].value.data
    return 1.0 / (1.0 + np.exp(-logits))


def concat_gap_eval(params, dataset, model_cfg) -> M.PredictionSet:
    rng = ad.derive_rng(0, "concat.eval")
    scores = np.stack([concat_gap_predict(params, st, model_cfg, rng) for st in dataset])
    labels, _ = D.hard_label_matrix(dataset, model_cfg.num_classes)
    return M.PredictionSet(scores, labels)


def save_prediction_set(preds: M.PredictionSet, dataset, out_prefix: str):
    """Scores file: one record per study {study_id, C scores}; labels sidecar."""
    with open(out_prefix + ".scores.tsv", "w") as f:
        for st, row in zip(dataset, preds.scores):
            f.write(st.study_id + "\t" + ",".join(repr(float(v)) for v in row) + "\n")
    with open(out_prefix + ".labels.tsv", "w") as f:
        for st, row in zip(dataset, preds.labels):
            f.write(st.study_id + "\t" + ",".join(str(int(v)) for v in row) + "\n")
