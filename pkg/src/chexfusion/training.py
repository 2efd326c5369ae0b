"""Two-stage optimization: AdamW with a cosine schedule, checkpointing,
single-view pretraining, frozen-backbone fusion training, and the
noisy-student self-training loop.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as D
from . import losses as L
from . import metrics as M
from . import model as mdl
from .autodiff import Parameter, Tape, Tensor


# --- checkpoint format: magic "CXFZ", version, then named float records ---

MAGIC = b"CXFZ"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(params, path: str, dtype: str = "<f8"):
    """params: dict name -> Parameter or ndarray.  Records sorted by name."""
    tag = {"<f8": 0, "<f4": 1}[dtype]
    items = sorted((name, p.value.data if isinstance(p, Parameter) else np.asarray(p))
                   for name, p in params.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", tag, arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path: str) -> dict:
    """Returns dict name -> float64 ndarray; validates magic/version/length."""
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        out = raw[off:off + n]
        off += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        dt = np.dtype(_DTYPES[tag])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.astype(np.float64)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def load_into(params: dict, arrays: dict):
    """Copy checkpoint arrays into an existing parameter dict; name sets must match."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing={missing} extra={extra}")
    for name, p in params.items():
        if p.value.data.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {p.value.data.shape}")
        p.value.data = arrays[name].copy()


# --- optimizer and schedule ---

def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return 0.5 * lr_max * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class AdamW:
    """Decoupled weight decay Adam; frozen parameters are never touched."""
    params: dict
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if p.trainable:
                self.m[name] = np.zeros_like(p.value.data)
                self.v[name] = np.zeros_like(p.value.data)

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.m):
            p = self.params[name]
            g = p.value.grad
            if g is None:
                g = np.zeros_like(p.value.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mh = self.m[name] / bc1
            vh = self.v[name] / bc2
            new = p.value.data * (1.0 - lr * self.weight_decay)
            new = new - lr * mh / (np.sqrt(vh) + self.eps)
            p.value.data = new


def zero_grads(params: dict):
    for p in params.values():
        p.value.grad = None


@dataclass
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 1e-2
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    stage: int = 1
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    stochastic_depth_p: float = 0.0
    augment: bool = False
    aug_strength: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class NoisyStudentConfig:
    iterations: int = 3
    stochastic_depth_p: float = 0.1
    aug_strength: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def noised(self) -> bool:
        return self.stochastic_depth_p > 0 or self.aug_strength > 0


def default_group_sizes(c: int):
    """Head/medium/tail split proportioned like an 8/10/8 partition of 26."""
    head = tail = c // 3
    return (head, c - head - tail, tail)


def augment_image(img: np.ndarray, rng, strength: float = 1.0) -> np.ndarray:
    """Two random ops per sample from {hflip, gaussian noise, random erase,
    brightness shift}."""
    out = img.copy()
    ops = rng.choice(4, size=2, replace=False)
    for op in ops:
        if op == 0:
            out = out[:, ::-1, :].copy()
        elif op == 1:
            out = out + rng.normal(0.0, rng.uniform(0.0, 0.1 * strength), size=out.shape)
        elif op == 2:
            h, w = out.shape[:2]
            eh = int(rng.uniform(0.1, 0.5) * h * np.sqrt(strength))
            ew = int(rng.uniform(0.1, 0.5) * w * np.sqrt(strength))
            if eh > 0 and ew > 0:
                y0 = rng.integers(0, h - eh + 1)
                x0 = rng.integers(0, w - ew + 1)
                out[y0:y0 + eh, x0:x0 + ew, :] = 0.0
        else:
            out = out + rng.uniform(-0.2, 0.2) * strength
    return out


# --- evaluation helpers ---

def predict_single_view_dataset(params, model_cfg, studies, tta=False,
                                chunk: int = 64) -> M.PredictionSet:
    """Study scores = mean over views of per-view (optionally TTA) probabilities."""
    view_imgs, owners = [], []
    for si, st in enumerate(studies):
        for v in st.views:
            view_imgs.append(v.pixels)
            owners.append(si)
    probs = np.zeros((len(view_imgs), model_cfg.num_classes))
    for start in range(0, len(view_imgs), chunk):
        batch = np.stack(view_imgs[start:start + chunk])
        if tta:
            probs[start:start + chunk] = mdl.tta_predict_views(batch, params, model_cfg)
        else:
            probs[start:start + chunk] = mdl.predict_single_view(batch, params, model_cfg)
    scores = np.zeros((len(studies), model_cfg.num_classes))
    counts = np.zeros(len(studies))
    for i, si in enumerate(owners):
        scores[si] += probs[i]
        counts[si] += 1
    scores /= counts[:, None]
    labels, _ = D.hard_label_matrix(studies, model_cfg.num_classes)
    return M.PredictionSet(scores, labels)


def predict_fusion_dataset(params, model_cfg, studies, tta=False,
                           chunk: int = 32) -> M.PredictionSet:
    rng = ad.derive_rng(0, "eval.subsample")
    scores = np.zeros((len(studies), model_cfg.num_classes))
    capped = [D.subsample_views(st, model_cfg.max_views, rng) for st in studies]
    if tta:
        for si, st in enumerate(capped):
            scores[si] = mdl.tta_predict_fusion([v.pixels for v in st.views],
                                                params, model_cfg)
    else:
        for start in range(0, len(capped), chunk):
            feats = [mdl.study_feature_maps([v.pixels for v in st.views], params, model_cfg)
                     for st in capped[start:start + chunk]]
            logits = mdl.forward_fusion(feats, params, model_cfg, training=False)
            scores[start:start + chunk] = ad.sigmoid(logits).data
    labels, _ = D.hard_label_matrix(studies, model_cfg.num_classes)
    return M.PredictionSet(scores, labels)


def _epoch_record(epoch, lr, train_loss, preds, groups, wall):
    rec = {"epoch": epoch, "lr": float(lr), "train_loss": float(train_loss)}
    rep = M.report(preds, groups)
    rec["val_map_total"] = rep["map_total"]
    rec["val_map_head"] = rep["map_head"]
    rec["val_map_medium"] = rep["map_medium"]
    rec["val_map_tail"] = rep["map_tail"]
    rec["val_auroc"] = rep["auroc_total"]
    rec["wall_seconds"] = wall
    return rec


def group_assignment_from(studies, num_classes: int) -> M.GroupAssignment:
    y, _ = D.hard_label_matrix(studies, num_classes)
    counts = y.sum(axis=0).astype(int)
    return M.assign_groups(counts, default_group_sizes(num_classes))


def _train_single_view(train_ds, val_ds, cfg: TrainConfig, model_cfg, head="decoder",
                       params=None):
    """Shared single-view training loop for the decoder and GAP heads."""
    c = model_cfg.num_classes
    rng_init = ad.derive_rng(cfg.seed, "init")
    if params is None:
        params = mdl.init_backbone_params(model_cfg, rng_init)
        if head == "decoder":
            params.update(mdl.init_head_params(model_cfg, rng_init))
        else:
            params.update(mdl.init_gap_head_params(model_cfg, rng_init))
    forward = mdl.forward_single_view if head == "decoder" else mdl.forward_single_view_gap

    samples = []
    for st in train_ds:
        y, m = D.labels_to_targets(st.labels, c)
        for v in st.views:
            samples.append((v.pixels, y, m))
    yh, mh = D.hard_label_matrix(train_ds, c)
    rho = L.positive_ratio(yh, mh)
    groups = group_assignment_from(train_ds, c)

    opt = AdamW(params, weight_decay=cfg.weight_decay)
    n_batches = (len(samples) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = ad.derive_rng(cfg.seed, "stage1.order", epoch).permutation(len(samples))
        losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            imgs, ys, ms = [], [], []
            for i in idx:
                img, y, m = samples[int(i)]
                if cfg.augment:
                    img = augment_image(img, ad.derive_rng(cfg.seed, "aug", epoch, int(i)),
                                        cfg.aug_strength)
                imgs.append(img)
                ys.append(y)
                ms.append(m)
            lr = cosine_lr(step, total_steps, cfg.lr)
            with Tape() as tape:
                logits = forward(Tensor(np.stack(imgs)), params, model_cfg,
                                 training=True, stochastic_depth_p=cfg.stochastic_depth_p,
                                 rng_key=(cfg.seed, "noise", epoch, b))
                p = ad.sigmoid(logits)
                loss = L.compute_loss(p, np.stack(ys), cfg.loss, rho=rho, mask=np.stack(ms))
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"stage-1 loss diverged at epoch {epoch} step {b}")
            zero_grads(params)
            ad.backward(loss, tape)
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        if head == "decoder":
            preds = predict_single_view_dataset(params, model_cfg, val_ds)
        else:
            preds = _predict_gap_single(params, model_cfg, val_ds)
        log.append(_epoch_record(epoch, cosine_lr(step - 1, total_steps, cfg.lr),
                                 np.mean(losses), preds, groups,
                                 time.monotonic() - t0))
    return params, log, rho


def _predict_gap_single(params, model_cfg, studies, chunk=64) -> M.PredictionSet:
    view_imgs, owners = [], []
    for si, st in enumerate(studies):
        for v in st.views:
            view_imgs.append(v.pixels)
            owners.append(si)
    probs = np.zeros((len(view_imgs), model_cfg.num_classes))
    for start in range(0, len(view_imgs), chunk):
        batch = Tensor(np.stack(view_imgs[start:start + chunk]))
        probs[start:start + chunk] = ad.sigmoid(
            mdl.forward_single_view_gap(batch, params, model_cfg)).data
    scores = np.zeros((len(studies), model_cfg.num_classes))
    counts = np.zeros(len(studies))
    for i, si in enumerate(owners):
        scores[si] += probs[i]
        counts[si] += 1
    scores /= counts[:, None]
    labels, _ = D.hard_label_matrix(studies, model_cfg.num_classes)
    return M.PredictionSet(scores, labels)


def train_stage1(train_ds, val_ds, cfg: TrainConfig, model_cfg: mdl.ModelConfig):
    """Single-view pretraining: every view of every study is one sample."""
    params, log, rho = _train_single_view(train_ds, val_ds, cfg, model_cfg, head="decoder")
    return params, log, rho


def train_stage2(train_ds, val_ds, stage1_arrays: dict, cfg: TrainConfig,
                 model_cfg: mdl.ModelConfig, use_segment: bool = True,
                 shuffle: bool = True):
    """Fusion training on frozen backbone features.

    Backbone parameters come from the stage-1 checkpoint and are frozen;
    head parameters are loaded and fine-tuned; fusion parameters (padding
    token, segment embeddings, encoder) are freshly initialized from the
    seeded initializer.  View shuffling is active.
    """
    c = model_cfg.num_classes
    params = {}
    for name, arr in stage1_arrays.items():
        if name.startswith("gap."):
            continue
        trainable = not name.startswith("backbone.")
        params[name] = Parameter(name, arr.copy(), trainable=trainable)
    missing = [n for n in ("head.queries", "backbone.proj.w") if n not in params]
    if missing:
        raise CheckpointError(f"stage-1 checkpoint lacks required parameters: {missing}")
    params.update(mdl.init_fusion_params(model_cfg, ad.derive_rng(cfg.seed, "init.fusion")))
    if not use_segment:
        params["fusion.segment"] = Parameter(
            "fusion.segment", np.zeros_like(params["fusion.segment"].value.data),
            trainable=False)

    # frozen backbone: features computed once, off-tape, keyed by view object
    feat_cache = {}
    for st in train_ds:
        fs = mdl.study_feature_maps([v.pixels for v in st.views], params, model_cfg)
        for v, f in zip(st.views, fs):
            feat_cache[id(v)] = f

    yh, mh = D.hard_label_matrix(train_ds, c)
    rho = L.positive_ratio(yh, mh)
    groups = group_assignment_from(train_ds, c)
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    n_batches = (len(train_ds) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        batches = D.make_batches(train_ds, cfg.batch_size, model_cfg.max_views,
                                 ad.derive_rng(cfg.seed, "stage2.batches", epoch))
        losses = []
        for b, batch in enumerate(batches):
            feats, ys, ms = [], [], []
            for st in batch:
                feats.append([feat_cache[id(v)] for v in st.views])
                y, m = D.labels_to_targets(st.labels, c)
                ys.append(y)
                ms.append(m)
            lr = cosine_lr(step, total_steps, cfg.lr)
            with Tape() as tape:
                logits = mdl.forward_fusion(
                    feats, params, model_cfg, training=True,
                    stochastic_depth_p=cfg.stochastic_depth_p,
                    rng_key=(cfg.seed, "stage2.noise", epoch, b), shuffle=shuffle)
                loss = L.compute_loss(ad.sigmoid(logits), np.stack(ys), cfg.loss,
                                      rho=rho, mask=np.stack(ms))
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"stage-2 loss diverged at epoch {epoch} step {b}")
            zero_grads(params)
            ad.backward(loss, tape)
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        preds = predict_fusion_dataset(params, model_cfg, val_ds)
        log.append(_epoch_record(epoch, cosine_lr(step - 1, total_steps, cfg.lr),
                                 np.mean(losses), preds, groups,
                                 time.monotonic() - t0))
    return params, log, rho


def pseudo_label(teacher_params, dataset, overlap: D.ClassOverlapMap,
                 model_cfg: mdl.ModelConfig, tta: bool = True):
    """Teacher single-view probabilities, averaged per study, merged with the
    existing labels into hard/soft training targets."""
    if overlap.num_internal != model_cfg.num_classes:
        raise ValueError(f"overlap map has {overlap.num_internal} classes, "
                         f"model has {model_cfg.num_classes}")
    preds = predict_single_view_dataset(teacher_params, model_cfg, dataset, tta=tta)
    out = []
    for si, st in enumerate(dataset):
        merged = D.merge_pseudo_labels(st.labels, preds.scores[si], overlap)
        out.append(replace(st, labels=merged))
    return out


def noisy_student_loop(labeled, unlabeled, val_ds, ns_cfg: NoisyStudentConfig,
                       cfg: TrainConfig, model_cfg: mdl.ModelConfig,
                       overlap: D.ClassOverlapMap | None = None, tta: bool = True):
    """Iterated self-training on the single-view stage.

    Iteration k uses the iteration k-1 student as teacher (the plain stage-1
    model for k=0); each student is retrained from scratch on
    labeled + pseudo-labeled data with noise enabled per ns_cfg.
    """
    if overlap is None:
        overlap = D.identity_overlap(model_cfg.num_classes)
    teacher, _, rho = train_stage1(labeled, val_ds, cfg, model_cfg)
    student_cfg = replace(cfg, stochastic_depth_p=ns_cfg.stochastic_depth_p,
                          augment=ns_cfg.aug_strength > 0,
                          aug_strength=ns_cfg.aug_strength)
    iteration_log = []
    student = teacher
    for k in range(ns_cfg.iterations):
        pseudo = pseudo_label(student, unlabeled, overlap, model_cfg, tta=tta) \
            if unlabeled else []
        student, log, rho = _train_single_view(list(labeled) + pseudo, val_ds,
                                               student_cfg, model_cfg)
        iteration_log.append({"iteration": k, **{k2: v for k2, v in log[-1].items()
                                                 if k2 != "epoch"}})
    return student, iteration_log, rho
