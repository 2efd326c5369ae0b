"""Study ingestion, four-valued label semantics, pseudo-label merging,
batching with variable view counts, and a synthetic multi-view long-tailed
generator that plants cross-view complementary signal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import derive_rng

VIEW_TYPES = ("frontal", "lateral", "unknown")
LABEL_KINDS = ("positive", "negative", "uncertain", "unmentioned", "soft")


@dataclass(frozen=True)
class LabelValue:
    kind: str
    p: float | None = None

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.kind!r}")
        if self.kind == "soft":
            if self.p is None or not np.isfinite(self.p) or not 0 <= self.p <= 1:
                raise ValueError(f"soft label probability must be in [0, 1], got {self.p}")

    def token(self) -> str:
        return {"positive": "1", "negative": "0", "uncertain": "u",
                "unmentioned": "m"}.get(self.kind) or f"s:{self.p!r}"


POSITIVE = LabelValue("positive")
NEGATIVE = LabelValue("negative")
UNCERTAIN = LabelValue("uncertain")
UNMENTIONED = LabelValue("unmentioned")


def parse_label_token(tok: str) -> LabelValue:
    if tok == "1":
        return POSITIVE
    if tok == "0":
        return NEGATIVE
    if tok == "u":
        return UNCERTAIN
    if tok == "m":
        return UNMENTIONED
    if tok.startswith("s:"):
        return LabelValue("soft", float(tok[2:]))
    raise ValueError(f"unknown label token {tok!r}")


@dataclass
class ViewImage:
    pixels: np.ndarray            # (H0, W0, C0)
    view_label: str = "unknown"

    def __post_init__(self):
        if self.view_label not in VIEW_TYPES:
            raise ValueError(f"unknown view label {self.view_label!r}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite pixel values")


@dataclass
class Study:
    study_id: str
    views: list                   # list of ViewImage, length >= 1
    labels: list                  # list of LabelValue, length C
    source: str = "synthetic"

    def __post_init__(self):
        if len(self.views) < 1:
            raise ValueError(f"study {self.study_id}: needs at least one view")


@dataclass
class ClassOverlapMap:
    """External-dataset class id -> internal class ids (1 normally, 2 for a
    combined class like Nodule/Mass)."""
    mapping: dict                 # int -> tuple of ints
    num_internal: int

    def __post_init__(self):
        for e, targets in self.mapping.items():
            t = tuple(targets)
            if len(t) not in (0, 1, 2):
                raise ValueError(f"external class {e}: maps to {len(t)} classes")
            self.mapping[e] = t


def identity_overlap(c: int) -> ClassOverlapMap:
    return ClassOverlapMap({i: (i,) for i in range(c)}, c)


def default_visibility(c: int):
    """Classes cycle through all-view / frontal-only / lateral-only."""
    out = []
    for i in range(c):
        out.append([("frontal", "lateral"), ("frontal",), ("lateral",)][i % 3])
    return [frozenset(v) for v in out]


@dataclass
class SyntheticConfig:
    num_classes: int = 12
    num_studies: int = 2000
    prior_exponent: float = 1.0
    base_rate: float = 0.5
    cooccurrence: np.ndarray | None = None      # (C, C) symmetric boost matrix
    view_visibility: list | None = None         # per class, set of view types
    view_count_dist: tuple = (0.3, 0.4, 0.2, 0.1)
    view_type_probs: tuple = (0.6, 0.4)         # P(frontal), P(lateral)
    noise_std: float = 0.3
    amplitude: float = 1.0
    difficulty_exponent: float = 0.0    # >0 makes rarer classes also subtler
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.view_visibility is None:
            self.view_visibility = default_visibility(self.num_classes)
        if any(len(v) == 0 for v in self.view_visibility):
            raise ValueError("visibility sets must be non-empty")
        if self.cooccurrence is None:
            self.cooccurrence = np.zeros((self.num_classes, self.num_classes))
        self.cooccurrence = np.asarray(self.cooccurrence, dtype=np.float64)
        if not np.allclose(self.cooccurrence, self.cooccurrence.T):
            raise ValueError("cooccurrence matrix must be symmetric")
        if not np.isclose(sum(self.view_count_dist), 1.0):
            raise ValueError("view_count_dist must sum to 1")

    def priors(self) -> np.ndarray:
        p = self.base_rate * (np.arange(self.num_classes) + 1.0) ** (-self.prior_exponent)
        return np.clip(p, 1e-4, 1.0 - 1e-4)

    def amplitudes(self) -> np.ndarray:
        """Per-class signal amplitude: the difficulty knob ties signal
        strength to class rank, so tail classes are rarer and subtler."""
        ranks = np.arange(self.num_classes) + 1.0
        return self.amplitude * ranks ** (-self.difficulty_exponent)


def class_templates(cfg: SyntheticConfig) -> np.ndarray:
    """Fixed seeded Gaussian blobs, one per class, mirror-symmetrized so a
    horizontal flip leaves them unchanged (TTA fixed point).  Max value 1."""
    rng = derive_rng(cfg.seed, "templates")
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    temps = np.zeros((cfg.num_classes, s, s))
    c_count = cfg.num_classes
    cols = int(np.ceil(np.sqrt(c_count)))
    rows = int(np.ceil(c_count / cols))
    for c in range(cfg.num_classes):
        # stratified centers (one cell per class) keep templates separable;
        # jitter and scale stay seeded random
        gy, gx = divmod(c, cols)
        cy = s * (0.15 + 0.7 * (gy + 0.5) / rows) + rng.uniform(-0.03 * s, 0.03 * s)
        cx = s * (0.10 + 0.36 * (gx + 0.5) / cols) + rng.uniform(-0.02 * s, 0.02 * s)
        sig = rng.uniform(0.05 * s, 0.08 * s)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        blob = blob + blob[:, ::-1]
        temps[c] = blob / blob.max()
    return temps


def generate_synthetic(cfg: SyntheticConfig):
    """Seeded synthetic dataset; returns (studies, latent record).

    Each study samples hard labels from power-law priors with co-occurrence
    boosts and renders per-view noise plus templates of the positive classes
    visible in that view's type.  Classes visible only in views the study does
    not have stay labeled positive, which is what rewards fusion over
    per-view averaging.
    """
    priors = cfg.priors()
    amps = cfg.amplitudes()
    temps = class_templates(cfg)
    studies = []
    for s_idx in range(cfg.num_studies):
        rng = derive_rng(cfg.seed, "study", s_idx)
        y = (rng.random(cfg.num_classes) < priors).astype(np.int64)
        boost = np.clip(cfg.cooccurrence.T @ y, 0.0, 1.0)
        y = y | (rng.random(cfg.num_classes) < boost)
        n0 = 1 + rng.choice(len(cfg.view_count_dist), p=cfg.view_count_dist)
        views = []
        for v in range(n0):
            vtype = "frontal" if rng.random() < cfg.view_type_probs[0] else "lateral"
            img = rng.normal(0.0, cfg.noise_std, size=(cfg.image_size, cfg.image_size))
            for c in range(cfg.num_classes):
                if y[c] and vtype in cfg.view_visibility[c]:
                    img = img + amps[c] * temps[c]
            views.append(ViewImage(img[:, :, None], vtype))
        labels = [POSITIVE if y[c] else NEGATIVE for c in range(cfg.num_classes)]
        studies.append(Study(f"s{s_idx:06d}", views, labels))
    latent = {"templates": temps, "priors": priors,
              "visibility": list(cfg.view_visibility)}
    return studies, latent


def as_unlabeled(studies):
    """Copies with every label replaced by 'unmentioned' (no supervision)."""
    return [replace(s, labels=[UNMENTIONED] * len(s.labels)) for s in studies]


# --- manifest + blob persistence ---

def save_dataset(studies, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    index = {}
    offset = 0
    with open(os.path.join(out_dir, "images.bin"), "wb") as blob:
        with open(os.path.join(out_dir, "manifest.tsv"), "w") as man:
            for st in studies:
                toks = ",".join(lv.token() for lv in st.labels)
                for k, view in enumerate(st.views):
                    img_id = f"{st.study_id}_{k}"
                    arr = np.ascontiguousarray(view.pixels, dtype="<f8")
                    index[img_id] = {"offset": offset, "shape": list(arr.shape)}
                    blob.write(arr.tobytes())
                    offset += arr.nbytes
                    man.write(f"{st.study_id}\t{view.view_label}\tsynthetic:{img_id}\t{toks}\n")
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, sort_keys=True)


class ManifestError(ValueError):
    pass


def load_manifest(path: str):
    """Parse a manifest into studies grouped by study_id (order of first
    appearance); raises ManifestError with the offending line number."""
    base = os.path.dirname(os.path.abspath(path))
    index = {}
    blob_path = os.path.join(base, "images.bin")
    idx_path = os.path.join(base, "index.json")
    if os.path.exists(idx_path):
        with open(idx_path) as f:
            index = json.load(f)
    blob = open(blob_path, "rb") if os.path.exists(blob_path) else None
    try:
        groups: dict[str, dict] = {}
        seen_imgs = set()
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ManifestError(f"line {lineno}: expected 4 fields, got {len(parts)}")
                study_id, view_label, image_ref, label_str = parts
                if view_label not in VIEW_TYPES:
                    raise ManifestError(f"line {lineno}: unknown view {view_label!r}")
                if image_ref in seen_imgs:
                    raise ManifestError(f"line {lineno}: duplicate image {image_ref!r}")
                seen_imgs.add(image_ref)
                try:
                    labels = [parse_label_token(t) for t in label_str.split(",")]
                except ValueError as e:
                    raise ManifestError(f"line {lineno}: {e}") from e
                if not image_ref.startswith("synthetic:"):
                    raise ManifestError(f"line {lineno}: unsupported image ref {image_ref!r}")
                img_id = image_ref.split(":", 1)[1]
                if img_id not in index or blob is None:
                    raise ManifestError(f"line {lineno}: image {img_id!r} not in blob index")
                meta = index[img_id]
                shape = tuple(meta["shape"])
                blob.seek(meta["offset"])
                raw = blob.read(int(np.prod(shape)) * 8)
                pixels = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
                g = groups.setdefault(study_id, {"views": [], "labels": labels})
                if [l.token() for l in g["labels"]] != [l.token() for l in labels]:
                    raise ManifestError(f"line {lineno}: conflicting labels for {study_id!r}")
                g["views"].append(ViewImage(pixels, view_label))
    finally:
        if blob is not None:
            blob.close()
    return [Study(sid, g["views"], g["labels"]) for sid, g in groups.items()]


def load_dataset(dir_path: str):
    return load_manifest(os.path.join(dir_path, "manifest.tsv"))


# --- pseudo-label merging (per external-dataset semantics) ---

def merge_pseudo_labels(labels, teacher_probs, overlap: ClassOverlapMap):
    """Merge a study's external labels with teacher probabilities.

    Hard positive/negative labels of overlapping classes are kept.
    Uncertain, unmentioned, and non-overlapping classes get soft teacher
    targets.  A paired (combined) class assigned positive gives a hard
    positive to the member with higher teacher probability (tie: lower class
    index) and a soft label to the other; assigned negative gives hard
    negatives to both.
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    if teacher_probs.shape[0] != overlap.num_internal:
        raise ValueError(f"teacher probs for {teacher_probs.shape[0]} classes, "
                         f"expected {overlap.num_internal}")
    out = [LabelValue("soft", float(teacher_probs[i])) for i in range(overlap.num_internal)]
    for e, targets in sorted(overlap.mapping.items()):
        if e >= len(labels):
            raise ValueError(f"external class {e} missing from label vector")
        lv = labels[e]
        if len(targets) == 1:
            (i,) = targets
            if lv.kind == "positive":
                out[i] = POSITIVE
            elif lv.kind == "negative":
                out[i] = NEGATIVE
            elif lv.kind == "soft":
                out[i] = lv
            # uncertain / unmentioned keep the soft teacher target
        elif len(targets) == 2:
            a, b = targets
            if lv.kind == "positive":
                hard = a if teacher_probs[a] >= teacher_probs[b] else b
                soft = b if hard == a else a
                out[hard] = POSITIVE
                out[soft] = LabelValue("soft", float(teacher_probs[soft]))
            elif lv.kind == "negative":
                out[a] = NEGATIVE
                out[b] = NEGATIVE
    return out


def labels_to_targets(labels, num_classes: int):
    """(targets, mask) arrays for supervised training.

    positive -> 1, negative/unmentioned -> 0, soft -> its probability;
    uncertain is masked out of the loss.
    """
    if len(labels) != num_classes:
        raise ValueError(f"label vector length {len(labels)} != {num_classes} classes")
    y = np.zeros(num_classes)
    m = np.ones(num_classes)
    for i, lv in enumerate(labels):
        if lv.kind == "positive":
            y[i] = 1.0
        elif lv.kind == "soft":
            y[i] = lv.p
        elif lv.kind == "uncertain":
            m[i] = 0.0
    return y, m


def hard_label_matrix(studies, num_classes: int):
    """(labels, mask) stacked over studies; uncertain and soft labels are
    masked since positive-ratio estimation counts hard labels only."""
    ys, ms = [], []
    for st in studies:
        y = np.zeros(num_classes)
        m = np.ones(num_classes)
        for i, lv in enumerate(st.labels):
            if lv.kind == "positive":
                y[i] = 1.0
            elif lv.kind in ("uncertain", "soft"):
                m[i] = 0.0
        ys.append(y)
        ms.append(m)
    return np.stack(ys), np.stack(ms)


def subsample_views(study: Study, max_views: int, rng) -> Study:
    if len(study.views) <= max_views:
        return study
    keep = sorted(rng.choice(len(study.views), size=max_views, replace=False))
    return replace(study, views=[study.views[i] for i in keep])


def make_batches(dataset, batch_size: int, max_views: int, rng,
                 subsample_policy: str = "uniform"):
    """One epoch of batches: shuffled study order, views capped at max_views."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if subsample_policy != "uniform":
        raise ValueError(f"unknown subsample policy {subsample_policy!r}")
    order = rng.permutation(len(dataset))
    batches = []
    for start in range(0, len(dataset), batch_size):
        batch = [subsample_views(dataset[int(i)], max_views, rng)
                 for i in order[start:start + batch_size]]
        batches.append(batch)
    return batches
