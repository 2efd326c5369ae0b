"""Class-imbalance losses: weighted BCE, asymmetric loss, and their
combination, with per-class positive-ratio weighting and label masking.

All losses take probabilities (post-sigmoid).  Probabilities are clamped to
[1e-12, 1 - 1e-12] inside the loss only; model outputs stay unconstrained.
Batch reduction is the mean over samples of the per-sample class-sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

P_EPS = 1e-12


@dataclass
class LossConfig:
    gamma_pos: float = 1.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    rho: np.ndarray | None = None       # per-class positive ratios
    mode: str = "combined"              # bce | wbce | asl | combined

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must be in [0, 1)")
        if self.mode not in ("bce", "wbce", "asl", "combined"):
            raise ValueError(f"unknown loss mode {self.mode!r}")


def positive_ratio(label_matrix: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-class ratio of positive samples; classes with no valid labels get 0.5."""
    y = np.asarray(label_matrix, dtype=np.float64)
    m = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64)
    valid = m.sum(axis=0)
    pos = (y * m).sum(axis=0)
    rho = np.full(y.shape[1], 0.5)
    nz = valid > 0
    rho[nz] = pos[nz] / valid[nz]
    return rho


def _prep(p, y, mask):
    p = p if isinstance(p, Tensor) else Tensor(p)
    if np.any(np.isnan(p.data)):
        raise ad.DomainError("loss: NaN probabilities")
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.isnan(y)):
        raise ad.DomainError("loss: NaN labels")
    m = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64)
    return ad.clip(p, P_EPS, 1.0 - P_EPS), y, m


def _reduce(per_class: Tensor) -> Tensor:
    """Class-sum per sample, mean over samples (identity for a single vector)."""
    total = ad.reduce_sum(per_class, axes=-1)
    if total.data.ndim == 0:
        return total
    return ad.reduce_mean(total)


def wbce(p, y, rho, mask=None) -> Tensor:
    """Weighted binary cross-entropy; w_i = y_i e^{1-rho_i} + (1-y_i) e^{rho_i}."""
    pc, y, m = _prep(p, y, mask)
    rho = np.asarray(rho, dtype=np.float64)
    w = y * np.exp(1.0 - rho) + (1.0 - y) * np.exp(rho)
    per = (ad.log(pc) * y + ad.log(1.0 - pc) * (1.0 - y)) * Tensor(w * m)
    return -_reduce(per)


def bce(p, y, mask=None) -> Tensor:
    pc, y, m = _prep(p, y, mask)
    per = (ad.log(pc) * y + ad.log(1.0 - pc) * (1.0 - y)) * Tensor(m)
    return -_reduce(per)


def asl(p, y, cfg: LossConfig, mask=None) -> Tensor:
    """Asymmetric loss with focusing exponents and a probability margin on negatives."""
    pc, y, m = _prep(p, y, mask)
    pm = ad.clamp_min(pc - cfg.margin, 0.0)
    pos = ad.powc(1.0 - pc, cfg.gamma_pos) * ad.log(pc)
    neg = ad.powc(pm, cfg.gamma_neg) * ad.log(ad.clip(1.0 - pm, P_EPS, 1.0))
    per = (pos * y + neg * (1.0 - y)) * Tensor(m)
    return -_reduce(per)


def combined(p, y, cfg: LossConfig, rho, mask=None, weight_override=None) -> Tensor:
    """Asymmetric loss terms scaled by the weighted-BCE class weights."""
    pc, y, m = _prep(p, y, mask)
    rho = np.asarray(rho, dtype=np.float64)
    if weight_override is not None:
        w = np.broadcast_to(np.asarray(weight_override, dtype=np.float64), y.shape)
    else:
        w = y * np.exp(1.0 - rho) + (1.0 - y) * np.exp(rho)
    pm = ad.clamp_min(pc - cfg.margin, 0.0)
    pos = ad.powc(1.0 - pc, cfg.gamma_pos) * ad.log(pc)
    neg = ad.powc(pm, cfg.gamma_neg) * ad.log(ad.clip(1.0 - pm, P_EPS, 1.0))
    per = (pos * y + neg * (1.0 - y)) * Tensor(w * m)
    return -_reduce(per)


def loss_with_soft_labels(p, soft_y, cfg: LossConfig, rho, mask=None) -> Tensor:
    """Combined loss with soft targets substituted into both the weight rule
    and both loss terms."""
    soft_y = np.asarray(soft_y, dtype=np.float64)
    if np.any((soft_y < 0) | (soft_y > 1)):
        raise ValueError("soft labels must lie in [0, 1]")
    return combined(p, soft_y, cfg, rho, mask=mask)


def compute_loss(p, y, cfg: LossConfig, rho=None, mask=None) -> Tensor:
    """Dispatch on cfg.mode; rho required for the weighted variants."""
    if cfg.mode == "bce":
        return bce(p, y, mask=mask)
    if cfg.mode == "wbce":
        return wbce(p, y, rho, mask=mask)
    if cfg.mode == "asl":
        return asl(p, y, cfg, mask=mask)
    return combined(p, y, cfg, rho, mask=mask)
