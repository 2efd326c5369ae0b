"""Fusion network: toy patch-embedding backbone, cross-attention class-query
head, and the multi-view transformer fusion encoder with padding tokens,
2D sinusoidal positional encoding, segment embeddings, and view shuffling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 12
    dim: int = 64                       # token dimension D
    fmap_h: int = 4
    fmap_w: int = 4
    max_views: int = 4                  # N: fixed slot count per study
    encoder_layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    decoder_heads: int = 4
    backbone_widths: tuple = (16, 32, 64)
    backbone_strides: tuple = (2, 2, 2)
    image_size: int = 32
    image_channels: int = 1
    pos_temperature: float = 10000.0

    def __post_init__(self):
        if self.dim % self.heads or self.dim % self.decoder_heads:
            raise ConfigError(f"dim {self.dim} not divisible by head count")
        if self.dim % 4:
            raise ConfigError(f"dim {self.dim} must be divisible by 4 for 2D positional encoding")
        if self.max_views < 1 or self.num_classes < 1:
            raise ConfigError("max_views and num_classes must be >= 1")
        down = int(np.prod(self.backbone_strides))
        if self.image_size % down or self.image_size // down != self.fmap_h:
            raise ConfigError(
                f"image_size {self.image_size} with strides {self.backbone_strides} "
                f"does not produce a {self.fmap_h}x{self.fmap_w} feature map")
        if self.fmap_h != self.fmap_w:
            raise ConfigError("square feature maps only")

    @property
    def tokens_per_view(self) -> int:
        return self.fmap_h * self.fmap_w


def trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def fan_in_normal(rng, shape):
    # shape = (out, in)
    return rng.normal(0.0, 1.0 / np.sqrt(shape[-1]), size=shape)


def _add_attn_params(params, rng, prefix, dim):
    # no key bias: softmax is invariant to the per-query constant it adds
    for nm in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{nm}"] = Parameter(f"{prefix}.{nm}", fan_in_normal(rng, (dim, dim)))
        if nm != "wk":
            params[f"{prefix}.{nm[1]}b"] = Parameter(f"{prefix}.{nm[1]}b", np.zeros(dim))


def _add_ffn_params(params, rng, prefix, dim, ff_dim):
    params[f"{prefix}.w1"] = Parameter(f"{prefix}.w1", fan_in_normal(rng, (ff_dim, dim)))
    params[f"{prefix}.b1"] = Parameter(f"{prefix}.b1", np.zeros(ff_dim))
    params[f"{prefix}.w2"] = Parameter(f"{prefix}.w2", fan_in_normal(rng, (dim, ff_dim)))
    params[f"{prefix}.b2"] = Parameter(f"{prefix}.b2", np.zeros(dim))


def _add_ln_params(params, prefix, dim):
    params[f"{prefix}.g"] = Parameter(f"{prefix}.g", np.ones(dim))
    params[f"{prefix}.b"] = Parameter(f"{prefix}.b", np.zeros(dim))


def init_backbone_params(cfg: ModelConfig, rng) -> dict:
    params = {}
    in_ch = cfg.image_channels
    for i, (w, s) in enumerate(zip(cfg.backbone_widths, cfg.backbone_strides)):
        patch_in = s * s * in_ch
        p = f"backbone.stage{i}"
        params[f"{p}.w"] = Parameter(f"{p}.w", fan_in_normal(rng, (w, patch_in)))
        params[f"{p}.b"] = Parameter(f"{p}.b", np.zeros(w))
        _add_ln_params(params, f"{p}.ln", w)
        in_ch = w
    params["backbone.proj.w"] = Parameter("backbone.proj.w", fan_in_normal(rng, (cfg.dim, in_ch)))
    params["backbone.proj.b"] = Parameter("backbone.proj.b", np.zeros(cfg.dim))
    return params


def init_head_params(cfg: ModelConfig, rng) -> dict:
    params = {}
    params["head.queries"] = Parameter(
        "head.queries", trunc_normal(rng, (cfg.num_classes, cfg.dim)))
    _add_ln_params(params, "head.ln_q", cfg.dim)
    _add_ln_params(params, "head.ln_kv", cfg.dim)
    _add_attn_params(params, rng, "head.attn", cfg.dim)
    _add_ln_params(params, "head.ln2", cfg.dim)
    _add_ffn_params(params, rng, "head.ffn", cfg.dim, cfg.ff_dim)
    params["head.proj_w"] = Parameter("head.proj_w", fan_in_normal(rng, (cfg.num_classes, cfg.dim)))
    params["head.proj_b"] = Parameter("head.proj_b", np.zeros(cfg.num_classes))
    return params


def init_fusion_params(cfg: ModelConfig, rng) -> dict:
    params = {}
    params["fusion.pad_token"] = Parameter("fusion.pad_token", np.zeros(cfg.dim))
    params["fusion.segment"] = Parameter(
        "fusion.segment", trunc_normal(rng, (cfg.max_views, cfg.dim)))
    for l in range(cfg.encoder_layers):
        p = f"enc{l}"
        _add_ln_params(params, f"{p}.ln1", cfg.dim)
        _add_attn_params(params, rng, f"{p}.attn", cfg.dim)
        _add_ln_params(params, f"{p}.ln2", cfg.dim)
        _add_ffn_params(params, rng, f"{p}.ffn", cfg.dim, cfg.ff_dim)
    return params


def init_params(cfg: ModelConfig, seed: int, with_fusion: bool = False) -> dict:
    """Seeded initialization of all model parameters."""
    rng = ad.derive_rng(seed, "init")
    params = init_backbone_params(cfg, rng)
    params.update(init_head_params(cfg, rng))
    if with_fusion:
        params.update(init_fusion_params(cfg, ad.derive_rng(seed, "init.fusion")))
    return params


def _ln(x, params, prefix):
    return ad.layernorm(x) * params[f"{prefix}.g"].value + params[f"{prefix}.b"].value


def _patchify(x: Tensor, stride: int):
    """(B, H, W, C) -> (B, H/s, W/s, s*s*C) via non-overlapping patches."""
    b, h, w, c = x.shape
    x = ad.reshape(x, (b, h // stride, stride, w // stride, stride, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, h // stride, w // stride, stride * stride * c))


def backbone_forward(images, params, cfg: ModelConfig) -> Tensor:
    """(B, H0, W0, C0) images -> (B, H, W, D) feature maps."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size:
        raise ConfigError(f"backbone: expected {cfg.image_size}x{cfg.image_size} images, "
                          f"got {x.shape[1]}x{x.shape[2]}")
    for i, (_, s) in enumerate(zip(cfg.backbone_widths, cfg.backbone_strides)):
        p = f"backbone.stage{i}"
        x = _patchify(x, s)
        x = ad.affine(x, params[f"{p}.w"].value, params[f"{p}.b"].value)
        x = ad.gelu(x)
        x = _ln(x, params, f"{p}.ln")
    return ad.affine(x, params["backbone.proj.w"].value, params["backbone.proj.b"].value)


def positional_encoding_2d(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Constant (h, w, d) grid: channels [0, d/2) encode x, [d/2, d) encode y;
    within each half even channels are sine, odd cosine."""
    if d % 4:
        raise ConfigError(f"positional encoding needs dim divisible by 4, got {d}")
    half = d // 2
    k = np.arange(half // 2, dtype=np.float64)
    freq = temperature ** (-2.0 * k / half)
    xs = np.arange(w, dtype=np.float64)[None, :, None] * freq   # (1, w, half/2)
    ys = np.arange(h, dtype=np.float64)[:, None, None] * freq   # (h, 1, half/2)
    enc = np.zeros((h, w, d))
    enc[:, :, 0:half:2] = np.sin(xs)
    enc[:, :, 1:half:2] = np.cos(xs)
    enc[:, :, half::2] = np.sin(ys)
    enc[:, :, half + 1::2] = np.cos(ys)
    return enc


def _mha(x_q: Tensor, x_kv: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Multi-head attention; x_q (B, Tq, D), x_kv (B, Tk, D)."""
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dh = d // heads
    q = ad.affine(x_q, params[f"{prefix}.wq"].value, params[f"{prefix}.qb"].value)
    k = ad.matmul(x_kv, ad.transpose(params[f"{prefix}.wk"].value, (1, 0)))
    v = ad.affine(x_kv, params[f"{prefix}.wv"].value, params[f"{prefix}.vb"].value)

    def split(t, tlen):
        t = ad.reshape(t, (b, tlen, heads, dh))
        return ad.transpose(t, (0, 2, 1, 3))

    q, k, v = split(q, tq), split(k, tk), split(v, tk)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, tq, d))
    return ad.affine(out, params[f"{prefix}.wo"].value, params[f"{prefix}.ob"].value)


def _ffn(x, params, prefix):
    h = ad.gelu(ad.affine(x, params[f"{prefix}.w1"].value, params[f"{prefix}.b1"].value))
    return ad.affine(h, params[f"{prefix}.w2"].value, params[f"{prefix}.b2"].value)


def assemble_sequence(view_feats, params, cfg: ModelConfig, shuffle: bool = False,
                      rng=None):
    """Build the fixed-length (N*H*W, D) token sequence for one study.

    view_feats: list of (H, W, D) Tensors or arrays, one per real view.
    Real views are optionally shuffled; slots beyond the real count hold the
    learnable padding token.  Every slot gets the positional grid plus its
    slot's segment embedding.  Returns (tokens, slot_order).
    """
    n0 = len(view_feats)
    n = cfg.max_views
    if n0 < 1 or n0 > n:
        raise ConfigError(f"assemble_sequence: got {n0} views for {n} slots")
    hw = cfg.tokens_per_view
    order = list(rng.permutation(n0)) if shuffle else list(range(n0))
    pos = Tensor(positional_encoding_2d(cfg.fmap_h, cfg.fmap_w, cfg.dim,
                                        cfg.pos_temperature).reshape(hw, cfg.dim))
    pad = params["fusion.pad_token"].value
    seg = params["fusion.segment"].value
    zeros = Tensor(np.zeros((hw, cfg.dim)))
    slots = []
    for slot in range(n):
        if slot < n0:
            f = view_feats[order[slot]]
            f = f if isinstance(f, Tensor) else Tensor(f)
            base = ad.reshape(f, (hw, cfg.dim))
        else:
            base = zeros + pad  # broadcast the pad token over the grid
        seg_k = ad.gather_rows(seg, [slot])
        slots.append(base + pos + seg_k)
    return ad.concat(slots, axis=0), [int(i) for i in order]


def encoder_forward(seq: Tensor, params, cfg: ModelConfig, training: bool = False,
                    stochastic_depth_p: float = 0.0, rng_key=None) -> Tensor:
    """Pre-norm transformer encoder; seq (B, T, D) or (T, D)."""
    squeeze = seq.data.ndim == 2
    x = ad.reshape(seq, (1,) + seq.shape) if squeeze else seq
    nl = cfg.encoder_layers
    for l in range(nl):
        p_l = stochastic_depth_p * (l + 1) / nl if training else 0.0
        h = _ln(x, params, f"enc{l}.ln1")
        branch = _mha(h, h, params, f"enc{l}.attn", cfg.heads)
        if p_l > 0:
            branch = ad.depth_gate(branch, p_l, ad.derive_rng(*rng_key, "sd", l, "attn"))
        x = x + branch
        branch = _ffn(_ln(x, params, f"enc{l}.ln2"), params, f"enc{l}.ffn")
        if p_l > 0:
            branch = ad.depth_gate(branch, p_l, ad.derive_rng(*rng_key, "sd", l, "ffn"))
        x = x + branch
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def mldecoder_forward(tokens: Tensor, params, cfg: ModelConfig, training: bool = False,
                      stochastic_depth_p: float = 0.0, rng_key=None) -> Tensor:
    """Class queries cross-attend to tokens; returns (B, C) logits (or (C,)).

    One decoder block, no query self-attention, per-class non-shared final
    projection.  Stochastic-depth gates on the two residual branches are the
    noise channel for noisy-student training.
    """
    squeeze = tokens.data.ndim == 2
    x = ad.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    b = x.shape[0]
    c, d = cfg.num_classes, cfg.dim
    p_sd = stochastic_depth_p if training else 0.0
    q = ad.reshape(params["head.queries"].value, (1, c, d)) + Tensor(np.zeros((b, c, d)))
    branch = _mha(_ln(q, params, "head.ln_q"), _ln(x, params, "head.ln_kv"),
                  params, "head.attn", cfg.decoder_heads)
    if p_sd > 0:
        branch = ad.depth_gate(branch, p_sd, ad.derive_rng(*rng_key, "sd", "dec", "attn"))
    q = q + branch
    branch = _ffn(_ln(q, params, "head.ln2"), params, "head.ffn")
    if p_sd > 0:
        branch = ad.depth_gate(branch, p_sd, ad.derive_rng(*rng_key, "sd", "dec", "ffn"))
    q = q + branch
    logits = ad.reduce_sum(q * params["head.proj_w"].value, axes=-1) \
        + params["head.proj_b"].value
    return ad.reshape(logits, (c,)) if squeeze else logits


def forward_single_view(images, params, cfg: ModelConfig, training: bool = False,
                        stochastic_depth_p: float = 0.0, rng_key=None) -> Tensor:
    """(B, H0, W0, C0) -> (B, C) logits through backbone + decoder head."""
    fmap = backbone_forward(images, params, cfg)
    b = fmap.shape[0]
    hw = cfg.tokens_per_view
    pos = positional_encoding_2d(cfg.fmap_h, cfg.fmap_w, cfg.dim, cfg.pos_temperature)
    tokens = ad.reshape(fmap, (b, hw, cfg.dim)) + Tensor(pos.reshape(hw, cfg.dim))
    return mldecoder_forward(tokens, params, cfg, training=training,
                             stochastic_depth_p=stochastic_depth_p, rng_key=rng_key)


def init_gap_head_params(cfg: ModelConfig, rng) -> dict:
    return {
        "gap.w": Parameter("gap.w", fan_in_normal(rng, (cfg.num_classes, cfg.dim))),
        "gap.b": Parameter("gap.b", np.zeros(cfg.num_classes)),
    }


def forward_single_view_gap(images, params, cfg: ModelConfig, training: bool = False,
                            stochastic_depth_p: float = 0.0, rng_key=None) -> Tensor:
    """Global-average-pool baseline head: backbone -> mean over the grid -> affine."""
    fmap = backbone_forward(images, params, cfg)
    pooled = ad.reduce_mean(ad.reshape(fmap, (fmap.shape[0], cfg.tokens_per_view, cfg.dim)),
                            axes=1)
    return ad.affine(pooled, params["gap.w"].value, params["gap.b"].value)


def gap_feature(images, params, cfg: ModelConfig) -> np.ndarray:
    """Eval-mode pooled (B, D) backbone features for the concat baseline."""
    fmap = backbone_forward(Tensor(np.asarray(images)), params, cfg)
    return fmap.data.reshape(fmap.shape[0], cfg.tokens_per_view, cfg.dim).mean(axis=1)


def forward_fusion(studies_feats, params, cfg: ModelConfig, training: bool = False,
                   stochastic_depth_p: float = 0.0, rng_key=None,
                   shuffle: bool = True) -> Tensor:
    """Batched fusion forward over precomputed per-view feature maps.

    studies_feats: list (one per study) of lists of (H, W, D) feature maps.
    Returns (B, C) logits.  Shuffling applies in training mode only.
    """
    seqs = []
    do_shuffle = training and shuffle and rng_key is not None
    for si, feats in enumerate(studies_feats):
        rng = ad.derive_rng(*rng_key, "shuffle", si) if do_shuffle else None
        tokens, _ = assemble_sequence(feats, params, cfg, shuffle=do_shuffle, rng=rng)
        seqs.append(ad.reshape(tokens, (1,) + tokens.shape))
    x = ad.concat(seqs, axis=0)
    x = encoder_forward(x, params, cfg, training=training,
                        stochastic_depth_p=stochastic_depth_p, rng_key=rng_key)
    return mldecoder_forward(x, params, cfg)


def study_feature_maps(study_views, params, cfg: ModelConfig):
    """Backbone features for a study's views, computed off-tape (frozen backbone)."""
    imgs = np.stack([v for v in study_views], axis=0)
    fmap = backbone_forward(Tensor(imgs), params, cfg)
    return [fmap.data[i] for i in range(fmap.shape[0])]


def predict_single_view(images, params, cfg: ModelConfig) -> np.ndarray:
    """Eval-mode per-view probabilities, (B, C)."""
    return ad.sigmoid(forward_single_view(Tensor(np.asarray(images)), params, cfg)).data


def tta_predict_views(images, params, cfg: ModelConfig) -> np.ndarray:
    """Mean of sigmoid(logits) over original and horizontally flipped pixels."""
    imgs = np.asarray(images)
    p0 = predict_single_view(imgs, params, cfg)
    p1 = predict_single_view(imgs[:, :, ::-1, :].copy(), params, cfg)
    return 0.5 * (p0 + p1)


def tta_predict_fusion(study_views, params, cfg: ModelConfig) -> np.ndarray:
    """Fusion TTA: average fusion probabilities over {original, flipped} views."""
    probs = []
    for flip in (False, True):
        views = [v[:, ::-1, :].copy() if flip else v for v in study_views]
        feats = study_feature_maps(views, params, cfg)
        logits = forward_fusion([feats], params, cfg, training=False)
        probs.append(ad.sigmoid(logits).data[0])
    return 0.5 * (probs[0] + probs[1])
