"""Finite-difference verification suites: every primitive, every loss, and
the full fusion forward pass on a toy configuration."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as mdl
from .autodiff import Parameter, Tensor


def _param(name, rng, shape, scale=1.0):
    return Parameter(name, rng.normal(0.0, scale, size=shape))


def primitive_builders():
    """name -> builder(seed) pairs covering the differentiable primitive set."""

    def simple(name, shapes, fn, scale=1.0, transform=None):
        def builder(seed):
            rng = ad.derive_rng(seed, "prim", name)
            params = [_param(f"{name}.x{i}", rng, s, scale) for i, s in enumerate(shapes)]
            if transform:
                for p in params:
                    p.value.data = transform(p.value.data)

            def loss_fn():
                out = fn(*[p.value for p in params])
                return ad.reduce_mean(out * Tensor(_weights(out, seed)))

            return loss_fn, params

        return builder

    def _weights(out, seed):
        # fixed random weighting makes the scalarized check sensitive everywhere
        return ad.derive_rng(seed, "w", out.shape).normal(size=out.shape)

    b = {
        "matmul": simple("matmul", [(3, 4), (4, 5)], ad.matmul),
        "add": simple("add", [(3, 4), (4,)], ad.add),
        "sub": simple("sub", [(3, 4), (3, 4)], ad.sub),
        "mul": simple("mul", [(3, 4), (3, 1)], ad.mul),
        "sigmoid": simple("sigmoid", [(3, 4)], ad.sigmoid),
        "exp": simple("exp", [(3, 4)], ad.exp),
        "log": simple("log", [(3, 4)], ad.log,
                      transform=lambda x: np.abs(x) + 0.5),
        "clamp_min": simple("clamp_min", [(3, 4)], lambda x: ad.clamp_min(x, 0.0)),
        "clip": simple("clip", [(3, 4)], lambda x: ad.clip(x, -0.8, 0.8)),
        "powc": simple("powc", [(3, 4)], lambda x: ad.powc(x, 3.0),
                       transform=lambda x: np.abs(x) + 0.3),
        "softmax": simple("softmax", [(3, 5)], ad.softmax),
        "layernorm": simple("layernorm", [(3, 6)], ad.layernorm),
        "gelu": simple("gelu", [(3, 4)], ad.gelu),
        "affine": simple("affine", [(3, 4), (5, 4), (5,)], ad.affine),
        "gather_rows": simple("gather_rows", [(6, 4)],
                              lambda t: ad.gather_rows(t, [0, 2, 2, 5])),
        "concat": simple("concat", [(2, 3), (4, 3)],
                         lambda a, b: ad.concat([a, b], axis=0)),
        "transpose": simple("transpose", [(2, 3, 4)],
                            lambda x: ad.transpose(x, (2, 0, 1))),
        "reshape": simple("reshape", [(2, 6)], lambda x: ad.reshape(x, (3, 4))),
        "reduce_sum": simple("reduce_sum", [(3, 4, 2)],
                             lambda x: ad.reduce_sum(x, axes=(0, 2))),
        "reduce_mean": simple("reduce_mean", [(3, 4)],
                              lambda x: ad.reduce_mean(x, axes=-1)),
    }

    def stochastic(name, fn):
        # the counter-based rng re-derives the same draw on every call, so the
        # loss is deterministic across finite-difference re-evaluations
        def builder(seed):
            rng = ad.derive_rng(seed, "prim", name)
            p = _param(f"{name}.x", rng, (4, 5))

            def loss_fn():
                out = fn(p.value, ad.derive_rng(seed, name, "draw"))
                return ad.reduce_mean(out * Tensor(_weights_arr(out.shape, seed)))

            return loss_fn, [p]

        return builder

    def _weights_arr(shape, seed):
        return ad.derive_rng(seed, "w", shape).normal(size=shape)

    b["dropout"] = stochastic("dropout", lambda x, rng: ad.dropout(x, 0.4, rng))
    b["depth_gate"] = stochastic("depth_gate", lambda x, rng: ad.depth_gate(x, 0.4, rng))
    return b


def loss_builders():
    """Gradient-check builders for the four losses plus the soft-label variant."""

    def make(name, fn):
        def builder(seed):
            rng = ad.derive_rng(seed, "loss", name)
            c = 6
            logits = _param(f"{name}.logits", rng, (4, c))
            y = (rng.random((4, c)) < 0.4).astype(np.float64)
            # keep negative-class probabilities away from the margin band,
            # where the clipped focal term underflows below the h=1e-6
            # finite-difference noise floor
            lo = logits.value.data
            lo[(y == 0) & (lo > -4.0) & (lo < -1.2)] += 3.0
            soft = rng.random((4, c))
            rho = rng.uniform(0.05, 0.95, size=c)
            cfg = L.LossConfig()

            def loss_fn():
                p = ad.sigmoid(logits.value)
                return fn(p, y, soft, rho, cfg)

            return loss_fn, [logits]

        return builder

    return {
        "bce": make("bce", lambda p, y, s, r, c: L.bce(p, y)),
        "wbce": make("wbce", lambda p, y, s, r, c: L.wbce(p, y, r)),
        "asl": make("asl", lambda p, y, s, r, c: L.asl(p, y, c)),
        "combined": make("combined", lambda p, y, s, r, c: L.combined(p, y, c, r)),
        "soft": make("soft", lambda p, y, s, r, c: L.loss_with_soft_labels(p, s, c, r)),
    }


def toy_model_cfg() -> mdl.ModelConfig:
    return mdl.ModelConfig(num_classes=3, dim=8, fmap_h=2, fmap_w=2, max_views=3,
                           encoder_layers=1, heads=2, ff_dim=12, decoder_heads=2,
                           backbone_widths=(4, 6), backbone_strides=(2, 2),
                           image_size=8)


def full_model_builder(seed):
    """Fusion forward + combined loss on a 2-view toy study; checks every
    trainable parameter (backbone frozen as in stage 2)."""
    cfg = toy_model_cfg()
    params = mdl.init_params(cfg, seed, with_fusion=True)
    for p in params.values():
        if p.name.startswith("backbone."):
            p.trainable = False
            p.value.requires_grad = False
    rng = ad.derive_rng(seed, "toy.study")
    feats = [rng.normal(size=(cfg.fmap_h, cfg.fmap_w, cfg.dim)) for _ in range(2)]
    y = (rng.random(cfg.num_classes) < 0.5).astype(np.float64)
    rho = rng.uniform(0.1, 0.9, size=cfg.num_classes)
    loss_cfg = L.LossConfig()

    def loss_fn():
        logits = mdl.forward_fusion([feats], params, cfg, training=False)
        p = ad.sigmoid(ad.reshape(logits, (cfg.num_classes,)))
        return L.combined(p, y, loss_cfg, rho)

    return loss_fn, list(params.values())


def run_suite(seeds=(0, 1, 2, 3, 4), h=1e-6, verbose=False):
    """Full gradient suite; returns (all_passed, lines)."""
    lines = []
    ok = True
    for name, builder in primitive_builders().items():
        rep = ad.grad_check(builder, seeds, h=h, tol=1e-5)
        ok &= rep.passed
        worst = max(e.max_rel_err for e in rep.entries)
        lines.append(f"{'PASS' if rep.passed else 'FAIL'} primitive {name:12s} "
                     f"max_rel_err={worst:.3e}")
    for name, builder in loss_builders().items():
        rep = ad.grad_check(builder, seeds, h=h, tol=1e-5)
        ok &= rep.passed
        worst = max(e.max_rel_err for e in rep.entries)
        lines.append(f"{'PASS' if rep.passed else 'FAIL'} loss      {name:12s} "
                     f"max_rel_err={worst:.3e}")
    rep = ad.grad_check(full_model_builder, seeds, h=h, tol=1e-4,
                        max_entries_per_param=8)
    ok &= rep.passed
    worst = max(e.max_rel_err for e in rep.entries)
    lines.append(f"{'PASS' if rep.passed else 'FAIL'} model     full_fusion  "
                 f"max_rel_err={worst:.3e}")
    return ok, lines
