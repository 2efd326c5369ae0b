"""Acceptance suite: one test per shipping criterion, each printing a single
PASS/FAIL line (run with `pytest tests/test_acceptance.py -s` to see them
live).  Numeric details are covered by the per-module unit tests; these tests
assert the end-to-end properties at their stated tolerances.
"""

import itertools
import json
import math
import os
import time

import numpy as np

import chexfusion.autodiff as ad
import chexfusion.baselines as B
import chexfusion.checks as checks
import chexfusion.cli as cli
import chexfusion.data as D
import chexfusion.losses as L
import chexfusion.metrics as M
import chexfusion.model as mdl
import chexfusion.training as T
from chexfusion.autodiff import Parameter, Tensor


def crit(n, desc, ok):
    line = f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {desc}"
    print("\n" + line)
    try:
        from conftest import record_criterion
        record_criterion(line)
    except ImportError:
        pass
    assert ok, f"criterion {n} failed: {desc}"


def toy_cfg(**kw):
    base = dict(num_classes=3, dim=8, fmap_h=2, fmap_w=2, max_views=4,
                encoder_layers=1, heads=2, ff_dim=12, decoder_heads=2,
                backbone_widths=(4, 6), backbone_strides=(2, 2), image_size=8)
    base.update(kw)
    return mdl.ModelConfig(**base)


def toy_data(n, seed=0, **kw):
    return D.generate_synthetic(D.SyntheticConfig(
        num_classes=3, num_studies=n, seed=seed, image_size=8, **kw))[0]


# ---------------------------------------------------------------- criterion 1

def test_criterion_01_gradient_suite():
    t0 = time.monotonic()
    ok, lines = checks.run_suite(seeds=(0, 1, 2, 3, 4), h=1e-6)
    elapsed = time.monotonic() - t0
    n_lines = len(lines)
    crit(1, f"gradient suite: {n_lines} checks over 5 seeds, all within "
            f"tolerance (1e-5 primitives/losses, 1e-4 full model) "
            f"in {elapsed:.0f}s",
         ok and elapsed < 120.0 and n_lines >= 28)


# ---------------------------------------------------------------- criterion 2

def test_criterion_02_loss_hand_values():
    p = Tensor(np.array([[0.5]]))
    one = np.array([[1.0]])
    rho = np.array([0.5])
    cfg = L.LossConfig(gamma_pos=1.0, gamma_neg=4.0, margin=0.05)

    # hand evaluation at p=0.5, y=1, rho=0.5:
    #   wBCE = e^{1-rho} * -ln(0.5) = e^0.5 * ln 2
    #   ASL  = (1-p)^{gamma+} * -ln(0.5) = 0.5 * ln 2
    #   combined = ASL focal terms * wBCE weight = e^0.5 * 0.5 * ln 2
    ok = (abs(L.wbce(p, one, rho).item() - math.e**0.5 * math.log(2)) < 1e-9
          and abs(L.asl(p, one, cfg).item() - 0.5 * math.log(2)) < 1e-9
          and abs(L.combined(p, one, cfg, rho).item()
                  - math.e**0.5 * 0.5 * math.log(2)) < 1e-9)

    rng = np.random.default_rng(2)
    probs = Tensor(rng.uniform(0.02, 0.98, size=(6, 5)))
    y = (rng.random((6, 5)) < 0.5).astype(np.float64)
    degen = L.LossConfig(gamma_pos=0.0, gamma_neg=0.0, margin=0.0)
    ok = ok and abs(L.asl(probs, y, degen).item() - L.bce(probs, y).item()) < 1e-12

    crit(2, "loss hand values match to 1e-9; ASL degenerates to BCE within "
            "1e-12 at gamma=0, m=0", ok)


# ---------------------------------------------------------------- criterion 3

def _ap_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, precs = 0, []
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            precs.append(hits / rank)
    return sum(precs) / hits if hits else None


def _auroc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    total = 0.0
    for sp in pos:
        for sn in neg:
            total += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return total / (len(pos) * len(neg))


def test_criterion_03_metrics_oracle():
    rng = np.random.default_rng(33)
    ok = True
    for _ in range(100):
        s = int(rng.integers(2, 21))
        c = int(rng.integers(1, 6))
        scores = np.round(rng.random((s, c)), 1)       # rounding forces ties
        labels = (rng.random((s, c)) < 0.4).astype(np.float64)
        for j in range(c):
            got_ap = M.average_precision(scores[:, j], labels[:, j])
            want_ap = _ap_oracle(scores[:, j].tolist(), labels[:, j].tolist())
            got_au = M.auroc(scores[:, j], labels[:, j])
            want_au = _auroc_oracle(scores[:, j].tolist(), labels[:, j].tolist())
            for got, want in ((got_ap, want_ap), (got_au, want_au)):
                if want is None:
                    ok = ok and got is None
                else:
                    ok = ok and got is not None and abs(got - want) < 1e-12
        preds = M.PredictionSet(scores, labels)
        trans = M.PredictionSet(np.exp(3.0 * scores) + 7.0, labels)
        ok = ok and M.mean_ap(preds) == M.mean_ap(trans)
        ok = ok and M.mean_auroc(preds) == M.mean_auroc(trans)
    crit(3, "AP/mAP/AUROC equal brute force to 1e-12 on 100 instances; "
            "strictly increasing transforms leave them unchanged exactly", ok)


# ---------------------------------------------------------------- criterion 4

def test_criterion_04_permutation_invariance():
    cfg = toy_cfg()
    params = mdl.init_params(cfg, seed=5, with_fusion=True)
    params["fusion.segment"].value.data[:] = 0.0
    rng = ad.derive_rng(5, "perm.feats")
    feats = [rng.normal(size=(cfg.fmap_h, cfg.fmap_w, cfg.dim)) for _ in range(4)]
    base = None
    worst = 0.0
    for perm in itertools.permutations(range(4)):
        logits = mdl.forward_fusion([[feats[i] for i in perm]], params, cfg,
                                    training=False, shuffle=False).data
        if base is None:
            base = logits
        else:
            worst = max(worst, float(np.max(np.abs(logits - base))))
    crit(4, f"all 24 view permutations agree (max deviation {worst:.2e} <= 1e-9)",
         worst <= 1e-9)


# ---------------------------------------------------------------- criterion 5

def test_criterion_05_backbone_frozen():
    cfg = toy_cfg()
    train = toy_data(48, seed=6)
    val = toy_data(12, seed=7)
    tc1 = T.TrainConfig(lr=1e-3, epochs=1, batch_size=8, seed=0)
    p1, _, _ = T.train_stage1(train, val, tc1, cfg)
    arrays = {n: p.value.data.copy() for n, p in p1.items()}
    tc2 = T.TrainConfig(lr=1e-3, epochs=9, batch_size=4, seed=0,
                        stochastic_depth_p=0.1)
    steps = 9 * ((len(train) + 3) // 4)
    p2, _, _ = T.train_stage2(train, val, {n: a.copy() for n, a in arrays.items()},
                              tc2, cfg)
    frozen = [n for n in arrays if n.startswith("backbone.")]
    ok = bool(frozen) and steps >= 100 and all(
        np.array_equal(arrays[n], p2[n].value.data) for n in frozen)
    moved = any(not np.array_equal(arrays[n], p2[n].value.data)
                for n in p2 if n.startswith("head."))
    crit(5, f"after {steps} stage-2 steps, {len(frozen)} backbone arrays are "
            "bitwise identical (while the head moved)", ok and moved)


# ---------------------------------------------------------------- criterion 6

def test_criterion_06_fusion_advantage_benchmark():
    t0 = time.monotonic()
    cfg = dict(cli.DEFAULTS)
    cfg["seed"] = 0
    mcfg = cli.model_config(cfg)
    assert cfg["classes"] == 12 and cfg["studies"] == 2000
    data_cfg = cli.synthetic_config(cfg, cfg["studies"] + cfg["val_studies"],
                                    seed=7)
    studies, _ = D.generate_synthetic(data_cfg)
    train, val = studies[:cfg["studies"]], studies[cfg["studies"]:]
    groups = T.group_assignment_from(train, mcfg.num_classes)

    p1, _, _ = T.train_stage1(train, val, cli.train_config(cfg, cfg["epochs_stage1"], 1),
                              mcfg)
    arrays = {n: p.value.data for n, p in p1.items()}
    single = M.report(B.per_view_eval(p1, val, mcfg, tta=True), groups)["map_total"]
    best_wavg = max(
        M.report(B.weighted_average_eval(p1, val, mcfg, B.WeightedAvgConfig(w),
                                         tta=True), groups)["map_total"]
        for w in (0.3, 0.4, 0.5, 0.6, 0.7))

    p2, _, _ = T.train_stage2(train, val, arrays,
                              cli.train_config(cfg, cfg["epochs_stage2"], 2), mcfg)
    fusion = M.report(T.predict_fusion_dataset(p2, mcfg, val, tta=True),
                      groups)["map_total"]
    elapsed = time.monotonic() - t0
    ok = (fusion >= single + 0.05) and (fusion > best_wavg) and elapsed < 1800
    crit(6, f"default benchmark (C=12, S=2000): fusion mAP {fusion:.4f} vs "
            f"single-view {single:.4f} (gap {fusion-single:+.4f} >= +0.05) and "
            f"best weighted average {best_wavg:.4f}, in {elapsed/60:.1f} min",
         ok)


# ---------------------------------------------------------------- criterion 7

def test_criterion_07_loss_component_trend():
    wins, rows = 0, []
    for seed in (0, 1, 2):
        # tail classes are rarer *and* subtler here (difficulty knob on),
        # which is the regime the reweighted/focal combination targets
        sc = D.SyntheticConfig(num_classes=12, num_studies=1200, seed=seed,
                               amplitude=0.6, noise_std=0.3, prior_exponent=1.0,
                               difficulty_exponent=0.35)
        studies, _ = D.generate_synthetic(sc)
        train, val = studies[:800], studies[800:]
        groups = T.group_assignment_from(train, 12)
        mcfg = mdl.ModelConfig()
        tails = {}
        for mode in ("bce", "combined"):
            tc = T.TrainConfig(lr=1e-3, epochs=10, seed=seed,
                               loss=L.LossConfig(mode=mode))
            p, _, _ = T.train_stage1(train, val, tc, mcfg)
            rep = M.report(T.predict_single_view_dataset(p, mcfg, val, tta=True),
                           groups)
            tails[mode] = rep["map_tail"]
        wins += tails["combined"] >= tails["bce"]
        rows.append(f"seed {seed}: {tails['combined']:.3f} vs {tails['bce']:.3f}")
    crit(7, f"wBCE+ASL tail mAP >= BCE in {wins}/3 seeds ({'; '.join(rows)})",
         wins >= 2)


# ---------------------------------------------------------------- criterion 8

def test_criterion_08_self_training_plumbing():
    cfg = toy_cfg()
    train = toy_data(24, seed=8)
    val = toy_data(8, seed=9)
    tc = T.TrainConfig(lr=1e-3, epochs=2, batch_size=8, seed=3)

    # degeneration: no unlabeled data, noise off => byte-for-byte stage 1
    ns = T.NoisyStudentConfig(iterations=1, stochastic_depth_p=0.0,
                              aug_strength=0.0)
    student, _, _ = T.noisy_student_loop(train, [], val, ns, tc, cfg)
    plain, _, _ = T.train_stage1(train, val, tc, cfg)
    degen_ok = set(student) == set(plain) and all(
        student[n].value.data.tobytes() == plain[n].value.data.tobytes()
        for n in plain)

    # soft targets equal teacher probabilities exactly
    unlabeled = D.as_unlabeled(toy_data(6, seed=10))
    teacher_probs = T.predict_single_view_dataset(plain, cfg, unlabeled,
                                                  tta=True).scores
    pseudo = T.pseudo_label(plain, unlabeled, D.identity_overlap(3), cfg,
                            tta=True)
    soft_ok = all(
        st.labels[j].kind == "soft" and st.labels[j].p == teacher_probs[si, j]
        for si, st in enumerate(pseudo) for j in range(3))

    # paired-class merge rule: all 8 (label, argmax, tie) cases
    pair = D.ClassOverlapMap({0: (0, 1)}, 2)
    pos = D.parse_label_token("1")
    neg = D.parse_label_token("0")
    table_ok = True
    for lv, probs, want in [
        (pos, [0.9, 0.4], [("positive", None), ("soft", 0.4)]),
        (pos, [0.2, 0.6], [("soft", 0.2), ("positive", None)]),
        (pos, [0.5, 0.5], [("positive", None), ("soft", 0.5)]),   # tie -> lower
        (pos, [0.0, 0.0], [("positive", None), ("soft", 0.0)]),
        (neg, [0.9, 0.4], [("negative", None), ("negative", None)]),
        (neg, [0.2, 0.6], [("negative", None), ("negative", None)]),
        (neg, [0.5, 0.5], [("negative", None), ("negative", None)]),
        (neg, [0.0, 0.0], [("negative", None), ("negative", None)]),
    ]:
        got = D.merge_pseudo_labels([lv], np.array(probs), pair)
        for g, (kind, value) in zip(got, want):
            table_ok = table_ok and g.kind == kind
            if value is not None:
                table_ok = table_ok and g.p == value

    crit(8, "noisy-student degenerates byte-for-byte; soft targets equal "
            "teacher probabilities; paired-class merge matches all 8 cases",
         degen_ok and soft_ok and table_ok)


# ---------------------------------------------------------------- criterion 9

def test_criterion_09_tta_and_baseline_identities():
    cfg = toy_cfg()
    params = mdl.init_params(cfg, seed=11)
    rng = ad.derive_rng(11, "tta")
    imgs = rng.normal(size=(5, cfg.image_size, cfg.image_size, 1))

    two_pass = 0.5 * (mdl.predict_single_view(imgs, params, cfg)
                      + mdl.predict_single_view(imgs[:, :, ::-1, :], params, cfg))
    tta_ok = np.max(np.abs(mdl.tta_predict_views(imgs, params, cfg)
                           - two_pass)) <= 1e-12

    probs = rng.uniform(size=(4, 6))
    labels = ["frontal", "lateral", "frontal", "lateral"]
    wf1 = B.weighted_average_predict(probs, labels, B.WeightedAvgConfig(1.0))
    bitwise_ok = np.array_equal(wf1, probs[[0, 2]].mean(axis=0))

    # single-group renormalization: with only laterals present the w_l weight
    # cancels, so any w_f < 1 must reproduce the plain lateral mean
    lat_mean = probs[[1, 3]].mean(axis=0)
    renorm_ok = all(
        np.array_equal(B.weighted_average_predict(
            probs[[1, 3]], ["lateral", "lateral"], B.WeightedAvgConfig(wf)),
            lat_mean)
        for wf in (0.3, 0.5, 0.7))

    crit(9, "TTA equals the explicit two-pass average (1e-12); w_f=1 equals "
            "the frontal mean bitwise; single-group renormalization holds",
         tta_ok and bitwise_ok and renorm_ok)


# --------------------------------------------------------------- criterion 10

def test_criterion_10_end_to_end_determinism(tmp_path):
    small = []
    for kv in ("classes=3", "dim=16", "encoder_layers=1", "heads=2",
               "ff_dim=32", "decoder_heads=2", "studies=16", "val_studies=8",
               "unlabeled_studies=0", "epochs_stage1=2", "epochs_stage2=2",
               "batch_size=4"):
        small += ["--set", kv]

    def pipeline(root):
        data, s1, s2, ev = (str(root / d) for d in ("data", "s1", "s2", "ev"))
        for argv in (
            ["gen-data", "--out", data],
            ["train-backbone", "--out", s1, "--data", data],
            ["train-fusion", "--out", s2, "--data", data,
             "--ckpt", os.path.join(s1, "stage1.ckpt")],
            ["eval", "--out", ev, "--data", data,
             "--ckpt", os.path.join(s2, "fusion.ckpt")],
        ):
            assert cli.run(argv + small + ["--seed", "4"]) == 0
        return {
            "stage1.ckpt": open(os.path.join(s1, "stage1.ckpt"), "rb").read(),
            "fusion.ckpt": open(os.path.join(s2, "fusion.ckpt"), "rb").read(),
            "report": open(os.path.join(ev, "eval_report.json"), "rb").read(),
            "per_class": open(os.path.join(ev, "eval_per_class.csv"), "rb").read(),
            "scores": open(os.path.join(ev, "eval.scores.tsv"), "rb").read(),
        }

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    ok = all(a[k] == b[k] for k in a)
    crit(10, "two end-to-end runs produce byte-identical checkpoints and "
             "metric reports", ok)
