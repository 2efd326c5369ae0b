"""Command-line entry point: data generation, two-stage training,
self-training, baselines, evaluation, gradient checking, and the ablation
grid.  Every run writes a resolved-config snapshot that reproduces it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import baselines as B
from . import checks
from . import data as D
from . import losses as L
from . import metrics as M
from . import model as mdl
from . import plots
from . import training as T

DEFAULTS = {
    # model
    "classes": 12, "dim": 64, "fmap": 4, "max_views": 4, "encoder_layers": 2,
    "heads": 4, "ff_dim": 128, "decoder_heads": 4, "image_size": 32,
    "pos_temperature": 10000.0,
    # synthetic data
    "studies": 2000, "val_studies": 400, "prior_exponent": 1.0, "base_rate": 0.5,
    "noise_std": 0.3, "amplitude": 0.45,
    # training
    "lr": 1e-3, "lr_stage2": 3e-3, "weight_decay": 1e-2, "batch_size": 16,
    "epochs_stage1": 10, "epochs_stage2": 12,
    "loss_mode": "combined", "gamma_pos": 1.0, "gamma_neg": 4.0, "margin": 0.05,
    "stochastic_depth_p": 0.1,
    # self-training
    "ns_iterations": 3, "ns_stochastic_depth": 0.1, "ns_aug_strength": 1.0,
    "unlabeled_studies": 500,
    # eval
    "tta": 1,
}


class CliError(Exception):
    pass


def parse_config_file(path: str) -> dict:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    raw = {}
    if args.config:
        raw.update(parse_config_file(args.config))
    for kv in args.set or []:
        if "=" not in kv:
            raise CliError(f"--set expects key=value, got {kv!r}")
        key, val = kv.split("=", 1)
        raw[key.strip()] = val.strip()
    for key, val in raw.items():
        if key not in cfg:
            raise CliError(f"unknown config key {key!r}")
        kind = type(cfg[key])
        try:
            cfg[key] = kind(val) if kind is not int else int(float(val))
        except ValueError as e:
            raise CliError(f"config key {key!r}: {e}") from e
    cfg["seed"] = args.seed
    return cfg


def write_snapshot(cfg: dict, out_dir: str, subcommand: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(f"# resolved config for '{subcommand}'\n")
        for key in sorted(cfg):
            f.write(f"{key} = {cfg[key]}\n")


def model_config(cfg: dict) -> mdl.ModelConfig:
    return mdl.ModelConfig(
        num_classes=cfg["classes"], dim=cfg["dim"], fmap_h=cfg["fmap"],
        fmap_w=cfg["fmap"], max_views=cfg["max_views"],
        encoder_layers=cfg["encoder_layers"], heads=cfg["heads"],
        ff_dim=cfg["ff_dim"], decoder_heads=cfg["decoder_heads"],
        image_size=cfg["image_size"], pos_temperature=cfg["pos_temperature"])


def loss_config(cfg: dict) -> L.LossConfig:
    return L.LossConfig(gamma_pos=cfg["gamma_pos"], gamma_neg=cfg["gamma_neg"],
                        margin=cfg["margin"], mode=cfg["loss_mode"])


def train_config(cfg: dict, epochs: int, stage: int) -> T.TrainConfig:
    return T.TrainConfig(lr=cfg["lr_stage2"] if stage == 2 else cfg["lr"],
                         weight_decay=cfg["weight_decay"],
                         batch_size=cfg["batch_size"], epochs=epochs,
                         seed=cfg["seed"], stage=stage, loss=loss_config(cfg),
                         stochastic_depth_p=cfg["stochastic_depth_p"] if stage == 2 else 0.0)


def synthetic_config(cfg: dict, n_studies: int, seed=None) -> D.SyntheticConfig:
    return D.SyntheticConfig(
        num_classes=cfg["classes"], num_studies=n_studies,
        prior_exponent=cfg["prior_exponent"], base_rate=cfg["base_rate"],
        noise_std=cfg["noise_std"], amplitude=cfg["amplitude"],
        image_size=cfg["image_size"], seed=cfg["seed"] if seed is None else seed)


def load_split(data_dir: str):
    train = D.load_dataset(os.path.join(data_dir, "train"))
    val = D.load_dataset(os.path.join(data_dir, "val"))
    return train, val


def write_log(log, path):
    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def checkpoint_classes(arrays: dict) -> int:
    if "head.proj_b" in arrays:
        return arrays["head.proj_b"].shape[0]
    if "gap.b" in arrays:
        return arrays["gap.b"].shape[0]
    raise T.CheckpointError("checkpoint has no classification head")


def save_eval_outputs(preds, dataset, groups, out_dir, prefix="eval"):
    rep = M.report(preds, groups)
    with open(os.path.join(out_dir, f"{prefix}_report.json"), "w") as f:
        f.write(M.serialize_report(rep))
    with open(os.path.join(out_dir, f"{prefix}_per_class.csv"), "w") as f:
        f.write("name,group,n_pos,ap,auroc\n")
        for r in rep["per_class"]:
            ap = "" if r["ap"] is None else f"{r['ap']:.6f}"
            au = "" if r["auroc"] is None else f"{r['auroc']:.6f}"
            f.write(f"{r['name']},{r['group']},{r['n_pos']},{ap},{au}\n")
    plots.per_class_ap_bar(rep, os.path.join(out_dir, f"{prefix}_per_class.png"))
    B.save_prediction_set(preds, dataset, os.path.join(out_dir, prefix))
    return rep


# --- subcommand implementations ---

def cmd_gen_data(cfg, out_dir):
    total = cfg["studies"] + cfg["val_studies"] + cfg["unlabeled_studies"]
    studies, _ = D.generate_synthetic(synthetic_config(cfg, total))
    n_tr, n_val = cfg["studies"], cfg["val_studies"]
    D.save_dataset(studies[:n_tr], os.path.join(out_dir, "train"))
    D.save_dataset(studies[n_tr:n_tr + n_val], os.path.join(out_dir, "val"))
    D.save_dataset(D.as_unlabeled(studies[n_tr + n_val:]),
                   os.path.join(out_dir, "unlabeled"))
    print(f"wrote {n_tr} train / {n_val} val / {total - n_tr - n_val} unlabeled "
          f"studies to {out_dir}")
    return 0


def cmd_train_backbone(cfg, out_dir, data_dir):
    train, val = load_split(data_dir)
    mcfg = model_config(cfg)
    params, log, rho = T.train_stage1(train, val, train_config(cfg, cfg["epochs_stage1"], 1),
                                      mcfg)
    ckpt = dict(params)
    ckpt["meta.rho"] = rho
    T.save_checkpoint(ckpt, os.path.join(out_dir, "stage1.ckpt"))
    write_log(log, os.path.join(out_dir, "stage1_log.jsonl"))
    plots.training_curves(log, os.path.join(out_dir, "stage1_curves.png"))
    print(f"stage 1 done: final val mAP {log[-1]['val_map_total']:.4f}")
    return 0


def cmd_train_fusion(cfg, out_dir, data_dir, ckpt_path):
    train, val = load_split(data_dir)
    mcfg = model_config(cfg)
    arrays = T.load_checkpoint(ckpt_path)
    _check_classes(arrays, mcfg)
    arrays.pop("meta.rho", None)
    params, log, rho = T.train_stage2(train, val, arrays,
                                      train_config(cfg, cfg["epochs_stage2"], 2), mcfg)
    ckpt = dict(params)
    ckpt["meta.rho"] = rho
    T.save_checkpoint(ckpt, os.path.join(out_dir, "fusion.ckpt"))
    write_log(log, os.path.join(out_dir, "fusion_log.jsonl"))
    plots.training_curves(log, os.path.join(out_dir, "fusion_curves.png"))
    print(f"stage 2 done: final val mAP {log[-1]['val_map_total']:.4f}")
    return 0


def cmd_self_train(cfg, out_dir, data_dir, unlabeled_dir):
    train, val = load_split(data_dir)
    unlabeled = D.load_dataset(unlabeled_dir) if unlabeled_dir else []
    mcfg = model_config(cfg)
    ns = T.NoisyStudentConfig(iterations=cfg["ns_iterations"],
                              stochastic_depth_p=cfg["ns_stochastic_depth"],
                              aug_strength=cfg["ns_aug_strength"])
    student, itlog, rho = T.noisy_student_loop(
        train, unlabeled, val, ns, train_config(cfg, cfg["epochs_stage1"], 1), mcfg,
        tta=bool(cfg["tta"]))
    ckpt = dict(student)
    ckpt["meta.rho"] = rho
    T.save_checkpoint(ckpt, os.path.join(out_dir, "student.ckpt"))
    write_log(itlog, os.path.join(out_dir, "selftrain_log.jsonl"))
    plots.comparison_bar([f"iter{r['iteration']}" for r in itlog],
                         [r["val_map_total"] for r in itlog], "val mAP",
                         os.path.join(out_dir, "selftrain_map.png"))
    print(f"self-training done: final val mAP {itlog[-1]['val_map_total']:.4f}")
    return 0


def _check_classes(arrays, mcfg):
    c_ckpt = checkpoint_classes(arrays)
    if c_ckpt != mcfg.num_classes:
        raise CliError(f"class-count mismatch: checkpoint has {c_ckpt} classes, "
                       f"dataset/config has {mcfg.num_classes}")


def cmd_eval(cfg, out_dir, data_dir, ckpt_path):
    _, val = load_split(data_dir)
    mcfg = model_config(cfg)
    arrays = T.load_checkpoint(ckpt_path)
    _check_classes(arrays, mcfg)
    arrays.pop("meta.rho", None)
    is_fusion = "fusion.pad_token" in arrays
    from .autodiff import Parameter
    params = {n: Parameter(n, a) for n, a in arrays.items()}
    tta = bool(cfg["tta"])
    if is_fusion:
        preds = T.predict_fusion_dataset(params, mcfg, val, tta=tta)
    else:
        preds = B.single_view_eval(params, val, mcfg, tta=tta)
    train = D.load_dataset(os.path.join(data_dir, "train"))
    groups = T.group_assignment_from(train, mcfg.num_classes)
    rep = save_eval_outputs(preds, val, groups, out_dir)
    print(f"eval ({'fusion' if is_fusion else 'single-view'}): "
          f"mAP {rep['map_total']:.4f}  AUROC {rep['auroc_total']:.4f}")
    return 0


def cmd_baseline(cfg, out_dir, data_dir, ckpt_path):
    train, val = load_split(data_dir)
    mcfg = model_config(cfg)
    arrays = T.load_checkpoint(ckpt_path)
    _check_classes(arrays, mcfg)
    arrays.pop("meta.rho", None)
    from .autodiff import Parameter
    params = {n: Parameter(n, a) for n, a in arrays.items()}
    groups = T.group_assignment_from(train, mcfg.num_classes)
    tta = bool(cfg["tta"])

    rows = []
    pv = B.per_view_eval(params, val, mcfg, tta=tta)
    rows.append(("single_view", M.report(pv, groups)))
    sv = B.single_view_eval(params, val, mcfg, tta=tta)
    rows.append(("view_mean", M.report(sv, groups)))
    for wf in (0.3, 0.4, 0.5, 0.6, 0.7):
        pr = B.weighted_average_eval(params, val, mcfg, B.WeightedAvgConfig(wf), tta=tta)
        rows.append((f"weighted_avg_wf{wf:.1f}", M.report(pr, groups)))

    gap_params, _, _ = B.train_gap_single_view(
        train, val, train_config(cfg, cfg["epochs_stage1"], 1), mcfg)
    gap_arrays = {n: p.value.data for n, p in gap_params.items()}
    concat_params = B.concat_gap_train(gap_arrays, train, val,
                                       train_config(cfg, cfg["epochs_stage2"], 2), mcfg)
    rows.append(("concat_gap", M.report(B.concat_gap_eval(concat_params, val, mcfg), groups)))

    with open(os.path.join(out_dir, "baselines.tsv"), "w") as f:
        f.write("method\tmap_total\tmap_head\tmap_medium\tmap_tail\tauroc_total\n")
        for name, rep in rows:
            f.write(f"{name}\t{rep['map_total']:.6f}\t{rep['map_head']:.6f}\t"
                    f"{rep['map_medium']:.6f}\t{rep['map_tail']:.6f}\t"
                    f"{rep['auroc_total']:.6f}\n")
    plots.comparison_bar([r[0] for r in rows], [r[1]["map_total"] for r in rows],
                         "val mAP", os.path.join(out_dir, "baselines.png"))
    for name, rep in rows:
        print(f"{name:22s} mAP {rep['map_total']:.4f}")
    return 0


def cmd_gradcheck(cfg, out_dir):
    ok, lines = checks.run_suite()
    text = "\n".join(lines)
    print(text)
    with open(os.path.join(out_dir, "gradcheck.txt"), "w") as f:
        f.write(text + "\n")
    return 0 if ok else 1


def cmd_ablate(cfg, out_dir, data_dir):
    train, val = load_split(data_dir)
    mcfg = model_config(cfg)
    groups = T.group_assignment_from(train, mcfg.num_classes)
    loss_rows = []
    stage1_ckpts = {}
    for mode in ("bce", "wbce", "asl", "combined"):
        c2 = dict(cfg, loss_mode=mode)
        params, log, rho = T.train_stage1(train, val,
                                          train_config(c2, cfg["epochs_stage1"], 1), mcfg)
        preds = T.predict_single_view_dataset(params, mcfg, val, tta=bool(cfg["tta"]))
        loss_rows.append((mode, M.report(preds, groups)))
        stage1_ckpts[mode] = {n: p.value.data for n, p in params.items()}

    fusion_rows = []
    base = stage1_ckpts["combined"]
    for name, seg, shuf in (("plain", False, False), ("segment", True, False),
                            ("segment+shuffle", True, True)):
        params, log, _ = T.train_stage2(train, val, dict(base),
                                        train_config(cfg, cfg["epochs_stage2"], 2),
                                        mcfg, use_segment=seg, shuffle=shuf)
        preds = T.predict_fusion_dataset(params, mcfg, val)
        fusion_rows.append((name, M.report(preds, groups)))

    with open(os.path.join(out_dir, "ablation.tsv"), "w") as f:
        f.write("experiment\tvariant\tmap_total\tmap_head\tmap_medium\tmap_tail\tauroc_total\n")
        for name, rep in loss_rows:
            f.write(f"loss\t{name}\t{rep['map_total']:.6f}\t{rep['map_head']:.6f}\t"
                    f"{rep['map_medium']:.6f}\t{rep['map_tail']:.6f}\t{rep['auroc_total']:.6f}\n")
        for name, rep in fusion_rows:
            f.write(f"fusion\t{name}\t{rep['map_total']:.6f}\t{rep['map_head']:.6f}\t"
                    f"{rep['map_medium']:.6f}\t{rep['map_tail']:.6f}\t{rep['auroc_total']:.6f}\n")
    plots.comparison_bar([n for n, _ in loss_rows], [r["map_total"] for _, r in loss_rows],
                         "val mAP (loss grid)", os.path.join(out_dir, "ablation_loss.png"))
    plots.comparison_bar([n for n, _ in fusion_rows],
                         [r["map_total"] for _, r in fusion_rows],
                         "val mAP (fusion grid)", os.path.join(out_dir, "ablation_fusion.png"))
    for name, rep in loss_rows + fusion_rows:
        print(f"{name:18s} mAP {rep['map_total']:.4f} tail {rep['map_tail']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chexfusion",
        description="Multi-view transformer fusion for long-tailed multi-label "
                    "classification (desk-scale synthetic benchmark).")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1,
                        help="bound on internal parallelism")

    sub.add_parser("gen-data", parents=[common])
    for name in ("train-backbone", "ablate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data", required=True)
    for name in ("train-fusion", "eval", "baseline"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", required=True)
    p = sub.add_parser("self-train", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--unlabeled")
    sub.add_parser("gradcheck", parents=[common])
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        os.makedirs(args.out, exist_ok=True)
        write_snapshot(cfg, args.out, args.subcommand)
        if args.threads:
            os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
        if args.subcommand == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.subcommand == "train-backbone":
            return cmd_train_backbone(cfg, args.out, args.data)
        if args.subcommand == "train-fusion":
            return cmd_train_fusion(cfg, args.out, args.data, args.ckpt)
        if args.subcommand == "self-train":
            return cmd_self_train(cfg, args.out, args.data, args.unlabeled)
        if args.subcommand == "eval":
            return cmd_eval(cfg, args.out, args.data, args.ckpt)
        if args.subcommand == "baseline":
            return cmd_baseline(cfg, args.out, args.data, args.ckpt)
        if args.subcommand == "gradcheck":
            return cmd_gradcheck(cfg, args.out)
        if args.subcommand == "ablate":
            return cmd_ablate(cfg, args.out, args.data)
        return 2
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (T.CheckpointError, D.ManifestError, mdl.ConfigError, ValueError,
            FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))
