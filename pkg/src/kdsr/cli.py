"""Command-line entry point.

Commands: synth, train-teacher, train-student, eval, export-idr, ablate.
Runs are driven by a JSON config (see DEFAULTS) with dotted --set overrides;
every run directory receives the fully resolved config, so reruns with the
same config and seed reproduce outputs bit for bit. KDSR_THREADS caps the
evaluation worker pool.
"""

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from . import degradation, evalharness, imaging, kd_ide, sr_net, training
from .training import LossLog, Restorer, TrainConfig, checkpoint_io

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "scale": 4,
    "data": {
        "hr_dir": None,
        "lr_dir": None,
        "out_root": None,
        "mode": "iso",
        "kernel_size": 21,
    },
    "ide": {"C": 16, "n_blocks": 3},
    "sr": {"C": 16, "n_blocks": 4, "K": 3},
    "train": {
        "lr": 1e-3,
        "iterations": 300,
        "batch_size": 8,
        "patch_size": 16,
        "lambda_rec": 1.0,
        "lambda_kl": 0.15,
        "kd_loss_kind": "kl",
        "teacher_checkpoint": None,
    },
    "eval": {
        "checkpoint": None,
        "teacher_checkpoint": None,
        "hr_dir": None,
        "protocol": "gaussian8",
        "border": None,
        "noise_levels": [0, 10, 20],
        "sigmas": None,
    },
    "export": {
        "checkpoint": None,
        "hr_dir": None,
        "sigmas": [0.5, 1.5, 2.5, 3.5],
        "include_dprime": False,
    },
    "ablate": {
        "teacher_checkpoint": None,
        "hr_dir": None,
        "eval_hr_dir": None,
        "seeds": [0, 1, 2],
        "eval_sigmas": None,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        full = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {full}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(val, dict):
                raise ConfigError(f"config key {full} must be a section")
            out[key] = _merge(base[key], val, full + ".")
        else:
            out[key] = val
    return out


def _apply_set(config, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config section: {dotted}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[keys[-1]] = value


def load_config(path=None, sets=(), seed=None):
    config = copy.deepcopy(DEFAULTS)
    if path:
        with open(path) as f:
            user = json.load(f)
        config = _merge(DEFAULTS, user)
    for assignment in sets:
        _apply_set(config, assignment)
    if seed is not None:
        config["seed"] = seed
    return config


def _run_dir(args, config):
    if args.out:
        out = args.out
    else:
        out = os.path.join("runs", f"{time.strftime('%Y%m%d-%H%M%S')}-{config['name']}")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(config, f, indent=1)
    return out


def _load_hr(path, scale):
    if not path:
        raise ConfigError("an hr_dir path is required for this command")
    return imaging.read_image_dir(path, crop_multiple=scale)


def _model_configs(config):
    ide = kd_ide.IDEConfig(scale=config["scale"], **config["ide"])
    sr = sr_net.SRConfig(scale=config["scale"], **config["sr"])
    return ide, sr


def _train_config(config, stage, seed=None, **overrides):
    t = dict(config["train"])
    t.pop("teacher_checkpoint")
    t.update(overrides)
    return TrainConfig(
        stage=stage,
        seed=config["seed"] if seed is None else seed,
        degradation_mode=config["data"]["mode"],
        kernel_size=config["data"]["kernel_size"],
        **t,
    )


def cmd_synth(config, out_dir):
    images = _load_hr(config["data"]["hr_dir"], config["scale"])
    root = config["data"]["out_root"] or os.path.join(out_dir, "dataset")
    n = degradation.synth_dataset(
        images,
        root,
        mode=config["data"]["mode"],
        scale=config["scale"],
        base_seed=config["seed"],
        size=config["data"]["kernel_size"],
    )
    print(f"synthesized {n} HR/LR pairs under {root}")


def _load_lr_paired(config, hr_images):
    lr_dir = config["data"]["lr_dir"]
    if not lr_dir:
        return None
    lr = dict(imaging.read_image_dir(lr_dir))
    try:
        return [lr[image_id] for image_id, _ in hr_images]
    except KeyError as e:
        raise ConfigError(f"lr_dir is missing image {e.args[0]!r}") from None


def cmd_train_teacher(config, out_dir):
    hr_images = _load_hr(config["data"]["hr_dir"], config["scale"])
    ide_cfg, sr_cfg = _model_configs(config)
    log = LossLog()
    ckpt = training.train_teacher(
        [img for _, img in hr_images],
        _train_config(config, stage=1),
        ide_config=ide_cfg,
        sr_config=sr_cfg,
        lr_images=_load_lr_paired(config, hr_images),
        log=log,
    )
    ckpt_dir = os.path.join(out_dir, "teacher_ckpt")
    checkpoint_io(ckpt_dir, "save", ckpt)
    log.write(os.path.join(out_dir, "loss_log.csv"))
    print(f"teacher checkpoint saved to {ckpt_dir} (final L1 {log.rows[-1][1]:.5f})"
          if log.rows else f"teacher checkpoint saved to {ckpt_dir}")


def cmd_train_student(config, out_dir):
    teacher_path = config["train"]["teacher_checkpoint"]
    if not teacher_path:
        raise ConfigError("train.teacher_checkpoint is required for stage 2")
    teacher_ckpt = checkpoint_io(teacher_path, "load")
    hr_images = _load_hr(config["data"]["hr_dir"], config["scale"])
    log = LossLog()
    ckpt = training.train_student(
        [img for _, img in hr_images],
        teacher_ckpt,
        _train_config(config, stage=2),
        lr_images=_load_lr_paired(config, hr_images),
        log=log,
    )
    ckpt_dir = os.path.join(out_dir, "student_ckpt")
    checkpoint_io(ckpt_dir, "save", ckpt)
    log.write(os.path.join(out_dir, "loss_log.csv"))
    print(f"student checkpoint saved to {ckpt_dir}")


def _run_eval_protocol(config, restorer, hr_images):
    e = config["eval"]
    if e["protocol"] == "gaussian8":
        return evalharness.eval_gaussian8(
            restorer, hr_images, border=e["border"], base_seed=config["seed"], sigmas=e["sigmas"]
        )
    if e["protocol"] == "aniso":
        return evalharness.eval_aniso_grid(
            restorer,
            hr_images,
            noise_levels=e["noise_levels"],
            border=e["border"],
            base_seed=config["seed"],
        )
    raise ConfigError(f"unknown eval protocol {e['protocol']!r}")


def cmd_eval(config, out_dir):
    e = config["eval"]
    if not e["checkpoint"]:
        raise ConfigError("eval.checkpoint is required")
    restorer = Restorer(checkpoint_io(e["checkpoint"], "load"))
    hr_images = _load_hr(e["hr_dir"], restorer.sr_cfg.scale)
    report = _run_eval_protocol(config, restorer, hr_images)
    evalharness.report_to_csv(report, os.path.join(out_dir, "report.csv"))
    imaging.write_metric_report(
        os.path.join(out_dir, "metrics.csv"),
        [(f"{k}:{n:g}:{image_id}", p, s) for k, n, image_id, p, s in report.per_image],
    )
    table = evalharness.format_report(report)
    if e["teacher_checkpoint"]:
        # side-by-side reference: the privileged stage-1 model on the same protocol
        teacher = Restorer(checkpoint_io(e["teacher_checkpoint"], "load"))
        t_report = _run_eval_protocol(config, teacher, hr_images)
        evalharness.report_to_csv(t_report, os.path.join(out_dir, "report_teacher.csv"))
        table += "\n\nteacher reference:\n" + evalharness.format_report(t_report)
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(table + "\n")
    print(table)


def cmd_export_idr(config, out_dir):
    e = config["export"]
    if not e["checkpoint"]:
        raise ConfigError("export.checkpoint is required")
    restorer = Restorer(checkpoint_io(e["checkpoint"], "load"))
    hr_images = _load_hr(e["hr_dir"], restorer.sr_cfg.scale)
    records = []
    for sigma in e["sigmas"]:
        kernel = degradation.make_isotropic_kernel(sigma)
        spec = degradation.DegradationSpec(kernel, restorer.sr_cfg.scale, 0.0)
        for image_id, hr in hr_images:
            lr = degradation.degrade(hr, spec)
            if restorer.is_teacher:
                d, dp = restorer.degradation_vectors(lr[None], hr[None])
            else:
                d, dp = restorer.degradation_vectors(lr[None])
            records.append((image_id, sigma, d[0], dp[0]))
    path = os.path.join(out_dir, "idr.csv")
    kd_ide.write_idr_csv(path, records, include_dprime=e["include_dprime"])
    print(f"exported {len(records)} degradation vectors to {path}")


ABLATE_ARMS = (("kl", True), ("l1", True), ("l2", True), ("none", False))


def cmd_ablate(config, out_dir):
    a = config["ablate"]
    hr_train = _load_hr(a["hr_dir"], config["scale"])
    hr_eval = _load_hr(a["eval_hr_dir"] or a["hr_dir"], config["scale"])
    ide_cfg, sr_cfg = _model_configs(config)
    rows = []  # (arm, seed, psnr)
    for seed in a["seeds"]:
        if a["teacher_checkpoint"]:
            teacher_ckpt = checkpoint_io(a["teacher_checkpoint"], "load")
        else:
            teacher_ckpt = training.train_teacher(
                [img for _, img in hr_train],
                _train_config(config, stage=1, seed=seed),
                ide_config=ide_cfg,
                sr_config=sr_cfg,
            )
        for arm, use_kd in ABLATE_ARMS:
            cfg = _train_config(
                config,
                stage=2,
                seed=seed,
                kd_loss_kind=arm if use_kd else "kl",
                lambda_kl=config["train"]["lambda_kl"] if use_kd else 0.0,
            )
            log = LossLog()
            student = training.train_student([img for _, img in hr_train], teacher_ckpt, cfg, log=log)
            checkpoint_io(os.path.join(out_dir, "students", f"{arm}-seed{seed}"), "save", student)
            log.write(os.path.join(out_dir, f"loss_{arm}_seed{seed}.csv"))
            report = evalharness.eval_gaussian8(
                Restorer(student), hr_eval, base_seed=config["seed"], sigmas=a["eval_sigmas"]
            )
            rows.append((arm, seed, report.aggregate_psnr))
            print(f"arm={arm:<5} seed={seed} psnr={report.aggregate_psnr:.4f}")
    path = os.path.join(out_dir, "ablation.csv")
    with open(path, "w", newline="") as f:
        f.write("arm,seed,psnr_db\n")
        for arm, seed, psnr in rows:
            f.write(f"{arm},{seed},{psnr:.6f}\n")
        f.write("arm,mean_psnr_db,stderr\n")
        for arm, _ in ABLATE_ARMS:
            vals = np.array([p for armi, _, p in rows if armi == arm])
            stderr = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
            f.write(f"{arm},{vals.mean():.6f},{stderr:.6f}\n")
            print(f"arm={arm:<5} mean={vals.mean():.4f} stderr={stderr:.4f}")
    print(f"ablation table written to {path}")


COMMANDS = {
    "synth": cmd_synth,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "export-idr": cmd_export_idr,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="kdsr", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override"
    )
    parser.add_argument("--out", help="run output directory (default runs/<timestamp>-<name>)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.set, args.seed)
        out_dir = _run_dir(args, config)
        COMMANDS[args.command](config, out_dir)
    except Exception as e:  # nonzero exit on any validation or numeric failure
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
