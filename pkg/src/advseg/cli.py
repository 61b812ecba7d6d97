"""Command-line interface.

Verbs: synth, pretrain, attack, train-decoder, adapt, finetune,
tune-lambda, eval, report, run. A plain-text config file (INI sections
named after verbs) supplies defaults; every flag overrides it.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from .adaptation import fine_tune, make_finetune_split
from .attack import AttackConfig, contaminate_dataset, write_manifest
from .bayesopt import optimize_lambda
from .cloud import class_histogram
from .decoder import init_decoder, load_decoder, save_decoder, train_decoder
from .experiment import (ExperimentConfig, PipelineParams, TABLE_ROWS,
                         adapt_segmenter, format_summary, lambda_tuning_objective,
                         make_margins, run_experiment)
from .kitti import load_kitti_scan, save_kitti_scan, scan_output_paths, scan_paths
from .metrics import distribution_shift_report, write_shift_csv
from .network import init_model, load_model, save_model
from .scenes import SceneSpec, source_domain_spec, synth_scene, target_domain_spec
from .training import evaluate_scenes, prepare_scene, pretrain
from .util import named_rng


def _load_scenes(root, limit=None):
    paths = scan_paths(root)
    if not paths:
        raise SystemExit(f"no scans found under {root}")
    if limit:
        paths = paths[:limit]
    return [prepare_scene(load_kitti_scan(b, l), scan_id=sid)
            for sid, b, l in paths]


def _num_classes(scenes, override):
    if override:
        return override
    return int(max(s.cloud.labels.max() for s in scenes)) + 1


def cmd_synth(args):
    for i in range(args.scans):
        seed = args.seed * 1009 + i
        spec = (target_domain_spec(seed, args.points) if args.domain == "target"
                else source_domain_spec(seed, args.points))
        if args.classes != len(spec.frequencies):
            freq = np.ones(args.classes) / args.classes
            spec = SceneSpec(frequencies=freq, num_points=args.points, seed=seed)
        cloud = synth_scene(spec)
        bin_path, label_path = scan_output_paths(args.out, f"00/{i:06d}")
        save_kitti_scan(cloud, bin_path, label_path)
    print(f"wrote {args.scans} scans under {args.out}")


def cmd_pretrain(args):
    scenes = _load_scenes(args.data)
    c = _num_classes(scenes, args.classes)
    model = init_model(c, seed=args.seed)
    result = pretrain(model, scenes, loss=args.loss, lambda_rlt=args.lambda_rlt,
                      steps=args.steps, batch_points=args.batch_points,
                      lr=args.lr, seed=args.seed)
    save_model(result.model, args.out)
    print(f"pretrained ({args.loss}) for {args.steps} steps; "
          f"final loss {result.loss_trace[-1]:.4f}; saved to {args.out}")


def cmd_attack(args):
    model = load_model(args.model)
    cfg = AttackConfig(base_epsilon=args.epsilon, steps=args.steps,
                       gamma_min=args.gamma_min, gamma_max=args.gamma_max,
                       d_near=args.d_near, d_far=args.d_far,
                       selection_perc=args.selection_perc,
                       flip_fraction=args.flip_fraction, seed=args.seed)
    manifest = contaminate_dataset(args.in_root, args.out, model, cfg)
    manifest_path = args.manifest or str(Path(args.out) / "manifest.txt")
    write_manifest(manifest, manifest_path)
    ok = sum(1 for r in manifest.records if r.status == "ok")
    print(f"contaminated {ok}/{len(manifest.records)} scans; "
          f"{manifest.total_flips()} labels flipped; manifest at {manifest_path}")


def cmd_train_decoder(args):
    scenes = _load_scenes(args.data)
    rng = named_rng(args.seed, "cli-decoder")
    clouds = []
    for s in scenes:
        take = min(args.points_per_cloud, len(s))
        clouds.append(s.cloud.select(rng.choice(len(s), size=take, replace=False)))
    model = init_decoder(latent_dim=args.latent_dim, coarse_points=args.coarse_points,
                         seed=args.seed)
    result = train_decoder(model, clouds, epochs=args.epochs,
                           kl_weight=args.kl_weight, lr=args.lr, seed=args.seed)
    save_decoder(result.model, args.out)
    print(f"decoder trained {args.epochs} epochs; loss "
          f"{result.loss_trace[0]:.4f} -> {result.loss_trace[-1]:.4f}; "
          f"saved to {args.out}")


def cmd_adapt(args):
    source = _load_scenes(args.source)
    target = _load_scenes(args.target)
    model = load_model(args.model)
    decoder = load_decoder(args.decoder) if args.decoder else None
    p = PipelineParams(adapt_steps=args.steps)
    lam, margins = make_margins(source, model.num_classes, args.rlt, p)
    adapted = adapt_segmenter(model, source, target, p, lam, margins,
                              args.seed, decoder=decoder)
    save_model(adapted, args.out)
    print(f"adapted for {args.steps} steps; saved to {args.out}")


def cmd_finetune(args):
    scenes = _load_scenes(args.data)
    model = load_model(args.model)
    data = make_finetune_split([s.cloud for s in scenes], fraction=args.clean_frac,
                               seed=args.seed,
                               features=[s.features for s in scenes])
    tuned = fine_tune(model, data, patience=args.patience, seed=args.seed)
    save_model(tuned, args.out)
    print(f"fine-tuned on {args.clean_frac:.0%} clean data; saved to {args.out}")


def cmd_tune_lambda(args):
    if args.data:
        scenes = _load_scenes(args.data)
        split = max(1, len(scenes) - max(1, len(scenes) // 4))
        train_scenes, val_scenes = scenes[:split], scenes[split:] or scenes[-1:]
        c = _num_classes(scenes, args.classes)
    else:
        train_scenes = [prepare_scene(synth_scene(source_domain_spec(
            args.seed * 31 + i, args.points))) for i in range(3)]
        val_scenes = [prepare_scene(synth_scene(source_domain_spec(
            args.seed * 31 + 97, args.points)))]
        c = 8
    objective = lambda_tuning_objective(train_scenes, val_scenes, c,
                                        epochs=args.epochs, seed=args.seed)
    best, trace = optimize_lambda(objective, budget=args.budget, seed=args.seed)
    if args.trace:
        Path(args.trace).parent.mkdir(parents=True, exist_ok=True)
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lambda", "value", "incumbent_lambda",
                        "incumbent_value"])
            for i, e in enumerate(trace):
                w.writerow([i, repr(e.lam), repr(e.value),
                            repr(e.incumbent_lam), repr(e.incumbent_value)])
        print(f"trace written to {args.trace}")
    print(f"best lambda = {best:.4f} "
          f"(objective {trace[-1].incumbent_value:.4f}, {len(trace)} evaluations)")


def cmd_eval(args):
    scenes = _load_scenes(args.data)
    model = load_model(args.model)
    cm, iou, m = evaluate_scenes(model, scenes)
    for y, v in enumerate(iou):
        print(f"class {y:2d}: IoU = {v:.4f}")
    print(f"mIoU = {m:.4f}")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "iou"])
            for y, v in enumerate(iou):
                w.writerow([y, repr(float(v))])
            w.writerow(["miou", repr(float(m))])


def cmd_report(args):
    def tally(root):
        labels = np.concatenate([load_kitti_scan(b, l).labels
                                 for _, b, l in scan_paths(root)])
        return labels
    before_labels = tally(args.before)
    after_labels = tally(args.after)
    c = args.classes or int(max(before_labels.max(), after_labels.max())) + 1
    rows = distribution_shift_report(class_histogram(before_labels, c),
                                     class_histogram(after_labels, c))
    write_shift_csv(rows, args.out)
    print(f"shift report ({len(rows)} classes) written to {args.out}")


def cmd_run(args):
    seeds = tuple(int(s) for s in args.seeds.split(","))
    rows = tuple(args.rows.split(",")) if args.rows else tuple(
        r.name for r in TABLE_ROWS)
    cfg = ExperimentConfig(
        scenario=args.scenario, seeds=seeds, scan_points=args.points,
        num_source=args.source_scans, num_target=args.target_scans,
        num_eval=args.eval_scans,
        attack=AttackConfig(base_epsilon=args.epsilon,
                            selection_perc=args.selection_perc,
                            flip_fraction=args.flip_fraction),
        attacked_rows=rows, output_dir=args.out, workers=args.workers,
        params=PipelineParams(adapt_steps=args.adapt_steps,
                              pretrain_steps=args.pretrain_steps))
    result = run_experiment(cfg)
    print(format_summary(result))
    if args.out:
        print(f"results written under {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advseg",
        description="Adversarial corruption and defense toolkit for "
                    "cross-domain point-cloud segmentation")
    parser.add_argument("--config", help="INI file with per-verb default flags")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate synthetic labeled scans")
    p.add_argument("--out", required=True)
    p.add_argument("--scans", type=int, default=3)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pre-train the segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=("ce", "rlt"), default="rlt")
    p.add_argument("--lambda", dest="lambda_rlt", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=260)
    p.add_argument("--batch-points", type=int, default=4096)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--classes", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("attack", help="contaminate a dataset tree")
    p.add_argument("--in", dest="in_root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--gamma-min", type=float, default=0.2)
    p.add_argument("--gamma-max", type=float, default=1.0)
    p.add_argument("--d-near", type=float, default=5.0)
    p.add_argument("--d-far", type=float, default=45.0)
    p.add_argument("--selection-perc", type=float, default=0.5)
    p.add_argument("--flip-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-decoder", help="train the restoration decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--kl-weight", type=float, default=0.01)
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--coarse-points", type=int, default=256)
    p.add_argument("--points-per-cloud", type=int, default=1024)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_decoder)

    p = sub.add_parser("adapt", help="teacher-student cross-domain adaptation")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--decoder", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--rlt", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("finetune", help="clean-data fine-tuning of the last layers")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clean-frac", type=float, default=0.05)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("tune-lambda", help="Bayesian optimization of the loss blend")
    p.add_argument("--budget", type=int, default=20)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--data", default=None)
    p.add_argument("--points", type=int, default=4000)
    p.add_argument("--classes", type=int, default=0)
    p.add_argument("--trace", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tune_lambda)

    p = sub.add_parser("eval", help="per-class IoU and mIoU of a model on scans")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="class-distribution shift between two trees")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full experiment grid")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", default="0")
    p.add_argument("--scenario", default="synthetic")
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--source-scans", type=int, default=3)
    p.add_argument("--target-scans", type=int, default=2)
    p.add_argument("--eval-scans", type=int, default=2)
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--selection-perc", type=float, default=0.5)
    p.add_argument("--flip-fraction", type=float, default=0.5)
    p.add_argument("--rows", default=None)
    p.add_argument("--adapt-steps", type=int, default=120)
    p.add_argument("--pretrain-steps", type=int, default=260)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_run)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fold config-file values in as per-verb defaults; flags still win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    cfg_path = argv[i + 1]
    rest = argv[:i] + argv[i + 2:]
    if not rest:
        return rest
    verb = rest[0]
    ini = configparser.ConfigParser()
    ini.read(cfg_path)
    if ini.has_section(verb):
        injected = []
        for key, value in ini.items(verb):
            flag = f"--{key.replace('_', '-')}"
            if flag not in rest:
                injected.extend([flag, value])
        rest = [verb] + injected + rest[1:]
    return rest


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config(parser, argv)
    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
