#!/usr/bin/env python3
"""
Main Execution and Workflow Orchestration

Easy-to-use functions for every experiment type plus the command-line
interface:

    generate   synthetic targets CSV + FPFT feature file
    train      one configuration, test metrics, learning curve, checkpoint
    ablate     encoding × loss × OR grid
    distill    student-teacher self-distillation toy run
    report     CSV / markdown table and learning-curve SVG from results
    pyramid    feature pyramid × self-supervised pretraining grid on images
    continual  OWM vs plain Adam on the two-task continual toy
    sequential MRD1 → MRD2 → LF on a shared trunk

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numeric failure, 1 anything else.
"""

import argparse
import json
import os
import sys
from datetime import datetime

import pandas as pd

# Add scripts directory to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from ablation_workflow import (  # noqa: E402
    PYRAMID_COLUMNS,
    AblationWorkflow,
    curves_path_for,
    load_grid,
    save_ablation,
)
from analysis_tools import (  # noqa: E402
    REPORT_FORMATS,
    RunQualityValidator,
    mean_curve,
    plot_learning_curves,
    read_results_csv,
    write_report,
)
from config import ExperimentConfig, apply_seed_override, load_config  # noqa: E402
from data_io import (  # noqa: E402
    get_task,
    load_dataset,
    save_features_bin,
    save_targets_csv,
    split,
    synth_generate,
    synth_generate_images,
)
from errors import ConfigurationError, exit_code_for  # noqa: E402
from owm_optimizer import compare_continual  # noqa: E402
from ssl_distill import TOY_TEACHER_MOMENTUM, run_distill_toy, write_distill_log  # noqa: E402
from training_engine import save_checkpoint, train, train_sequential  # noqa: E402


def resolve_config(path=None):
    """Config from a JSON file, or the defaults; FP_SEED overrides the seed"""
    if path:
        return load_config(path)
    return apply_seed_override(ExperimentConfig())


def _seed(default):
    """FP_SEED, when set, wins over a --seed flag"""
    cfg = ExperimentConfig()
    cfg.seed = default
    return apply_seed_override(cfg).seed


def prepare_data(cfg, targets_csv=None, features_bin=None, images=False):
    """Dataset from files when given, otherwise synthetic from cfg.data; split with cfg.seed"""
    if targets_csv or features_bin:
        if not (targets_csv and features_bin):
            raise ConfigurationError("--targets and --features must be given together")
        data, rejected = load_dataset(targets_csv, features_bin)
        if rejected:
            print(f"⚠️ {len(rejected)} row(s) rejected (out of task range)")
        if data.task != cfg.task:
            cfg.task = data.task
            print(f"⚠️ Task taken from data file: {data.task}")
    elif images:
        data = synth_generate_images(get_task(cfg.task), cfg.data['n'], size=cfg.data['image_size'],
                                     noise=cfg.data['noise'], seed=cfg.seed)
    else:
        data = synth_generate(get_task(cfg.task), cfg.data['n'], d=cfg.data['dim'],
                              noise=cfg.data['noise'], seed=cfg.seed)
    splits = split(len(data), seed=cfg.seed)
    print(f"✅ Data ready: {len(data)} samples ({data.provenance}), split {splits.sizes()}")
    return data, splits


def run_generate(task, n, dim=32, noise=0.05, seed=0, out_prefix="data/synthetic", images=False, image_size=16):
    """Write ``<prefix>_targets.csv`` and ``<prefix>_features.bin``"""
    spec = get_task(task)
    if images:
        data = synth_generate_images(spec, n, size=image_size, noise=noise, seed=seed)
    else:
        data = synth_generate(spec, n, d=dim, noise=noise, seed=seed)
    targets_path = save_targets_csv(f"{out_prefix}_targets.csv", data.targets[:, 0], spec.name)
    features_path = save_features_bin(f"{out_prefix}_features.bin", data.inputs)
    print(f"✅ Generated {n} {spec.name} samples")
    print(f"   Targets: {targets_path}")
    print(f"   Features: {features_path} (shape {list(data.inputs.shape)})")
    return targets_path, features_path


def run_training(cfg, out="results/train.csv", curves=None, checkpoint=None, targets_csv=None,
                 features_bin=None, verbose=True):
    """Train one configuration and write its results row, curve, quality report and checkpoint"""
    print("🚀 Starting training run")
    cfg.display_configuration()
    data, splits = prepare_data(cfg, targets_csv, features_bin)
    model, record = train(cfg, data, splits, verbose=verbose)

    _, curves_csv = save_ablation([record], out)
    print(f"✅ Results saved to {out} (curves: {curves_csv})")
    if curves:
        plot_learning_curves(record.curve, curves, title=f"{cfg.task} learning curve")
        print(f"✅ Learning curve saved to {curves}")
    if checkpoint:
        save_checkpoint(model, cfg, checkpoint)
        print(f"✅ Checkpoint saved to {checkpoint}")

    validator = RunQualityValidator()
    validator.validate_records([record], names=[cfg.task])
    validator.generate_quality_report(f"{os.path.splitext(out)[0]}_quality.json")
    return model, record


def run_ablation(cfg, grid=None, out="results/ablation.csv", max_workers=4, targets_csv=None, features_bin=None):
    """Encoding × loss × OR sweep; writes the results CSV and its curves CSV"""
    data, splits = prepare_data(cfg, targets_csv, features_bin)
    workflow = AblationWorkflow(cfg, max_workers=max_workers)
    records = workflow.ablate(data, splits, grid)
    results_path, curves_path = save_ablation(records, out)
    print(f"✅ Ablation results saved to {results_path}")
    print(f"✅ Learning curves saved to {curves_path}")
    validator = RunQualityValidator()
    validator.validate_records(records, names=[f"cell_{i}" for i in range(len(records))])
    validator.generate_quality_report(f"{os.path.splitext(out)[0]}_quality.json")
    return records


def run_pyramid(cfg, out="results/pyramid.csv", max_workers=4):
    """FPN × pretraining sweep on synthetic images"""
    data, splits = prepare_data(cfg, images=True)
    workflow = AblationWorkflow(cfg, max_workers=max_workers)
    records = workflow.ablate_pyramid(data, splits)
    results_path, curves_path = save_ablation(records, out, columns=PYRAMID_COLUMNS)
    print(f"✅ Pyramid ablation saved to {results_path} (curves: {curves_path})")
    return records


def run_distill(steps=200, out_dim=8, tps=0.1, tpt=0.04, teacher_momentum=TOY_TEACHER_MOMENTUM,
                center_momentum=0.9, seed=0, out="results/distill.csv"):
    if steps < 1:
        raise ConfigurationError(f"distillation needs at least one step, got {steps}")
    print("🚀 Starting self-distillation toy run")
    result = run_distill_toy(steps=steps, out_dim=out_dim, tps=tps, tpt=tpt, teacher_momentum=teacher_momentum,
                             center_momentum=center_momentum, seed=seed)
    write_distill_log(result["records"], out)
    diag = result["diagnostics"]
    print("\n📊 Distillation Summary:")
    print(f"   First loss: {result['records'][0]['loss']:.4f}")
    print(f"   Last loss: {result['records'][-1]['loss']:.4f}")
    print(f"   Mean teacher entropy: {diag['entropy']:.4f} (max {diag['max_entropy']:.4f})")
    print(f"   Mean output std: {diag['mean_std']:.4f}")
    if diag['entropy'] <= 0.1 * diag['max_entropy']:
        print("⚠️ Teacher distribution has collapsed")
    print(f"✅ Step log saved to {out}")
    return result


def run_report(results_csv, fmt="markdown", out=None, curves=None):
    """Re-emit a results CSV as csv/markdown, optionally with the mean learning curve as SVG"""
    frame = read_results_csv(results_csv)
    if out is None:
        stem = os.path.splitext(results_csv)[0]
        out = f"{stem}.md" if fmt == "markdown" else f"{stem}_report.csv"
    write_report(frame, out, fmt=fmt)
    print(f"✅ Report saved to {out} ({len(frame)} row(s))")
    if curves:
        source = curves_path_for(results_csv)
        if not os.path.exists(source):
            raise ConfigurationError(f"learning curves {source} not found next to {results_csv}")
        table = pd.read_csv(source)
        per_cell = [group.to_dict("records") for _, group in table.groupby("cell", sort=True)]
        plot_learning_curves(mean_curve(per_cell), curves, title="Mean learning curve")
        print(f"✅ Learning curve saved to {curves}")
    return out


def run_continual(seeds=10, epochs=10, out="results/continual.json"):
    print(f"🚀 Continual-learning toy over {seeds} seeds")
    result = compare_continual(seeds=range(seeds), epochs=epochs)
    print("\n📊 Task-A loss after training task B (median):")
    print(f"   Plain Adam: {result['median_task_a_plain']:.4f}")
    print(f"   OWM Adam:   {result['median_task_a_owm']:.4f}")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, 'w') as f:
        json.dump({'timestamp': datetime.now().isoformat(), **result}, f, indent=2)
    print(f"✅ Continual results saved to {out}")
    return result


def run_sequential(cfg, order=("MRD1", "MRD2", "LF"), out="results/sequential.json"):
    datasets = {}
    for i, task in enumerate(order):
        data = synth_generate(get_task(task), cfg.data['n'], d=cfg.data['dim'], noise=cfg.data['noise'],
                              seed=cfg.seed + i)
        datasets[task] = (data, split(len(data), seed=cfg.seed + i))
    _, summary = train_sequential(cfg, datasets, order=list(order))
    payload = {
        'timestamp': datetime.now().isoformat(),
        'config': cfg.to_flat_dict(),
        'order': summary['order'],
        'after_task': {t: r.to_dict() for t, r in summary['after_task'].items()},
        'final': {t: r.to_dict() for t, r in summary['final'].items()},
        'forgetting': summary['forgetting'],
    }
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, 'w') as f:
        json.dump(payload, f, indent=2)
    print(f"✅ Sequential results saved to {out}")
    return summary


# ---------------------------------------------------------------------------
# command line

def build_parser():
    parser = argparse.ArgumentParser(description="Training-strategy harness for eyelid measurement regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic targets and features")
    p.add_argument("--task", default="MRD1")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", default="data/synthetic")
    p.add_argument("--images", action="store_true", help="write 1×S×S images instead of feature vectors")
    p.add_argument("--image-size", type=int, default=16)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config")
    p.add_argument("--targets")
    p.add_argument("--features")
    p.add_argument("--out", default="results/train.csv")
    p.add_argument("--curves", help="learning-curve SVG path")
    p.add_argument("--checkpoint", help=".npz checkpoint path")

    p = sub.add_parser("ablate", help="encoding × loss × OR grid")
    p.add_argument("--config")
    p.add_argument("--grid")
    p.add_argument("--targets")
    p.add_argument("--features")
    p.add_argument("--out", default="results/ablation.csv")
    p.add_argument("--workers", type=int, default=4)

    p = sub.add_parser("distill", help="self-distillation toy run")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out-dim", type=int, default=8)
    p.add_argument("--tps", type=float, default=0.1)
    p.add_argument("--tpt", type=float, default=0.04)
    p.add_argument("--l", dest="teacher_momentum", type=float, default=TOY_TEACHER_MOMENTUM)
    p.add_argument("--m", dest="center_momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results/distill.csv")

    p = sub.add_parser("report", help="table and learning curve from a results CSV")
    p.add_argument("--in", dest="results", required=True)
    p.add_argument("--format", choices=REPORT_FORMATS, default="markdown")
    p.add_argument("--out")
    p.add_argument("--curves", help="learning-curve SVG path")

    p = sub.add_parser("pyramid", help="feature pyramid × pretraining grid on images")
    p.add_argument("--config")
    p.add_argument("--out", default="results/pyramid.csv")
    p.add_argument("--workers", type=int, default=4)

    p = sub.add_parser("continual", help="OWM continual-learning toy")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", default="results/continual.json")

    p = sub.add_parser("sequential", help="tasks trained one after another on a shared trunk")
    p.add_argument("--config")
    p.add_argument("--order", nargs="+", default=["MRD1", "MRD2", "LF"])
    p.add_argument("--out", default="results/sequential.json")
    return parser


def dispatch(args):
    if args.command == "generate":
        seed = _seed(args.seed)
        run_generate(args.task, args.n, args.dim, args.noise, seed, args.out_prefix, args.images, args.image_size)
    elif args.command == "train":
        run_training(resolve_config(args.config), args.out, args.curves, args.checkpoint, args.targets, args.features)
    elif args.command == "ablate":
        grid = load_grid(args.grid) if args.grid else None
        run_ablation(resolve_config(args.config), grid, args.out, args.workers, args.targets, args.features)
    elif args.command == "distill":
        seed = _seed(args.seed)
        run_distill(args.steps, args.out_dim, args.tps, args.tpt, args.teacher_momentum, args.center_momentum,
                    seed, args.out)
    elif args.command == "report":
        run_report(args.results, args.format, args.out, args.curves)
    elif args.command == "pyramid":
        run_pyramid(resolve_config(args.config), args.out, args.workers)
    elif args.command == "continual":
        run_continual(args.seeds, args.epochs, args.out)
    elif args.command == "sequential":
        run_sequential(resolve_config(args.config), tuple(args.order), args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except Exception as exc:
        print(f"❌ {exc}")
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
