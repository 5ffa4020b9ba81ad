"""Command line entry point: generate | train | eval | bench | plot.

Every run directory is self-describing: the resolved configuration,
scenario manifest and seeds are serialized before any work starts, so a
run can be reproduced from its directory alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import generate_synthetic_dataset, load_voc_style, save_dataset
from .errors import ConfigurationError, DataError, IncsegError
from .evaluation import MetricsRecord, emit_curves, evaluate_model
from .model import load_checkpoint
from .scenario import IncrementalScenario, parse_scenario, shuffled_order
from .trainer import TrainConfig, run_scenario


def _add_common_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="synthetic",
                   help="'synthetic' or a path to a VOC-style dataset directory")
    p.add_argument("--classes", type=int, default=6,
                   help="foreground class count for synthetic data")
    p.add_argument("--per-class", type=int, default=40,
                   help="synthetic images anchored per class")
    p.add_argument("--size", type=int, default=64, help="synthetic image size")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", default="2-2", help="incremental spec 'X-Y'")
    p.add_argument("--mode", default="overlapped", choices=["overlapped", "disjoint"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--lambda-c", type=float, default=None)
    p.add_argument("--lambda-r", type=float, default=None)
    p.add_argument("--lambda-lr", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--proposals", type=int, default=None,
                   help="mask proposal capacity N")
    p.add_argument("--memory", type=int, nargs="?", const=-1, default=None,
                   metavar="M", help="enable rehearsal with capacity M "
                                     "(bare flag: 2x the class count)")
    p.add_argument("--freeze", action="store_true",
                   help="freeze historical parameters after the base step")
    p.add_argument("--finetune", action="store_true",
                   help="uniform base learning rate for everything (naive baseline)")
    p.add_argument("--no-pseudo", action="store_true",
                   help="disable pseudo-labelling of unknown regions")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--order-seed", type=int, default=None,
                   help="shuffle the class order with this seed")
    p.add_argument("--config", default=None,
                   help="JSON file of TrainConfig fields; flags override it")
    p.add_argument("--resume", action="store_true",
                   help="reuse existing per-step checkpoints in the run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="incseg",
        description="Desk-scale class-incremental semantic segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset to disk")
    _add_common_data_flags(g)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="run an incremental training scenario")
    _add_common_data_flags(t)
    _add_train_flags(t)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-data", default=None,
                   help="VOC-style directory for evaluation (synthetic default: "
                        "a held-out split from a derived seed)")
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="evaluate a step checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="VOC-style dataset directory")
    e.add_argument("--out", default=None, help="optional metrics JSON path")
    e.add_argument("--save-predictions", default=None, metavar="DIR",
                   help="also write raw predicted label masks as PNGs")

    b = sub.add_parser("bench", help="directional forgetting benchmark: "
                                     "fine-tune vs freeze vs full method")
    _add_common_data_flags(b)
    b.add_argument("--scenario", default="2-2")
    b.add_argument("--epochs", type=int, default=25)
    b.add_argument("--lr0", type=float, default=1e-3,
                   help="shared base learning rate (desk-scale default)")
    b.add_argument("--lambda-lr", type=float, default=1.0,
                   help="decay weight of the historical-parameter rate "
                        "(desk-scale default; every method shares it)")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot", help="re-emit step curves from a run directory")
    p.add_argument("--run", required=True)
    return parser


def _resolve_train_config(args, seed: int) -> TrainConfig:
    base: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            base = json.load(f)
    cfg = TrainConfig.from_dict({**TrainConfig().to_dict(), **base})
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr0,
        "lambda_c": args.lambda_c, "lambda_r": args.lambda_r,
        "lambda_lr": args.lambda_lr, "tau": args.tau,
        "num_proposals": args.proposals, "memory_capacity": args.memory,
    }
    values = cfg.to_dict()
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    if args.freeze and args.finetune:
        raise ConfigurationError("--freeze and --finetune are mutually exclusive")
    if args.freeze:
        values["freeze_mode"] = "freeze"
    if args.finetune:
        values["freeze_mode"] = "finetune"
    if args.no_pseudo:
        values["pseudo_labels"] = False
    if args.no_augment:
        values["augment"] = False
    values["seed"] = seed
    return TrainConfig.from_dict(values)


def _load_train_data(args, seed: int):
    if args.data == "synthetic":
        train = generate_synthetic_dataset(args.classes, args.per_class,
                                           image_size=args.size, seed=seed)
        val = generate_synthetic_dataset(args.classes,
                                         max(args.per_class // 4, 4),
                                         image_size=args.size, seed=seed + 10001)
        return train, val
    train = load_voc_style(args.data)
    val = load_voc_style(args.val_data) if getattr(args, "val_data", None) else None
    return train, val


def cmd_generate(args) -> int:
    dataset = generate_synthetic_dataset(args.classes, args.per_class,
                                         image_size=args.size, seed=args.seed)
    save_dataset(dataset, args.out, force=args.force)
    print(f"wrote {len(dataset)} samples ({args.classes} classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    if os.path.isdir(args.out) and os.listdir(args.out) and not (args.force or args.resume):
        raise ConfigurationError(f"run directory {args.out} is not empty; "
                                 "pass --force or --resume")
    os.makedirs(args.out, exist_ok=True)
    config = _resolve_train_config(args, args.seed)
    train, val = _load_train_data(args, args.seed)
    order = shuffled_order(train.num_classes, args.order_seed) \
        if args.order_seed is not None else None
    scenario = parse_scenario(args.scenario, train.num_classes,
                              class_order=order, mode=args.mode)
    run_config = {"scenario": args.scenario, "mode": args.mode, "seed": args.seed,
                  "data": args.data, "classes": train.num_classes,
                  "per_class": args.per_class, "size": args.size,
                  "order_seed": args.order_seed, "train_config": config.to_dict()}
    with open(os.path.join(args.out, "run_config.json"), "w") as f:
        json.dump(run_config, f, indent=2)
    result = run_scenario(scenario, train, config, args.out, val_set=val,
                          resume=args.resume)
    for record in result.records:
        print(f"step {record.step}: base={record.miou_base:.4f} "
              f"novel={record.miou_novel:.4f} all={record.miou_all:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if meta["scenario"] is None:
        raise ConfigurationError(f"{args.checkpoint} carries no scenario manifest")
    scenario = IncrementalScenario.from_manifest(meta["scenario"])
    dataset = load_voc_style(args.data, num_classes=scenario.total_classes)
    record = evaluate_model(model, dataset, scenario, meta["step"])
    print(f"step {record.step}: base={record.miou_base:.4f} "
          f"novel={record.miou_novel:.4f} all={record.miou_all:.4f}")
    if args.out:
        record.save(args.out)
    if args.save_predictions:
        import numpy as np
        import torch
        from PIL import Image

        os.makedirs(args.save_predictions, exist_ok=True)
        for s in dataset:
            x = torch.from_numpy(s.image[None]).permute(0, 3, 1, 2).float()
            pred = model.predict(x)[0].numpy().astype(np.uint8)
            Image.fromarray(pred, mode="L").save(
                os.path.join(args.save_predictions, f"{s.id}.png"))
    return 0


BENCH_METHODS = {
    "finetune": dict(freeze_mode="finetune", pseudo_labels=False,
                     lambda_c=0.0, lambda_r=0.0),
    "freeze": dict(freeze_mode="freeze", pseudo_labels=True,
                   lambda_c=0.0, lambda_r=0.0),
    "full": dict(freeze_mode="flexible", pseudo_labels=True),
}


def run_bench(out_dir: str, scenario_spec: str = "2-2", classes: int = 6,
              per_class: int = 40, size: int = 64, epochs: int = 25,
              seed: int = 0, lr0: float = 1e-3, lambda_lr: float = 1.0) -> dict:
    """Train the naive fine-tune baseline, the freeze ablation, and the full
    method on one synthetic scenario and report final grouped mIoU.

    All three methods share lr0/epochs/seed so the comparison isolates
    the anti-forgetting machinery. The defaults are sized for a tiny
    from-scratch model: lr0 above the library default and a decay weight
    that leaves historical parameters slow but not inert.
    """
    os.makedirs(out_dir, exist_ok=True)
    train = generate_synthetic_dataset(classes, per_class, image_size=size, seed=seed)
    val = generate_synthetic_dataset(classes, max(per_class // 4, 4),
                                     image_size=size, seed=seed + 10001)
    report: dict = {"scenario": scenario_spec, "classes": classes,
                    "per_class": per_class, "size": size, "epochs": epochs,
                    "seed": seed, "lr0": lr0, "lambda_lr": lambda_lr,
                    "methods": {}}
    for name, overrides in BENCH_METHODS.items():
        cfg = TrainConfig(**{**dict(epochs=epochs, seed=seed, lr0=lr0,
                                    lambda_lr=lambda_lr), **overrides})
        scenario = parse_scenario(scenario_spec, classes)
        result = run_scenario(scenario, train, cfg, os.path.join(out_dir, name),
                              val_set=val)
        step_rows = [{"step": r.step, "base": r.miou_base, "novel": r.miou_novel,
                      "all": r.miou_all} for r in result.records]
        report["methods"][name] = {"steps": step_rows, "final": step_rows[-1]}
    with open(os.path.join(out_dir, "bench_report.json"), "w") as f:
        json.dump(report, f, indent=2)
    return report


def _print_bench(report: dict) -> None:
    print(f"benchmark: scenario {report['scenario']}, {report['classes']} classes, "
          f"seed {report['seed']}")
    print(f"{'method':<10} {'base':>8} {'novel':>8} {'all':>8}")
    for name, entry in report["methods"].items():
        final = entry["final"]
        print(f"{name:<10} {final['base']:>8.4f} {final['novel']:>8.4f} "
              f"{final['all']:>8.4f}")


def cmd_bench(args) -> int:
    report = run_bench(args.out, scenario_spec=args.scenario, classes=args.classes,
                       per_class=args.per_class, size=args.size,
                       epochs=args.epochs, seed=args.seed, lr0=args.lr0,
                       lambda_lr=args.lambda_lr)
    _print_bench(report)
    return 0


def cmd_plot(args) -> int:
    metrics_dir = os.path.join(args.run, "metrics")
    if not os.path.isdir(metrics_dir):
        raise DataError(f"{args.run} holds no metrics directory")
    records = []
    for name in sorted(os.listdir(metrics_dir)):
        if name.startswith("step_") and name.endswith(".json"):
            with open(os.path.join(metrics_dir, name)) as f:
                records.append(MetricsRecord.from_dict(json.load(f)))
    records.sort(key=lambda r: r.step)
    emit_curves(records, os.path.join(metrics_dir, "curves.csv"),
                os.path.join(metrics_dir, "curves.png"))
    print(f"wrote curves for {len(records)} steps under {metrics_dir}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except IncsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
