"""``mddlab`` command line: synth, pretrain, adapt, eval, ablate, plot and bench."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import config as C
from .adaptation import DivergenceError, EmptyDatasetError
from .data import DataError, InvalidSpecError, load_dataset, save_dataset
from .evaluation import (FREEZE_CONFIGS, AblationSpec, MalformedCurvesError, evaluate_dataset,
                         export_curves, read_curves_csv, run_ablation, write_ablation_csv)
from .model import IncompatibleCheckpointError, UnknownBlockError, load_checkpoint
from .pipeline import (build_splits, make_evaluator, run_adapt, run_benchmark, run_pretrain,
                       write_json)
from .plotting import plot_ablation, plot_learning_curves

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
log = logging.getLogger("mddlab")


def _config(args):
    overrides = {"seed": args.seed, "out": args.out}
    if getattr(args, "xi", None) is not None:
        overrides["adapt.early_stop_threshold"] = args.xi
    if getattr(args, "source", None) is not None:
        overrides["data.source"] = args.source
    if getattr(args, "target", None) is not None:
        overrides["data.target"] = args.target
    if getattr(args, "eval_data", None) is not None:
        overrides["data.eval"] = args.eval_data
    cfg = C.load(args.config, args.preset, overrides)
    if len(cfg.seeds) == 1:
        cfg = cfg.for_seed(cfg.seed)
    cfg.validate()
    return cfg


def _out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out)
    return out


def cmd_synth(args):
    cfg = _config(args)
    out = Path(cfg.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory {out.parent} does not exist")
    out = _out(cfg)
    splits = build_splits(cfg)
    save_dataset(splits.source, out / "source")
    save_dataset(splits.target, out / "target")
    save_dataset(splits.target_eval, out / "target_test")
    print(f"wrote {out / 'source'} ({len(splits.source)} slices), {out / 'target'} "
          f"({len(splits.target)} slices), {out / 'target_test'}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _config(args)
    out = _out(cfg)
    splits = build_splits(cfg)
    _, curve = run_pretrain(cfg, splits, out)
    print(f"pretrained {cfg.pretrain.epochs} epochs; target Dice {curve[-1].dice_mean:.4f}; "
          f"checkpoint {out / 'pretrained.ckpt'}")
    return EXIT_OK


def cmd_adapt(args):
    cfg = _config(args)
    out = _out(cfg)
    model, _ = load_checkpoint(args.checkpoint, expect_config=cfg.model)
    splits = build_splits(cfg)
    res = run_adapt(cfg, model, splits, out, run_id=f"seed{cfg.seed}")
    export_curves(res.curve, out)
    print(f"stop_reason={res.stop_reason} after {len(res.steps)} steps; target Dice "
          f"{res.curve[0].dice_mean:.4f} -> {res.curve[-1].dice_mean:.4f}")
    return EXIT_DIVERGENCE if res.stop_reason == "divergence" else EXIT_OK


def cmd_eval(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(args.dataset)
    report = {"dataset": str(args.dataset), "checkpoints": []}
    rows = []
    for ck in args.checkpoint:
        model, header = load_checkpoint(ck)
        res = evaluate_dataset(model, ds, model.config.num_classes)
        report["checkpoints"].append({"checkpoint": str(ck), "phase": header["phase"],
                                      "dice_per_class": res["dice_per_class"],
                                      "dice_mean": res["dice_mean"],
                                      "per_volume": res["per_volume"]})
        for v, dv in zip(ds.volumes, res["per_volume"]):
            rows.append([str(ck), v["volume_id"], f"{dv:.6g}"])
        print(f"{ck}: mean Dice {res['dice_mean']:.4f} "
              f"({', '.join(f'{d:.4f}' for d in res['dice_per_class'])})")
    write_json(report, out / "metrics.json")
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "volume_id", "dice_mean"])
        w.writerows(rows)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _config(args)
    out = _out(cfg)
    model, _ = load_checkpoint(args.checkpoint, expect_config=cfg.model)
    configs = dict(FREEZE_CONFIGS)
    if args.freeze:
        configs = {name: name.split("+") for name in args.freeze}
    spec = AblationSpec(configs, args.probe_epochs or [2, 6, 12])
    splits = build_splits(cfg)
    table = run_ablation(model.state_dict(), model.config, spec, splits.source, splits.target,
                         cfg.adapt, make_evaluator(splits))
    write_ablation_csv(table, spec.probe_epochs, out / "ablation.csv")
    plot_ablation(table, spec.probe_epochs, out / "ablation.svg")
    for name, row in table.items():
        print(name, " ".join(f"{row[e]:.4f}" for e in spec.probe_epochs))
    return EXIT_OK


def cmd_plot(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for path in args.curves:
        records = read_curves_csv(path)
        stem = Path(path).parent.name or Path(path).stem
        fig = plot_learning_curves(records, out / f"{stem}_{Path(path).stem}.{args.format}",
                                   title=args.title or stem)
        print(f"wrote {fig}")
    return EXIT_OK


def cmd_bench(args):
    cfg = _config(args)
    res = run_benchmark(cfg, cfg.out, title=args.title)
    for s in res.summaries:
        print(f"seed {s['seed']}: {s['baseline_dice']:.4f} -> {s['final_dice']:.4f} "
              f"({s['stop_reason']}, epoch {s['stop_epoch']})")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--preset", choices=C.PRESETS, help="named profile (default desk)")
    common.add_argument("-v", "--verbose", action="store_true")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--source", help="labelled source dataset directory")
    data.add_argument("--target", help="target dataset directory (labels are not read)")
    data.add_argument("--eval-data", dest="eval_data", help="labelled target evaluation dataset")

    p = argparse.ArgumentParser(prog="mddlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write synthetic source/target datasets")
    sub.add_parser("pretrain", parents=[common, data], help="train the U-Net on source")
    a = sub.add_parser("adapt", parents=[common, data], help="MDD fine-tuning from a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--xi", type=float, help="early-stop threshold on the adversary source loss")
    e = sub.add_parser("eval", parents=[common], help="Dice of checkpoints on a dataset")
    e.add_argument("--checkpoint", required=True, action="append")
    e.add_argument("--dataset", required=True)
    b = sub.add_parser("ablate", parents=[common, data], help="freeze-configuration ablation")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--freeze", action="append",
                   help="freeze config, blocks joined by '+' (repeatable)")
    b.add_argument("--probe-epochs", dest="probe_epochs", type=int, nargs="+")
    pl = sub.add_parser("plot", parents=[common], help="learning curves from curves.csv files")
    pl.add_argument("curves", nargs="+")
    pl.add_argument("--format", default="svg", choices=["svg", "pdf", "png"])
    pl.add_argument("--title")
    bn = sub.add_parser("bench", parents=[common], help="multi-seed pretrain + adapt benchmark")
    bn.add_argument("--title")
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "ablate": cmd_ablate, "plot": cmd_plot, "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (C.ConfigError, InvalidSpecError, IncompatibleCheckpointError,
            UnknownBlockError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptyDatasetError, MalformedCurvesError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
