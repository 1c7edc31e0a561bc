"""End-to-end runs: datasets for a config, pre-training, adaptation and the multi-seed benchmark."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import AdaptationResult, pretrain, run_adaptation
from .config import RunConfig, save as save_config
from .data import (DomainShiftSpec, MissingLabelsError, SliceDataset, generate_synthetic_pair,
                   generate_volumes, load_dataset)
from .evaluation import evaluate_dataset, export_curves
from .losses import LossReport
from .model import ModelSplit, build_model, save_checkpoint

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "phase", "dice_target", "dice_source", "loss_c", "loss_a_src",
                   "stop_flag"]
EVAL_SEED_OFFSET = 10_000  # held-out evaluation volumes use disjoint geometry streams


@dataclass
class Splits:
    source: SliceDataset  # labelled
    target: SliceDataset  # images only for training
    target_eval: SliceDataset  # labelled, evaluation only
    source_eval: SliceDataset | None = None


def build_splits(cfg: RunConfig) -> Splits:
    """Load the datasets named in ``cfg.data`` or render the synthetic pair."""
    d = cfg.data
    size = tuple(cfg.model.input_size)
    if d.source is not None or d.target is not None:
        if d.source is None or d.target is None:
            raise MissingLabelsError("data.source and data.target must be given together")
        source = load_dataset(d.source)
        target = load_dataset(d.target, with_eval_labels=True)
        if d.eval is not None:
            target_eval = load_dataset(d.eval)
        else:
            target_eval = SliceDataset(target.images, target.eval_labels, target.volumes,
                                       target.domain, target.meta)
        if target_eval.labels is None:
            raise MissingLabelsError("no labelled target split available for evaluation")
        return Splits(source, SliceDataset(target.images, None, target.volumes, target.domain,
                                           target.meta), target_eval)
    pair = generate_synthetic_pair(d.n_source, d.n_target, d.shift, d.geometry_seed, size,
                                   d.depth)
    eval_seed = d.geometry_seed + EVAL_SEED_OFFSET
    target_eval = generate_volumes(d.n_eval, d.shift, eval_seed, size, d.depth,
                                   domain="target")
    source_eval = generate_volumes(d.n_eval, DomainShiftSpec.identity(d.shift.seed), eval_seed,
                                   size, d.depth, domain="source")
    return Splits(pair.source, pair.target, target_eval, source_eval)


def make_evaluator(splits: Splits, num_classes=3):
    def evaluate(model):
        res = evaluate_dataset(model, splits.target_eval, num_classes)
        if splits.source_eval is not None:
            res["dice_source"] = evaluate_dataset(model, splits.source_eval,
                                                  num_classes)["dice_mean"]
        return res
    return evaluate


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_metrics_csv(records, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in (r.epoch, r.phase, r.dice_mean, r.dice_source,
                                          r.loss_c, r.loss_a_src, r.stopped)])
    return path


def write_steps_csv(steps, path, phase="adapt"):
    with Path(path).open("w") as fh:
        fh.write(LossReport.CSV_HEADER + "\n")
        for s in steps:
            fh.write(s.losses.csv_row(s.step_index, phase) + "\n")
    return path


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def run_pretrain(cfg: RunConfig, splits: Splits, out_dir, run_id="run"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model, cfg.seed)
    model, curve = pretrain(model, splits.source, cfg.pretrain, make_evaluator(splits), run_id)
    save_checkpoint(model, out_dir / "pretrained.ckpt", phase="pretrained", seed=cfg.seed)
    write_metrics_csv(curve, out_dir / "pretrain_metrics.csv")
    return model, curve


def run_adapt(cfg: RunConfig, model: ModelSplit, splits: Splits, out_dir, run_id="run"):
    """Adapt ``model`` in place; writes checkpoint, step and epoch CSVs and a JSON summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res = run_adaptation(model, splits.source, splits.target, cfg.adapt, make_evaluator(splits),
                         run_id)
    save_checkpoint(res.model, out_dir / "adapted.ckpt", phase="adapted", seed=cfg.seed,
                    extra={"stop_reason": res.stop_reason, "stop_epoch": res.stop_epoch})
    write_steps_csv(res.steps, out_dir / "steps.csv")
    write_metrics_csv(res.curve, out_dir / "metrics.csv")
    write_json(summarize(res, cfg.seed), out_dir / "summary.json")
    return res


def summarize(res: AdaptationResult, seed):
    dice = [r.dice_mean for r in res.curve]
    best = int(np.nanargmax(dice)) if not all(math.isnan(x) for x in dice) else 0
    return {
        "seed": int(seed),
        "stop_reason": res.stop_reason,
        "stop_epoch": int(res.curve[-1].epoch),
        "steps": len(res.steps),
        "baseline_dice": dice[0],
        "final_dice": dice[-1],
        "best_dice": dice[best],
        "best_epoch": int(res.curve[best].epoch),
        "improvement": dice[-1] - dice[0],
        "max_adv_source_loss": max((s.losses.adv_source_loss for s in res.steps),
                                   default=float("nan")),
    }


@dataclass
class BenchmarkResult:
    seeds: list
    summaries: list = field(default_factory=list)
    records: list = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def improvements(self):
        return [s["improvement"] for s in self.summaries]


def run_benchmark(cfg: RunConfig, out_dir, title=None) -> BenchmarkResult:
    """Pretrain and adapt once per seed; writes per-seed folders plus ``curves.csv``/``.svg``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir)
    result = BenchmarkResult(list(cfg.seeds), out_dir=out_dir)
    for seed in cfg.seeds:
        scfg = cfg.for_seed(seed)
        run_dir = out_dir / f"seed_{seed}"
        run_id = f"seed{seed}"
        splits = build_splits(scfg)
        model, _ = run_pretrain(scfg, splits, run_dir, run_id)
        res = run_adapt(scfg, model, splits, run_dir, run_id)
        summary = summarize(res, seed)
        log.info("seed %d: baseline %.4f -> %.4f (%s at epoch %d)", seed,
                 summary["baseline_dice"], summary["final_dice"], summary["stop_reason"],
                 summary["stop_epoch"])
        result.summaries.append(summary)
        result.records += res.curve
    export_curves(result.records, out_dir, title=title)
    imp = result.improvements
    write_json({"runs": result.summaries, "mean_improvement": float(np.mean(imp)),
                "improved_runs": int(sum(i > 0 for i in imp)), "n_runs": len(imp)},
               out_dir / "benchmark.json")
    return result
