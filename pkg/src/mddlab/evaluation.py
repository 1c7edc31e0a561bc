"""Dice on slices and reassembled volumes, run aggregation, ablations and curve export."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import MissingLabelsError, SliceDataset, SliceSample, reassemble
from .model import BlockId, ModelSplit, ShapeMismatchError, UnknownBlockError, predict
from .records import MetricsRecord

CURVE_COLUMNS = ["run_id", "epoch", "phase", "dice_mean", "dice_c1", "dice_c2", "loss_c",
                 "loss_a_src", "stopped"]


class TooFewRunsError(ValueError):
    pass


def dice(pred, gt, cls):
    """``2|P & G| / (|P| + |G|)`` for class ``cls``; 1.0 when both sets are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    if cls < 1:
        raise ValueError("dice is defined for foreground classes (cls >= 1)")
    p, g = pred == cls, gt == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def predict_slices(model: ModelSplit, images, batch_size=64):
    """Argmax label masks ``(N, H, W)`` for preprocessed slices ``(N, H, W)``."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size],
                                                      dtype=np.float32)).unsqueeze(1)
            out.append(predict(model(x)).numpy().astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.uint8)


def volume_dice(model, samples, gt, num_classes=3, predictions=None):
    """Per-class Dice of one reassembled 3D volume.

    ``model`` may be None when ``predictions`` (one mask per sample) are given.
    """
    samples = list(samples)
    if predictions is None:
        imgs = np.stack([s.image for s in samples])
        predictions = predict_slices(model, imgs)
    vol = reassemble(samples, masks=list(predictions))
    gt = np.asarray(getattr(gt, "voxels", gt))
    per = [dice(vol, gt, c) for c in range(1, num_classes)]
    return {"dice_per_class": per, "dice_mean": float(np.mean(per))}


def evaluate_dataset(model, ds: SliceDataset, num_classes=3, predictions=None):
    """Volume-level Dice averaged over volumes (foreground classes only)."""
    labels = ds.labels if ds.labels is not None else ds.eval_labels
    if labels is None:
        raise MissingLabelsError("dataset has no labels to evaluate against")
    if predictions is None:
        predictions = predict_slices(model, ds.images)
    per_volume = []
    for v in ds.volumes:
        crop = tuple(v.get("crop", (0, 0, 0, 0)))
        rng = range(v["start"], v["stop"])
        samples = [SliceSample(ds.images[i], labels[i], v["volume_id"], k, crop)
                   for k, i in enumerate(rng)]
        gt = reassemble(samples)
        res = volume_dice(None, samples, gt, num_classes, predictions[v["start"]:v["stop"]])
        per_volume.append(res["dice_per_class"])
    per_class = np.mean(np.asarray(per_volume), axis=0)
    return {"dice_per_class": [float(x) for x in per_class],
            "dice_mean": float(np.mean(per_class)),
            "per_volume": [float(np.mean(p)) for p in per_volume]}


def aggregate_runs(records, n_runs=None):
    """Sample mean and (n-1) standard deviation of ``dice_mean`` across runs."""
    vals = [r.dice_mean if isinstance(r, MetricsRecord) else float(r) for r in records]
    if n_runs is not None and n_runs != len(vals):
        raise ValueError(f"expected {n_runs} runs, got {len(vals)}")
    if len(vals) < 2:
        raise TooFewRunsError("need at least two runs to aggregate")
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


# -- ablation ----------------------------------------------------------------

FREEZE_CONFIGS = {
    "First encoder block": ["encoder.0"],
    "First 2 encoder blocks": ["encoder.0", "encoder.1"],
    "First 3 encoder blocks": ["encoder.0", "encoder.1", "encoder.2"],
    "All of encoder": "encoder:*",
    "Last 2 blocks of encoder": "encoder:-2",
    "Last block of encoder + first block of decoder": ["encoder:-1", "decoder.0"],
    "First 2 blocks in decoder": ["decoder.0", "decoder.1"],
}


def resolve_blocks(model: ModelSplit, spec):
    """Expand a freeze spec into BlockIds.

    Entries are ``part.index``; ``part:*`` means every block of the part and
    ``part:-n`` the last ``n`` blocks. A bare string is treated as one entry.
    """
    if isinstance(spec, (str, BlockId)):
        spec = [spec]
    out = []
    for item in spec:
        if isinstance(item, BlockId):
            model.block(item)
            out.append(item)
            continue
        text = str(item)
        if ":" in text:
            part, _, sel = text.partition(":")
            ids = [b for b in model.blocks() if b.part == part]
            if not ids:
                raise UnknownBlockError(f"unknown part in {text!r}")
            if sel == "*":
                out += ids
            elif sel.startswith("-") and sel[1:].isdigit():
                out += ids[-int(sel[1:]):]
            else:
                raise UnknownBlockError(f"bad selector {text!r}")
        else:
            blk = BlockId.parse(text)
            model.block(blk)
            out.append(blk)
    return sorted(set(out), key=lambda b: (("encoder", "decoder", "classifier",
                                              "adversary").index(b.part), b.index))


@dataclass
class AblationSpec:
    configs: dict = field(default_factory=lambda: dict(FREEZE_CONFIGS))
    probe_epochs: list = field(default_factory=lambda: [2, 6, 12])

    def __post_init__(self):
        pe = list(self.probe_epochs)
        if not pe or any(b <= a for a, b in zip(pe, pe[1:])) or pe[0] < 1:
            raise ValueError(f"probe epochs must be positive and strictly increasing: {pe}")


def run_ablation(base_state, config, spec: AblationSpec, source, target, cfg, evaluate):
    """Restart adaptation from one checkpoint per freeze config; Dice at probe epochs.

    ``base_state`` is a model ``state_dict`` (or a ModelSplit); ``evaluate``
    maps a model to a metrics dict with ``dice_mean`` on the validation split.
    Early stopping is disabled so every probe epoch is reached.
    """
    from dataclasses import replace

    from .adaptation import run_adaptation

    if isinstance(base_state, ModelSplit):
        base_state = base_state.state_dict()
    table = {}
    # resolve everything up front so a bad name fails before any training
    probe_model = ModelSplit(config)
    resolved = {name: resolve_blocks(probe_model, blocks) for name, blocks in spec.configs.items()}
    for name, blocks in resolved.items():
        model = ModelSplit(config)
        model.load_state_dict(base_state)
        run_cfg = replace(cfg, freeze_spec=blocks, max_epochs=max(spec.probe_epochs))

        res = run_adaptation(model, source, target, run_cfg, evaluate=evaluate,
                             run_id=name, early_stopping=False,
                             eval_epochs=set(spec.probe_epochs))
        by_epoch = {r.epoch: r.dice_mean for r in res.curve}
        table[name] = {e: by_epoch.get(e, float("nan")) for e in spec.probe_epochs}
    return table


def write_ablation_csv(table, probe_epochs, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frozen_layers", *[str(e) for e in probe_epochs]])
        for name, row in table.items():
            w.writerow([name, *[f"{row[e]:.6g}" for e in probe_epochs]])
    return path


def read_ablation_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    epochs = [int(e) for e in rows[0][1:]]
    return {r[0]: dict(zip(epochs, map(float, r[1:]))) for r in rows[1:]}, epochs


# -- curves ----------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def curve_rows(records):
    rows = []
    for r in records:
        dpc = list(r.dice_per_class) + [float("nan")] * (2 - len(r.dice_per_class))
        rows.append([r.run_id, r.epoch, r.phase, r.dice_mean, dpc[0], dpc[1], r.loss_c,
                     r.loss_a_src, r.stopped])
    return rows


def write_curves_csv(records, path):
    records = list(records)
    if not records:
        raise ValueError("no records to export")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in curve_rows(records):
            w.writerow([_fmt(v) for v in row])
    return path


class MalformedCurvesError(ValueError):
    pass


def read_curves_csv(path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CURVE_COLUMNS:
            raise MalformedCurvesError(f"{path}: unexpected header {header}")
        records = []
        for row in reader:
            if len(row) != len(CURVE_COLUMNS):
                raise MalformedCurvesError(f"{path}: bad row {row}")
            d1, d2 = float(row[4]), float(row[5])
            records.append(MetricsRecord(
                run_id=row[0], epoch=int(row[1]), phase=row[2],
                dice_per_class=[d for d in (d1, d2) if not math.isnan(d)],
                dice_mean=float(row[3]), loss_c=float(row[6]), loss_a_src=float(row[7]),
                stopped=row[8] == "1"))
    if not records:
        raise MalformedCurvesError(f"{path}: no data rows")
    return records


def export_curves(records, out_dir, title=None):
    """Write ``curves.csv`` and a vector plot of target Dice per run into ``out_dir``."""
    from .plotting import plot_learning_curves

    records = list(records)
    if not records:
        raise ValueError("no records to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_curves_csv(records, out_dir / "curves.csv")
    fig_path = plot_learning_curves(records, out_dir / "curves.svg", title=title)
    return csv_path, fig_path
