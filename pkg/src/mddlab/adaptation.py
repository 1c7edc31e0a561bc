"""Pre-training, gradient reversal and the MDD minimax fine-tuning loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .model import (BlockId, ModelSplit, ShapeMismatchError, copy_head, parameter_groups, predict,
                    set_frozen)
from .records import MetricsRecord

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class EmptyDatasetError(ValueError):
    pass


class InvalidEtaError(ValueError):
    pass


def default_freeze_spec():
    return [BlockId("encoder", 0), BlockId("encoder", 1)]


@dataclass
class AdaptConfig:
    lr_adversary: float = 1e-6
    lr_classifier: float = 1e-3
    lr_encoder: float = 1e-3 * 2 / 3
    lr_decoder: float = 1e-3 * 4 / 9
    grl_constant: float = 1.4
    margin: L.MarginConfig = field(default_factory=L.MarginConfig)
    early_stop_threshold: float = 0.02
    freeze_spec: list = field(default_factory=default_freeze_spec)
    max_epochs: int = 20
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.margin, dict):
            self.margin = L.MarginConfig(**self.margin)
        self.freeze_spec = [b if isinstance(b, BlockId) else BlockId.parse(b)
                            for b in self.freeze_spec]

    def validate(self):
        lrs = (self.lr_adversary, self.lr_classifier, self.lr_encoder, self.lr_decoder)
        if not all(lr > 0 for lr in lrs):
            raise ValueError("all learning rates must be > 0")
        if not self.grl_constant > 0:
            raise InvalidEtaError("grl_constant must be > 0")
        if not self.early_stop_threshold > 0:
            raise ValueError("early_stop_threshold must be > 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")

    def lr_for(self, part):
        return {"encoder": self.lr_encoder, "decoder": self.lr_decoder,
                "classifier": self.lr_classifier, "adversary": self.lr_adversary}[part]

    def to_dict(self):
        d = asdict(self)
        d["freeze_spec"] = [str(b) for b in self.freeze_spec]
        return d


@dataclass
class PretrainConfig:
    epochs: int = 60
    lr_initial: float = 1e-3
    lr_halving_period: int = 10
    batch_size: int = 16
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.lr_halving_period < 1:
            raise ValueError("epochs and lr_halving_period must be >= 1")
        if not self.lr_initial > 0:
            raise ValueError("lr_initial must be > 0")


@dataclass
class StepReport:
    losses: L.LossReport
    early_stop_triggered: bool
    grad_norms: dict[str, float]
    step_index: int


# -- gradient reversal -----------------------------------------------------

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, eta):
        ctx.eta = eta
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.eta * grad, None


def grl(features, eta):
    """Identity forward; multiplies the incoming gradient by ``-eta`` on the way back."""
    if not eta > 0:
        raise InvalidEtaError(f"GRL constant must be > 0, got {eta}")
    return _GradReverse.apply(features, float(eta))


def early_stop_check(adv_source_loss, xi):
    """True iff the adversary's source loss strictly exceeds ``xi``."""
    return bool(adv_source_loss > xi)


# -- batching ----------------------------------------------------------------

def _to_batch(images):
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).unsqueeze(1)


def _epoch_order(rng, n):
    return rng.permutation(n)


class _Cycler:
    """Endless shuffled index stream over ``n`` items, reshuffled per pass."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order, self.pos = _epoch_order(rng, n), 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos >= self.n:
                self.order, self.pos = _epoch_order(self.rng, self.n), 0
            step = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + step])
            self.pos += step
        return np.asarray(out)


def lr_at_epoch(cfg: PretrainConfig, epoch):
    return cfg.lr_initial * 0.5 ** (epoch // cfg.lr_halving_period)


# -- pre-training --------------------------------------------------------------

def pretrain(model: ModelSplit, source, cfg: PretrainConfig,
             evaluate: Callable[[ModelSplit], dict] | None = None, run_id="run"):
    """Train ``f_c . f_d . f_e`` with pixel cross entropy; the adversary is untouched.

    ``evaluate`` is called after each epoch and may return
    ``{"dice_per_class": [...], "dice_mean": float}`` for the curve.
    """
    cfg.validate()
    if source is None or len(source) == 0 or source.labels is None:
        raise EmptyDatasetError("pretraining needs a non-empty labelled source dataset")
    params = [p for name in ("encoder", "decoder", "classifier")
              for p in model.part(name).parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr_initial)
    rng = np.random.default_rng([int(cfg.seed), 11])
    n = len(source)
    labels = torch.from_numpy(source.labels.astype(np.int64))
    curve = []
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = lr_at_epoch(cfg, epoch)
        model.train()
        order = _epoch_order(rng, n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = _to_batch(source.images[idx])
            loss = L.classifier_loss(model.classifier(model.features(x)), labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite pretraining loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        rec = MetricsRecord(run_id, epoch + 1, "pretrain", loss_c=total / count)
        if evaluate is not None:
            model.eval()
            _fill(rec, evaluate(model))
        log.info("pretrain epoch %d loss_c=%.4f dice=%.4f", epoch + 1, rec.loss_c, rec.dice_mean)
        curve.append(rec)
    model.eval()
    return model, curve


def _fill(rec, metrics):
    if not metrics:
        return
    rec.dice_per_class = list(metrics.get("dice_per_class", rec.dice_per_class))
    rec.dice_mean = float(metrics.get("dice_mean", rec.dice_mean))
    if "dice_source" in metrics:
        rec.dice_source = float(metrics["dice_source"])


# -- MDD adaptation --------------------------------------------------------------

def make_optimizer(model: ModelSplit, cfg: AdaptConfig):
    """Adam with one parameter group per part at the configured learning rate."""
    groups = [{"params": ps, "lr": cfg.lr_for(name), "name": name}
              for name, ps in parameter_groups(model) if ps]
    return torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)


def mdd_losses(model: ModelSplit, x_src, y_src, x_tgt, cfg: AdaptConfig):
    """Forward pass of one minimax step; returns the objective and its parts as tensors."""
    if x_src.shape[2:] != x_tgt.shape[2:]:
        raise ShapeMismatchError(
            f"source {tuple(x_src.shape[2:])} and target {tuple(x_tgt.shape[2:])} sizes differ")
    feats = model.features(torch.cat([x_src, x_tgt]))
    f_src, f_tgt = feats[:len(x_src)], feats[len(x_src):]
    sc_src = model.classifier(f_src)
    with torch.no_grad():
        sc_tgt = model.classifier(f_tgt)
        if not (torch.isfinite(sc_src).all() and torch.isfinite(sc_tgt).all()):
            raise DivergenceError("non-finite classifier scores")
        pseudo_src = predict(sc_src)
        pseudo_tgt = predict(sc_tgt)
    adv = model.adversary(_GradReverse.apply(feats, float(cfg.grl_constant)))
    loss_c = L.classifier_loss(sc_src, y_src)
    loss_a_src = L.adv_source_loss(adv[:len(x_src)], pseudo_src)
    loss_a_tgt = L.adv_target_loss(adv[len(x_src):], pseudo_tgt)
    loss_a = L.adv_total_loss(loss_a_src, loss_a_tgt, cfg.margin.gamma)
    objective = L.total_objective(loss_c, loss_a)
    return objective, (loss_c, loss_a_src, loss_a_tgt, loss_a)


def adapt_step(model: ModelSplit, x_src, y_src, x_tgt, cfg: AdaptConfig, optimizer,
               step_index=0) -> StepReport:
    """One simultaneous update of psi, f_c and f_a on the summed objective."""
    model.train()
    objective, parts = mdd_losses(model, x_src, y_src, x_tgt, cfg)
    if not torch.isfinite(objective):
        raise DivergenceError(
            f"non-finite objective at step {step_index}: "
            + ", ".join(f"{n}={float(v):.4g}" for n, v in
                        zip(("loss_c", "loss_a_src", "loss_a_tgt", "loss_a"), parts)))
    optimizer.zero_grad(set_to_none=True)
    objective.backward()
    norms = {}
    for name, ps in parameter_groups(model):
        sq = sum(float((p.grad ** 2).sum()) for p in ps if p.grad is not None)
        norms[name] = math.sqrt(sq)
    optimizer.step()
    n_pixels = x_src.shape[0] * x_src.shape[2] * x_src.shape[3]
    rep = L.report(*parts, objective, n_pixels)
    return StepReport(rep, early_stop_check(rep.adv_source_loss, cfg.early_stop_threshold),
                      norms, step_index)


@dataclass
class AdaptationResult:
    model: ModelSplit
    curve: list[MetricsRecord]
    stop_reason: str  # "early_stop" | "max_epochs" | "divergence"
    steps: list[StepReport]
    stop_epoch: int
    previous_epoch_state: dict | None = None


def run_adaptation(model: ModelSplit, source, target, cfg: AdaptConfig,
                   evaluate: Callable[[ModelSplit], dict] | None = None, run_id="run",
                   early_stopping=True, eval_epochs=None) -> AdaptationResult:
    """Copy the head, freeze, then iterate minimax steps until early stop or ``max_epochs``.

    ``target`` is read for images only. ``evaluate`` (optional) is the only
    way target labels enter, and only for the recorded curve. Epoch 0 of the
    curve is the model before any adaptation step. ``eval_epochs`` restricts
    evaluation to those epochs (the final epoch is always evaluated).
    """
    if source is None or len(source) == 0 or source.labels is None:
        raise EmptyDatasetError("adaptation needs a labelled source dataset")
    if target is None or len(target) == 0:
        raise EmptyDatasetError("adaptation needs a non-empty target dataset")
    copy_head(model)
    set_frozen(model, cfg.freeze_spec)
    opt = make_optimizer(model, cfg)
    src_cycle = _Cycler(len(source), np.random.default_rng([int(cfg.seed), 21]))
    tgt_cycle = _Cycler(len(target), np.random.default_rng([int(cfg.seed), 22]))
    steps_per_epoch = math.ceil(max(len(source), len(target)) / cfg.batch_size)
    src_labels = torch.from_numpy(source.labels.astype(np.int64))

    curve = [_epoch_record(model, run_id, 0, [], evaluate
                           if eval_epochs is None or 0 in eval_epochs else None, False)]
    steps, reason, prev_state, stop_epoch = [], "max_epochs", None, cfg.max_epochs
    step_index = 0
    for epoch in range(1, cfg.max_epochs + 1):
        prev_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        epoch_steps, stop = [], False
        for _ in range(steps_per_epoch):
            si = src_cycle.take(cfg.batch_size)
            ti = tgt_cycle.take(cfg.batch_size)
            step_index += 1
            try:
                rep = adapt_step(model, _to_batch(source.images[si]), src_labels[si],
                                 _to_batch(target.images[ti]), cfg, opt, step_index)
            except DivergenceError as exc:
                log.warning("adaptation diverged: %s", exc)
                reason, stop = "divergence", True
                break
            epoch_steps.append(rep)
            if early_stopping and rep.early_stop_triggered:
                reason, stop = "early_stop", True
                break
        steps += epoch_steps
        last = stop or epoch == cfg.max_epochs
        wanted = eval_epochs is None or epoch in eval_epochs or last
        curve.append(_epoch_record(model, run_id, epoch, epoch_steps,
                                   evaluate if wanted else None, stop))
        if stop:
            stop_epoch = epoch
            break
    model.eval()
    return AdaptationResult(model, curve, reason, steps, stop_epoch, prev_state)


def _epoch_record(model, run_id, epoch, epoch_steps, evaluate, stopped):
    rec = MetricsRecord(run_id, epoch, "adapt", stopped=stopped)
    if epoch_steps:
        rec.loss_c = float(np.mean([s.losses.classifier_loss for s in epoch_steps]))
        rec.loss_a_src = float(np.mean([s.losses.adv_source_loss for s in epoch_steps]))
    if evaluate is not None:
        model.eval()
        _fill(rec, evaluate(model))
    return rec
