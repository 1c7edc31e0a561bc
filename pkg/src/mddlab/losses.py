"""Margin-theoretic quantities and the cross-entropy surrogates used for training.

Score tensors are ``(..., K, H, W)``-style with the class axis at ``dim``
(default 1 for batched score maps); label tensors drop that axis.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

CLAMP_EPS = 1e-12


class InvalidClassError(ValueError):
    pass


class InvalidRhoError(ValueError):
    pass


class EmptyFamilyError(ValueError):
    pass


class NumericClampWarning(RuntimeWarning):
    """Raised (as a warning) when log(1 - p) hits the stability floor."""


@dataclass
class MarginConfig:
    rho: float = 1.0
    gamma: float = 0.08

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidRhoError(f"rho must be > 0, got {self.rho}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass
class LossReport:
    classifier_loss: float
    adv_source_loss: float
    adv_target_loss: float
    adv_total_loss: float
    total_objective: float
    n_pixels: int

    CSV_HEADER = "step,phase,loss_c,loss_a_src,loss_a_tgt,loss_a_total,objective,n_pixels"

    def csv_row(self, step, phase):
        vals = [self.classifier_loss, self.adv_source_loss, self.adv_target_loss,
                self.adv_total_loss, self.total_objective]
        return ",".join([str(step), phase, *(f"{v:.9g}" for v in vals), str(self.n_pixels)])

    @classmethod
    def from_csv_row(cls, line):
        parts = line.strip().split(",")
        step, phase = int(parts[0]), parts[1]
        vals = [float(v) for v in parts[2:7]]
        return step, phase, cls(*vals, int(parts[7]))


# -- margin quantities ---------------------------------------------------

def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _check_labels(y, k):
    if y.dtype.is_floating_point:
        raise InvalidClassError("labels must be integer-typed")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= k):
        raise InvalidClassError(f"labels must lie in [0, {k - 1}]")


def margin(scores, y, dim=-1):
    """Half the gap between the score of ``y`` and the best competing score."""
    scores = _as_tensor(scores)
    y = torch.as_tensor(y, dtype=torch.long, device=scores.device)
    k = scores.shape[dim]
    _check_labels(y, k)
    if k < 2:
        raise InvalidClassError("need at least two classes")
    idx = y.unsqueeze(dim)
    true = scores.gather(dim, idx).squeeze(dim)
    others = scores.scatter(dim, idx, float("-inf"))
    return 0.5 * (true - others.max(dim=dim).values)


def ramp(m, rho):
    if not rho > 0:
        raise InvalidRhoError(f"rho must be > 0, got {rho}")
    m = _as_tensor(m)
    return torch.clamp(1.0 - m / rho, 0.0, 1.0)


def margin_loss(scores, y, rho, dim=-1):
    """Ramp loss on the margin: 1 for margin <= 0, 0 for margin >= rho."""
    return ramp(margin(scores, y, dim=dim), rho)


def margin_disparity(scores_fprime, labels_f, rho):
    """Mean margin loss of ``f'`` scores ``(B, K, H, W)`` against labels of ``f``."""
    scores_fprime = _as_tensor(scores_fprime)
    labels_f = torch.as_tensor(labels_f)
    _check_shapes(scores_fprime, labels_f)
    return margin_loss(scores_fprime, labels_f, rho, dim=1).mean()


def mdd_bruteforce(family, f, s_hat, t_hat, rho):
    """Exact empirical MDD over a finite family of classifiers.

    Each classifier is a callable from an image batch to ``(B, K, H, W)``
    scores. Returns ``(value, index)`` of the maximizing member.
    """
    from .model import predict

    family = list(family)
    if not family:
        raise EmptyFamilyError("family of classifiers is empty")
    with torch.no_grad():
        h_s = predict(_as_tensor(f(s_hat)))
        h_t = predict(_as_tensor(f(t_hat)))
        gaps = []
        for fp in family:
            d_s = margin_disparity(fp(s_hat), h_s, rho)
            d_t = margin_disparity(fp(t_hat), h_t, rho)
            gaps.append(float(d_s - d_t))
    best = max(range(len(gaps)), key=gaps.__getitem__)
    return gaps[best], best


# -- training surrogates ---------------------------------------------------

def _check_shapes(scores, labels):
    if scores.ndim != labels.ndim + 1 or scores.shape[:1] + scores.shape[2:] != labels.shape:
        from .model import ShapeMismatchError

        raise ShapeMismatchError(
            f"scores {tuple(scores.shape)} incompatible with labels {tuple(labels.shape)}")


def classifier_loss(scores, y):
    """Pixel-mean cross entropy of ``(B, K, H, W)`` scores against labels ``(B, H, W)``."""
    _check_shapes(scores, y)
    _check_labels(y, scores.shape[1])
    return F.cross_entropy(scores, y.long())


def adv_source_loss(scores_a_src, pseudo_labels_src):
    """Cross entropy of adversary source scores against the classifier's argmax."""
    return classifier_loss(scores_a_src, pseudo_labels_src.detach())


def adv_target_loss(scores_a_tgt, pseudo_labels_tgt, eps=CLAMP_EPS):
    """Pixel mean of log(1 - softmax(scores)[pseudo-label]); always <= 0.

    ``log(1 - p_y)`` is evaluated as ``logsumexp(others) - logsumexp(all)``
    and clamped to ``[log eps, log(1 - eps)]``.
    """
    _check_shapes(scores_a_tgt, pseudo_labels_tgt)
    y = pseudo_labels_tgt.detach().long()
    _check_labels(y, scores_a_tgt.shape[1])
    idx = y.unsqueeze(1)
    lse_all = torch.logsumexp(scores_a_tgt, dim=1)
    others = scores_a_tgt.scatter(1, idx, float("-inf"))
    log_comp = torch.logsumexp(others, dim=1) - lse_all
    lo = math.log(eps)
    if bool((log_comp < lo).any()):
        warnings.warn("log(1 - p) clamped at the stability floor", NumericClampWarning,
                      stacklevel=2)
    return torch.clamp(log_comp, lo, math.log1p(-eps)).mean()


def adv_total_loss(adv_src, adv_tgt, gamma):
    return -adv_tgt + gamma * adv_src


def total_objective(cls_loss, adv_total):
    return cls_loss + adv_total


def report(loss_c, loss_a_src, loss_a_tgt, loss_a, objective, n_pixels) -> LossReport:
    vals = [float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            for v in (loss_c, loss_a_src, loss_a_tgt, loss_a, objective)]
    return LossReport(*vals, int(n_pixels))
