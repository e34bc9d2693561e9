"""Training objectives and evaluation metrics.

Reconstruction loss for one mixed sample with mask units ``n = 1..N``::

    L = 1/N * sum_n mean_unit( W * [(p1 - t1)**2 * (1 - m) + (p2 - t2)**2 * m] )

where the mean runs over the unit's pixels and channels, and the weight map
``W`` broadcasts over channels.  Batches are averaged over samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericDivergenceError, SarwError, ShapeError


class UndefinedMetricError(SarwError, ValueError):
    """A metric is undefined for the given labels (e.g. AP with no positives)."""


# --------------------------------------------------------------------------
# reconstruction loss


@dataclass
class ReconTargets:
    """Targets of the dual reconstruction.

    ``t1``, ``t2``: ``(B, C, S, S)``; ``mask``: pixel-level 0/1 selector
    ``(B, S, S)`` (1 picks the ``t2`` term); ``weights``: ``(B, S, S)``;
    ``units``: number of mask units per sample.
    """

    t1: torch.Tensor
    t2: torch.Tensor
    mask: torch.Tensor
    weights: torch.Tensor
    units: int

    def check(self, p1: torch.Tensor, p2: torch.Tensor) -> None:
        if p1.shape != self.t1.shape or p2.shape != self.t2.shape or self.t1.shape != self.t2.shape:
            raise ShapeError(f"prediction/target shapes disagree: {p1.shape}, {p2.shape}, {self.t1.shape}")
        spatial = (self.t1.shape[0],) + tuple(self.t1.shape[2:])
        if tuple(self.mask.shape) != spatial or tuple(self.weights.shape) != spatial:
            raise ShapeError(f"mask {tuple(self.mask.shape)} / weights {tuple(self.weights.shape)} must be {spatial}")
        pix = self.t1.shape[-1] * self.t1.shape[-2]
        if self.units < 1 or pix % self.units:
            raise ShapeError(f"{self.units} mask units do not tile {pix} pixels")

    def normalizer(self) -> float:
        # B * N * (C * unit pixel count)
        B, C, H, W = self.t1.shape
        return B * self.units * (C * H * W // self.units)


def _loss_terms(p1, p2, tg: ReconTargets):
    m = tg.mask.unsqueeze(1).to(p1.dtype)
    w = tg.weights.unsqueeze(1).to(p1.dtype)
    d1 = p1 - tg.t1
    d2 = p2 - tg.t2
    return d1, d2, m, w


class _WeightedDualMSE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, p1, p2, t1, t2, mask, weights, units):
        tg = ReconTargets(t1, t2, mask, weights, units)
        d1, d2, m, w = _loss_terms(p1, p2, tg)
        norm = tg.normalizer()
        ctx.save_for_backward(d1, d2, m, w)
        ctx.norm = norm
        return (w * (d1 * d1 * (1 - m) + d2 * d2 * m)).sum() / norm

    @staticmethod
    def backward(ctx, grad_out):
        d1, d2, m, w = ctx.saved_tensors
        scale = grad_out * 2.0 / ctx.norm
        g1 = scale * w * d1 * (1 - m)
        g2 = scale * w * d2 * m
        return g1, g2, None, None, None, None, None


def weighted_dual_reconstruction_loss(p1: torch.Tensor, p2: torch.Tensor, targets: ReconTargets) -> torch.Tensor:
    """Weighted dual-reconstruction loss with its analytic gradient.

    Gradients flow to ``p1`` and ``p2`` only: ``2 * W * (p - t) * selector / normalizer``.
    """
    targets.check(p1, p2)
    for name, t in (("p1", p1), ("p2", p2), ("t1", targets.t1), ("t2", targets.t2), ("weights", targets.weights)):
        if not torch.isfinite(t).all():
            raise NumericDivergenceError(f"non-finite values in {name}")
    return _WeightedDualMSE.apply(p1, p2, targets.t1, targets.t2, targets.mask, targets.weights, targets.units)


def reconstruction_loss_and_grad(p1, p2, targets: ReconTargets):
    """Return ``(loss, grad_p1, grad_p2)`` without going through autograd."""
    targets.check(p1, p2)
    d1, d2, m, w = _loss_terms(p1, p2, targets)
    norm = targets.normalizer()
    loss = (w * (d1 * d1 * (1 - m) + d2 * d2 * m)).sum() / norm
    return loss, 2.0 * w * d1 * (1 - m) / norm, 2.0 * w * d2 * m / norm


# --------------------------------------------------------------------------
# downstream losses


def multilabel_soft_margin_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over classes (and batch) of ``log(1 + exp(-y*z))``, ``y`` in {-1, +1}."""
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    y = labels.to(logits.dtype) * 2 - 1
    return F.softplus(-y * logits).mean()


def binary_cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over two logits per row, averaged over rows."""
    logits = logits.reshape(-1, 2)
    labels = labels.reshape(-1).long()
    return (torch.logsumexp(logits, dim=1) - logits.gather(1, labels[:, None]).squeeze(1)).mean()


# --------------------------------------------------------------------------
# metrics


def average_precision(scores, labels) -> float:
    """Non-interpolated AP over the descending-score ranking.

    Ties keep their original order.  Raises :class:`UndefinedMetricError`
    when there is no positive label.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision_at_k = tp / np.arange(1, hits.size + 1)
    return float(precision_at_k[hits].sum() / n_pos)


def _safe_div(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def f1_precision_recall(predictions, labels):
    """``(precision, recall, f1)``; any 0/0 is reported as 0."""
    pred = np.asarray(predictions).ravel().astype(bool)
    lab = np.asarray(labels).ravel().astype(bool)
    tp = int((pred & lab).sum())
    fp = int((pred & ~lab).sum())
    fn = int((~pred & lab).sum())
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    return p, r, _safe_div(2 * p * r, p + r)


@dataclass
class MetricReport:
    macro: dict = field(default_factory=dict)
    micro: dict = field(default_factory=dict)
    binary: Optional[dict] = None
    per_class: Optional[dict] = None

    def to_json(self) -> dict:
        out = {}
        if self.macro:
            out["macro"] = self.macro
        if self.micro:
            out["micro"] = self.micro
        if self.binary is not None:
            out["binary"] = self.binary
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def aggregate_macro_micro(scores, labels, threshold: float = 0.5) -> MetricReport:
    """Macro and micro AP, F1 and precision for ``(n_samples, n_classes)`` arrays.

    ``scores`` are probabilities; a class is predicted when its score is
    at least ``threshold``.  Classes without positives are left out of the
    macro AP.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D arrays")
    preds = scores >= threshold
    ap, f1, prec = [], [], []
    for k in range(scores.shape[1]):
        try:
            ap.append(average_precision(scores[:, k], labels[:, k]))
        except UndefinedMetricError:
            ap.append(float("nan"))
        p, _, f = f1_precision_recall(preds[:, k], labels[:, k])
        f1.append(f)
        prec.append(p)
    ap_arr = np.array(ap)
    defined = ~np.isnan(ap_arr)
    macro = {
        "ap": float(ap_arr[defined].mean()) if defined.any() else float("nan"),
        "f1": float(np.mean(f1)),
        "precision": float(np.mean(prec)),
    }
    try:
        micro_ap = average_precision(scores.ravel(), labels.ravel())
    except UndefinedMetricError:
        micro_ap = float("nan")
    p, _, f = f1_precision_recall(preds.ravel(), labels.ravel())
    micro = {"ap": micro_ap, "f1": f, "precision": p}
    return MetricReport(macro, micro, per_class={"ap": ap, "f1": f1, "precision": prec})


def binary_metrics(predictions, labels) -> dict:
    pred = np.asarray(predictions).ravel().astype(bool)
    lab = np.asarray(labels).ravel().astype(bool)
    p, r, f = f1_precision_recall(pred, lab)
    acc = float((pred == lab).mean()) if lab.size else 0.0
    return {"accuracy": acc, "precision": p, "recall": r, "f1": f}
