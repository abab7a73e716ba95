"""Cross-serialization consistency losses and discrepancy metrics.

Feature alignment compares L2-normalized projections of the pooled
final-layer tokens of the two branches; prediction alignment is a
symmetric KL between temperature-softened branch distributions.  Both
are exact zero when the branches agree and enter the training objective
as  total = task + alpha * feat + beta * pred.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError

log = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12
_LOG_FLOOR = 1e-12


@dataclass
class ProjectionHead:
    """Branch-shared linear map d -> d_proj applied to pooled features."""

    weight: Tensor  # (d_proj, d)


@dataclass
class LossReport:
    task: float
    feat: float
    pred: float
    total: float
    alpha: float
    beta: float
    tau: float

    def as_dict(self) -> dict:
        return {"task": self.task, "feat": self.feat, "pred": self.pred,
                "total": self.total, "alpha": self.alpha, "beta": self.beta,
                "tau": self.tau}


def _pooled_projection(tokens, head: ProjectionHead) -> Tensor:
    pooled = ad.as_tensor(tokens).mean(axis=-2)
    if pooled.ndim == 1:
        pooled = ad.reshape(pooled, (1, -1))
    return ad.matmul(pooled, ad.swapaxes(head.weight, 0, 1))


def feature_loss(tokens1, tokens2, head: ProjectionHead):
    """Squared distance of the normalized projected branch features.

    Inputs are final-layer token stacks (..., n, d); batches average.
    Projections with norm below 1e-12 contribute zero (logged), so the
    loss is defined everywhere.
    """
    z1 = _pooled_projection(tokens1, head)
    z2 = _pooled_projection(tokens2, head)
    n1 = np.linalg.norm(z1.data, axis=-1)
    n2 = np.linalg.norm(z2.data, axis=-1)
    degenerate = (n1 < _NORM_FLOOR) | (n2 < _NORM_FLOOR)
    if np.any(degenerate):
        log.warning("feature_loss: %d degenerate zero-norm projections",
                    int(degenerate.sum()))
        keep = ~degenerate
        if not np.any(keep):
            return Tensor(0.0)
        z1, z2 = z1[keep], z2[keep]
    u1 = z1 * ad.expand_dims(ad.power((z1 * z1).sum(axis=-1), -0.5), -1)
    u2 = z2 * ad.expand_dims(ad.power((z2 * z2).sum(axis=-1), -0.5), -1)
    diff = u1 - u2
    return (diff * diff).sum(axis=-1).mean()


def prediction_loss(logits1, logits2, tau: float = 1.0):
    """Symmetric KL between temperature-softened branch distributions.

    Softmaxes are stabilized by max subtraction; the 1e-12 floor applies
    inside the logarithms only.
    """
    if tau <= 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")
    l1, l2 = ad.as_tensor(logits1), ad.as_tensor(logits2)
    if l1.ndim == 1:
        l1, l2 = ad.reshape(l1, (1, -1)), ad.reshape(l2, (1, -1))
    p1 = ad.softmax(l1 * (1.0 / tau), axis=-1)
    p2 = ad.softmax(l2 * (1.0 / tau), axis=-1)
    lp1 = ad.log(_floor(p1))
    lp2 = ad.log(_floor(p2))
    kl12 = (p1 * (lp1 - lp2)).sum(axis=-1)
    kl21 = (p2 * (lp2 - lp1)).sum(axis=-1)
    return (0.5 * kl12 + 0.5 * kl21).mean()


def _floor(p: Tensor) -> Tensor:
    # max(p, floor) with zero adjoint on the clamped side; probabilities
    # this small contribute no usable gradient anyway
    clamped = np.maximum(p.data, _LOG_FLOOR)
    frozen = Tensor(np.where(p.data < _LOG_FLOOR, clamped, 0.0))
    kept = p * Tensor((p.data >= _LOG_FLOOR).astype(float))
    return kept + frozen


def cross_entropy(logits, labels: np.ndarray):
    """Mean cross-entropy of (B, C) logits against integer labels."""
    logits = ad.as_tensor(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = ad.log(ad.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    picked = ad.gather_rows(
        ad.expand_dims(log_p, -1),
        np.asarray(labels, dtype=np.int64).reshape(-1, 1))
    return -picked.mean()


def total_loss(task, feat, pred, alpha: float = 100.0, beta: float = 0.05,
               tau: float = 1.0):
    """Combine the three objectives; returns (scalar Tensor, LossReport)."""
    task, feat, pred = ad.as_tensor(task), ad.as_tensor(feat), ad.as_tensor(pred)
    total = task + alpha * feat + beta * pred
    report = LossReport(task.item(), feat.item(), pred.item(), total.item(),
                        alpha, beta, tau)
    return total, report


def discrepancy_metrics(model, batches, tau: float = 1.0) -> tuple[float, float]:
    """Mean cross-serialization feature / prediction discrepancies.

    Evaluates the two branch views of every cloud in ``batches`` with no
    gradient, using the same formulations as the training consistency
    terms.
    """
    batches = list(batches)
    if not batches or all(b.size == 0 for b in batches):
        raise ArgumentError("discrepancy metrics need a non-empty eval set")
    head = ProjectionHead(Tensor(model.store["proj.w"].value))
    feat_sum = pred_sum = count = 0.0
    with ad.no_grad():
        bound = model.store.bind()
        for batch in batches:
            res = model.forward(bound, batch)
            w = batch.size
            feat_sum += w * feature_loss(
                res.tokens_final1, res.tokens_final2, head).item()
            pred_sum += w * prediction_loss(
                res.logits1, res.logits2, tau).item()
            count += w
    return feat_sum / count, pred_sum / count
