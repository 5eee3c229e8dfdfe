"""Training objectives.

All losses sum over the batch by default (``reduction="sum"``), matching
objectives written as sums over a dataset. ``reduction="mean"`` divides every
sum over samples by the batch size; the label-averaged CMI is already a mean
and is left alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .cmi import CentroidSet, dataset_cmi, per_sample_kl
from .data import Batch
from .model import ModelParams, forward, token_log_probs
from .tensor import Tensor

REDUCTIONS = ("sum", "mean")
CMI_SIGNS = ("min", "max", "off")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.0
    lam: float = 0.0
    alpha: float = 0.5
    temperature: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise LossError(f"gamma must be >= 0, got {self.gamma}")
        if self.lam < 0:
            raise LossError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.temperature < 1.0:
            raise LossError(f"temperature must be >= 1, got {self.temperature}")


def _reduce(total: Tensor, n: int, reduction: str) -> Tensor:
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / n)
    raise LossError(f"unknown reduction {reduction!r}")


def nll(logits: Tensor, labels) -> Tensor:
    """Per-sample ``-log softmax(logits)[y]``."""
    labels = np.asarray(labels, dtype=np.int64)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LossError(f"labels outside [0, {C})")
    logp = tn.log(tn.softmax(logits))
    return -logp[np.arange(len(labels)), labels]


def lm_loss(batch: Batch, params: ModelParams, reduction: str = "sum", hidden=None) -> Tensor:
    """Causal LM cross-entropy: -sum of log P(u_i | u_<i) over i >= 2, padding excluded."""
    lengths = np.asarray(batch.lengths)
    if lengths.min(initial=2) < 2:
        raise LossError("lm_loss needs sequences of length >= 2")
    if lengths.max(initial=0) > params.config.context_len + 1:
        raise LossError("lm_loss sequence longer than context + 1")
    ids = batch.ids
    logp = token_log_probs(ids, params, hidden=hidden)
    mask = (np.arange(1, ids.shape[1])[None, :] < lengths[:, None]).astype(float)
    return _reduce(-(logp * mask).sum(), len(lengths), reduction)


def cls_loss(batch: Batch, params: ModelParams, reduction: str = "sum", logits=None) -> Tensor:
    """-sum_(x, y) log P(y | x)."""
    if logits is None:
        logits = forward(batch.ids, params, lengths=batch.lengths).logits
    return _reduce(nll(logits, batch.labels).sum(), len(batch), reduction)


@dataclass
class Objective:
    """Scalar objective plus the terms it was assembled from."""

    total: Tensor
    cls: Tensor
    lm: Tensor | None
    cmi: Tensor | None
    features: Tensor
    clipped: int = 0


def objective_terms(batch: Batch, params: ModelParams, *, gamma: float = 0.0, lam: float = 0.0,
                    sign: str = "off", centroids: CentroidSet | None = None,
                    mode: str = "eq11_average", reduction: str = "sum",
                    clip: float | None = None) -> Objective:
    """L_Final (+/-) lam * I(X; Z | Y) on one batch with frozen centroids."""
    if sign not in CMI_SIGNS:
        raise LossError(f"unknown CMI sign {sign!r}")
    if gamma < 0:
        raise LossError(f"gamma must be >= 0, got {gamma}")
    out = forward(batch.ids, params, lengths=batch.lengths)
    cls = cls_loss(batch, params, reduction, logits=out.logits)
    total = cls
    lm = None
    if gamma > 0:
        lm = lm_loss(batch, params, reduction, hidden=out.hidden)
        total = total + lm * gamma
    features = tn.softmax(out.pooled)
    cmi = None
    clipped = 0
    if sign != "off":
        if centroids is None:
            raise LossError("CMI objective needs centroids")
        if lam <= 0:
            raise LossError(f"lambda must be > 0 when CMI is active, got {lam}")
        if clip is not None:
            kl = per_sample_kl(features, batch.labels, centroids)
            clipped = int(np.sum(kl.data > clip))
        cmi = dataset_cmi(features, batch.labels, centroids, mode, clip=clip)
        if mode == "eq12_literal":
            cmi = _reduce(cmi, len(batch), reduction)
        total = total + cmi * (lam if sign == "min" else -lam)
    return Objective(total, cls, lm, cmi, features, clipped)


def final_loss(batch: Batch, params: ModelParams, gamma: float = 0.0,
               reduction: str = "sum") -> Tensor:
    """L_2 + gamma * L_1."""
    return objective_terms(batch, params, gamma=gamma, reduction=reduction).total


def min_cmi_loss(batch: Batch, params: ModelParams, centroids: CentroidSet, lam: float,
                 gamma: float = 0.0, mode: str = "eq11_average", reduction: str = "sum") -> Tensor:
    return objective_terms(batch, params, gamma=gamma, lam=lam, sign="min", centroids=centroids,
                           mode=mode, reduction=reduction).total


def max_cmi_loss(batch: Batch, params: ModelParams, centroids: CentroidSet, lam: float,
                 gamma: float = 0.0, mode: str = "eq11_average", reduction: str = "sum",
                 clip: float | None = None) -> Tensor:
    """L_Final - lam * CMI; unbounded below unless ``clip`` caps each KL."""
    return objective_terms(batch, params, gamma=gamma, lam=lam, sign="max", centroids=centroids,
                           mode=mode, reduction=reduction, clip=clip).total


def kd_loss(student_logits: Tensor, teacher_logits, labels, alpha: float, temperature: float,
            reduction: str = "sum") -> Tensor:
    """(1 - alpha) * CE + alpha * T^2 * KL(softmax(t/T) || softmax(s/T)).

    The cross-entropy uses hard labels at T = 1. Teacher logits are constants.
    """
    LossWeights(alpha=alpha, temperature=temperature)
    teacher = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    if teacher.shape != student_logits.shape:
        raise LossError(f"student logits {student_logits.shape} vs teacher {teacher.shape}")
    n = len(teacher)
    ce = nll(student_logits, labels).sum()
    with tn.no_grad():
        p_teacher = tn.softmax(Tensor(teacher) * (1.0 / temperature))
    log_student = tn.log(tn.softmax(student_logits * (1.0 / temperature)))
    kl = (p_teacher * (tn.log(p_teacher) - log_student)).sum()
    total = ce * (1.0 - alpha) + kl * (alpha * temperature**2)
    return _reduce(total, n, reduction)
