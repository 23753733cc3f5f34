"""Training objectives.

All functions accept torch tensors (or anything ``torch.as_tensor`` accepts) and
return 0-dim tensors so they can sit directly inside an autograd graph.
Probabilities are clamped to ``[EPS, 1 - EPS]`` before any log is taken.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .datamodel import LossWeights

EPS = 1e-6
LOG_EPS = math.log(EPS)
LOG_ONE_MINUS_EPS = math.log1p(-EPS)


class EmptyBatchWarning(UserWarning):
    """Every sample of a batch was filtered out; the step contributes nothing."""


def _t(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def clamp_prob(p) -> torch.Tensor:
    return _t(p).clamp(EPS, 1.0 - EPS)


def log_prob_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """``log sigmoid(logits)`` with the same clamping as :func:`clamp_prob`."""
    return F.logsigmoid(logits).clamp(LOG_EPS, LOG_ONE_MINUS_EPS)


def cross_entropy(probs, labels, reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood of ``labels`` under 2-class ``probs``.

    ``probs`` is ``(2,)`` or ``(B, 2)``; ``labels`` a matching int or ``(B,)``.
    """
    probs = _t(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if probs.dim() == 1:
        probs, labels = probs.unsqueeze(0), labels.reshape(1)
    if probs.shape[-1] != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError("probs must be (B, 2) aligned with labels")
    with torch.no_grad():
        if (probs < 0).any() or ((probs.sum(-1) - 1).abs() > 1e-6).any():
            raise ValueError("probs is not a valid distribution")
    picked = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    per_sample = -torch.log(picked.clamp(EPS, 1.0 - EPS))
    return _reduce(per_sample, reduction)


def bernoulli_kl(teacher_p, student_p, reduction: str = "mean") -> torch.Tensor:
    """KL(Bern(t) || Bern(s)); the teacher side is treated as a constant."""
    s = clamp_prob(student_p)
    t = clamp_prob(_t(teacher_p, like=s)).detach().to(s.dtype)
    per_sample = t * (torch.log(t) - torch.log(s)) + (1 - t) * (torch.log1p(-t) - torch.log1p(-s))
    return _reduce(per_sample, reduction)


def cross_entropy_from_logits(logits: torch.Tensor, labels, reduction: str = "mean") -> torch.Tensor:
    """Same quantity as :func:`cross_entropy` on ``softmax(logits)``, without the probability clamp.

    Training uses this form: once a clamped probability saturates its
    gradient is exactly zero, and a saturated student never recovers.
    """
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, labels, reduction=reduction)


def bernoulli_kl_from_logits(teacher_p, student_logits: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """:func:`bernoulli_kl` with the student side given as logits (no clamp on the student)."""
    t = clamp_prob(_t(teacher_p, like=student_logits)).detach().to(student_logits.dtype)
    log_s, log_1ms = F.logsigmoid(student_logits), F.logsigmoid(-student_logits)
    per_sample = t * (torch.log(t) - log_s) + (1 - t) * (torch.log1p(-t) - log_1ms)
    return _reduce(per_sample, reduction)


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class VPUBatch:
    positive_scores: torch.Tensor
    unlabeled_scores: torch.Tensor

    def __post_init__(self):
        self.positive_scores = clamp_prob(self.positive_scores).reshape(-1)
        self.unlabeled_scores = clamp_prob(self.unlabeled_scores).reshape(-1)
        if self.positive_scores.numel() == 0 or self.unlabeled_scores.numel() == 0:
            raise ValueError("positive and unlabeled score lists must be nonempty")


def vpu_log_loss(log_pos: torch.Tensor, log_unl: torch.Tensor) -> torch.Tensor:
    """Variational PU objective on log-scores: log E_U[f] - E_P[log f]."""
    log_pos, log_unl = log_pos.reshape(-1), log_unl.reshape(-1)
    if log_pos.numel() == 0 or log_unl.numel() == 0:
        raise ValueError("positive and unlabeled score lists must be nonempty")
    log_mean_unl = torch.logsumexp(log_unl, 0) - math.log(log_unl.numel())
    return log_mean_unl - log_pos.mean()


def vpu_loss(batch_or_pos, unlabeled=None) -> torch.Tensor:
    """Variational PU loss from probability scores.

    Accepts either a :class:`VPUBatch` or the two score collections.
    """
    batch = batch_or_pos if isinstance(batch_or_pos, VPUBatch) else VPUBatch(_t(batch_or_pos), _t(unlabeled))
    return vpu_log_loss(torch.log(batch.positive_scores), torch.log(batch.unlabeled_scores))


def student_objective(vc_per_sample, kd_per_sample, l_ir, weights: LossWeights, keep_mask):
    """Weighted student loss over the samples kept by the reliability filter.

    ``l_ir`` is the already-reduced intention PU loss over eligible kept
    samples, or ``None`` when that set is empty. Returns ``(total, terms)``.
    """
    vc = _t(vc_per_sample)
    kd = _t(kd_per_sample, like=vc)
    keep = torch.as_tensor(keep_mask, dtype=torch.bool)
    if keep.shape[0] != vc.shape[0] or kd.shape[0] != vc.shape[0]:
        raise ValueError("mask length must equal batch size")
    zero = vc.sum() * 0.0
    if not keep.any():
        warnings.warn("all samples removed by the reliability filter", EmptyBatchWarning, stacklevel=2)
        return zero, {"l_vc": zero, "l_kd": zero, "l_ir": zero, "n_kept": 0}
    l_vc = vc[keep].mean()
    l_kd = kd[keep].mean()
    l_ir = zero if l_ir is None else _t(l_ir, like=vc)
    total = l_vc + weights.alpha * l_kd + weights.beta * l_ir
    return total, {"l_vc": l_vc, "l_kd": l_kd, "l_ir": l_ir, "n_kept": int(keep.sum())}


def teacher_objective(l_pre, l_pu, delta: float):
    return l_pre + delta * l_pu
