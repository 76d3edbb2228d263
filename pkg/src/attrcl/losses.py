"""Training objectives: InfoNCE on doublets, feature distillation, triplet hinge."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

NORM_EPS = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    tau: float = 0.3
    lambda_kd: float = 1e-4
    margin: float = 0.2
    beta: float = 0.999
    batch: int = 32

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_kd < 0:
            raise ValueError("lambda_kd must be non-negative")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms <= NORM_EPS).any()):
        raise ValueError("cannot normalize a zero-norm embedding")
    return x / norms


def info_nce(anchors: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric in-batch InfoNCE over 2B normalized embeddings.

    Row i's positive is row i+B (and vice versa); the other 2B-2 rows are
    negatives. The self-similarity is excluded from every denominator.
    """
    if anchors.shape != positives.shape or anchors.dim() != 2:
        raise ValueError(f"anchors {tuple(anchors.shape)} and positives "
                         f"{tuple(positives.shape)} must be matching (B, D) matrices")
    b = anchors.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = l2_normalize(torch.cat([anchors, positives], dim=0))
    logits = z @ z.T / tau
    eye = torch.eye(2 * b, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    target = (torch.arange(2 * b, device=z.device) + b) % (2 * b)
    return F.cross_entropy(logits, target)


def distill_mse(student_maps: Sequence[torch.Tensor], teacher_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over (student, teacher) pairs of the element-mean squared difference.

    Teacher maps are detached.
    """
    if len(student_maps) == 0 or len(student_maps) != len(teacher_maps):
        raise ValueError("need equally many (non-zero) student and teacher maps")
    total = None
    for s, t in zip(student_maps, teacher_maps):
        if s.shape != t.shape:
            raise ValueError(f"map shapes differ: {tuple(s.shape)} vs {tuple(t.shape)}")
        term = F.mse_loss(s, t.detach())
        total = term if total is None else total + term
    return total


def total_loss(l_ins, l_kd, lambda_kd: float):
    return l_ins + lambda_kd * l_kd


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("embedding dimensions differ")
    return (l2_normalize(a) * l2_normalize(b)).sum(dim=-1)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                 margin: float = 0.2) -> torch.Tensor:
    """Mean over rows of max(0, m + S(anchor, negative) - S(anchor, positive))."""
    hinge = F.relu(margin + similarity(anchor, negative) - similarity(anchor, positive))
    return hinge.mean()
