# utils/losses.py

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# Keeps sqrt(1 - cos^2) differentiable when an embedding sits on a class row
SINE_FLOOR = 1e-12


class ArcFaceHead(nn.Module):
    """Class rows for scaled cosine logits with an additive angular margin"""

    def __init__(self, num_classes, embedding, margin=0.7, scale=30.0):
        super().__init__()
        if not 0 <= margin < math.pi:
            raise ValueError(f"ArcFace margin must lie in [0, pi), got {margin}")
        if not scale > 0:
            raise ValueError(f"ArcFace scale must be positive, got {scale}")
        self.margin = float(margin)
        self.scale = float(scale)
        self.weight = nn.Parameter(torch.empty(num_classes, embedding))
        self.reset_parameters()

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        bound = 1.0 / math.sqrt(self.weight.shape[1])
        with torch.no_grad():
            self.weight.uniform_(-bound, bound, generator=generator)

    def cosine(self, emb):
        if torch.any(emb.detach().norm(dim=1) == 0):
            raise ValueError("zero embedding has no direction; cannot compute ArcFace cosines")
        return F.linear(F.normalize(emb, dim=1), F.normalize(self.weight, dim=1))

    def forward(self, emb, target=None):
        return arcface_logits(emb, self, target)


def arcface_logits(emb, head: ArcFaceHead, target=None):
    """
    Scaled cosine logits. With a target, its logit becomes s*cos(theta + m), or
    s*(cos(theta) - m*sin(m)) once theta + m would pass pi.
    """
    cos = head.cosine(emb)
    if target is None or head.margin == 0:
        return head.scale * cos

    m = head.margin
    sine = torch.sqrt((1.0 - cos * cos).clamp(min=SINE_FLOOR))
    phi = cos * math.cos(m) - sine * math.sin(m)
    phi = torch.where(cos > math.cos(math.pi - m), phi, cos - m * math.sin(m))
    is_target = F.one_hot(target, head.num_classes).bool()
    return head.scale * torch.where(is_target, phi, cos)


def cross_entropy(logits, target):
    """Mean -log softmax(logits)[target]; log-sum-exp keeps large logits finite"""
    return F.cross_entropy(logits, target)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.0005
    min_lr: float = 0.0
    total_epochs: int = 200

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"schedule needs at least one epoch, got {self.total_epochs}")
        if not 0 <= self.min_lr <= self.base_lr:
            raise ValueError(f"need 0 <= min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")


def lr_at(sched: LrSchedule, epoch: float) -> float:
    """Cosine annealing from base_lr at epoch 0 to min_lr at the last epoch, no restarts"""
    if not 0 <= epoch <= sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    cosine = 1.0 + math.cos(math.pi * epoch / sched.total_epochs)
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * cosine


def build_optimizer(named_trainable: Iterable[Tuple[str, torch.Tensor]], lr: float):
    params = [p for _, p in named_trainable]
    if not params:
        raise ValueError("no trainable tensors to optimize")
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)


def adam_step(optimizer, named_trainable: Iterable[Tuple[str, torch.Tensor]], lr: float) -> None:
    """Bias-corrected Adam update at `lr`; only tensors the optimizer owns move"""
    missing = [name for name, p in named_trainable if p.requires_grad and p.grad is None]
    if missing:
        raise ValueError(f"no gradient for trainable tensor(s): {', '.join(missing[:5])}")
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
