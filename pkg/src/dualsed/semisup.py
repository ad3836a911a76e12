"""Loss stack and teacher machinery.

Supervised BCE on strong/weak heads, mean-teacher EMA + MSE consistency,
interpolation consistency (student on mixed inputs vs the same mix of
teacher predictions on unmixed inputs), and the composite total where the
interpolation term replaces the mean-teacher term whenever mixup is drawn.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .exceptions import ConfigurationError
from .features import AugmentationDraw
from .model import PredictionPair


def make_teacher(student: nn.Module) -> nn.Module:
    """Detached EMA copy of the student; never receives gradients."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, decay: float) -> None:
    """theta_t <- decay * theta_t + (1 - decay) * theta_s, once per step."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigurationError("EMA decay must be in [0, 1]")
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ConfigurationError("student/teacher parameter trees differ")
    for name, sp in s_params.items():
        tp = t_params[name]
        if tp.shape != sp.shape:
            raise ConfigurationError(f"shape mismatch for {name}")
        tp.mul_(decay).add_(sp, alpha=1.0 - decay)


def _check_posteriors(*tensors):
    for t in tensors:
        if t.numel() and (t.min() < 0 or t.max() > 1):
            raise ConfigurationError("posteriors must lie in [0, 1]")


def bce_loss(
    preds: PredictionPair,
    strong_targets: torch.Tensor,
    weak_targets: torch.Tensor,
    strong_mask: torch.Tensor,
    weak_mask: torch.Tensor,
) -> torch.Tensor:
    """Mean BCE over strong items' frame x class grid plus mean BCE over weak
    items' classes. Unlabeled items contribute nothing. Soft targets allowed."""
    _check_posteriors(preds.strong, preds.weak)
    zero = preds.strong.sum() * 0.0
    loss = zero
    eps = 1e-7
    if strong_mask.any():
        p = preds.strong[strong_mask].clamp(eps, 1 - eps)
        loss = loss + nn.functional.binary_cross_entropy(p, strong_targets[strong_mask])
    if weak_mask.any():
        p = preds.weak[weak_mask].clamp(eps, 1 - eps)
        loss = loss + nn.functional.binary_cross_entropy(p, weak_targets[weak_mask])
    return loss


def mt_loss(student: PredictionPair, teacher: PredictionPair) -> torch.Tensor:
    """Mean of the strong-head and weak-head MSEs between student posteriors
    and (detached) teacher pseudo labels, over all batch items."""
    if student.strong.shape != teacher.strong.shape or student.weak.shape != teacher.weak.shape:
        raise ConfigurationError("student/teacher prediction shape mismatch")
    t_strong = teacher.strong.detach()
    t_weak = teacher.weak.detach()
    strong = ((student.strong - t_strong) ** 2).mean()
    weak = ((student.weak - t_weak) ** 2).mean()
    return (strong + weak) / 2.0


def ict_loss(
    student_on_mixed: PredictionPair,
    teacher_a: PredictionPair,
    teacher_b: PredictionPair,
    lam: float,
) -> torch.Tensor:
    """MSE between student predictions on mixed inputs and the lambda-mix of
    teacher predictions on the unmixed inputs."""
    if not 0.0 < lam < 1.0:
        raise ConfigurationError("interpolation factor must be in (0, 1)")
    target = PredictionPair(
        strong=(lam * teacher_a.strong + (1.0 - lam) * teacher_b.strong).detach(),
        weak=(lam * teacher_a.weak + (1.0 - lam) * teacher_b.weak).detach(),
        frame_hop_out=student_on_mixed.frame_hop_out,
    )
    return mt_loss(student_on_mixed, target)


@dataclass
class LossBreakdown:
    l_bce: torch.Tensor
    l_mt: torch.Tensor
    l_ict: torch.Tensor
    r_mt: float
    r_ict: float
    total: torch.Tensor

    def __post_init__(self):
        if float(self.l_mt.detach()) != 0.0 and float(self.l_ict.detach()) != 0.0:
            raise ConfigurationError("at most one consistency term may be active per step")

    def as_dict(self) -> dict:
        return {
            "l_bce": float(self.l_bce.detach()),
            "l_mt": float(self.l_mt.detach()),
            "l_ict": float(self.l_ict.detach()),
            "r_mt": self.r_mt,
            "r_ict": self.r_ict,
            "total": float(self.total.detach()),
        }


def composite_loss(
    student: PredictionPair,
    teacher_preds,
    strong_targets: torch.Tensor,
    weak_targets: torch.Tensor,
    strong_mask: torch.Tensor,
    weak_mask: torch.Tensor,
    draw: AugmentationDraw,
    r_mt: float,
    r_ict: float,
    use_ict: bool = True,
    supervised_enabled: bool = True,
) -> LossBreakdown:
    """Total = BCE + r_mt * MT + r_ict * ICT, with the interpolation term
    replacing the mean-teacher term whenever mixup was drawn (and ICT is in
    use, i.e. the fine-tuning stage).

    teacher_preds is a PredictionPair for the mean-teacher path or a
    (teacher_a, teacher_b) pair for the interpolation path.
    """
    if r_mt < 0 or r_ict < 0:
        raise ConfigurationError("loss weights must be >= 0")
    if supervised_enabled:
        l_bce = bce_loss(student, strong_targets, weak_targets, strong_mask, weak_mask)
    else:
        l_bce = student.strong.sum() * 0.0
    zero = student.strong.sum() * 0.0
    if use_ict and draw.use_mixup:
        teacher_a, teacher_b = teacher_preds
        l_ict = ict_loss(student, teacher_a, teacher_b, draw.mix_lambda)
        l_mt = zero
        total = l_bce + r_mt * l_mt + r_ict * l_ict
    else:
        if isinstance(teacher_preds, tuple):
            raise ConfigurationError("mean-teacher path expects a single teacher prediction")
        l_mt = mt_loss(student, teacher_preds)
        l_ict = zero
        total = l_bce + r_mt * l_mt + r_ict * l_ict
    return LossBreakdown(l_bce=l_bce, l_mt=l_mt, l_ict=l_ict, r_mt=r_mt, r_ict=r_ict, total=total)
