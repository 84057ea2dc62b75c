"""Training objectives: supervision, relation-branching anatomy penalty,
teacher consistency, and total-loss aggregation.

Sign conventions matter here. `soft_dice` is the similarity coefficient
(1 = identical), used directly as a penalty by the anatomy branches that
must shrink an overlap, and as `1 - dice` inside the supervised loss. The
subset branch ships in two modes: `literal` keeps the negative-dice form
over the soft union (zero gradient inside the labeled region, pushes
predicted mass outside it down), `prose` is a soft recall penalty that
instead pulls the old-class prediction up to cover the new label. Both are
exercised by tests; literal is the default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import torch

from .errors import (
    InvalidMaskError,
    NonFiniteError,
    ShapeError,
    StepMismatchError,
)
from .heads import foreground_probability
from .relations import RelationKind

EPS = 1e-6


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def soft_dice(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Soft Dice similarity 2*sum(ab) / (sum(a) + sum(b) + eps), over all elements."""
    _check_same_shape(a, b)
    inter = (a * b).sum()
    return 2.0 * inter / (a.sum() + b.sum() + EPS)


def _soft_dice_spatial(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample soft Dice over the trailing two (spatial) dims."""
    inter = (a * b).sum(dim=(-2, -1))
    return 2.0 * inter / (a.sum(dim=(-2, -1)) + b.sum(dim=(-2, -1)) + EPS)


def supervised_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """(1 - soft Dice of the foreground probability) + 2-class cross-entropy."""
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    if label.dim() == 2:
        label = label.unsqueeze(0)
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be (B, 2, H, W), got {tuple(logits.shape)}")
    if label.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ShapeError(
            f"label {tuple(label.shape)} does not match logits {tuple(logits.shape)}"
        )
    label = label.to(logits.dtype)
    fg = foreground_probability(logits)
    dice_term = 1.0 - soft_dice(fg, label)
    ce_term = torch.nn.functional.cross_entropy(logits, label.long())
    return dice_term + ce_term


def anatomy_loss(
    label_new: torch.Tensor,
    prob_old: torch.Tensor,
    relation: RelationKind,
    mode: str = "literal",
) -> torch.Tensor:
    """Relation-branching penalty tying an old-class prediction to a new-class label.

    label_new: binary mask Y for the labeled (new) class; prob_old: foreground
    probability P for an old class on the same image, in [0, 1]. Accepts
    (H, W) or (B, H, W); batched inputs are averaged per sample.

    Branches (soft union u = Y + P - Y*P):
      NEW_SUPERSET_OF_OLD   dice(1 - Y, P): penalize P mass outside Y.
      NEW_SUBSET_OF_OLD     literal: -dice(Y, u); prose: 1 - sum(Y*P)/(sum(Y)+eps).
      MUTUALLY_EXCLUSIVE    dice(Y, P): penalize any overlap.
      UNRELATED             exactly 0.
    """
    _check_same_shape(label_new, prob_old)
    if label_new.dim() not in (2, 3):
        raise ShapeError(f"masks must be (H, W) or (B, H, W), got {tuple(label_new.shape)}")
    if mode not in ("literal", "prose"):
        raise ValueError(f"mode must be 'literal' or 'prose', got {mode!r}")
    if relation is RelationKind.UNRELATED:
        return torch.zeros((), dtype=prob_old.dtype, device=prob_old.device)
    uniq = torch.unique(label_new.detach())
    if not torch.all((uniq == 0) | (uniq == 1)):
        raise InvalidMaskError("label_new must be binary")
    y = label_new.to(prob_old.dtype)
    p = prob_old
    if relation is RelationKind.NEW_SUPERSET_OF_OLD:
        per = _soft_dice_spatial(1.0 - y, p)
    elif relation is RelationKind.NEW_SUBSET_OF_OLD:
        if mode == "literal":
            union = y + p - y * p
            per = -_soft_dice_spatial(y, union)
        else:
            per = 1.0 - (y * p).sum(dim=(-2, -1)) / (y.sum(dim=(-2, -1)) + EPS)
    elif relation is RelationKind.MUTUALLY_EXCLUSIVE:
        per = _soft_dice_spatial(y, p)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unhandled relation {relation}")
    return per.mean()


def consistency_loss(
    teacher: torch.Tensor, student: torch.Tensor, channel_dim: int = 1
) -> torch.Tensor:
    """KL(student || teacher) over channel softmax + MSE of raw values.

    The teacher argument comes first and is detached; identical inputs give
    exactly zero.
    """
    _check_same_shape(teacher, student)
    teacher = teacher.detach()
    log_s = torch.log_softmax(student, dim=channel_dim)
    log_t = torch.log_softmax(teacher, dim=channel_dim)
    s = log_s.exp()
    kl_per_pos = (s * (log_s - log_t)).sum(dim=channel_dim)
    kl = kl_per_pos.mean()
    mse = torch.nn.functional.mse_loss(student, teacher)
    return kl + mse


@dataclass
class DistillToggles:
    """Which consistency terms participate (ablation switches)."""

    token: bool = True
    latent: bool = True
    decoder: bool = True
    logits: bool = True
    pseudo_labels: bool = False    # replace the logits term with hard pseudo-labels


@dataclass
class SemiLossResult:
    total: torch.Tensor
    token: torch.Tensor
    latent: torch.Tensor
    decoder: torch.Tensor
    logits: torch.Tensor

    def components(self) -> Dict[str, float]:
        return {
            "token": float(self.token),
            "latent": float(self.latent),
            "decoder": float(self.decoder),
            "logits": float(self.logits),
        }


def semi_loss(
    teacher,
    student,
    image: torch.Tensor,
    old_class_ids: Sequence[int],
    scale_idx,
    toggles: Optional[DistillToggles] = None,
) -> SemiLossResult:
    """Distill old-class behavior from the frozen previous-step model.

    For every old class, both models run a conditioned forward pass on the
    same image; tokens, fused latents, decoder features, and prediction
    logits are each pulled toward the teacher's. Terms sum over old classes;
    every consistency call averages over the batch internally.
    """
    if teacher.step >= student.step:
        raise StepMismatchError(
            f"teacher step {teacher.step} must precede student step {student.step}"
        )
    toggles = toggles or DistillToggles()
    zero = torch.zeros((), dtype=image.dtype, device=image.device)
    token_term, latent_term, decoder_term, logits_term = zero, zero, zero, zero
    for cid in old_class_ids:
        with torch.no_grad():
            t_out = teacher(image, cid, scale_idx)
            t_token = teacher.token_bank.class_tokens[cid]
        s_out = student(image, cid, scale_idx)
        s_token = student.token_bank.class_tokens[cid]
        if toggles.token:
            token_term = token_term + consistency_loss(t_token, s_token, channel_dim=-1)
        if toggles.latent:
            latent_term = latent_term + consistency_loss(t_out.fused, s_out.fused, channel_dim=-1)
        if toggles.decoder:
            decoder_term = decoder_term + consistency_loss(t_out.decoder, s_out.decoder, channel_dim=1)
        if toggles.logits:
            if toggles.pseudo_labels:
                # Strict threshold: exact ties (uniform 0.5) become background.
                pseudo = (foreground_probability(t_out.logits) > 0.5).to(image.dtype)
                logits_term = logits_term + supervised_loss(s_out.logits, pseudo)
            else:
                logits_term = logits_term + consistency_loss(t_out.logits, s_out.logits, channel_dim=1)
    total = token_term + latent_term + decoder_term + logits_term
    return SemiLossResult(
        total=total, token=token_term, latent=latent_term,
        decoder=decoder_term, logits=logits_term,
    )


def total_loss(
    supervised: torch.Tensor,
    anatomy: torch.Tensor,
    semi: torch.Tensor,
    lambda_anatomy: float = 1.0,
    lambda_semi: float = 1.0,
) -> torch.Tensor:
    """supervised + lambda_a * anatomy + lambda_s * semi."""
    for name, t in (("supervised", supervised), ("anatomy", anatomy), ("semi", semi)):
        if not torch.isfinite(torch.as_tensor(t)).all():
            raise NonFiniteError(f"{name} loss is not finite")
    return supervised + lambda_anatomy * anatomy + lambda_semi * semi


@dataclass
class LossReport:
    """Per-batch loss record written to losses.jsonl."""

    supervised: float
    anatomy: float
    semi: float
    semi_components: Dict[str, float] = field(default_factory=dict)
    lambda_anatomy: float = 1.0
    lambda_semi: float = 1.0
    total: float = 0.0

    def __post_init__(self):
        expected = self.supervised + self.lambda_anatomy * self.anatomy + self.lambda_semi * self.semi
        if self.total == 0.0:
            self.total = expected
        for name, v in (("supervised", self.supervised), ("anatomy", self.anatomy),
                        ("semi", self.semi), ("total", self.total)):
            if not torch.isfinite(torch.tensor(v)):
                raise NonFiniteError(f"{name} component is not finite")

    def to_dict(self) -> dict:
        return {
            "supervised": self.supervised,
            "anatomy": self.anatomy,
            "semi": self.semi,
            "semi_components": dict(self.semi_components),
            "lambda_anatomy": self.lambda_anatomy,
            "lambda_semi": self.lambda_semi,
            "total": self.total,
        }
