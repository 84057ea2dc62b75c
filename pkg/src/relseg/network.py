"""Full segmenter: experts + fusion + token bank + dynamic head controller.

One module instance is the complete trainable state for a continual-learning
step (weights, token bank, step index, class registry). Teachers are deep
snapshots in eval mode; checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn as nn

from .backbone import (
    AttentionFusion,
    BackboneConfig,
    TokenBank,
    build_experts,
    grow_token_bank,
)
from .errors import FormatError, ShapeError, UnknownClassError
from .heads import DynamicController, apply_head
from .relations import ClassInfo

CHECKPOINT_VERSION = 1


@dataclass
class ForwardOutputs:
    """Everything the losses need from one conditioned forward pass."""

    latents: List[torch.Tensor]      # three (B, p, d) expert latents
    fused: torch.Tensor              # (B, p, d)
    decoder: torch.Tensor            # (B, 8, H, W)
    logits: torch.Tensor             # (B, 2, H, W)


class MoESegmenter(nn.Module):
    """Prompt-conditioned binary segmenter over a growing class registry."""

    def __init__(self, classes: Sequence[ClassInfo], config: BackboneConfig = None,
                 seed: int = 0):
        super().__init__()
        self.config = config or BackboneConfig()
        self.classes: List[ClassInfo] = list(classes)
        self.step = max((c.step_introduced for c in self.classes), default=1)
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)                # expert/controller init
        self.experts = build_experts(self.config)
        self.fusion = AttentionFusion(self.config)
        self.controller = DynamicController(self.config.embed_dim)
        self.token_bank = TokenBank(len(self.classes), self.config.embed_dim, gen)
        self._check_registry()

    def _check_registry(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise UnknownClassError(
                "class ids must be dense 0..k-1 in registration order, got "
                f"{ids}"
            )

    # -- registry ------------------------------------------------------------

    def has_class(self, class_id: int) -> bool:
        return 0 <= class_id < len(self.classes)

    def class_info(self, class_id: int) -> ClassInfo:
        if not self.has_class(class_id):
            raise UnknownClassError(f"class {class_id} not registered")
        return self.classes[class_id]

    def grow(self, new_classes: Sequence[ClassInfo], seed: int = 0) -> None:
        """Register new classes and append token rows for them."""
        for c in new_classes:
            if self.has_class(c.id):
                raise UnknownClassError(f"class id {c.id} already registered")
        merged = self.classes + list(new_classes)
        if [c.id for c in merged] != list(range(len(merged))):
            raise UnknownClassError("grown registry must stay dense in id order")
        gen = torch.Generator().manual_seed(seed)
        self.token_bank = grow_token_bank(self.token_bank, len(new_classes), gen)
        self.classes = merged

    # -- forward ---------------------------------------------------------------

    def _lookup_tokens(self, class_idx, scale_idx, batch: int, device):
        class_idx = _as_index(class_idx, batch, device, len(self.classes), "class")
        scale_idx = _as_index(scale_idx, batch, device, 4, "scale")
        return self.token_bank.class_tokens[class_idx], self.token_bank.scale_tokens[scale_idx]

    def forward(self, image: torch.Tensor, class_idx, scale_idx) -> ForwardOutputs:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"image must be (B, 3, S, S), got {tuple(image.shape)}")
        if image.shape[-1] != self.config.canvas_size or image.shape[-2] != self.config.canvas_size:
            raise ShapeError(
                f"image spatial size {tuple(image.shape[-2:])} != canvas "
                f"{self.config.canvas_size}"
            )
        t_c, t_s = self._lookup_tokens(class_idx, scale_idx, image.shape[0], image.device)
        latents = [expert.encode(image, t_c, t_s) for expert in self.experts]
        fused = self.fusion(*latents)
        decoder = sum(expert.decode(fused) for expert in self.experts)
        params = self.controller(fused, t_c, t_s)
        logits = apply_head(decoder, params)
        return ForwardOutputs(latents=latents, fused=fused, decoder=decoder, logits=logits)

    def predict_logits(self, image, class_idx, scale_idx) -> torch.Tensor:
        return self.forward(image, class_idx, scale_idx).logits


def _as_index(idx, batch: int, device, limit: int, what: str) -> torch.Tensor:
    if isinstance(idx, int):
        t = torch.full((batch,), idx, dtype=torch.long, device=device)
    else:
        t = torch.as_tensor(idx, dtype=torch.long, device=device)
        if t.dim() == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ShapeError(f"{what} index must be scalar or (B,), got {tuple(t.shape)}")
    if int(t.min()) < 0 or int(t.max()) >= limit:
        raise UnknownClassError(f"{what} index out of range [0, {limit})")
    return t


# -- snapshots and checkpoints ---------------------------------------------------

def snapshot(model: MoESegmenter) -> MoESegmenter:
    """Deep frozen copy in eval mode, for use as a distillation teacher."""
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def save_checkpoint(model: MoESegmenter, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "backbone_config": {
                "canvas_size": model.config.canvas_size,
                "embed_dim": model.config.embed_dim,
                "num_heads": model.config.num_heads,
                "dropout": model.config.dropout,
                "reinject_tokens": model.config.reinject_tokens,
            },
            "step": model.step,
            "classes": [c.to_dict() for c in model.classes],
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> MoESegmenter:
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise FormatError(f"{path}: cannot read checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = BackboneConfig(**doc["backbone_config"])
    classes = [ClassInfo.from_dict(d) for d in doc["classes"]]
    model = MoESegmenter(classes, cfg)
    model.step = int(doc["step"])
    model.load_state_dict(doc["state_dict"], strict=True)
    model.eval()
    return model
