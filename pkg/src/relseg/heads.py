"""Per-(class, scale) dynamic segmentation head.

A controller network maps the pooled fused feature plus the two prompt
tokens to a 162-value parameter vector; those values are the weights and
biases of three 1x1 convolutions (8->8 ReLU, 8->8 ReLU, 8->2 linear)
applied to the 8-channel decoder feature map. 162 = (8*8+8) + (8*8+8) +
(8*2+2); the layout is load-bearing and checked at import time.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

HEAD_CHANNELS = 8
HEAD_OUT_CHANNELS = 2
_LAYER1 = HEAD_CHANNELS * HEAD_CHANNELS + HEAD_CHANNELS
_LAYER2 = HEAD_CHANNELS * HEAD_CHANNELS + HEAD_CHANNELS
_LAYER3 = HEAD_CHANNELS * HEAD_OUT_CHANNELS + HEAD_OUT_CHANNELS
DYNAMIC_PARAM_COUNT = _LAYER1 + _LAYER2 + _LAYER3

assert DYNAMIC_PARAM_COUNT == 162, "dynamic head layout drifted"


def param_layout() -> tuple:
    """Sizes of the three parameter slices: (72, 72, 18)."""
    return (_LAYER1, _LAYER2, _LAYER3)


class DynamicController(nn.Module):
    """Generate the head parameters from fused features and prompt tokens.

    The fused sequence is global-average-pooled over its token axis, then
    concatenated with the class and scale tokens and pushed through one
    hidden layer.
    """

    def __init__(self, embed_dim: int, hidden: int = 128):
        super().__init__()
        self.embed_dim = embed_dim
        self.net = nn.Sequential(
            nn.Linear(3 * embed_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, DYNAMIC_PARAM_COUNT),
        )

    def forward(self, fused, class_token, scale_token):
        if fused.dim() != 3 or fused.shape[-1] != self.embed_dim:
            raise ShapeError(f"fused must be (B, p, {self.embed_dim}), got {tuple(fused.shape)}")
        b = fused.shape[0]
        if class_token.dim() == 1:
            class_token = class_token.unsqueeze(0).expand(b, -1)
        if scale_token.dim() == 1:
            scale_token = scale_token.unsqueeze(0).expand(b, -1)
        if class_token.shape != (b, self.embed_dim) or scale_token.shape != (b, self.embed_dim):
            raise ShapeError("prompt tokens must match (B, embed_dim)")
        pooled = fused.mean(dim=1)
        return self.net(torch.cat([pooled, class_token, scale_token], dim=1))


def apply_head(features: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Run the three generated 1x1 conv layers over decoder features.

    features: (B, 8, H, W); params: (B, 162) or (162,). Returns logits
    (B, 2, H, W). Kernels are 1x1, so the head is strictly pixelwise.
    """
    if features.dim() == 3:
        features = features.unsqueeze(0)
    if features.dim() != 4 or features.shape[1] != HEAD_CHANNELS:
        raise ShapeError(f"features must be (B, {HEAD_CHANNELS}, H, W), got {tuple(features.shape)}")
    b = features.shape[0]
    if params.dim() == 1:
        params = params.unsqueeze(0).expand(b, -1)
    if params.shape != (b, DYNAMIC_PARAM_COUNT):
        raise ShapeError(f"params must be (B, {DYNAMIC_PARAM_COUNT}), got {tuple(params.shape)}")

    c, o = HEAD_CHANNELS, HEAD_OUT_CHANNELS
    ofs = 0
    w1 = params[:, ofs:ofs + c * c].reshape(b, c, c); ofs += c * c
    b1 = params[:, ofs:ofs + c]; ofs += c
    w2 = params[:, ofs:ofs + c * c].reshape(b, c, c); ofs += c * c
    b2 = params[:, ofs:ofs + c]; ofs += c
    w3 = params[:, ofs:ofs + c * o].reshape(b, o, c); ofs += c * o
    b3 = params[:, ofs:ofs + o]; ofs += o
    assert ofs == DYNAMIC_PARAM_COUNT

    x = F.relu(torch.einsum("boi,bihw->bohw", w1, features) + b1[:, :, None, None])
    x = F.relu(torch.einsum("boi,bihw->bohw", w2, x) + b2[:, :, None, None])
    return torch.einsum("boi,bihw->bohw", w3, x) + b3[:, :, None, None]


def foreground_probability(logits: torch.Tensor) -> torch.Tensor:
    """Softmax channel 1 (class present) of 2-channel logits."""
    if logits.shape[-3] != HEAD_OUT_CHANNELS:
        raise ShapeError(f"expected {HEAD_OUT_CHANNELS}-channel logits, got {tuple(logits.shape)}")
    return torch.softmax(logits, dim=-3).select(-3, 1)
