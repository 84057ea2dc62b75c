"""Prompt-conditioned mixture-of-experts encoder/decoder backbone.

Three architecturally distinct experts share one latent interface: every
encoder maps a 3xSxS image (conditioned on a class token and a scale
token) to a (p, d) token sequence with p = (S/8)^2, and every decoder maps
the fused sequence back to an 8-channel full-resolution feature map. The
fusion block attends from expert 1's latent (query) over experts 2 and 3
(keys/values), so argument order is positional and deliberate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

TOKEN_INIT_STD = 0.02
DECODER_CHANNELS = 8


@dataclass(frozen=True)
class BackboneConfig:
    canvas_size: int = 64
    embed_dim: int = 32
    num_heads: int = 4
    dropout: float = 0.1
    reinject_tokens: bool = False   # re-apply prompt tokens at every block

    def __post_init__(self):
        if self.canvas_size % 16 != 0:
            raise ShapeError("canvas_size must be a multiple of 16")

    @property
    def grid(self) -> int:
        return self.canvas_size // 8

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid


class TokenBank(nn.Module):
    """Learnable per-class and per-scale embedding rows.

    Rows are append-only: growing the bank copies existing rows bit-exactly
    and initializes only the new ones, so a class keeps its row index for
    the lifetime of the model.
    """

    def __init__(self, num_classes: int, embed_dim: int, generator: torch.Generator = None):
        super().__init__()
        self.embed_dim = embed_dim
        self.class_tokens = nn.Parameter(
            _normal_rows(num_classes, embed_dim, generator)
        )
        self.scale_tokens = nn.Parameter(_normal_rows(4, embed_dim, generator))

    @property
    def num_classes(self) -> int:
        return self.class_tokens.shape[0]

    def class_token(self, idx) -> torch.Tensor:
        return self.class_tokens[idx]

    def scale_token(self, idx) -> torch.Tensor:
        return self.scale_tokens[idx]


def _normal_rows(rows: int, dim: int, generator: torch.Generator = None) -> torch.Tensor:
    t = torch.empty(rows, dim)
    t.normal_(0.0, TOKEN_INIT_STD, generator=generator)
    return t


def grow_token_bank(bank: TokenBank, new_classes: int, generator: torch.Generator = None) -> TokenBank:
    """Return a bank with `new_classes` extra class rows; old rows unchanged."""
    if new_classes < 0:
        raise ValueError("new_classes must be >= 0")
    if new_classes == 0:
        return bank
    grown = TokenBank.__new__(TokenBank)
    nn.Module.__init__(grown)
    grown.embed_dim = bank.embed_dim
    fresh = _normal_rows(new_classes, bank.embed_dim, generator)
    grown.class_tokens = nn.Parameter(
        torch.cat([bank.class_tokens.detach().clone(), fresh], dim=0)
    )
    grown.scale_tokens = nn.Parameter(bank.scale_tokens.detach().clone())
    return grown


def _as_batch_tokens(token: torch.Tensor, batch: int) -> torch.Tensor:
    """Accept a single d-vector or a (B, d) stack; return (B, d)."""
    if token.dim() == 1:
        return token.unsqueeze(0).expand(batch, -1)
    if token.dim() == 2:
        if token.shape[0] != batch:
            raise ShapeError(f"token batch {token.shape[0]} != image batch {batch}")
        return token
    raise ShapeError(f"token must be 1-D or 2-D, got shape {tuple(token.shape)}")


# -- expert 1: convolutional U-Net with bias-style token injection ------------

class ConvUNetExpert(nn.Module):
    """Strided conv encoder / transposed-conv decoder.

    Has no token sequence, so the prompt tokens enter as per-channel biases
    after the stem conv (re-applied per stage when reinjection is on).
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.token_proj = nn.Linear(2 * d, 16)
        self.stem = nn.Conv2d(3, 16, 3, padding=1)
        self.down1 = nn.Conv2d(16, 24, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(24, 32, 3, stride=2, padding=1)
        self.down3 = nn.Conv2d(32, d, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(4, 24)
        self.norm2 = nn.GroupNorm(4, 32)
        self.stage_proj1 = nn.Linear(2 * d, 24)
        self.stage_proj2 = nn.Linear(2 * d, 32)
        self.up1 = nn.ConvTranspose2d(d, 24, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(24, 16, 4, stride=2, padding=1)
        self.up3 = nn.ConvTranspose2d(16, DECODER_CHANNELS, 4, stride=2, padding=1)

    def encode(self, image, class_token, scale_token):
        b = image.shape[0]
        prompt = torch.cat(
            [_as_batch_tokens(class_token, b), _as_batch_tokens(scale_token, b)], dim=1
        )
        x = F.relu(self.stem(image) + self.token_proj(prompt)[:, :, None, None])
        x = F.relu(self.norm1(self.down1(x)))
        if self.cfg.reinject_tokens:
            x = x + self.stage_proj1(prompt)[:, :, None, None]
        x = F.relu(self.norm2(self.down2(x)))
        if self.cfg.reinject_tokens:
            x = x + self.stage_proj2(prompt)[:, :, None, None]
        x = self.down3(x)
        return x.flatten(2).transpose(1, 2)        # (B, p, d)

    def decode(self, latent):
        x = _to_grid(latent, self.cfg)
        x = F.relu(self.up1(x))
        x = F.relu(self.up2(x))
        return self.up3(x)


# -- expert 2: windowed-attention encoder/decoder ------------------------------

class _WindowBlock(nn.Module):
    """Local attention inside 2x2-partitioned windows; the two prompt tokens
    join every window as extra keys/values."""

    def __init__(self, d: int, heads: int, shift: bool):
        super().__init__()
        self.shift = shift
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))

    def forward(self, x, prompt, grid):
        # x: (B, p, d); prompt: (B, 2, d)
        b, p, d = x.shape
        half = grid // 2
        roll = max(1, grid // 4) if self.shift else 0
        g = x.view(b, grid, grid, d)
        if roll:
            g = torch.roll(g, shifts=(roll, roll), dims=(1, 2))
        # Partition into 4 windows of (half x half) tokens.
        w = g.view(b, 2, half, 2, half, d).permute(0, 1, 3, 2, 4, 5)
        w = w.reshape(b * 4, half * half, d)
        ctx = self.norm1(torch.cat([w, prompt.repeat_interleave(4, dim=0)], dim=1))
        att, _ = self.attn(self.norm1(w), ctx, ctx, need_weights=False)
        w = w + att
        w = w + self.ffn(self.norm2(w))
        g = w.view(b, 2, 2, half, half, d).permute(0, 1, 3, 2, 4, 5).reshape(b, grid, grid, d)
        if roll:
            g = torch.roll(g, shifts=(-roll, -roll), dims=(1, 2))
        return g.view(b, p, d)


class WindowAttentionExpert(nn.Module):
    """Patch embedding + two (plain, shifted) window-attention blocks;
    pixel-shuffle decoder."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch = nn.Conv2d(3, d, 8, stride=8)
        self.block1 = _WindowBlock(d, cfg.num_heads, shift=False)
        self.block2 = _WindowBlock(d, cfg.num_heads, shift=True)
        self.up = nn.Sequential(
            nn.Conv2d(d, 64, 3, padding=1), nn.PixelShuffle(2), nn.ReLU(),
            nn.Conv2d(16, 32, 3, padding=1), nn.PixelShuffle(2), nn.ReLU(),
            nn.Conv2d(8, 4 * DECODER_CHANNELS, 3, padding=1), nn.PixelShuffle(2),
        )

    def encode(self, image, class_token, scale_token):
        b = image.shape[0]
        x = self.patch(image).flatten(2).transpose(1, 2)
        prompt = torch.stack(
            [_as_batch_tokens(class_token, b), _as_batch_tokens(scale_token, b)], dim=1
        )
        x = self.block1(x, prompt, self.cfg.grid)
        # Blocks always see the original prompt rows, so reinjection is the
        # default data flow here; the flag is meaningful for sequence experts
        # that carry prompt rows inside the sequence.
        x = self.block2(x, prompt, self.cfg.grid)
        return x

    def decode(self, latent):
        return self.up(_to_grid(latent, self.cfg))


# -- expert 3: patch-sequence transformer encoder, conv decoder ----------------

class _SelfAttention(nn.Module):
    """Plain q/k/v self-attention. Written out by hand so frozen teachers and
    trainable students run the identical kernel sequence (torch's fused MHA
    fast path only activates for grad-free eval calls and drifts by an ulp)."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        assert d % heads == 0
        self.heads = heads
        self.scale = (d // heads) ** -0.5
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, n, self.heads, d // self.heads)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        att = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class _TransformerBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = _SelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PatchTransformerExpert(nn.Module):
    """Prompt rows prepended to the patch sequence, two full-attention
    transformer blocks, upsample-conv decoder."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch = nn.Conv2d(3, d, 8, stride=8)
        self.pos = nn.Parameter(torch.zeros(1, cfg.seq_len + 2, d))
        self.layers = nn.ModuleList(
            [_TransformerBlock(d, cfg.num_heads), _TransformerBlock(d, cfg.num_heads)]
        )
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(d, 24, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(24, 16, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(16, DECODER_CHANNELS, 3, padding=1),
        )

    def encode(self, image, class_token, scale_token):
        b = image.shape[0]
        x = self.patch(image).flatten(2).transpose(1, 2)
        prompt = torch.stack(
            [_as_batch_tokens(class_token, b), _as_batch_tokens(scale_token, b)], dim=1
        )
        x = torch.cat([prompt, x], dim=1) + self.pos
        for i, layer in enumerate(self.layers):
            if i > 0 and self.cfg.reinject_tokens:
                x = torch.cat([prompt, x[:, 2:]], dim=1)
            x = layer(x)
        return x[:, 2:]                             # drop prompt rows

    def decode(self, latent):
        return self.up(_to_grid(latent, self.cfg))


def _to_grid(latent: torch.Tensor, cfg: BackboneConfig) -> torch.Tensor:
    if latent.dim() != 3 or latent.shape[1] != cfg.seq_len or latent.shape[2] != cfg.embed_dim:
        raise ShapeError(
            f"latent must be (B, {cfg.seq_len}, {cfg.embed_dim}), got {tuple(latent.shape)}"
        )
    b = latent.shape[0]
    return latent.transpose(1, 2).reshape(b, cfg.embed_dim, cfg.grid, cfg.grid)


# -- fusion ---------------------------------------------------------------------

class AttentionFusion(nn.Module):
    """Fuse three expert latents into one sequence.

    Steps: multi-head attention with q = latent 1, k = latent 2, v = latent 3;
    residual + dropout onto latent 1; batch-norm applied over the feature
    axis of the transposed sequence; feed-forward; second residual + dropout;
    second transposed batch-norm. Deterministic in eval mode.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.embed_dim
        self.attn = nn.MultiheadAttention(d, cfg.num_heads, batch_first=True)
        self.drop1 = nn.Dropout(cfg.dropout)
        self.norm1 = nn.BatchNorm1d(d)
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.ReLU(), nn.Linear(4 * d, d))
        self.drop2 = nn.Dropout(cfg.dropout)
        self.norm2 = nn.BatchNorm1d(d)

    def forward(self, f1, f2, f3):
        if not (f1.shape == f2.shape == f3.shape):
            raise ShapeError(
                f"latent shapes differ: {tuple(f1.shape)}, {tuple(f2.shape)}, {tuple(f3.shape)}"
            )
        if f1.dim() != 3:
            raise ShapeError(f"latents must be (B, p, d), got {tuple(f1.shape)}")
        att, _ = self.attn(f1, f2, f3, need_weights=False)
        x = f1 + self.drop1(att)
        x = self.norm1(x.transpose(1, 2)).transpose(1, 2)
        f = self.ffn(x)
        x = x + self.drop2(f)
        return self.norm2(x.transpose(1, 2)).transpose(1, 2)


def build_experts(cfg: BackboneConfig) -> nn.ModuleList:
    return nn.ModuleList(
        [ConvUNetExpert(cfg), WindowAttentionExpert(cfg), PatchTransformerExpert(cfg)]
    )
