"""Pixel-level grounding: a small convolutional grounding encoder, the
projection of SEG-position hidden states into prompt embeddings, and a
prompt-conditioned mask decoder emitting full-resolution logit grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


@dataclass
class PgConfig:
    d_feat: int = 32
    d_prompt: int = 64
    refine_ch: int = 8


class GroundEncoder(nn.Module):
    """Two stride-2 conv stages: (B, H, W) image -> (B, d_feat, H/4, W/4)."""

    def __init__(self, cfg: PgConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, cfg.d_feat, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(cfg.d_feat, cfg.d_feat, 3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 3:
            raise ShapeError(f"expected (B, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"image dims {h}x{w} must be divisible by 4")
        x = images[:, None]
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.conv3(x)


class PromptProjector(nn.Module):
    """Two-layer MLP taking a SEG-position hidden state to prompt space."""

    def __init__(self, d_model: int, cfg: PgConfig):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, cfg.d_prompt)

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(state)))


class MaskDecoder(nn.Module):
    """Scores each pixel by the inner product of its upsampled feature
    embedding with a prompt-derived query, then adds a conv refinement.
    """

    def __init__(self, cfg: PgConfig):
        super().__init__()
        self.cfg = cfg
        self.query_proj = nn.Linear(cfg.d_prompt, cfg.d_feat)
        self.score_bias = nn.Parameter(torch.zeros(1))
        self.feat_reduce = nn.Conv2d(cfg.d_feat, cfg.refine_ch, 1)
        self.refine = nn.Sequential(
            nn.Conv2d(cfg.refine_ch + 1, cfg.refine_ch, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(cfg.refine_ch, 1, 3, padding=1),
        )

    def forward(self, features: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        """(B, d_feat, h, w) features + (B, d_prompt) prompt -> (B, 4h, 4w) logits."""
        if features.ndim != 4 or features.shape[1] != self.cfg.d_feat:
            raise ShapeError(f"bad feature shape {tuple(features.shape)}")
        if prompt.ndim != 2 or prompt.shape[-1] != self.cfg.d_prompt:
            raise ShapeError(f"bad prompt shape {tuple(prompt.shape)}")
        up = F.interpolate(features, scale_factor=4, mode="bilinear",
                           align_corners=False)
        query = self.query_proj(prompt)
        score = (up * query[:, :, None, None]).sum(1, keepdim=True)
        score = score / math.sqrt(self.cfg.d_feat) + self.score_bias
        residual = self.refine(torch.cat([score, self.feat_reduce(up)], dim=1))
        return (score + residual).squeeze(1)
