"""Global context understanding: patch encoder, visual projection, and a
small prefix-LM transformer producing per-position hidden states and logits.

The visual token prefix attends bidirectionally within itself; text positions
attend to the whole prefix and causally to earlier text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import SequenceTooLong, ShapeError


@dataclass
class GcuConfig:
    patch_size: int = 8
    d_vision: int = 64
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 256
    vocab_size: int = 0
    max_grid: int = 16          # max patches per image side

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be set from the tokenizer")


def prefix_attention_mask(n_visual: int, seq_len: int,
                          device=None) -> torch.Tensor:
    """Boolean (seq, seq) mask, True where position i may attend to j."""
    idx = torch.arange(seq_len, device=device)
    return (idx[None, :] < n_visual) | (idx[None, :] <= idx[:, None])


class Attention(nn.Module):
    def __init__(self, cfg: GcuConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~allowed, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, s, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, cfg: GcuConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp(self.ln2(x))


class Gcu(nn.Module):
    def __init__(self, cfg: GcuConfig):
        super().__init__()
        self.cfg = cfg
        p2 = cfg.patch_size * cfg.patch_size
        self.patch_proj = nn.Linear(p2, cfg.d_vision)
        self.pos_row = nn.Embedding(cfg.max_grid, cfg.d_vision)
        self.pos_col = nn.Embedding(cfg.max_grid, cfg.d_vision)
        self.vis_proj = nn.Linear(cfg.d_vision, cfg.d_model)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) float images -> (B, n_patches, d_vision) visual tokens.

        Non-overlapping patches, linear map, additive 2-D (row+col) position
        encoding.
        """
        if images.ndim != 3:
            raise ShapeError(f"expected (B, H, W) images, got {tuple(images.shape)}")
        b, h, w = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ShapeError(f"image dims {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        if gh > self.cfg.max_grid or gw > self.cfg.max_grid:
            raise ShapeError(f"patch grid {gh}x{gw} exceeds max_grid {self.cfg.max_grid}")
        patches = images.view(b, gh, p, gw, p).permute(0, 1, 3, 2, 4)
        patches = patches.reshape(b, gh * gw, p * p)
        tokens = self.patch_proj(patches)
        rows = torch.arange(gh, device=images.device)
        cols = torch.arange(gw, device=images.device)
        pos = (self.pos_row(rows)[:, None, :] + self.pos_col(cols)[None, :, :])
        return tokens + pos.reshape(1, gh * gw, -1)

    def project_visual(self, visual_tokens: torch.Tensor) -> torch.Tensor:
        """Row-wise affine map d_vision -> d_model."""
        if visual_tokens.shape[-1] != self.cfg.d_vision:
            raise ShapeError(
                f"expected last dim {self.cfg.d_vision}, got {visual_tokens.shape[-1]}"
            )
        return self.vis_proj(visual_tokens)

    def llm_forward(self, projected: torch.Tensor,
                    text_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the prefix-LM over [visual prefix, text].

        projected: (B, n_vis, d_model); text_ids: (B, T) long.
        Returns (states, logits), each (B, n_vis + T, ·).
        """
        if projected.ndim != 3 or projected.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"bad projected token shape {tuple(projected.shape)}")
        b, n_vis, _ = projected.shape
        t = text_ids.shape[1]
        s = n_vis + t
        if s > self.cfg.max_seq:
            raise SequenceTooLong(f"sequence length {s} exceeds max_seq {self.cfg.max_seq}")
        x = torch.cat([projected, self.tok_emb(text_ids)], dim=1)
        x = x + self.pos_emb(torch.arange(s, device=x.device))[None]
        allowed = prefix_attention_mask(n_vis, s, device=x.device)[None, None]
        for block in self.blocks:
            x = block(x, allowed)
        states = self.ln_f(x)
        return states, self.lm_head(states)

    def forward(self, images: torch.Tensor,
                text_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        projected = self.project_visual(self.encode_image(images))
        return self.llm_forward(projected, text_ids)

    @torch.no_grad()
    def generate(self, image: torch.Tensor, prefix_ids: list[int],
                 max_new_tokens: int, eos_id: int) -> list[int]:
        """Greedy decode from [visual prefix, prefix_ids]; stops at EOS or
        budget. Returns only the newly generated ids (EOS included when hit).

        torch.argmax breaks ties by lowest index, which gives the lowest
        token id.
        """
        projected = self.project_visual(self.encode_image(image[None]))
        n_vis = projected.shape[1]
        prefix_len = n_vis + len(prefix_ids)
        if prefix_len > self.cfg.max_seq or (
            max_new_tokens > 0 and prefix_len >= self.cfg.max_seq
        ):
            raise SequenceTooLong(
                f"prefix of {prefix_len} tokens leaves no room to generate "
                f"(max_seq {self.cfg.max_seq})"
            )
        ids = list(prefix_ids)
        out: list[int] = []
        budget = min(max_new_tokens, self.cfg.max_seq - n_vis - len(prefix_ids))
        for _ in range(budget):
            ids_t = torch.tensor([ids], dtype=torch.long, device=image.device)
            _, logits = self.llm_forward(projected, ids_t)
            next_id = int(torch.argmax(logits[0, -1]).item())
            ids.append(next_id)
            out.append(next_id)
            if next_id == eos_id:
                break
        return out
