"""Joint text/mask objective and the optimization loop.

total = lambda_t * text_loss + lambda_m * mask_loss, where the text loss is
next-token cross-entropy over assistant positions and the mask loss combines
BCE-with-logits and soft dice per SEG slot.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteLoss, ShapeError
from .model import MedSegModel, flatten_conversation
from .protocol import Sample
from .tokenizer import PAD

DIAGNOSTIC_NAME = "diagnostic.json"
METRICS_LOG_NAME = "metrics.jsonl"


@dataclass
class LossWeights:
    lambda_t: float = 1.0
    lambda_m: float = 1.0
    w_bce: float = 2.0
    w_dice: float = 0.5
    dice_eps: float = 1.0

    def __post_init__(self):
        for name in ("lambda_t", "lambda_m", "w_bce", "w_dice", "dice_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 8
    learning_rate: float = 3e-4
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 100
    checkpoint_dir: Path | None = None
    betas: tuple[float, float] = (0.9, 0.95)

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def text_loss(logits: torch.Tensor, target_ids: torch.Tensor,
              supervision_mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over supervised positions.

    Shapes: logits (N, V), target_ids (N,), supervision_mask (N,) bool.
    No supervised positions -> 0 with zero gradient.
    """
    if logits.shape[:-1] != target_ids.shape or target_ids.shape != supervision_mask.shape:
        raise ShapeError(
            f"misaligned shapes {tuple(logits.shape)} / {tuple(target_ids.shape)} "
            f"/ {tuple(supervision_mask.shape)}"
        )
    if not supervision_mask.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[supervision_mask], target_ids[supervision_mask])


def mask_loss(pred_logits: list[torch.Tensor], gt_masks: list[torch.Tensor],
              weights: LossWeights) -> torch.Tensor:
    """Mean over slots of w_bce * BCE + w_dice * (1 - soft dice).

    Empty slot lists give 0 with zero gradient.
    """
    if len(pred_logits) != len(gt_masks):
        raise ShapeError(f"{len(pred_logits)} predictions vs {len(gt_masks)} targets")
    if not pred_logits:
        return torch.zeros(())
    per_slot = []
    for logits, gt in zip(pred_logits, gt_masks):
        if logits.shape != gt.shape:
            raise ShapeError(f"mask shapes {tuple(logits.shape)} vs {tuple(gt.shape)}")
        gt = gt.to(logits.dtype)
        bce = F.binary_cross_entropy_with_logits(logits, gt)
        p = torch.sigmoid(logits)
        eps = weights.dice_eps
        dice = 1.0 - (2.0 * (p * gt).sum() + eps) / (p.sum() + gt.sum() + eps)
        per_slot.append(weights.w_bce * bce + weights.w_dice * dice)
    return torch.stack(per_slot).mean()


@dataclass
class Batch:
    """Padded teacher-forcing batch with per-sample slot bookkeeping."""

    images: torch.Tensor            # (B, H, W)
    input_ids: torch.Tensor         # (B, T) padded with PAD
    target_supervised: torch.Tensor  # (B, T) bool; True where ids[t] is a target
    seg_positions: list[list[int]]  # per sample, positions in input_ids
    gt_masks: list[list[torch.Tensor]]

    @property
    def size(self) -> int:
        return self.images.shape[0]


def make_batch(model: MedSegModel, samples: list[Sample],
               dtype: torch.dtype = torch.float32) -> Batch:
    flats = [flatten_conversation(model.vocab, s.conversation) for s in samples]
    t_max = max(len(f.ids) for f in flats)
    ids = torch.full((len(samples), t_max), PAD, dtype=torch.long)
    supervised = torch.zeros((len(samples), t_max), dtype=torch.bool)
    for i, f in enumerate(flats):
        ids[i, : len(f.ids)] = torch.tensor(f.ids, dtype=torch.long)
        supervised[i, : len(f.ids)] = torch.tensor(f.supervised, dtype=torch.bool)
    images = torch.stack([torch.as_tensor(s.image, dtype=dtype) for s in samples])
    gt = [[torch.as_tensor(m, dtype=dtype) for m in s.masks] for s in samples]
    return Batch(images, ids, supervised, [f.seg_positions for f in flats], gt)


def total_loss(model: MedSegModel, samples: list[Sample],
               weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Forward the batch and combine the two losses.

    Teacher forcing throughout: SEG prompt states come from target ids.
    """
    dtype = next(model.parameters()).dtype
    batch = make_batch(model, samples, dtype=dtype)
    states, logits = model(batch.images, batch.input_ids)
    n_vis = model.num_visual_tokens(tuple(batch.images.shape[-2:]))

    # logits at text position t predict the token at t+1
    text_logits = logits[:, n_vis:-1]
    targets = batch.input_ids[:, 1:]
    supervised = batch.target_supervised[:, 1:]
    l_text = text_loss(
        text_logits.reshape(-1, text_logits.shape[-1]),
        targets.reshape(-1),
        supervised.reshape(-1),
    )

    features = model.ground(batch.images)
    pred, gt = [], []
    for i in range(batch.size):
        seg_states = [states[i, n_vis + p] for p in batch.seg_positions[i]]
        pred.extend(model.decode_slot_masks(features[i: i + 1], seg_states))
        gt.extend(batch.gt_masks[i])
    l_mask = mask_loss(pred, gt, weights)

    total = weights.lambda_t * l_text + weights.lambda_m * l_mask
    return total, {"loss_text": float(l_text.detach()),
                   "loss_mask": float(l_mask.detach())}


def train(samples: list[Sample], model: MedSegModel, cfg: TrainConfig,
          weights: LossWeights | None = None,
          eval_fn=None) -> dict:
    """Adam loop with gradient clipping; deterministic for a fixed seed.

    Writes periodic checkpoints and a JSON-lines metrics log when
    cfg.checkpoint_dir is set. ``eval_fn(model) -> float`` supplies the
    train-set DSC logged at eval points (and defaults to skipping it).
    Raises NonFiniteLoss with a diagnostic dump if the loss leaves R.
    """
    weights = weights or LossWeights()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    log_lines: list[str] = []
    last = {"step": 0, "loss_total": None, "loss_text": None, "loss_mask": None}

    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(samples), size=min(cfg.batch_size, len(samples)),
                         replace=False)
        batch_samples = [samples[int(i)] for i in idx]
        model.train()
        loss, parts = total_loss(model, batch_samples, weights)
        if not torch.isfinite(loss):
            value = float(loss.detach())
            if out_dir:
                out_dir.mkdir(parents=True, exist_ok=True)
                (out_dir / DIAGNOSTIC_NAME).write_text(json.dumps({
                    "step": step, "loss": value, **parts,
                    "batch": [s.image_id for s in batch_samples],
                }, indent=2))
            raise NonFiniteLoss(f"loss {value} at step {step}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        entry = {"step": step, "loss_total": float(loss.detach()), **parts}
        if step % cfg.eval_every == 0 or step == cfg.steps:
            if eval_fn is not None:
                entry["dsc_train"] = float(eval_fn(model))
            if out_dir:
                model.meta = {"version": f"medseg-0.1.0/step{step}", "step": step}
                model.save(out_dir / "model.ckpt")
        log_lines.append(json.dumps(entry))
        last = entry

    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / METRICS_LOG_NAME).write_text("\n".join(log_lines) + "\n")
    return last


def grad_check(model: MedSegModel, samples: list[Sample], epsilon: float = 1e-5,
               weights: LossWeights | None = None, n_coords: int = 200,
               seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a double-precision copy; coordinates are sampled from every
    parameter tensor so all groups are covered. epsilon must be > 0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    weights = weights or LossWeights()
    model = copy.deepcopy(model).double()
    model.eval()

    loss, _ = total_loss(model, samples, weights)
    model.zero_grad()
    loss.backward()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    analytic = {n: p.grad.detach().clone() if p.grad is not None
                else torch.zeros_like(p) for n, p in named}

    rng = np.random.default_rng(seed)
    per_tensor = max(1, -(-n_coords // len(named)))
    worst = 0.0
    with torch.no_grad():
        for name, param in named:
            flat = param.view(-1)
            k = min(per_tensor, flat.numel())
            coords = rng.choice(flat.numel(), size=k, replace=False)
            for c in coords:
                c = int(c)
                orig = float(flat[c])
                flat[c] = orig + epsilon
                up, _ = total_loss(model, samples, weights)
                flat[c] = orig - epsilon
                down, _ = total_loss(model, samples, weights)
                flat[c] = orig
                fd = (float(up) - float(down)) / (2.0 * epsilon)
                an = float(analytic[name].view(-1)[c])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
                worst = max(worst, rel)
    return worst
