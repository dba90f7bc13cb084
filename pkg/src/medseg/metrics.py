"""Segmentation and VQA evaluation metrics.

DSC is plain pixel-count dice. NSD uses 4-connectivity borders (the image
edge counts as background) and Euclidean pixel-center distances; a border
point is matched when it lies within tau of the other mask's border. Closed
questions score by normalized exact match, open questions by the fraction
of unique ground-truth tokens present in the prediction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyEvalSet, GenerationBudgetExceeded, ShapeError
from .protocol import Sample, Turn, serialize_grounded

_NORM_RE = re.compile(r"[^a-z0-9\s]+")


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice coefficient 2|P∩G| / (|P|+|G|); two empty masks count as 1.0."""
    _check_pair(pred, gt)
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def mask_border(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor.

    Pixels on the image edge always qualify.
    """
    m = np.asarray(mask) > 0
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def nsd(pred: np.ndarray, gt: np.ndarray, tau: float) -> float:
    """Normalized surface distance at tolerance tau (pixels).

    Both masks empty -> 1.0; exactly one empty -> 0.0.
    """
    _check_pair(pred, gt)
    if tau <= 0:
        raise ValueError("tau must be positive")
    p_any = bool((np.asarray(pred) > 0).any())
    g_any = bool((np.asarray(gt) > 0).any())
    if not p_any and not g_any:
        return 1.0
    if p_any != g_any:
        return 0.0
    bp = mask_border(pred)
    bg = mask_border(gt)
    dist_to_bg = ndimage.distance_transform_edt(~bg)
    dist_to_bp = ndimage.distance_transform_edt(~bp)
    matched = int((dist_to_bg[bp] <= tau).sum()) + int((dist_to_bp[bg] <= tau).sum())
    return matched / (int(bp.sum()) + int(bg.sum()))


def normalize_answer(text: str) -> str:
    text = _NORM_RE.sub(" ", text.lower())
    return " ".join(text.split())


def closed_accuracy(preds: list[str], gts: list[str]) -> float:
    """Exact-match fraction after normalization."""
    if not preds or not gts or len(preds) != len(gts):
        raise EmptyEvalSet(f"need equal nonempty lists, got {len(preds)}/{len(gts)}")
    hits = sum(normalize_answer(p) == normalize_answer(g)
               for p, g in zip(preds, gts))
    return hits / len(preds)


def open_recall(pred: str, gt: str) -> float:
    """Fraction of unique ground-truth tokens present in the prediction.

    An empty ground truth recalls 1.0 by convention.
    """
    gt_tokens = set(normalize_answer(gt).split())
    if not gt_tokens:
        return 1.0
    pred_tokens = set(normalize_answer(pred).split())
    return len(gt_tokens & pred_tokens) / len(gt_tokens)


@dataclass
class SegReport:
    dsc_mean: float
    dsc_std: float
    nsd_mean: float
    nsd_std: float
    tau: float
    per_sample: list[dict] = field(default_factory=list)


@dataclass
class VqaReport:
    closed_accuracy: float
    open_recall: float
    counts: dict[str, int] = field(default_factory=dict)


def _is_explicit_question(text: str) -> bool:
    probe = normalize_answer(text)
    return (probe.startswith("please segment the")
            and probe.endswith("in the medical image"))


def evaluate_dataset(model, samples: list[Sample], tau: float = 1.0,
                     max_new_tokens: int = 64) -> tuple[SegReport, VqaReport]:
    """Predict the final assistant turn of every sample and score it.

    Predicted masks pair with ground-truth masks by slot order; unmatched
    slots on either side score 0. Samples with no slots on either side are
    skipped by the mask aggregate. A prediction that exhausts its token
    budget scores as an empty response.
    """
    if not samples:
        raise EmptyEvalSet("no samples to evaluate")
    dsc_scores: list[float] = []
    nsd_scores: list[float] = []
    per_sample: list[dict] = []
    closed_pred, closed_gt = [], []
    recalls: list[float] = []

    for sample in samples:
        turns = sample.conversation.turns
        if turns[-1].role != "assistant":
            raise ValueError(f"{sample.image_id}: conversation must end with assistant")
        context = list(turns[:-1])
        target = turns[-1]
        slot_offset = count_seg_slots_in(context)
        gt_masks = sample.masks[slot_offset:]

        try:
            grounded, pred_masks = model.predict(sample.image, context,
                                                 max_new_tokens=max_new_tokens)
            pred_text = serialize_grounded(grounded)
        except GenerationBudgetExceeded:
            pred_text, pred_masks = "", []

        n = max(len(pred_masks), len(gt_masks))
        sample_dsc, sample_nsd = [], []
        for k in range(n):
            if k < len(pred_masks) and k < len(gt_masks):
                sample_dsc.append(dsc(pred_masks[k], gt_masks[k]))
                sample_nsd.append(nsd(pred_masks[k], gt_masks[k], tau))
            else:
                sample_dsc.append(0.0)
                sample_nsd.append(0.0)
        dsc_scores.extend(sample_dsc)
        nsd_scores.extend(sample_nsd)

        target_text = serialize_grounded(target.content)
        question = serialize_grounded(context[-1].content) if context else ""
        if _is_explicit_question(question):
            closed_pred.append(pred_text)
            closed_gt.append(target_text)
        else:
            recalls.append(open_recall(pred_text, target_text))
        per_sample.append({
            "image_id": sample.image_id,
            "dsc": sample_dsc,
            "nsd": sample_nsd,
            "pred_text": pred_text,
        })

    seg = SegReport(
        dsc_mean=float(np.mean(dsc_scores)) if dsc_scores else 0.0,
        dsc_std=float(np.std(dsc_scores)) if dsc_scores else 0.0,
        nsd_mean=float(np.mean(nsd_scores)) if nsd_scores else 0.0,
        nsd_std=float(np.std(nsd_scores)) if nsd_scores else 0.0,
        tau=tau,
        per_sample=per_sample,
    )
    vqa = VqaReport(
        closed_accuracy=(closed_accuracy(closed_pred, closed_gt)
                         if closed_pred else 0.0),
        open_recall=float(np.mean(recalls)) if recalls else 0.0,
        counts={"closed": len(closed_pred), "open": len(recalls)},
    )
    return seg, vqa


def count_seg_slots_in(turns: list[Turn]) -> int:
    return sum(t.content.num_slots for t in turns if t.role == "assistant")


def report_json(seg: SegReport, vqa: VqaReport) -> str:
    return json.dumps({
        "dsc_mean": seg.dsc_mean,
        "dsc_std": seg.dsc_std,
        "nsd_mean": seg.nsd_mean,
        "nsd_std": seg.nsd_std,
        "tau": seg.tau,
        "closed_accuracy": vqa.closed_accuracy,
        "open_recall": vqa.open_recall,
        "counts": vqa.counts,
    }, indent=2, sort_keys=True)
