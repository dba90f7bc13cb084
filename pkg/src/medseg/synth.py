"""Deterministic generator of medical-style image/mask/conversation samples.

Lesions are rotated ellipses with class-specific intensity signatures on a
smooth noise background, so the toy task is learnable by a small model. All
randomness derives from per-sample ``(seed, index)`` streams, making serial
and parallel generation bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import save_dataset
from .errors import LayoutInfeasible, UnknownStyle
from .protocol import Conversation, Sample, Turn, parse_grounded, validate_sample
from .templates import (
    DEFAULT_CLASSES,
    EXPLICIT_ANSWER,
    EXPLICIT_QUESTION,
    NEGATIVE_ANSWER,
    REASONING_QUESTION,
    reasoning_answer,
)

STYLES = ("explicit", "reasoning", "negative")

MIN_LESION_PIXELS = 16
MAX_PAIR_IOU = 0.2
_PLACEMENT_ATTEMPTS = 100


@dataclass
class SynthConfig:
    num_samples: int
    seed: int = 0
    image_size: int = 64
    lesion_classes: tuple[str, ...] = DEFAULT_CLASSES
    max_lesions_per_image: int = 2
    template_mix: dict[str, float] = field(
        default_factory=lambda: {"explicit": 0.4, "reasoning": 0.4, "negative": 0.2}
    )
    vision_patch: int = 8

    def __post_init__(self):
        if self.num_samples <= 0:
            raise ValueError("num_samples must be positive")
        if abs(sum(self.template_mix.values()) - 1.0) > 1e-9:
            raise ValueError("template_mix fractions must sum to 1")
        if set(self.template_mix) - set(STYLES):
            raise ValueError(f"unknown styles in template_mix: {self.template_mix}")
        if self.image_size % self.vision_patch:
            raise ValueError("image_size must be divisible by the vision patch size")
        if len(self.lesion_classes) > 6:
            raise ValueError("at most 6 lesion classes keep intensities separable")


@dataclass(frozen=True)
class Lesion:
    class_name: str
    cy: float
    cx: float
    a: float       # semi-axis along the rotated x direction
    b: float
    theta: float


@dataclass
class LesionLayout:
    image_size: int
    lesions: list[Lesion]


def class_intensity(class_name: str, classes: tuple[str, ...]) -> float:
    """Fixed per-class fill intensity, spaced >= 0.1 apart."""
    idx = classes.index(class_name)
    if len(classes) == 1:
        return 0.95
    return 0.95 - idx * (0.95 - 0.44) / (len(classes) - 1)


def rasterize(lesion: Lesion, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - lesion.cy, xx - lesion.cx
    ct, st = math.cos(lesion.theta), math.sin(lesion.theta)
    u = (dx * ct + dy * st) / lesion.a
    v = (-dx * st + dy * ct) / lesion.b
    return (u * u + v * v <= 1.0).astype(np.uint8)


def _mask_iou(m1: np.ndarray, m2: np.ndarray) -> float:
    inter = np.logical_and(m1, m2).sum()
    union = np.logical_or(m1, m2).sum()
    return float(inter) / float(union) if union else 0.0


def sample_layout(n_lesions: int, classes: tuple[str, ...], size: int,
                  rng: np.random.Generator) -> LesionLayout:
    """Place lesions fully inside the frame with pairwise IoU < 0.2.

    Lesions come out sorted left to right so slot order is stable.
    """
    lesions: list[Lesion] = []
    masks: list[np.ndarray] = []
    for _ in range(n_lesions):
        for attempt in range(_PLACEMENT_ATTEMPTS):
            a = rng.uniform(max(3.0, 0.055 * size), max(3.4, 0.11 * size))
            b = rng.uniform(max(3.0, 0.050 * size), max(3.2, 0.095 * size))
            theta = rng.uniform(0.0, math.pi)
            r = max(a, b) + 1.0
            if size - 1 - r <= r:
                raise LayoutInfeasible(f"image size {size} too small for lesions")
            cy = rng.uniform(r, size - 1 - r)
            cx = rng.uniform(r, size - 1 - r)
            lesion = Lesion(str(rng.choice(classes)), cy, cx, a, b, theta)
            mask = rasterize(lesion, size)
            if mask.sum() < MIN_LESION_PIXELS:
                continue
            if any(_mask_iou(mask, m) >= MAX_PAIR_IOU for m in masks):
                continue
            lesions.append(lesion)
            masks.append(mask)
            break
        else:
            raise LayoutInfeasible(
                f"could not place lesion {len(lesions) + 1}/{n_lesions} "
                f"after {_PLACEMENT_ATTEMPTS} attempts"
            )
    lesions.sort(key=lambda l: l.cx)
    return LesionLayout(size, lesions)


def _smooth_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [0.10, 0.30]."""
    cell = 8
    n = size // cell
    coarse = rng.uniform(0.10, 0.30, (n + 1, n + 1))
    t = np.arange(size) / cell
    i0 = np.minimum(t.astype(int), n - 1)
    f = t - i0
    top = coarse[i0][:, i0] * (1 - f)[None, :] + coarse[i0][:, i0 + 1] * f[None, :]
    bot = coarse[i0 + 1][:, i0] * (1 - f)[None, :] + coarse[i0 + 1][:, i0 + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def render_image(layout: LesionLayout, size: int, rng: np.random.Generator,
                 classes: tuple[str, ...] = DEFAULT_CLASSES,
                 ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Background noise plus one intensity-coded lesion per mask."""
    image = _smooth_background(size, rng)
    image += rng.normal(0.0, 0.01, (size, size))
    masks = []
    for lesion in layout.lesions:
        mask = rasterize(lesion, size)
        if mask.sum() < MIN_LESION_PIXELS:
            raise LayoutInfeasible(f"lesion under {MIN_LESION_PIXELS} pixels")
        fill = class_intensity(lesion.class_name, classes)
        noise = rng.normal(0.0, 0.015, (size, size))
        image = np.where(mask, fill + noise, image)
        masks.append(mask)
    return np.clip(image, 0.0, 1.0), masks


def position_word(lesion: Lesion, size: int) -> str:
    if lesion.cx < size / 3:
        return "left"
    if lesion.cx < 2 * size / 3:
        return "central"
    return "right"


def make_conversation(layout: LesionLayout, style: str) -> Conversation:
    """Single-round conversation in one of the three template styles.

    explicit  -> fixed instruction for the first lesion's class, fixed reply
                 with one bare slot;
    reasoning -> implicit question, grounded description with one slot per
                 lesion in left-to-right order;
    negative  -> implicit question, plain no-finding reply.
    """
    if style == "explicit":
        if not layout.lesions:
            raise ValueError("explicit style requires at least one lesion")
        question = EXPLICIT_QUESTION.format(class_name=layout.lesions[0].class_name)
        answer = EXPLICIT_ANSWER
    elif style == "reasoning":
        findings = [(l.class_name, position_word(l, layout.image_size))
                    for l in layout.lesions]
        question = REASONING_QUESTION
        answer = reasoning_answer(findings)
    elif style == "negative":
        question = REASONING_QUESTION
        answer = NEGATIVE_ANSWER
    else:
        raise UnknownStyle(f"style must be one of {STYLES}, got {style!r}")
    return Conversation([
        Turn("user", parse_grounded(question)),
        Turn("assistant", parse_grounded(answer)),
    ])


def referenced_lesions(layout: LesionLayout, style: str) -> list[int]:
    """Indices of layout lesions that own a SEG slot, in slot order."""
    if style == "explicit":
        return [0]
    if style == "reasoning":
        return list(range(len(layout.lesions)))
    return []


def _style_schedule(cfg: SynthConfig) -> list[str]:
    """Largest-remainder allocation of styles, deterministically shuffled."""
    fracs = [(s, cfg.template_mix.get(s, 0.0)) for s in STYLES]
    counts = {s: int(f * cfg.num_samples) for s, f in fracs}
    remainders = sorted(
        fracs, key=lambda sf: (sf[1] * cfg.num_samples) % 1.0, reverse=True
    )
    short = cfg.num_samples - sum(counts.values())
    for s, _ in remainders[:short]:
        counts[s] += 1
    schedule = [s for s in STYLES for _ in range(counts[s])]
    rng = np.random.default_rng([cfg.seed, 0x5717])
    rng.shuffle(schedule)
    return schedule


def generate_sample(cfg: SynthConfig, index: int, style: str) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    if style == "negative":
        n_lesions = 0
    elif style == "explicit":
        n_lesions = 1
    else:
        n_lesions = int(rng.integers(1, cfg.max_lesions_per_image + 1))
    layout = sample_layout(n_lesions, tuple(cfg.lesion_classes), cfg.image_size, rng)
    image, all_masks = render_image(layout, cfg.image_size, rng,
                                    tuple(cfg.lesion_classes))
    conversation = make_conversation(layout, style)
    refs = referenced_lesions(layout, style)
    return Sample(
        image_id=f"syn_{index:05d}",
        image=image,
        masks=[all_masks[i] for i in refs],
        conversation=conversation,
        class_names=[layout.lesions[i].class_name for i in refs],
    )


def generate_dataset(cfg: SynthConfig) -> list[Sample]:
    """Exactly cfg.num_samples valid samples, a pure function of cfg."""
    schedule = _style_schedule(cfg)
    samples = []
    for i, style in enumerate(schedule):
        sample = generate_sample(cfg, i, style)
        violations = validate_sample(sample)
        if violations:
            raise RuntimeError(f"generator produced invalid sample: {violations}")
        samples.append(sample)
    return samples


def write_dataset(cfg: SynthConfig, out_dir: Path) -> Path:
    return save_dataset(generate_dataset(cfg), Path(out_dir))
