"""Grounded-text wire format and conversation/sample contracts.

Assistant turns carry segmentation slots in the form ``<p> phrase </p> [SEG]``
(or a bare ``[SEG]`` with no phrase). Every module that touches text, masks,
or conversations goes through the types and functions defined here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from .errors import MalformedMarkup

P_OPEN = "<p>"
P_CLOSE = "</p>"
SEG = "[SEG]"
MARKERS = (P_OPEN, P_CLOSE, SEG)

_MARKER_RE = re.compile(r"<p>|</p>|\[SEG\]")


@dataclass(frozen=True)
class PlainText:
    text: str


@dataclass(frozen=True)
class SegSpan:
    """One segmentation slot; phrase may be empty for a bare ``[SEG]``."""

    phrase: str
    slot_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phrase", self.phrase.strip())
        for marker in MARKERS:
            if marker in self.phrase:
                raise MalformedMarkup(
                    f"phrase may not contain protocol marker {marker!r}: {self.phrase!r}"
                )


Chunk = Union[PlainText, SegSpan]


@dataclass
class GroundedText:
    """Ordered chunks of plain text and SEG spans, kept in canonical form.

    Construction merges adjacent plain chunks, drops empty ones, and
    renumbers slot indices 0..n-1 in textual order.
    """

    chunks: list[Chunk] = field(default_factory=list)

    def __post_init__(self):
        merged: list[Chunk] = []
        slot = 0
        for chunk in self.chunks:
            if isinstance(chunk, PlainText):
                if not chunk.text:
                    continue
                if merged and isinstance(merged[-1], PlainText):
                    merged[-1] = PlainText(merged[-1].text + chunk.text)
                else:
                    merged.append(chunk)
            else:
                merged.append(SegSpan(chunk.phrase, slot))
                slot += 1
        self.chunks = merged

    @property
    def seg_spans(self) -> list[SegSpan]:
        return [c for c in self.chunks if isinstance(c, SegSpan)]

    @property
    def num_slots(self) -> int:
        return sum(1 for c in self.chunks if isinstance(c, SegSpan))

    @property
    def plain_text(self) -> str:
        return "".join(c.text for c in self.chunks if isinstance(c, PlainText))


@dataclass
class Turn:
    role: str
    content: GroundedText

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ValueError(f"role must be 'user' or 'assistant', got {self.role!r}")
        if self.role == "user" and self.content.num_slots > 0:
            raise ValueError("user turns must not contain SEG slots")


@dataclass
class Conversation:
    turns: list[Turn]

    def __post_init__(self):
        if not self.turns:
            raise ValueError("conversation must have at least one turn")
        for i, turn in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise ValueError(
                    f"turn {i}: expected role {expected!r}, got {turn.role!r}"
                )

    def assistant_turns(self) -> Iterator[Turn]:
        return (t for t in self.turns if t.role == "assistant")


@dataclass
class Sample:
    """One dataset record: image, per-slot binary masks, conversation."""

    image_id: str
    image: np.ndarray                  # H x W float in [0, 1]
    masks: list[np.ndarray]            # each H x W uint8 in {0, 1}, global slot order
    conversation: Conversation
    class_names: list[str]


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    where: str = ""

    def __str__(self) -> str:
        loc = f" at {self.where}" if self.where else ""
        return f"{self.code}{loc}: {self.message}"


def parse_grounded(text: str, strict: bool = True) -> GroundedText:
    """Parse one assistant turn into plain chunks and SEG spans.

    ``<p> X </p> [SEG]`` (any whitespace between ``</p>`` and ``[SEG]``,
    including none) yields a grounded span with the trimmed phrase; a lone
    ``[SEG]`` yields a bare span. In strict mode any other marker use raises
    MalformedMarkup; in lenient mode orphan markers stay literal plain text.
    """
    markers = list(_MARKER_RE.finditer(text))
    chunks: list[Chunk] = []
    plain: list[str] = []
    slot = 0
    pos = 0
    i = 0

    def flush():
        if plain:
            chunks.append(PlainText("".join(plain)))
            plain.clear()

    while i < len(markers):
        m = markers[i]
        if m.start() < pos:          # marker consumed by a previous unit
            i += 1
            continue
        plain.append(text[pos:m.start()])
        pos = m.start()
        token = m.group()

        if token == SEG:
            flush()
            chunks.append(SegSpan("", slot))
            slot += 1
            pos = m.end()
            i += 1
            continue

        if token == P_OPEN:
            reason = None
            close = markers[i + 1] if i + 1 < len(markers) else None
            if close is None or close.group() != P_CLOSE:
                reason = "nested <p>" if close is not None and close.group() == P_OPEN \
                    else "<p> without matching </p>"
            else:
                seg = markers[i + 2] if i + 2 < len(markers) else None
                gap_ok = (
                    seg is not None
                    and seg.group() == SEG
                    and text[close.end():seg.start()].strip() == ""
                )
                if not gap_ok:
                    reason = "<p> ... </p> not followed by [SEG]"
            if reason is None:
                flush()
                phrase = text[m.end():close.start()]
                chunks.append(SegSpan(phrase, slot))
                slot += 1
                pos = seg.end()
                i += 3
                continue
            if strict:
                raise MalformedMarkup(f"{reason} at offset {m.start()}")
            plain.append(P_OPEN)
            pos = m.end()
            i += 1
            continue

        # orphan </p>
        if strict:
            raise MalformedMarkup(f"</p> without opener at offset {m.start()}")
        plain.append(P_CLOSE)
        pos = m.end()
        i += 1

    plain.append(text[pos:])
    flush()
    return GroundedText(chunks)


def serialize_grounded(gt: GroundedText) -> str:
    """Canonical string form: ``<p> phrase </p> [SEG]`` per grounded span.

    parse(serialize(gt)) == gt whenever plain chunks contain no protocol
    markers, which holds for every text this package produces.
    """
    parts: list[str] = []
    for chunk in gt.chunks:
        if isinstance(chunk, PlainText):
            parts.append(chunk.text)
        elif chunk.phrase:
            parts.append(f"{P_OPEN} {chunk.phrase} {P_CLOSE} {SEG}")
        else:
            parts.append(SEG)
    return "".join(parts)


def count_seg_slots(conversation: Conversation) -> int:
    return sum(t.content.num_slots for t in conversation.assistant_turns())


def conversation_class_phrases(conversation: Conversation) -> list[str]:
    """Phrases of all assistant SEG spans in global slot order."""
    return [
        span.phrase
        for turn in conversation.assistant_turns()
        for span in turn.content.seg_spans
    ]


def validate_sample(sample: Sample) -> list[Violation]:
    """Check slot/mask correspondence, shapes, and value ranges.

    Returns an empty list iff the sample satisfies every invariant.
    """
    violations: list[Violation] = []
    n_slots = count_seg_slots(sample.conversation)
    n_masks = len(sample.masks)
    if n_slots != n_masks:
        violations.append(Violation(
            "SlotMaskCountMismatch",
            f"conversation has {n_slots} SEG slots but {n_masks} masks",
            sample.image_id,
        ))
    if sample.image.ndim != 2:
        violations.append(Violation(
            "ShapeMismatch", f"image must be 2-D, got shape {sample.image.shape}",
            sample.image_id,
        ))
    else:
        if sample.image.size and (sample.image.min() < 0 or sample.image.max() > 1):
            violations.append(Violation(
                "ValueRange", "image intensities must lie in [0, 1]", sample.image_id,
            ))
        for k, mask in enumerate(sample.masks):
            if mask.shape != sample.image.shape:
                violations.append(Violation(
                    "ShapeMismatch",
                    f"mask {k} shape {mask.shape} != image shape {sample.image.shape}",
                    f"{sample.image_id}/mask{k}",
                ))
            elif not np.isin(mask, (0, 1)).all():
                violations.append(Violation(
                    "NonBinaryMask", f"mask {k} has values outside {{0, 1}}",
                    f"{sample.image_id}/mask{k}",
                ))
    if len(sample.class_names) != n_masks:
        violations.append(Violation(
            "ClassNameCountMismatch",
            f"{len(sample.class_names)} class names for {n_masks} masks",
            sample.image_id,
        ))
    return violations
