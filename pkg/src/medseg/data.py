"""Dataset record I/O: JSON-lines manifest plus 8-bit grayscale PNGs.

One manifest line per sample:
``{image_id, image, masks, class_names, conversation}`` where ``image`` and
``masks`` hold paths relative to the manifest, mask PNGs use 0/255, and each
conversation entry is ``{role, text}`` with text in serialized grounded form.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .protocol import (
    Conversation,
    Sample,
    Turn,
    parse_grounded,
    serialize_grounded,
)

MANIFEST_NAME = "manifest.jsonl"


def write_image_png(path: Path, image: np.ndarray) -> None:
    """Write a float [0,1] grid as an 8-bit grayscale PNG."""
    px = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(px, mode="L").save(path, format="PNG")


def read_image_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        px = np.asarray(im.convert("L"), dtype=np.float64)
    return px / 255.0


def write_mask_png(path: Path, mask: np.ndarray) -> None:
    px = (np.asarray(mask) > 0).astype(np.uint8) * 255
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(px, mode="L").save(path, format="PNG")


def read_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        px = np.asarray(im.convert("L"))
    return (px > 127).astype(np.uint8)


def conversation_to_json(conversation: Conversation) -> list[dict]:
    return [
        {"role": t.role, "text": serialize_grounded(t.content)}
        for t in conversation.turns
    ]


def conversation_from_json(entries: list[dict]) -> Conversation:
    turns = [Turn(e["role"], parse_grounded(e["text"])) for e in entries]
    return Conversation(turns)


def save_dataset(samples: list[Sample], out_dir: Path) -> Path:
    """Write images, masks, and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for sample in samples:
        image_rel = f"images/{sample.image_id}.png"
        write_image_png(out_dir / image_rel, sample.image)
        mask_rels = []
        for k, mask in enumerate(sample.masks):
            rel = f"masks/{sample.image_id}_m{k}.png"
            write_mask_png(out_dir / rel, mask)
            mask_rels.append(rel)
        record = {
            "image_id": sample.image_id,
            "image": image_rel,
            "masks": mask_rels,
            "class_names": list(sample.class_names),
            "conversation": conversation_to_json(sample.conversation),
        }
        lines.append(json.dumps(record, sort_keys=True))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def load_dataset(data_dir: Path) -> list[Sample]:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        samples.append(Sample(
            image_id=rec["image_id"],
            image=read_image_png(data_dir / rec["image"]),
            masks=[read_mask_png(data_dir / p) for p in rec["masks"]],
            conversation=conversation_from_json(rec["conversation"]),
            class_names=list(rec["class_names"]),
        ))
    return samples
