"""The combined chat + segmentation model and its checkpoint format.

Conversations are flattened as
``[visual prefix] BOS role : tokens ... EOS`` with role words as ordinary
vocabulary entries and an EOS closing every assistant turn. Mask prompts are
the last-layer hidden states at ``[SEG]`` positions, projected into the
decoder's prompt space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, GenerationBudgetExceeded
from .gcu import Gcu, GcuConfig
from .pg import GroundEncoder, MaskDecoder, PgConfig, PromptProjector
from .protocol import Conversation, GroundedText, Turn, parse_grounded, serialize_grounded
from .tokenizer import BOS, EOS, SEG_ID, Vocab

CKPT_FORMAT = "medseg-ckpt-1"


@dataclass
class FlatConversation:
    """Token ids for a conversation plus per-position supervision flags.

    ``supervised[k]`` is True when ids[k] is assistant content or the EOS
    closing an assistant turn; role words and separators are conditioning.
    """

    ids: list[int]
    supervised: list[bool]
    seg_positions: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.seg_positions = [k for k, t in enumerate(self.ids) if t == SEG_ID]


def flatten_conversation(vocab: Vocab, conversation: Conversation) -> FlatConversation:
    ids = [BOS]
    supervised = [False]
    role_ids = {
        "user": vocab.encode("user")[0],
        "assistant": vocab.encode("assistant")[0],
    }
    colon = vocab.encode(":")[0]
    for turn in conversation.turns:
        ids += [role_ids[turn.role], colon]
        supervised += [False, False]
        content = vocab.encode(serialize_grounded(turn.content))
        is_assistant = turn.role == "assistant"
        ids += content
        supervised += [is_assistant] * len(content)
        if is_assistant:
            ids.append(EOS)
            supervised.append(True)
    return FlatConversation(ids, supervised)


def generation_prefix(vocab: Vocab, history: list[Turn]) -> list[int]:
    """Ids priming the model to produce the next assistant turn."""
    if history:
        flat = flatten_conversation(vocab, Conversation(list(history)))
        ids = flat.ids
    else:
        ids = [BOS]
    return ids + [vocab.encode("assistant")[0], vocab.encode(":")[0]]


class MedSegModel(nn.Module):
    """Chat model plus per-slot mask decoding behind one checkpoint."""

    def __init__(self, gcu_cfg: GcuConfig, pg_cfg: PgConfig, vocab: Vocab):
        super().__init__()
        self.gcu = Gcu(gcu_cfg)
        self.ground = GroundEncoder(pg_cfg)
        self.prompt_proj = PromptProjector(gcu_cfg.d_model, pg_cfg)
        self.decoder = MaskDecoder(pg_cfg)
        self.vocab = vocab
        self.meta: dict = {"version": "init"}

    @property
    def gcu_cfg(self) -> GcuConfig:
        return self.gcu.cfg

    @property
    def pg_cfg(self) -> PgConfig:
        return self.decoder.cfg

    def num_visual_tokens(self, image_hw: tuple[int, int]) -> int:
        p = self.gcu_cfg.patch_size
        return (image_hw[0] // p) * (image_hw[1] // p)

    def forward(self, images: torch.Tensor,
                text_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced pass: (states, logits) over [visual, text]."""
        return self.gcu(images, text_ids)

    def extract_seg_states(self, states: torch.Tensor, text_ids: torch.Tensor,
                           n_visual: int) -> list[torch.Tensor]:
        """Last-layer states at every text position whose id is [SEG].

        states: (S, d_model) for one sequence; text_ids: (T,) aligned with
        the text part of states. Returns vectors in textual order.
        """
        positions = (text_ids == SEG_ID).nonzero(as_tuple=True)[0]
        return [states[n_visual + int(p)] for p in positions]

    def decode_slot_masks(self, features: torch.Tensor,
                          seg_states: list[torch.Tensor]) -> list[torch.Tensor]:
        """One full-resolution logit grid per SEG state; features (1,C,h,w)."""
        masks = []
        for state in seg_states:
            prompt = self.prompt_proj(state[None])
            masks.append(self.decoder(features, prompt)[0])
        return masks

    def generate(self, image: torch.Tensor, prefix_ids: list[int],
                 max_new_tokens: int) -> list[int]:
        return self.gcu.generate(image, prefix_ids, max_new_tokens, eos_id=EOS)

    @torch.no_grad()
    def predict(self, image: np.ndarray, history: list[Turn] | Conversation,
                max_new_tokens: int = 64) -> tuple[GroundedText, list[np.ndarray]]:
        """Answer the conversation and decode one binary mask per SEG slot.

        The generated text is parsed leniently (an undertrained model may
        emit stray markers); every generated [SEG] token yields exactly one
        mask, so slot count always equals mask count.
        """
        self.eval()
        if isinstance(history, Conversation):
            history = list(history.turns)
        dtype = next(self.parameters()).dtype
        image_t = torch.as_tensor(image, dtype=dtype)
        prefix = generation_prefix(self.vocab, history)
        generated = self.generate(image_t, prefix, max_new_tokens)
        if not generated or generated[-1] != EOS:
            raise GenerationBudgetExceeded(
                f"no EOS within {max_new_tokens} tokens"
            )
        content = generated[:-1]
        text = self.vocab.decode(content)
        grounded = parse_grounded(text, strict=False)

        full_ids = torch.tensor([prefix + generated], dtype=torch.long)
        states, _ = self.forward(image_t[None], full_ids)
        n_vis = self.num_visual_tokens(image.shape)
        new_region = full_ids[0].clone()
        new_region[: len(prefix)] = -1        # only the new turn's slots
        seg_states = self.extract_seg_states(states[0], new_region, n_vis)

        features = self.ground(image_t[None])
        logit_masks = self.decode_slot_masks(features, seg_states)
        binary = [(m > 0).to(torch.uint8).cpu().numpy() for m in logit_masks]
        if len(binary) != grounded.num_slots:
            raise AssertionError(
                f"slot/mask bijection broken: {grounded.num_slots} slots, "
                f"{len(binary)} masks"
            )
        return grounded, binary

    def save(self, path: Path, meta: dict | None = None) -> None:
        payload = {
            "format": CKPT_FORMAT,
            "gcu_config": asdict(self.gcu_cfg),
            "pg_config": asdict(self.pg_cfg),
            "vocab": dict(self.vocab.token_to_id),
            "state_dict": self.state_dict(),
            "meta": dict(meta or self.meta),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def load(cls, path: Path) -> "MedSegModel":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if payload.get("format") != CKPT_FORMAT:
            raise CheckpointError(
                f"unknown checkpoint format {payload.get('format')!r}"
            )
        vocab = Vocab(payload["vocab"])
        model = cls(GcuConfig(**payload["gcu_config"]),
                    PgConfig(**payload["pg_config"]), vocab)
        model.load_state_dict(payload["state_dict"])
        model.meta = payload.get("meta", {})
        model.eval()
        return model

    @property
    def model_version(self) -> str:
        return str(self.meta.get("version", "init"))
