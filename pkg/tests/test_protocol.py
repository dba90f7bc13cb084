from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medseg.errors import MalformedMarkup
from medseg.protocol import (
    Conversation,
    GroundedText,
    PlainText,
    Sample,
    SegSpan,
    Turn,
    count_seg_slots,
    parse_grounded,
    serialize_grounded,
    validate_sample,
)


def scan_count_oracle(text: str) -> int:
    """Character-scan count of literal [SEG] occurrences, no regex."""
    count = 0
    i = 0
    while i < len(text):
        if text.startswith("[SEG]", i):
            count += 1
            i += 5
        else:
            i += 1
    return count


def test_grounded_phrase_with_seg():
    gt = parse_grounded("<p> covid-19 </p> [SEG]")
    assert gt.chunks == [SegSpan("covid-19", 0)]


def test_bare_slot_sentence():
    gt = parse_grounded("Sure, it is [SEG].")
    assert gt.chunks == [PlainText("Sure, it is "), SegSpan("", 0), PlainText(".")]


def test_plain_text_has_no_slots():
    gt = parse_grounded("No abnormality found.")
    assert gt.chunks == [PlainText("No abnormality found.")]
    assert gt.num_slots == 0


def test_two_spans_match_scan_oracle():
    text = "a <p> nodule </p> [SEG] and a <p> cyst </p> [SEG]"
    gt = parse_grounded(text)
    spans = gt.seg_spans
    assert [s.phrase for s in spans] == ["nodule", "cyst"]
    assert [s.slot_index for s in spans] == [0, 1]
    assert len(spans) == scan_count_oracle(text)


def test_whitespace_between_close_and_seg_is_flexible():
    for sep in ("", " ", "   ", "\n"):
        gt = parse_grounded(f"<p>tumor</p>{sep}[SEG]")
        assert gt.seg_spans == [SegSpan("tumor", 0)]


@pytest.mark.parametrize("bad", [
    "<p> unclosed [SEG]",
    "<p> a <p> b </p> [SEG]",
    "stray </p> here",
    "<p> pair without slot </p>",
])
def test_strict_mode_raises_on_malformed(bad):
    with pytest.raises(MalformedMarkup):
        parse_grounded(bad, strict=True)


def test_lenient_mode_keeps_orphans_as_text():
    gt = parse_grounded("<p> unclosed [SEG]", strict=False)
    assert gt.num_slots == 1
    assert gt.chunks[0] == PlainText("<p> unclosed ")

    gt = parse_grounded("stray </p> here", strict=False)
    assert gt.chunks == [PlainText("stray </p> here")]


def test_serialize_examples():
    assert serialize_grounded(GroundedText([SegSpan("covid-19", 0)])) \
        == "<p> covid-19 </p> [SEG]"
    assert serialize_grounded(GroundedText([])) == ""
    assert serialize_grounded(GroundedText([SegSpan("", 0)])) == "[SEG]"


def test_phrase_rejects_markers():
    with pytest.raises(MalformedMarkup):
        SegSpan("has [SEG] inside", 0)


def test_canonical_form_merges_plain_chunks():
    gt = GroundedText([PlainText("a"), PlainText("b"), SegSpan("x", 5)])
    assert gt.chunks == [PlainText("ab"), SegSpan("x", 0)]


phrases = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyz0123456789- ", min_size=0, max_size=12,
)
plain_texts = st.text(
    alphabet="abcdefghijklmnopqrstuvwxyz0123456789-.,!? ", min_size=1, max_size=20,
)
chunk = st.one_of(
    plain_texts.map(PlainText),
    phrases.map(lambda p: SegSpan(p, 0)),
)


@given(st.lists(chunk, max_size=8))
@settings(max_examples=300, deadline=None)
def test_roundtrip_property(chunks):
    gt = GroundedText(chunks)
    assert parse_grounded(serialize_grounded(gt)) == gt


@given(st.lists(chunk, max_size=8))
@settings(max_examples=200, deadline=None)
def test_slot_count_equals_literal_seg_count(chunks):
    text = serialize_grounded(GroundedText(chunks))
    assert parse_grounded(text).num_slots == scan_count_oracle(text)


def test_user_turn_rejects_slots():
    with pytest.raises(ValueError):
        Turn("user", parse_grounded("mask this [SEG]"))


def test_conversation_roles_alternate():
    u = Turn("user", parse_grounded("hello"))
    a = Turn("assistant", parse_grounded("hi"))
    Conversation([u, a, Turn("user", parse_grounded("more")), a])
    with pytest.raises(ValueError):
        Conversation([a])
    with pytest.raises(ValueError):
        Conversation([u, u])
    with pytest.raises(ValueError):
        Conversation([])


def make_conv(*texts) -> Conversation:
    turns = []
    for i, text in enumerate(texts):
        turns.append(Turn("user" if i % 2 == 0 else "assistant",
                          parse_grounded(text)))
    return Conversation(turns)


def test_count_seg_slots():
    assert count_seg_slots(make_conv("q", "Sure, it is [SEG].")) == 1
    assert count_seg_slots(make_conv("q", "all plain")) == 0
    three = make_conv(
        "q1", "a <p> nodule </p> [SEG] and <p> cyst </p> [SEG]",
        "q2", "also [SEG]",
    )
    assert count_seg_slots(three) == 3


def _sample(n_masks: int, mask_hw=(8, 8)) -> Sample:
    conv = make_conv("q", "two: <p> a </p> [SEG] <p> b </p> [SEG]")
    return Sample(
        image_id="fixture",
        image=np.zeros((8, 8)),
        masks=[np.zeros(mask_hw, dtype=np.uint8) for _ in range(n_masks)],
        conversation=conv,
        class_names=["a", "b"][:n_masks],
    )


def test_validate_sample_ok():
    assert validate_sample(_sample(2)) == []


def test_validate_sample_slot_mask_mismatch():
    codes = [v.code for v in validate_sample(_sample(1))]
    assert "SlotMaskCountMismatch" in codes


def test_validate_sample_shape_mismatch():
    codes = [v.code for v in validate_sample(_sample(2, mask_hw=(4, 4)))]
    assert "ShapeMismatch" in codes


def test_validate_sample_nonbinary_mask():
    s = _sample(2)
    s.masks[0][0, 0] = 7
    codes = [v.code for v in validate_sample(s)]
    assert "NonBinaryMask" in codes
