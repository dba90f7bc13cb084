"""Conversation template strings shared by data generation and the tokenizer.

The closed vocabulary is built from exactly these strings plus the lesion
class names, so every templated conversation is encodable without UNKs.
"""

from __future__ import annotations

DEFAULT_CLASSES = ("nodule", "opacity", "cyst", "tumor")

EXPLICIT_QUESTION = "Please segment the {class_name} in the medical image"
EXPLICIT_ANSWER = "Sure, it is [SEG]."

REASONING_QUESTION = "What possible conditions are indicated by this examination?"
NEGATIVE_ANSWER = "No abnormality is found in this image."

POSITION_WORDS = ("left", "central", "right")

FOLLOWUP_QUESTION = "Is any follow-up needed?"
FOLLOWUP_ANSWER = "Clinical correlation is recommended."
FOLLOWUP_ANSWER_NEGATIVE = "No follow-up is needed."

CAPTION_PREFIX_TABLE = {
    "covid-ct": (
        "Imagine you are a professional AI chest CT imaging assistant. "
        "The doctor needs to diagnose COVID-19, and you are tasked with "
        "analyzing the image to provide detailed, effective, and accurate "
        "diagnostic advice."
    ),
    "default": (
        "Imagine you are a professional medical imaging assistant. Analyze "
        "the image and provide a detailed, accurate description of its "
        "findings."
    ),
}

DEFAULT_QUESTION_LIST = (
    REASONING_QUESTION,
    FOLLOWUP_QUESTION,
)


def reasoning_answer(findings: list[tuple[str, str]]) -> str:
    """Grounded description, one ``<p> class </p> [SEG]`` per finding.

    ``findings`` holds (class_name, position_word) pairs in slot order.
    """
    if not findings:
        return NEGATIVE_ANSWER
    parts = [
        f"a <p> {name} </p> [SEG] in the {pos} region"
        for name, pos in findings
    ]
    return "The scan shows " + " and ".join(parts) + "."


def caption_text(findings: list[tuple[str, str]]) -> str:
    if not findings:
        return "The image shows no abnormality."
    parts = [f"a {name} in the {pos} region" for name, pos in findings]
    return "The image shows " + " and ".join(parts) + "."


# Every string the language model may need to tokenize. Role words and the
# separator are part of the conversation flattening scheme.
LEXICON_TEXTS = (
    EXPLICIT_QUESTION.format(class_name="x"),
    EXPLICIT_ANSWER,
    REASONING_QUESTION,
    NEGATIVE_ANSWER,
    FOLLOWUP_QUESTION,
    FOLLOWUP_ANSWER,
    FOLLOWUP_ANSWER_NEGATIVE,
    reasoning_answer([("x", "left"), ("x", "central"), ("x", "right")]),
    caption_text([("x", "left")]),
    "user assistant :",
    "covid-19",
)
