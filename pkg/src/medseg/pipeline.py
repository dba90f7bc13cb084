"""Three-stage annotation pipeline: caption generation, reviewed refinement
with a single retry before manual escalation, and grounded conversation
generation.

Records persist as one JSON file each (written atomically), every transition
appends to an audit log sufficient to replay final states, and a completed
output directory is byte-stable under reruns.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

from .data import conversation_from_json, read_image_png, read_mask_png
from .errors import AnnotatorUnavailable, ReviewerUnavailable
from .protocol import Sample, validate_sample
from .templates import (
    CAPTION_PREFIX_TABLE,
    DEFAULT_QUESTION_LIST,
    FOLLOWUP_ANSWER,
    FOLLOWUP_ANSWER_NEGATIVE,
    NEGATIVE_ANSWER,
    REASONING_QUESTION,
)

STAGES = ("caption", "refine", "conversation", "done")
STATUSES = ("pending", "generated", "approved", "rejected_once", "regenerated",
            "manual_required", "manual_done")

STANDARD_CAPTION_PROMPT = (
    "Describe the medical image, naming each finding and its location."
)


@dataclass
class AnnotationRecord:
    image_id: str
    image: str                      # path relative to the pipeline output dir
    masks: list[str]
    class_names: list[str]
    dataset: str = "default"
    stage: str = "caption"
    status: str = "pending"
    caption: str = ""
    attempts: int = 0
    conversation: Optional[list[dict]] = None
    audit: list[dict] = field(default_factory=list)

    def is_terminal(self) -> bool:
        return self.stage == "done" or self.status == "manual_required"

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id, "image": self.image, "masks": self.masks,
            "class_names": self.class_names, "dataset": self.dataset,
            "stage": self.stage, "status": self.status, "caption": self.caption,
            "attempts": self.attempts, "conversation": self.conversation,
            "audit": self.audit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(**d)


class AnnotatorClient(Protocol):
    def generate_caption(self, prefix: str, prompt: str, image_ref: dict) -> str: ...

    def generate_conversation(self, question_list: list[str], caption: str,
                              image_ref: dict) -> list[dict]: ...


class ReviewProvider(Protocol):
    def review(self, record: AnnotationRecord) -> Optional[tuple[str, str]]:
        """Return ("approve"|"reject", reason), or None when no verdict is
        available yet."""
        ...


def grounded_findings(classes: list[str]) -> str:
    if not classes:
        return NEGATIVE_ANSWER
    parts = [f"a <p> {c} </p> [SEG]" for c in classes]
    return "The image shows " + " and ".join(parts) + "."


def plain_findings(classes: list[str]) -> str:
    if not classes:
        return "The image shows no abnormality."
    parts = [f"a {c}" for c in classes]
    return "The image shows " + " and ".join(parts) + "."


class MockAnnotator:
    """Deterministic template annotator; needs no external service."""

    def generate_caption(self, prefix: str, prompt: str, image_ref: dict) -> str:
        return plain_findings(list(image_ref.get("class_names", [])))

    def generate_conversation(self, question_list: list[str], caption: str,
                              image_ref: dict) -> list[dict]:
        classes = list(image_ref.get("class_names", []))
        q1 = question_list[0] if question_list else REASONING_QUESTION
        turns = [
            {"role": "user", "text": q1},
            {"role": "assistant", "text": grounded_findings(classes)},
        ]
        if len(question_list) > 1:
            turns += [
                {"role": "user", "text": question_list[1]},
                {"role": "assistant",
                 "text": FOLLOWUP_ANSWER if classes else FOLLOWUP_ANSWER_NEGATIVE},
            ]
        return turns


class HttpAnnotator:
    """POSTs annotation requests to an HTTP endpoint with retry/backoff."""

    def __init__(self, endpoint: str, timeout_s: float = 10.0, retries: int = 3,
                 backoff_s: float = 0.5, sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.sleep = sleep

    def _post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode()
        last_error = None
        for attempt in range(self.retries):
            try:
                req = urllib.request.Request(
                    self.endpoint, data=body,
                    headers={"Content-Type": "application/json"},
                )
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    return json.loads(resp.read().decode())
            except (urllib.error.URLError, TimeoutError, json.JSONDecodeError,
                    ConnectionError) as exc:
                last_error = exc
                if attempt + 1 < self.retries:
                    self.sleep(self.backoff_s * 2 ** attempt)
        raise AnnotatorUnavailable(f"{self.endpoint}: {last_error}")

    def generate_caption(self, prefix: str, prompt: str, image_ref: dict) -> str:
        out = self._post({"kind": "caption", "prefix": prefix, "prompt": prompt,
                          "image_ref": image_ref})
        caption = out.get("caption")
        if not isinstance(caption, str) or not caption:
            raise AnnotatorUnavailable("annotator returned no caption")
        return caption

    def generate_conversation(self, question_list: list[str], caption: str,
                              image_ref: dict) -> list[dict]:
        out = self._post({"kind": "conversation", "questions": question_list,
                          "caption": caption, "image_ref": image_ref})
        convo = out.get("conversation")
        if not isinstance(convo, list) or not convo:
            raise AnnotatorUnavailable("annotator returned no conversation")
        return convo


class AutoReviewer:
    """Deterministic pseudo-random verdicts at a configured accept rate."""

    def __init__(self, accept_rate: float = 1.0, seed: int = 0):
        self.accept_rate = accept_rate
        self.seed = seed

    def review(self, record: AnnotationRecord) -> Optional[tuple[str, str]]:
        key = f"{self.seed}:{record.image_id}:{record.attempts}".encode()
        draw = int.from_bytes(hashlib.sha256(key).digest()[:4], "big") / 2 ** 32
        if draw < self.accept_rate:
            return ("approve", "")
        return ("reject", "caption flagged as inaccurate")


class FileQueueReviewer:
    """Exports records awaiting review and ingests human verdicts.

    Pending records accumulate in ``pending_reviews.jsonl``; verdicts are
    read from ``verdicts.jsonl`` lines ``{image_id, attempt, verdict, reason}``.
    """

    PENDING_NAME = "pending_reviews.jsonl"
    VERDICTS_NAME = "verdicts.jsonl"

    def __init__(self, queue_dir: Path):
        self.queue_dir = Path(queue_dir)
        self.queue_dir.mkdir(parents=True, exist_ok=True)
        self._pending: dict[tuple[str, int], dict] = {}

    def _verdicts(self) -> dict[tuple[str, int], tuple[str, str]]:
        path = self.queue_dir / self.VERDICTS_NAME
        out = {}
        if path.is_file():
            for line in path.read_text().splitlines():
                if not line.strip():
                    continue
                v = json.loads(line)
                out[(v["image_id"], int(v.get("attempt", 1)))] = (
                    v["verdict"], v.get("reason", ""))
        return out

    def review(self, record: AnnotationRecord) -> Optional[tuple[str, str]]:
        key = (record.image_id, record.attempts)
        verdict = self._verdicts().get(key)
        if verdict is not None:
            self._pending.pop(key, None)
            self._flush()
            return verdict
        self._pending[key] = {
            "image_id": record.image_id, "attempt": record.attempts,
            "caption": record.caption,
        }
        self._flush()
        return None

    def _flush(self) -> None:
        rows = [json.dumps(self._pending[k], sort_keys=True)
                for k in sorted(self._pending)]
        _atomic_write(self.queue_dir / self.PENDING_NAME,
                      "\n".join(rows) + ("\n" if rows else ""))


@dataclass
class PipelineConfig:
    annotator: AnnotatorClient = field(default_factory=MockAnnotator)
    reviewer: ReviewProvider = field(default_factory=AutoReviewer)
    prefixes: dict[str, str] = field(
        default_factory=lambda: dict(CAPTION_PREFIX_TABLE))
    question_list: list[str] = field(
        default_factory=lambda: list(DEFAULT_QUESTION_LIST))
    clock: Callable[[], float] = time.time

    @classmethod
    def from_file(cls, path: Path, queue_dir: Path | None = None) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text())
        ann_cfg = raw.get("annotator", {"kind": "mock"})
        if ann_cfg.get("kind", "mock") == "mock":
            annotator: AnnotatorClient = MockAnnotator()
        elif ann_cfg["kind"] == "http":
            annotator = HttpAnnotator(
                ann_cfg["endpoint"],
                timeout_s=float(ann_cfg.get("timeout_s", 10.0)),
                retries=int(ann_cfg.get("retries", 3)),
            )
        else:
            raise ValueError(f"unknown annotator kind {ann_cfg['kind']!r}")
        rev_cfg = raw.get("reviewer", {"kind": "auto"})
        if rev_cfg.get("kind", "auto") == "auto":
            reviewer: ReviewProvider = AutoReviewer(
                accept_rate=float(rev_cfg.get("accept_rate", 1.0)),
                seed=int(rev_cfg.get("seed", 0)),
            )
        elif rev_cfg["kind"] == "file_queue":
            if queue_dir is None:
                raise ValueError("file_queue reviewer needs a queue directory")
            reviewer = FileQueueReviewer(queue_dir)
        else:
            raise ValueError(f"unknown reviewer kind {rev_cfg['kind']!r}")
        cfg = cls(annotator=annotator, reviewer=reviewer)
        if "prefixes" in raw:
            cfg.prefixes.update(raw["prefixes"])
        if "question_list" in raw:
            cfg.question_list = list(raw["question_list"])
        return cfg


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class PipelineStore:
    """Per-record JSON state under ``state/`` plus an append-only audit log."""

    def __init__(self, out_dir: Path, clock: Callable[[], float] = time.time):
        self.out_dir = Path(out_dir)
        self.state_dir = self.out_dir / "state"
        self.audit_path = self.out_dir / "audit.jsonl"
        self.clock = clock

    def load_records(self) -> list[AnnotationRecord]:
        if not self.state_dir.is_dir():
            return []
        records = []
        for path in sorted(self.state_dir.glob("*.json")):
            records.append(AnnotationRecord.from_dict(json.loads(path.read_text())))
        return records

    def save_record(self, record: AnnotationRecord) -> None:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.state_dir / f"{record.image_id}.json",
                      json.dumps(record.to_dict(), indent=2, sort_keys=True))

    def log_event(self, record: AnnotationRecord, event: str, actor: str,
                  **detail) -> None:
        entry = {"ts": self.clock(), "image_id": record.image_id,
                 "event": event, "actor": actor, **detail}
        record.audit.append(entry)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with self.audit_path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def stage1_captions(records: list[AnnotationRecord], client: AnnotatorClient,
                    prefix_table: dict[str, str],
                    store: PipelineStore) -> list[AnnotationRecord]:
    """Generate initial captions for pending records.

    An unavailable annotator leaves the record pending and moves on.
    """
    for record in records:
        if record.stage != "caption" or record.status != "pending":
            continue
        prefix = prefix_table.get(record.dataset, prefix_table.get("default", ""))
        image_ref = {"image_id": record.image_id, "image": record.image,
                     "class_names": record.class_names}
        try:
            caption = client.generate_caption(prefix, STANDARD_CAPTION_PROMPT,
                                              image_ref)
        except AnnotatorUnavailable as exc:
            store.log_event(record, "caption_failed", "annotator", error=str(exc))
            store.save_record(record)
            continue
        record.caption = caption
        record.attempts = 1
        record.stage = "refine"
        record.status = "generated"
        store.log_event(record, "caption_generated", "annotator", caption=caption)
        store.save_record(record)
    return records


def stage2_refine(records: list[AnnotationRecord], client: AnnotatorClient,
                  reviewer: ReviewProvider, prefix_table: dict[str, str],
                  store: PipelineStore) -> list[AnnotationRecord]:
    """Review captions: approve, retry once with an adjusted prompt, or
    escalate to manual annotation after the second rejection.

    A reviewer with no verdict yet suspends the record; resuming later is
    idempotent.
    """
    for record in records:
        while record.stage == "refine" and record.status in ("generated", "regenerated"):
            try:
                verdict = reviewer.review(record)
            except ReviewerUnavailable:
                verdict = None
            if verdict is None:
                break
            decision, reason = verdict
            if decision == "approve":
                record.status = "approved"
                record.stage = "conversation"
                store.log_event(record, "review_approved", "reviewer")
                store.save_record(record)
            elif record.attempts >= 2:
                record.status = "manual_required"
                store.log_event(record, "review_rejected", "reviewer", reason=reason)
                store.log_event(record, "manual_required", "pipeline")
                store.save_record(record)
            else:
                record.status = "rejected_once"
                store.log_event(record, "review_rejected", "reviewer", reason=reason)
                store.save_record(record)
                prefix = prefix_table.get(record.dataset,
                                          prefix_table.get("default", ""))
                adjusted = f"{STANDARD_CAPTION_PROMPT} Previous caption was rejected: {reason}"
                image_ref = {"image_id": record.image_id, "image": record.image,
                             "class_names": record.class_names}
                try:
                    caption = client.generate_caption(prefix, adjusted, image_ref)
                except AnnotatorUnavailable as exc:
                    store.log_event(record, "caption_failed", "annotator",
                                    error=str(exc))
                    store.save_record(record)
                    break
                record.caption = caption
                record.attempts = 2
                record.status = "regenerated"
                store.log_event(record, "caption_regenerated", "annotator",
                                caption=caption)
                store.save_record(record)
    return records


def stage3_conversations(records: list[AnnotationRecord], client: AnnotatorClient,
                         question_list: list[str], store: PipelineStore,
                         data_dir: Path) -> list[AnnotationRecord]:
    """Generate grounded conversations and validate them against the masks."""
    for record in records:
        if record.stage != "conversation":
            continue
        image_ref = {"image_id": record.image_id, "image": record.image,
                     "class_names": record.class_names}
        try:
            turns = client.generate_conversation(question_list, record.caption,
                                                 image_ref)
        except AnnotatorUnavailable as exc:
            store.log_event(record, "conversation_failed", "annotator",
                            error=str(exc))
            store.save_record(record)
            continue
        violations = _validate_joined(record, turns, data_dir)
        if violations:
            record.status = "manual_required"
            store.log_event(record, "conversation_invalid", "pipeline",
                            violations=[str(v) for v in violations])
            store.save_record(record)
            continue
        record.conversation = turns
        store.log_event(record, "conversation_generated", "annotator",
                        n_turns=len(turns))
        record.stage = "done"
        store.log_event(record, "done", "pipeline")
        store.save_record(record)
    return records


def _validate_joined(record: AnnotationRecord, turns: list[dict],
                     data_dir: Path) -> list:
    try:
        sample = Sample(
            image_id=record.image_id,
            image=read_image_png(data_dir / record.image),
            masks=[read_mask_png(data_dir / p) for p in record.masks],
            conversation=conversation_from_json(turns),
            class_names=record.class_names,
        )
    except Exception as exc:
        return [f"unparseable conversation or files: {exc}"]
    return validate_sample(sample)


def init_records(input_dir: Path, out_dir: Path) -> list[AnnotationRecord]:
    """Seed pipeline state from ``inputs.jsonl``, copying image/mask files.

    Masks must pre-exist in the input directory; the pipeline only adds
    captions and conversations.
    """
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    manifest = input_dir / "inputs.jsonl"
    if not manifest.is_file():
        raise FileNotFoundError(f"no inputs.jsonl in {input_dir}")
    records = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        for rel in [rec["image"], *rec["masks"]]:
            src, dst = input_dir / rel, out_dir / rel
            if not dst.is_file():
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, dst)
        records.append(AnnotationRecord(
            image_id=rec["image_id"], image=rec["image"], masks=list(rec["masks"]),
            class_names=list(rec["class_names"]),
            dataset=rec.get("dataset", "default"),
        ))
    return records


def ingest_manual_captions(records: list[AnnotationRecord], out_dir: Path,
                           store: PipelineStore) -> None:
    path = Path(out_dir) / "manual_captions.jsonl"
    if not path.is_file():
        return
    captions = {}
    for line in path.read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            captions[entry["image_id"]] = entry["caption"]
    for record in records:
        if (record.status == "manual_required" and record.stage == "refine"
                and record.image_id in captions):
            record.caption = captions[record.image_id]
            record.status = "manual_done"
            record.stage = "conversation"
            store.log_event(record, "manual_caption_applied", "physician",
                            caption=record.caption)
            store.save_record(record)


def run_pipeline(input_dir: Path, out_dir: Path,
                 config: PipelineConfig | None = None) -> dict:
    """Drive every record as far as possible and write the dataset manifest.

    Completed directories are byte-stable: rerunning produces no new events
    and rewrites identical bytes.
    """
    config = config or PipelineConfig()
    out_dir = Path(out_dir)
    store = PipelineStore(out_dir, clock=config.clock)
    records = store.load_records()
    if not records:
        records = init_records(input_dir, out_dir)
        for record in records:
            store.log_event(record, "record_initialized", "pipeline")
            store.save_record(record)

    while True:
        before = [(r.stage, r.status, r.attempts) for r in records]
        stage1_captions(records, config.annotator, config.prefixes, store)
        stage2_refine(records, config.annotator, config.reviewer,
                      config.prefixes, store)
        ingest_manual_captions(records, out_dir, store)
        stage3_conversations(records, config.annotator, config.question_list,
                             store, out_dir)
        if [(r.stage, r.status, r.attempts) for r in records] == before:
            break

    _write_manifest(records, out_dir)
    return pipeline_status(out_dir)


def _write_manifest(records: list[AnnotationRecord], out_dir: Path) -> None:
    lines = []
    for record in sorted(records, key=lambda r: r.image_id):
        if record.stage != "done":
            continue
        lines.append(json.dumps({
            "image_id": record.image_id,
            "image": record.image,
            "masks": record.masks,
            "class_names": record.class_names,
            "conversation": record.conversation,
        }, sort_keys=True))
    _atomic_write(out_dir / "manifest.jsonl",
                  "\n".join(lines) + ("\n" if lines else ""))


def pipeline_status(out_dir: Path) -> dict:
    store = PipelineStore(out_dir)
    records = store.load_records()
    counts: dict[str, int] = {}
    for record in records:
        key = f"{record.stage}/{record.status}"
        counts[key] = counts.get(key, 0) + 1
    return {
        "total": len(records),
        "done": sum(r.stage == "done" for r in records),
        "manual_required": sum(r.status == "manual_required" for r in records),
        "by_state": dict(sorted(counts.items())),
    }


def replay_audit(events: list[dict]) -> dict[str, dict]:
    """Reconstruct each record's final (stage, status, attempts) from the
    audit event stream alone."""
    states: dict[str, dict] = {}
    for event in events:
        rid = event["image_id"]
        st = states.setdefault(
            rid, {"stage": "caption", "status": "pending", "attempts": 0})
        kind = event["event"]
        if kind == "record_initialized":
            st.update(stage="caption", status="pending", attempts=0)
        elif kind == "caption_generated":
            st.update(stage="refine", status="generated", attempts=1)
        elif kind == "review_approved":
            st.update(stage="conversation", status="approved")
        elif kind == "review_rejected":
            if st["attempts"] >= 2:
                st.update(status="manual_required")
            else:
                st.update(status="rejected_once")
        elif kind == "caption_regenerated":
            st.update(status="regenerated", attempts=2)
        elif kind == "manual_required":
            st.update(status="manual_required")
        elif kind == "manual_caption_applied":
            st.update(stage="conversation", status="manual_done")
        elif kind == "conversation_invalid":
            st.update(status="manual_required")
        elif kind == "done":
            st.update(stage="done")
    return states


def load_audit(out_dir: Path) -> list[dict]:
    path = Path(out_dir) / "audit.jsonl"
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines()
            if line.strip()]
