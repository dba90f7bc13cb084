"""Stateless HTTP inference service: POST /v1/chat and GET /healthz.

Full conversation history travels with every request; inference is
serialized through a single worker behind a bounded queue (overflow answers
429). Masks are returned as base64 PNG or row-major RLE.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    GenerationBudgetExceeded,
    MalformedMarkup,
    MedsegError,
    SequenceTooLong,
)
from .model import MedSegModel
from .protocol import Turn, parse_grounded, serialize_grounded

MAX_BODY_BYTES = 16 * 1024 * 1024
MASK_FORMATS = ("png_base64", "rle")


def encode_rle(mask: np.ndarray) -> dict:
    """Row-major runs alternating background/foreground, background first."""
    flat = (np.asarray(mask).reshape(-1) > 0).astype(np.uint8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = [int(c) for c in np.diff(bounds)]
    if flat.size and flat[0] == 1:
        counts = [0, *counts]
    return {"counts": counts, "size": [int(mask.shape[0]), int(mask.shape[1])]}


def decode_rle(obj: dict) -> np.ndarray:
    h, w = obj["size"]
    flat = np.zeros(h * w, dtype=np.uint8)
    pos, value = 0, 0
    for run in obj["counts"]:
        if value:
            flat[pos: pos + run] = 1
        pos += run
        value ^= 1
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return flat.reshape(h, w)


def encode_mask_png(mask: np.ndarray) -> str:
    buf = io.BytesIO()
    px = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(px, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_b64(data: str) -> np.ndarray:
    raw = base64.b64decode(data, validate=True)
    with Image.open(io.BytesIO(raw)) as im:
        px = np.asarray(im.convert("L"), dtype=np.float64)
    return px / 255.0


class RequestError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class ServiceConfig:
    queue_depth: int = 8
    allow_origin: str = "*"
    max_image_px: int = 256
    default_max_new_tokens: int = 64


class InferenceService:
    """Request validation plus model inference, independent of HTTP plumbing."""

    def __init__(self, model: MedSegModel | None,
                 config: ServiceConfig | None = None):
        self.model = model
        self.config = config or ServiceConfig()
        self._infer_lock = threading.Lock()
        self._queue_slots = threading.Semaphore(self.config.queue_depth)

    @property
    def model_version(self) -> str:
        return self.model.model_version if self.model else "none"

    def health(self) -> tuple[int, dict]:
        if self.model is None:
            return 503, {"status": "unavailable", "model_version": "none"}
        return 200, {"status": "ok", "model_version": self.model_version}

    def chat(self, payload: dict) -> tuple[int, dict]:
        if self.model is None:
            return 503, {"error": "model not loaded"}
        if not self._queue_slots.acquire(blocking=False):
            return 429, {"error": "request queue full"}
        try:
            request = self._parse_request(payload)
            started = time.monotonic()
            with self._infer_lock:
                grounded, masks = self.model.predict(
                    request["image"], request["turns"],
                    max_new_tokens=request["max_new_tokens"],
                )
            latency_ms = (time.monotonic() - started) * 1000.0
            spans = []
            for span, mask in zip(grounded.seg_spans, masks):
                encoded = (encode_mask_png(mask)
                           if request["mask_format"] == "png_base64"
                           else encode_rle(mask))
                spans.append({
                    "slot_index": span.slot_index,
                    "phrase": span.phrase,
                    "mask": encoded,
                    "area_px": int(np.asarray(mask).sum()),
                })
            return 200, {
                "text": serialize_grounded(grounded),
                "spans": spans,
                "model_version": self.model_version,
                "latency_ms": latency_ms,
            }
        except RequestError as exc:
            return exc.status, {"error": exc.message}
        except SequenceTooLong as exc:
            return 422, {"error": str(exc)}
        except GenerationBudgetExceeded as exc:
            return 422, {"error": str(exc)}
        except MedsegError as exc:
            return 400, {"error": str(exc)}
        finally:
            self._queue_slots.release()

    def _parse_request(self, payload: dict) -> dict:
        if not isinstance(payload, dict):
            raise RequestError(400, "request body must be a JSON object")
        if "image" not in payload or "message" not in payload:
            raise RequestError(400, "required fields: image, message")
        try:
            image = decode_image_b64(payload["image"])
        except (ValueError, UnidentifiedImageError, OSError) as exc:
            raise RequestError(400, f"cannot decode image: {exc}")
        h, w = image.shape
        if h > self.config.max_image_px or w > self.config.max_image_px:
            raise RequestError(
                413, f"image {h}x{w} exceeds limit {self.config.max_image_px}")
        patch = self.model.gcu_cfg.patch_size
        if h % patch or w % patch or h % 4 or w % 4:
            raise RequestError(
                400, f"image dims {h}x{w} must be divisible by {patch} and 4")

        history = payload.get("history", [])
        if not isinstance(history, list):
            raise RequestError(400, "history must be a list")
        turns: list[Turn] = []
        try:
            for i, entry in enumerate(history):
                expected = "user" if i % 2 == 0 else "assistant"
                if entry.get("role") != expected:
                    raise RequestError(
                        400, "history roles must alternate starting with user")
                turns.append(Turn(entry["role"], parse_grounded(entry["text"])))
            if turns and turns[-1].role != "assistant":
                raise RequestError(400, "history must end with an assistant turn")
            message = payload["message"]
            if not isinstance(message, str):
                raise RequestError(400, "message must be a string")
            turns.append(Turn("user", parse_grounded(message)))
        except (MalformedMarkup, ValueError, KeyError, TypeError, AttributeError) as exc:
            raise RequestError(400, f"malformed history or message: {exc}")

        options = payload.get("options", {}) or {}
        mask_format = options.get("mask_format", "png_base64")
        if mask_format not in MASK_FORMATS:
            raise RequestError(400, f"mask_format must be one of {MASK_FORMATS}")
        max_new = options.get("max_new_tokens", self.config.default_max_new_tokens)
        if not isinstance(max_new, int) or not 0 < max_new <= 512:
            raise RequestError(400, "max_new_tokens must be an int in [1, 512]")
        return {"image": image, "turns": turns, "mask_format": mask_format,
                "max_new_tokens": max_new}


def make_handler(service: InferenceService):
    allow_origin = service.config.allow_origin

    class Handler(BaseHTTPRequestHandler):
        def _send(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.send_header("Access-Control-Allow-Origin", allow_origin)
            self.end_headers()
            self.wfile.write(data)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", allow_origin)
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

        def do_GET(self):
            if self.path == "/healthz":
                self._send(*service.health())
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self):
            if self.path != "/v1/chat":
                self._send(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", 0))
            if length > MAX_BODY_BYTES:
                self._send(413, {"error": "request body too large"})
                return
            try:
                payload = json.loads(self.rfile.read(length).decode())
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                self._send(400, {"error": f"invalid JSON: {exc}"})
                return
            self._send(*service.chat(payload))

        def log_message(self, fmt, *args):
            pass

    return Handler


def serve(ckpt_path: Path | None, host: str = "127.0.0.1", port: int = 8787,
          config: ServiceConfig | None = None) -> ThreadingHTTPServer:
    """Build the server (caller decides whether to block on serve_forever)."""
    model = None
    if ckpt_path is not None:
        model = MedSegModel.load(Path(ckpt_path))
    service = InferenceService(model, config)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    server.service = service  # type: ignore[attr-defined]
    return server
