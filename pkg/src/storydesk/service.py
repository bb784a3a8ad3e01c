"""HTTP generation service.

Endpoints (JSON over HTTP, PNG payloads base64-encoded):

  POST /v1/generate  — masked storyboard generation. The request carries all
      F captions, the F-bit mask (true = generate), and a base64 PNG for
      every unmasked frame. Unmasked frames are echoed back byte-identically;
      an all-false mask short-circuits without touching the sampler.
  GET  /v1/health    — 200 with checkpoint hash and layout once a model is
      loaded, 503 before.

Failure codes: 400 schema/invariant violations (field-level messages),
409 generate before a model is loaded, 429 queue full, 500 internal (opaque
incident id). At most `queue_depth` requests are admitted at once and the
model executes them one at a time.
"""

from __future__ import annotations

import base64
import binascii
import io
import threading
import time
import traceback
import uuid
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from .captions import ACTIONS, BACKGROUNDS, CHARACTER_COLORS, SHAPES, Caption
from .checkpoint import checkpoint_hash, load_checkpoint
from .errors import StoryDeskError
from .layout import FrameMask, LatentStoryboard
from .model import StoryModel
from .sampler import SamplerConfig, ddim_masked_sample
from .stories import image_to_uint8, uint8_to_image


class CaptionPayload(BaseModel):
    shape: str
    color: str
    action: str
    background: str


class GenerateRequest(BaseModel):
    captions: list[CaptionPayload]
    mask: list[bool]
    known_frames: dict[int, str] = Field(default_factory=dict)
    seed: int | None = None
    steps: int = Field(default=50, ge=1, le=1000)
    guidance: float = Field(default=6.0, ge=0.0)


class GenerateResponse(BaseModel):
    frames: list[str]
    storyboard: str
    seed: int
    timing_ms: float


class _Gate:
    """Admission counter: at most `depth` requests in flight."""

    def __init__(self, depth: int) -> None:
        self.depth = depth
        self.active = 0
        self.lock = threading.Lock()

    def enter(self) -> bool:
        with self.lock:
            if self.active >= self.depth:
                return False
            self.active += 1
            return True

    def leave(self) -> None:
        with self.lock:
            self.active -= 1


def _field_error(field: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=400,
        content={"error": "validation", "details": [
            {"field": field, "message": message}
        ]},
    )


def _decode_png(data_b64: str, field: str,
                expected: tuple[int, int, int]) -> np.ndarray | JSONResponse:
    try:
        raw = base64.b64decode(data_b64, validate=True)
        img = np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"))
    except (binascii.Error, OSError, ValueError):
        return _field_error(field, "not a base64-encoded PNG image")
    if img.shape != expected:
        return _field_error(
            field, f"image shape {img.shape} != expected {expected}"
        )
    return img


def _encode_png(img_uint8: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(img_uint8).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


_VOCABS = {
    "shape": SHAPES, "color": CHARACTER_COLORS,
    "action": ACTIONS, "background": BACKGROUNDS,
}


def create_app(checkpoint_path: Path | str | None = None,
               queue_depth: int = 4,
               model: StoryModel | None = None,
               model_hash: str = "") -> FastAPI:
    """Build the service. Load a model from `checkpoint_path`, or hand one in
    directly (tests); with neither, the app starts unloaded."""
    app = FastAPI(title="storydesk", version="1")
    state = app.state
    state.model = model
    state.checkpoint_hash = model_hash
    state.gate = _Gate(queue_depth)
    state.model_lock = threading.Lock()

    if checkpoint_path is not None:
        loaded, _ = load_checkpoint(checkpoint_path)
        state.model = loaded
        state.checkpoint_hash = checkpoint_hash(checkpoint_path)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request,
                                  exc: RequestValidationError) -> JSONResponse:
        details = [
            {
                "field": ".".join(str(p) for p in err["loc"] if p != "body"),
                "message": err["msg"],
            }
            for err in exc.errors()
        ]
        return JSONResponse(
            status_code=400,
            content={"error": "validation", "details": details},
        )

    @app.get("/v1/health")
    def health() -> JSONResponse:
        if state.model is None:
            return JSONResponse(status_code=503, content={"status": "unloaded"})
        return JSONResponse(
            status_code=200,
            content={
                "status": "ready",
                "checkpoint_hash": state.checkpoint_hash,
                "layout": state.model.layout.to_json(),
            },
        )

    @app.post("/v1/generate")
    def generate(request: GenerateRequest):
        if state.model is None:
            return JSONResponse(
                status_code=409,
                content={"error": "model not loaded"},
            )
        if not state.gate.enter():
            return JSONResponse(
                status_code=429,
                content={"error": "generation queue full, retry later"},
            )
        try:
            return _handle_generate(state, request)
        except StoryDeskError as exc:
            incident = uuid.uuid4().hex
            traceback.print_exc()
            return JSONResponse(
                status_code=500,
                content={"error": "internal", "id": incident,
                         "kind": type(exc).__name__},
            )
        except Exception:
            incident = uuid.uuid4().hex
            traceback.print_exc()
            return JSONResponse(
                status_code=500, content={"error": "internal", "id": incident}
            )
        finally:
            state.gate.leave()

    return app


def _handle_generate(state, request: GenerateRequest):
    model: StoryModel = state.model
    layout = model.layout
    f = layout.num_frames

    if len(request.captions) != f:
        return _field_error(
            "captions", f"expected {f} captions, got {len(request.captions)}"
        )
    if len(request.mask) != f:
        return _field_error(
            "mask", f"expected {f} mask bits, got {len(request.mask)}"
        )
    captions: list[Caption] = []
    for i, payload in enumerate(request.captions):
        for slot, vocab in _VOCABS.items():
            value = getattr(payload, slot)
            if value not in vocab:
                return _field_error(
                    f"captions.{i}.{slot}",
                    f"unknown value {value!r}; choose one of {list(vocab)}",
                )
        captions.append(Caption(payload.shape, payload.color, payload.action,
                                payload.background))

    mask = FrameMask(tuple(request.mask))
    for i, bit in enumerate(mask.bits):
        if not bit and i not in request.known_frames:
            return _field_error(
                f"known_frames.{i}",
                f"frame {i} is unmasked (given) but no image was supplied",
            )
    for i in request.known_frames:
        if not 0 <= i < f:
            return _field_error(
                f"known_frames.{i}", f"frame index {i} outside [0, {f})"
            )
        if mask.bits[i]:
            return _field_error(
                f"known_frames.{i}",
                f"frame {i} is masked (to generate); it must not carry an image",
            )

    expected_shape = (layout.frame_height, layout.frame_width, 3)
    given_images: dict[int, np.ndarray] = {}
    for i, data_b64 in request.known_frames.items():
        result = _decode_png(data_b64, f"known_frames.{i}", expected_shape)
        if isinstance(result, JSONResponse):
            return result
        given_images[i] = result

    seed = request.seed if request.seed is not None else \
        int.from_bytes(uuid.uuid4().bytes[:4], "little")
    started = time.monotonic()

    h, w = layout.frame_height, layout.frame_width
    if not mask.any_target:
        frame_payloads = [request.known_frames[i] for i in range(f)]
        board = np.zeros((layout.canvas_height, layout.canvas_width, 3),
                         dtype=np.uint8)
        for i in range(f):
            r, c = divmod(i, layout.grid_cols)
            board[r * h:(r + 1) * h, c * w:(c + 1) * w] = given_images[i]
        return GenerateResponse(
            frames=frame_payloads,
            storyboard=_encode_png(board),
            seed=seed,
            timing_ms=(time.monotonic() - started) * 1000.0,
        )

    canvas = np.full((layout.canvas_height, layout.canvas_width, 3), 0.5,
                     dtype=np.float32)
    for i, img in given_images.items():
        r, c = divmod(i, layout.grid_cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = uint8_to_image(img)

    x0_known = LatentStoryboard(
        model.codec.encode(torch.from_numpy(canvas).permute(2, 0, 1).contiguous()),
        layout,
    )
    config = SamplerConfig(steps=request.steps, guidance_scale=request.guidance,
                           seed=seed)
    with state.model_lock:
        result = ddim_masked_sample(model, x0_known, mask, captions, config)
    decoded = model.codec.decode(result.data).clamp(0.0, 1.0)

    frame_payloads = []
    board = np.zeros((layout.canvas_height, layout.canvas_width, 3),
                     dtype=np.uint8)
    for i in range(f):
        r, c = divmod(i, layout.grid_cols)
        if i in given_images:
            frame_uint8 = given_images[i]
            frame_payloads.append(request.known_frames[i])
        else:
            tile = decoded[:, r * h:(r + 1) * h, c * w:(c + 1) * w]
            frame_uint8 = image_to_uint8(tile.permute(1, 2, 0).numpy())
            frame_payloads.append(_encode_png(frame_uint8))
        board[r * h:(r + 1) * h, c * w:(c + 1) * w] = frame_uint8

    return GenerateResponse(
        frames=frame_payloads,
        storyboard=_encode_png(board),
        seed=seed,
        timing_ms=(time.monotonic() - started) * 1000.0,
    )
