"""HTTP chat service: per-session multi-turn generation over a loaded
checkpoint.

Each turn builds a context from the last ``m`` rounds (their instructions,
their uploaded frames, and the image generated back then) plus the current
request, samples the model, and appends the round.  A failed generation
never mutates the session.  Replaying a transcript with the same
checkpoint and seed reproduces every generated image byte for byte.
"""

from __future__ import annotations

import base64
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .cu import (
    ConditionUnit,
    ConditionUnitError,
    FrameRole,
    TaskKind,
    VisualFrame,
    build_lcu,
)
from .context import ContextError
from .diffusion import NoiseSchedule, sample
from .imageio import decode_png, encode_png
from .model import LongContextTransformer, load_checkpoint

DEFAULT_CANVAS = 16
DEFAULT_SAMPLE_STEPS = 25


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class CreateSessionBody(BaseModel):
    m: int = Field(default=1, ge=0, description="history rounds visible to each turn")
    seed: int = 0
    checkpoint: Optional[str] = None


class TurnBody(BaseModel):
    instruction: str
    frames: list[str] = Field(default_factory=list, description="base64 PNG images")
    masks: list[Optional[str]] = Field(default_factory=list, description="base64 PNG masks")
    m: Optional[int] = Field(default=None, ge=0, description="override for this turn only")
    guidance_scale: float = 1.0


@dataclass
class Round:
    index: int
    instruction: str
    frames: list[np.ndarray]
    masks: list[Optional[np.ndarray]]
    output_png: bytes
    included_history: list[int]


@dataclass
class Session:
    session_id: str
    history_window: int
    seed: int
    checkpoint_id: str
    rounds: list[Round] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _decode_b64_png(payload: str, what: str) -> np.ndarray:
    try:
        return decode_png(base64.b64decode(payload.encode("ascii"), validate=True))
    except Exception as exc:
        raise ServiceError(400, "bad_image", f"could not decode {what}: {exc}") from exc


def _mask_from_image(img: np.ndarray) -> np.ndarray:
    return img[:, :, 0] if img.ndim == 3 else img


class SessionService:
    """Owns the model registry and the in-memory session table."""

    def __init__(
        self,
        checkpoints: dict[str, LongContextTransformer],
        default_checkpoint: str,
        sample_steps: int = DEFAULT_SAMPLE_STEPS,
        canvas: int = DEFAULT_CANVAS,
    ):
        if default_checkpoint not in checkpoints:
            raise ValueError(f"default checkpoint {default_checkpoint!r} not loaded")
        self.checkpoints = checkpoints
        self.default_checkpoint = default_checkpoint
        self.sample_steps = sample_steps
        self.canvas = canvas
        self.sessions: dict[str, Session] = {}
        self._table_lock = threading.Lock()

    # -- session management -------------------------------------------------

    def create_session(self, m: int, seed: int, checkpoint: Optional[str]) -> Session:
        ckpt = checkpoint or self.default_checkpoint
        if ckpt not in self.checkpoints:
            raise ServiceError(400, "unknown_checkpoint", f"no checkpoint {ckpt!r} loaded")
        session = Session(
            session_id=uuid.uuid4().hex[:12],
            history_window=m,
            seed=seed,
            checkpoint_id=ckpt,
        )
        with self._table_lock:
            self.sessions[session.session_id] = session
        return session

    def get_session(self, session_id: str) -> Session:
        with self._table_lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ServiceError(404, "unknown_session", f"no session {session_id!r}")
        return session

    # -- turn execution ------------------------------------------------------

    def _history_unit(self, rnd: Round) -> ConditionUnit:
        frames = [
            VisualFrame.build(img, mask, role=FrameRole.SOURCE)
            for img, mask in zip(rnd.frames, rnd.masks)
        ]
        frames.append(
            VisualFrame.build(decode_png(rnd.output_png), role=FrameRole.GENERATED)
        )
        return ConditionUnit(
            instruction=rnd.instruction, frames=tuple(frames), kind=TaskKind.FREE_FORM
        )

    def post_turn(self, session_id: str, body: TurnBody) -> dict:
        session = self.get_session(session_id)
        with session.lock:
            m = session.history_window if body.m is None else body.m
            frames = [
                _decode_b64_png(payload, f"frame {i + 1}") for i, payload in enumerate(body.frames)
            ]
            masks: list[Optional[np.ndarray]] = []
            for i, payload in enumerate(body.masks):
                masks.append(
                    None if payload is None else _mask_from_image(
                        _decode_b64_png(payload, f"mask {i + 1}")
                    )
                )
            masks += [None] * (len(frames) - len(masks))
            if len(masks) > len(frames):
                raise ServiceError(400, "bad_request", "more masks than frames")

            size = frames[0].shape[:2] if frames else (self.canvas, self.canvas)
            placeholder = VisualFrame.build(
                np.zeros((size[0], size[1], 3), dtype=np.float32),
                role=FrameRole.TARGET_PLACEHOLDER,
            )
            try:
                current = ConditionUnit(
                    instruction=body.instruction,
                    frames=tuple(
                        VisualFrame.build(img, mask) for img, mask in zip(frames, masks)
                    )
                    + (placeholder,),
                    kind=TaskKind.FREE_FORM,
                )
                included = [r.index for r in session.rounds[len(session.rounds) - m :]] if m else []
                history = [self._history_unit(r) for r in session.rounds[len(session.rounds) - m :]] if m else []
                lcu = build_lcu(history, current, history_window=m)
            except ConditionUnitError as exc:
                raise ServiceError(409, "frame_cap", str(exc)) from exc

            model = self.checkpoints[session.checkpoint_id]
            round_index = len(session.rounds) + 1
            try:
                image = sample(
                    model,
                    lcu,
                    NoiseSchedule.cosine(100),
                    steps=self.sample_steps,
                    guidance_scale=body.guidance_scale,
                    seed=_round_seed(session.seed, round_index),
                )
            except (ContextError, ConditionUnitError) as exc:
                raise ServiceError(409, "context_error", str(exc)) from exc
            except Exception as exc:  # model failure: round must not append
                raise ServiceError(500, "generation_failed", str(exc)) from exc

            png = encode_png(image)
            session.rounds.append(
                Round(
                    index=round_index,
                    instruction=body.instruction,
                    frames=frames,
                    masks=masks,
                    output_png=png,
                    included_history=included,
                )
            )
            return {
                "round": round_index,
                "image": base64.b64encode(png).decode("ascii"),
                "lcu_summary": {
                    "history_window": m,
                    "included_rounds": included,
                    "total_frames": lcu.total_frames,
                },
            }

    def transcript(self, session_id: str) -> dict:
        session = self.get_session(session_id)
        with session.lock:
            return {
                "id": session.session_id,
                "m": session.history_window,
                "seed": session.seed,
                "checkpoint": session.checkpoint_id,
                "rounds": [
                    {
                        "round": r.index,
                        "instruction": r.instruction,
                        "frames": [
                            base64.b64encode(encode_png(f)).decode("ascii") for f in r.frames
                        ],
                        "masks": [
                            None
                            if m is None
                            else base64.b64encode(encode_png(m)).decode("ascii")
                            for m in r.masks
                        ],
                        "image": base64.b64encode(r.output_png).decode("ascii"),
                        "included_rounds": r.included_history,
                    }
                    for r in session.rounds
                ],
            }

    def round_image(self, session_id: str, round_index: int) -> bytes:
        session = self.get_session(session_id)
        with session.lock:
            for r in session.rounds:
                if r.index == round_index:
                    return r.output_png
        raise ServiceError(404, "unknown_round", f"no round {round_index}")


def _round_seed(session_seed: int, round_index: int) -> int:
    return int(np.random.SeedSequence([session_seed, round_index]).generate_state(1)[0])


def build_app(service: SessionService, static_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="ctxedit session service")

    @app.exception_handler(ServiceError)
    async def service_error_handler(_req: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "checkpoints": sorted(service.checkpoints),
            "sessions": len(service.sessions),
        }

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        session = service.create_session(body.m, body.seed, body.checkpoint)
        return {"id": session.session_id, "m": session.history_window, "seed": session.seed}

    @app.post("/sessions/{session_id}/turns")
    def post_turn(session_id: str, body: TurnBody):
        return service.post_turn(session_id, body)

    @app.get("/sessions/{session_id}")
    def transcript(session_id: str):
        return service.transcript(session_id)

    @app.get("/sessions/{session_id}/images/{round_index}")
    def round_image(session_id: str, round_index: int):
        data = service.round_image(session_id, round_index)
        return Response(content=data, media_type="image/png")

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app


def service_from_checkpoint(path, sample_steps: int = DEFAULT_SAMPLE_STEPS) -> SessionService:
    model, manifest = load_checkpoint(path)
    model.eval()
    name = Path(path).stem
    return SessionService(
        checkpoints={name: model}, default_checkpoint=name, sample_steps=sample_steps
    )
