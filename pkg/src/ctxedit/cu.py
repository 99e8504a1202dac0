"""Condition-unit data model.

A condition unit pairs one textual instruction with an ordered list of
image+mask frames; a long-context condition unit chains the current unit
with a bounded window of previous units so generation can see earlier
rounds.  Everything here is an immutable value object: downstream modules
(tokenizer, trainer, service) only read these structures.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

MAX_IMAGE_NUMBER = 9
WIRE_FORMAT_NAME = "lcu"
WIRE_FORMAT_VERSION = 1


class FrameRole(str, Enum):
    SOURCE = "source"
    REFERENCE = "reference"
    GENERATED = "generated"
    TARGET_PLACEHOLDER = "target-placeholder"


class TaskKind(str, Enum):
    TEXT_GUIDED = "text-guided"
    LOW_LEVEL = "low-level-analysis"
    CONTROLLABLE = "controllable-generation"
    SEMANTIC = "semantic-editing"
    ELEMENT = "element-editing"
    REPAINT = "repainting"
    LAYER = "layer-editing"
    REFERENCE = "reference-generation"
    FREE_FORM = "free-form"


class ConditionUnitError(ValueError):
    """Raised when a condition unit violates a structural constraint."""


class WireFormatError(ValueError):
    """Raised when an LCU byte stream cannot be parsed."""


def _as_image(arr) -> np.ndarray:
    img = np.asarray(arr, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ConditionUnitError(f"image must be HxW or HxWx{{1,3}}, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ConditionUnitError(f"image must be non-empty, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ConditionUnitError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ConditionUnitError("image values must lie in [0, 1]")
    return img


def _as_mask(arr, height: int, width: int) -> np.ndarray:
    mask = np.asarray(arr, dtype=np.float32)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if mask.ndim != 2:
        raise ConditionUnitError(f"mask must be a single-channel HxW grid, got shape {mask.shape}")
    if mask.shape != (height, width):
        raise ConditionUnitError(
            f"mask shape {mask.shape} does not match image shape {(height, width)}"
        )
    if not np.isfinite(mask).all():
        raise ConditionUnitError("mask contains non-finite values")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ConditionUnitError("mask values must lie in [0, 1]")
    return mask


@dataclass(frozen=True)
class VisualFrame:
    """One image plus its region mask; an all-one mask means "whole image"."""

    image: np.ndarray
    mask: np.ndarray
    role: FrameRole = FrameRole.SOURCE
    mask_is_default: bool = True

    @classmethod
    def build(cls, image, mask=None, role: FrameRole = FrameRole.SOURCE) -> "VisualFrame":
        img = _as_image(image)
        h, w = img.shape[:2]
        if mask is None:
            m = np.ones((h, w), dtype=np.float32)
            default = True
        else:
            m = _as_mask(mask, h, w)
            default = False
        img.setflags(write=False)
        m.setflags(write=False)
        return cls(image=img, mask=m, role=role, mask_is_default=default)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def channels(self) -> int:
        return int(self.image.shape[2])

    def same_content(self, other: "VisualFrame") -> bool:
        return (
            self.role == other.role
            and self.mask_is_default == other.mask_is_default
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True)
class ConditionUnit:
    """One generation request: an instruction and its visual frames."""

    instruction: str
    frames: tuple[VisualFrame, ...]
    kind: TaskKind = TaskKind.FREE_FORM

    def __post_init__(self):
        if len(self.frames) > MAX_IMAGE_NUMBER:
            raise ConditionUnitError(
                f"unit has {len(self.frames)} frames, cap is {MAX_IMAGE_NUMBER}"
            )
        shapes = {(f.height, f.width) for f in self.frames}
        if len(shapes) > 1:
            raise ConditionUnitError(f"frames within a unit must share height/width, got {shapes}")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def same_content(self, other: "ConditionUnit") -> bool:
        return (
            self.instruction == other.instruction
            and self.kind == other.kind
            and len(self.frames) == len(other.frames)
            and all(a.same_content(b) for a, b in zip(self.frames, other.frames))
        )


def build_cu(
    instruction: str,
    frames: Sequence[tuple] = (),
    kind: TaskKind = TaskKind.FREE_FORM,
    roles: Optional[Sequence[FrameRole]] = None,
) -> ConditionUnit:
    """Assemble a condition unit from (image, mask-or-None) pairs.

    Missing masks become all-ones; frame order is preserved.  Raises
    ConditionUnitError on dimension mismatch or too many frames.
    """
    if roles is None:
        roles = [FrameRole.SOURCE] * len(frames)
    if len(roles) != len(frames):
        raise ConditionUnitError("roles must align with frames")
    built = tuple(
        VisualFrame.build(img, mask, role=role) for (img, mask), role in zip(frames, roles)
    )
    return ConditionUnit(instruction=instruction, frames=built, kind=kind)


@dataclass(frozen=True)
class IndicatorAssignment:
    """Global frame numbering: (unit index, frame index) -> indicator id 1..F."""

    ids: dict  # (unit_idx, frame_idx) -> int

    @classmethod
    def for_units(cls, units: Sequence[ConditionUnit]) -> "IndicatorAssignment":
        ids = {}
        next_id = 1
        for m, unit in enumerate(units):
            for n in range(unit.frame_count):
                ids[(m, n)] = next_id
                next_id += 1
        return cls(ids=ids)

    def id_of(self, unit_idx: int, frame_idx: int) -> int:
        try:
            return self.ids[(unit_idx, frame_idx)]
        except KeyError:
            raise ConditionUnitError(f"no indicator assigned to frame ({unit_idx}, {frame_idx})")

    def token_of(self, unit_idx: int, frame_idx: int) -> str:
        return indicator_token(self.id_of(unit_idx, frame_idx))

    @property
    def frame_count(self) -> int:
        return len(self.ids)


def indicator_token(k: int) -> str:
    if not 1 <= k <= MAX_IMAGE_NUMBER:
        raise ConditionUnitError(f"indicator id {k} outside 1..{MAX_IMAGE_NUMBER}")
    return f"{{image{k}}}"


@dataclass(frozen=True)
class LongContextConditionUnit:
    """The current unit plus up to ``history_window`` previous units, oldest first."""

    units: tuple[ConditionUnit, ...]
    history_window: int

    def __post_init__(self):
        if self.history_window < 0:
            raise ConditionUnitError("history window must be non-negative")
        if not self.units:
            raise ConditionUnitError("an LCU needs at least the current unit")
        if len(self.units) > self.history_window + 1:
            raise ConditionUnitError(
                f"{len(self.units)} units exceed window of {self.history_window} history rounds"
            )
        total = sum(u.frame_count for u in self.units)
        if total > MAX_IMAGE_NUMBER:
            raise ConditionUnitError(
                f"LCU holds {total} frames in total, cap is {MAX_IMAGE_NUMBER}"
            )

    @property
    def current(self) -> ConditionUnit:
        return self.units[-1]

    @property
    def total_frames(self) -> int:
        return sum(u.frame_count for u in self.units)

    @property
    def indicators(self) -> IndicatorAssignment:
        return IndicatorAssignment.for_units(self.units)

    def same_content(self, other: "LongContextConditionUnit") -> bool:
        return (
            self.history_window == other.history_window
            and len(self.units) == len(other.units)
            and all(a.same_content(b) for a, b in zip(self.units, other.units))
        )


def build_lcu(
    history: Sequence[ConditionUnit],
    current: ConditionUnit,
    history_window: int,
) -> LongContextConditionUnit:
    """Window the history to the most recent ``history_window`` units and append current."""
    if history_window < 0:
        raise ConditionUnitError("history window must be non-negative")
    kept = tuple(history[len(history) - history_window:]) if history_window > 0 else ()
    return LongContextConditionUnit(units=kept + (current,), history_window=history_window)


# ---------------------------------------------------------------------------
# Wire format: self-describing JSON document, one object per unit, pixel
# payloads as base64 of raw little-endian float32.  Round-trips bit-exactly.
# ---------------------------------------------------------------------------


def _encode_grid(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode_grid(payload: str, shape: tuple) -> np.ndarray:
    try:
        raw = base64.b64decode(payload.encode("ascii"), validate=True)
    except Exception as exc:
        raise WireFormatError(f"bad base64 pixel payload: {exc}") from exc
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise WireFormatError(f"pixel payload holds {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _frame_to_obj(frame: VisualFrame) -> dict:
    obj = {
        "role": frame.role.value,
        "height": frame.height,
        "width": frame.width,
        "channels": frame.channels,
        "image": _encode_grid(frame.image),
        "mask_is_default": frame.mask_is_default,
    }
    if not frame.mask_is_default:
        obj["mask"] = _encode_grid(frame.mask)
    return obj


def _frame_from_obj(obj: dict) -> VisualFrame:
    try:
        role = FrameRole(obj["role"])
        h, w, c = int(obj["height"]), int(obj["width"]), int(obj["channels"])
        image = _decode_grid(obj["image"], (h, w, c))
        default = bool(obj["mask_is_default"])
        mask = None if default else _decode_grid(obj["mask"], (h, w))
    except WireFormatError:
        raise
    except Exception as exc:
        raise WireFormatError(f"malformed frame object: {exc}") from exc
    return VisualFrame.build(image, mask, role=role)


def serialize_lcu(lcu: LongContextConditionUnit) -> bytes:
    doc = {
        "format": WIRE_FORMAT_NAME,
        "version": WIRE_FORMAT_VERSION,
        "history_window": lcu.history_window,
        "units": [
            {
                "instruction": unit.instruction,
                "kind": unit.kind.value,
                "frames": [_frame_to_obj(f) for f in unit.frames],
            }
            for unit in lcu.units
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def parse_lcu(data: bytes) -> LongContextConditionUnit:
    try:
        doc = json.loads(data.decode("utf-8"))
    except Exception as exc:
        raise WireFormatError(f"malformed LCU stream: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != WIRE_FORMAT_NAME:
        raise WireFormatError("not an LCU document")
    if doc.get("version") != WIRE_FORMAT_VERSION:
        raise WireFormatError(
            f"unsupported LCU version {doc.get('version')}, expected {WIRE_FORMAT_VERSION}"
        )
    try:
        units = tuple(
            ConditionUnit(
                instruction=u["instruction"],
                kind=TaskKind(u["kind"]),
                frames=tuple(_frame_from_obj(f) for f in u["frames"]),
            )
            for u in doc["units"]
        )
        window = int(doc["history_window"])
    except (WireFormatError, ConditionUnitError):
        raise
    except Exception as exc:
        raise WireFormatError(f"malformed LCU document: {exc}") from exc
    return LongContextConditionUnit(units=units, history_window=window)
