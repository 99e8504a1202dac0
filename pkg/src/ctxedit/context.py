"""Tokenized view of a long-context condition unit.

Flattens every frame of every unit into one 1-D visual token sequence
with (unit, frame, patch) bookkeeping, per-token position triples for the
rotary encoding, the per-unit instruction ids, and the target-frame
marker.  This is the hand-off point between the pure-numpy data model and
the transformer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cu import FrameRole, LongContextConditionUnit
from .latent import CodecConfig, frame_to_tokens
from .text import DEFAULT_TEXT_LEN, Vocabulary, tokenize


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class FrameEntry:
    unit_index: int
    frame_index: int
    indicator_id: int     # 1-based global frame number
    token_start: int
    token_count: int
    grid_h: int
    grid_w: int
    is_target: bool


@dataclass(frozen=True)
class TokenizedContext:
    visual_tokens: np.ndarray      # (S, token_dim) float32, raw [0,1] patch values
    positions: np.ndarray          # (S, 3) int64: (frame counter, patch row, patch col)
    frame_of_token: np.ndarray     # (S,) int64, global frame index (0-based)
    frames: tuple[FrameEntry, ...]
    unit_token_ids: tuple[np.ndarray, ...]  # instruction ids per unit
    image_channels: int

    @property
    def total_tokens(self) -> int:
        return int(self.visual_tokens.shape[0])

    @property
    def target_frames(self) -> tuple[FrameEntry, ...]:
        return tuple(f for f in self.frames if f.is_target)

    def single_target(self) -> FrameEntry:
        targets = self.target_frames
        if len(targets) != 1:
            raise ContextError(f"expected exactly one target frame, found {len(targets)}")
        return targets[0]


def tokenize_context(
    lcu: LongContextConditionUnit,
    vocab: Vocabulary,
    codec: CodecConfig,
    text_len: int = DEFAULT_TEXT_LEN,
    drop_instructions: bool = False,
) -> TokenizedContext:
    """Patchify every frame and tokenize every instruction of an LCU.

    ``drop_instructions`` swaps each instruction for a single pad token
    (the unconditional branch used for guidance training).
    """
    channels = {f.channels for unit in lcu.units for f in unit.frames}
    if len(channels) > 1:
        raise ContextError(f"all frames in a context must share channel count, got {channels}")
    image_channels = channels.pop() if channels else 3

    token_chunks: list[np.ndarray] = []
    pos_chunks: list[np.ndarray] = []
    frame_ids: list[np.ndarray] = []
    entries: list[FrameEntry] = []
    assignment = lcu.indicators

    cursor = 0
    global_frame = 0
    for m, unit in enumerate(lcu.units):
        for n, frame in enumerate(unit.frames):
            tokens, gh, gw = frame_to_tokens(frame.image, frame.mask, codec)
            count = tokens.shape[0]
            rows, cols = np.divmod(np.arange(count, dtype=np.int64), gw)
            pos = np.stack([np.full(count, global_frame, dtype=np.int64), rows, cols], axis=1)
            entries.append(
                FrameEntry(
                    unit_index=m,
                    frame_index=n,
                    indicator_id=assignment.id_of(m, n),
                    token_start=cursor,
                    token_count=count,
                    grid_h=gh,
                    grid_w=gw,
                    is_target=frame.role == FrameRole.TARGET_PLACEHOLDER,
                )
            )
            token_chunks.append(tokens.astype(np.float32))
            pos_chunks.append(pos)
            frame_ids.append(np.full(count, global_frame, dtype=np.int64))
            cursor += count
            global_frame += 1

    total = cursor
    if total > codec.visual_cap:
        raise ContextError(f"visual sequence of {total} tokens exceeds cap {codec.visual_cap}")

    if drop_instructions:
        ids = tuple(np.array([vocab.pad_id], dtype=np.int64) for _ in lcu.units)
    else:
        ids = tuple(tokenize(u.instruction, vocab, max_len=text_len) for u in lcu.units)

    token_dim = codec.token_dim(image_channels)
    visual = (
        np.concatenate(token_chunks, axis=0)
        if token_chunks
        else np.zeros((0, token_dim), dtype=np.float32)
    )
    positions = (
        np.concatenate(pos_chunks, axis=0) if pos_chunks else np.zeros((0, 3), dtype=np.int64)
    )
    frame_of = (
        np.concatenate(frame_ids, axis=0) if frame_ids else np.zeros((0,), dtype=np.int64)
    )
    return TokenizedContext(
        visual_tokens=visual,
        positions=positions,
        frame_of_token=frame_of,
        frames=tuple(entries),
        unit_token_ids=ids,
        image_channels=image_channels,
    )


def target_x0_tokens(
    target_image: np.ndarray, codec: CodecConfig, mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Ground-truth token sequence for the generated frame (all-one mask
    channel unless one is given)."""
    img = np.asarray(target_image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if mask is None:
        mask = np.ones(img.shape[:2], dtype=np.float32)
    tokens, _, _ = frame_to_tokens(img, mask, codec)
    return tokens.astype(np.float32)
