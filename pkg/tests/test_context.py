import numpy as np
import pytest

from ctxedit.context import ContextError, target_x0_tokens, tokenize_context
from ctxedit.cu import ConditionUnit, FrameRole, TaskKind, VisualFrame, build_lcu
from ctxedit.latent import CodecConfig
from ctxedit.text import Vocabulary
from util import random_image, random_lcu


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="module")
def codec():
    return CodecConfig()


def test_token_layout_and_positions(vocab, codec):
    rng = np.random.default_rng(0)
    lcu = random_lcu(rng, n_units=2, frames_per_unit=1, size=8)
    tc = tokenize_context(lcu, vocab, codec)
    # 2 units: 1 frame + (1 frame + target) = 3 frames of 4 tokens each on 8x8
    assert tc.total_tokens == 12
    assert len(tc.frames) == 3
    for g, entry in enumerate(tc.frames):
        assert entry.indicator_id == g + 1
        chunk = tc.positions[entry.token_start : entry.token_start + entry.token_count]
        assert np.all(chunk[:, 0] == g)
        rows, cols = chunk[:, 1], chunk[:, 2]
        assert list(rows) == [0, 0, 1, 1]
        assert list(cols) == [0, 1, 0, 1]
    assert tc.single_target().unit_index == 1


def test_frame_of_token_matches_entries(vocab, codec):
    rng = np.random.default_rng(1)
    lcu = random_lcu(rng, n_units=3, frames_per_unit=2, size=4)
    tc = tokenize_context(lcu, vocab, codec)
    for g, entry in enumerate(tc.frames):
        span = tc.frame_of_token[entry.token_start : entry.token_start + entry.token_count]
        assert np.all(span == g)


def test_instruction_drop_replaces_with_pad(vocab, codec):
    rng = np.random.default_rng(2)
    lcu = random_lcu(rng, n_units=2, frames_per_unit=1, size=4)
    tc = tokenize_context(lcu, vocab, codec, drop_instructions=True)
    for ids in tc.unit_token_ids:
        assert list(ids) == [vocab.pad_id]


def test_visual_cap_enforced(vocab):
    # five 64x64 frames at 256 tokens each blow a 1024-token budget
    small_cap = CodecConfig(visual_cap=1024)
    frames = tuple(
        VisualFrame.build(np.zeros((64, 64, 3), dtype=np.float32)) for _ in range(4)
    ) + (
        VisualFrame.build(
            np.zeros((64, 64, 3), dtype=np.float32), role=FrameRole.TARGET_PLACEHOLDER
        ),
    )
    unit = ConditionUnit(instruction="big", frames=frames, kind=TaskKind.FREE_FORM)
    lcu = build_lcu([], unit, 0)
    with pytest.raises(ContextError):
        tokenize_context(lcu, vocab, small_cap)
    # nine 32x32 frames at 64 tokens each fit
    frames9 = tuple(
        VisualFrame.build(np.zeros((32, 32, 3), dtype=np.float32)) for _ in range(8)
    ) + (
        VisualFrame.build(
            np.zeros((32, 32, 3), dtype=np.float32), role=FrameRole.TARGET_PLACEHOLDER
        ),
    )
    unit9 = ConditionUnit(instruction="ok", frames=frames9, kind=TaskKind.FREE_FORM)
    tc = tokenize_context(build_lcu([], unit9, 0), vocab, small_cap)
    assert tc.total_tokens == 9 * 64


def test_mixed_channels_rejected(vocab, codec):
    frames = (
        VisualFrame.build(np.zeros((4, 4, 1), dtype=np.float32)),
        VisualFrame.build(
            np.zeros((4, 4, 3), dtype=np.float32), role=FrameRole.TARGET_PLACEHOLDER
        ),
    )
    with pytest.raises(ContextError):
        # frames within a unit share H/W but not necessarily channels
        unit = ConditionUnit(instruction="mix", frames=frames, kind=TaskKind.FREE_FORM)
        tokenize_context(build_lcu([], unit, 0), vocab, codec)


def test_single_target_requires_exactly_one(vocab, codec):
    rng = np.random.default_rng(3)
    lcu = random_lcu(rng, n_units=1, frames_per_unit=1, size=4, with_target=False)
    tc = tokenize_context(lcu, vocab, codec)
    with pytest.raises(ContextError):
        tc.single_target()


def test_target_x0_tokens_match_frame_tokens(codec):
    rng = np.random.default_rng(4)
    img = random_image(rng, 8)
    tokens = target_x0_tokens(img, codec)
    assert tokens.shape == (4, codec.token_dim(3))
    # channels are the fastest axis of a token, so the all-ones default mask
    # sits at every (latent_channels+1)-th slot
    stride = codec.latent_channels(3) + 1
    mask_cols = tokens[:, stride - 1 :: stride]
    assert np.all(mask_cols == 1.0)
