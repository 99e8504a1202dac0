"""Shared test helpers: randomized model builders and tiny experiment loops."""

from __future__ import annotations

import numpy as np
import torch

from ctxedit.cu import FrameRole, TaskKind, ConditionUnit, VisualFrame, build_lcu
from ctxedit.model import LongContextTransformer, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(width=24, depth=1, heads=2, ff_mult=2, image_channels=3)
    base.update(overrides)
    return ModelConfig(**base)


def randomize_weights(model: LongContextTransformer, seed: int, std: float = 0.05) -> None:
    """Give every parameter (gates included) a random value so the network
    is a non-degenerate function; fresh init is the identity by design."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)


def random_image(rng: np.random.Generator, size: int = 16, channels: int = 3) -> np.ndarray:
    return rng.random((size, size, channels), dtype=np.float32)


def random_lcu(
    rng: np.random.Generator,
    n_units: int = 1,
    frames_per_unit: int = 1,
    size: int = 8,
    with_target: bool = True,
):
    """Random multi-unit context; the last unit ends in a target frame."""
    units = []
    for u in range(n_units):
        frames = []
        count = frames_per_unit
        is_last = u == n_units - 1
        for f in range(count):
            frames.append(VisualFrame.build(random_image(rng, size), role=FrameRole.SOURCE))
        if is_last and with_target:
            frames.append(
                VisualFrame.build(
                    np.zeros((size, size, 3), dtype=np.float32),
                    role=FrameRole.TARGET_PLACEHOLDER,
                )
            )
        units.append(
            ConditionUnit(
                instruction=f"unit {u} does step number {u}",
                frames=tuple(frames),
                kind=TaskKind.FREE_FORM,
            )
        )
    return build_lcu(units[:-1], units[-1], history_window=max(0, n_units - 1))
