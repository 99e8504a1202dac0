"""Procedural micro-tasks: every sample is (context, ground-truth target).

Scenes are small canvases with an 8-color palette and three shape
primitives, so each task family's ground truth is computable in closed
form from its inputs and no human judgment is needed to score outputs.
Instructions reference frames through "{imageK}" tokens that match the
context's global frame numbering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cu import (
    ConditionUnit,
    FrameRole,
    LongContextConditionUnit,
    TaskKind,
    VisualFrame,
    build_lcu,
)

DEFAULT_CANVAS = 16

PALETTE = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
SHAPES = ("square", "disc", "cross")
SHAPE_RADIUS = 2


class TaskError(ValueError):
    pass


def anchors(canvas: int) -> dict[str, tuple[int, int]]:
    if canvas < 12:
        raise TaskError("canvas too small for the anchor grid")
    near, far, mid = SHAPE_RADIUS, canvas - 1 - SHAPE_RADIUS, canvas // 2 - 1
    return {
        "northwest": (near, near),
        "northeast": (near, far),
        "southwest": (far, near),
        "southeast": (far, far),
        "middle": (mid, mid),
    }


def shape_cells(shape: str, center: tuple[int, int], canvas: int) -> np.ndarray:
    """Boolean HxW grid of the cells a primitive covers."""
    rr, cc = np.meshgrid(np.arange(canvas), np.arange(canvas), indexing="ij")
    dr, dc = rr - center[0], cc - center[1]
    if shape == "square":
        hit = (np.abs(dr) <= SHAPE_RADIUS) & (np.abs(dc) <= SHAPE_RADIUS)
    elif shape == "disc":
        hit = dr * dr + dc * dc <= SHAPE_RADIUS * SHAPE_RADIUS + 1
    elif shape == "cross":
        hit = ((dr == 0) & (np.abs(dc) <= SHAPE_RADIUS)) | (
            (dc == 0) & (np.abs(dr) <= SHAPE_RADIUS)
        )
    else:
        raise TaskError(f"unknown shape {shape!r}")
    return hit


@dataclass(frozen=True)
class Placement:
    shape: str
    color: str
    anchor: str


@dataclass(frozen=True)
class Scene:
    background: str
    placements: tuple[Placement, ...]
    canvas: int = DEFAULT_CANVAS

    def render(self) -> np.ndarray:
        img = np.empty((self.canvas, self.canvas, 3), dtype=np.float32)
        img[:] = PALETTE[self.background]
        spots = anchors(self.canvas)
        for p in self.placements:
            cells = shape_cells(p.shape, spots[p.anchor], self.canvas)
            img[cells] = PALETTE[p.color]
        return img

    def coverage(self) -> np.ndarray:
        cover = np.zeros((self.canvas, self.canvas), dtype=bool)
        spots = anchors(self.canvas)
        for p in self.placements:
            cover |= shape_cells(p.shape, spots[p.anchor], self.canvas)
        return cover

    def without(self, placement: Placement) -> "Scene":
        kept = tuple(p for p in self.placements if p != placement)
        return Scene(self.background, kept, self.canvas)

    def with_added(self, placement: Placement) -> "Scene":
        return Scene(self.background, self.placements + (placement,), self.canvas)


def edge_map(scene: Scene) -> np.ndarray:
    """White cells exactly where a covered cell has an uncovered 4-neighbor."""
    cover = scene.coverage()
    pad = np.pad(cover, 1, constant_values=False)
    interior = (
        pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    )
    edges = cover & ~interior
    img = np.zeros((scene.canvas, scene.canvas, 3), dtype=np.float32)
    img[edges] = 1.0
    return img


# -- closed-form pointwise edits used by semantic tasks and chains ----------

def edit_invert(image: np.ndarray) -> np.ndarray:
    return (1.0 - image).astype(np.float32)


def edit_swap_red_blue(image: np.ndarray) -> np.ndarray:
    return image[:, :, [2, 1, 0]].astype(np.float32)


def edit_grayscale(image: np.ndarray) -> np.ndarray:
    mean = image.mean(axis=2, keepdims=True)
    return np.repeat(mean, 3, axis=2).astype(np.float32)


EDITS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], str]] = {
    "invert": (edit_invert, "invert the colors of {ref}"),
    "swap-red-blue": (edit_swap_red_blue, "swap red and blue in {ref}"),
    "grayscale": (edit_grayscale, "make {ref} grayscale"),
}


@dataclass(frozen=True)
class TrainSample:
    lcu: LongContextConditionUnit
    target_image: np.ndarray
    kind: str
    seed: int
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MicroTaskSpec:
    kind: str
    canvas: int = DEFAULT_CANVAS
    seed: int = 0

    def generate(self) -> TrainSample:
        return generate(self.kind, self.seed, canvas=self.canvas)


@dataclass(frozen=True)
class ChainSpec:
    edits: tuple[str, ...]
    history_window: int
    fresh_inputs: bool = False  # repeat-edit family feeds a new image each round
    canvas: int = DEFAULT_CANVAS

    def __post_init__(self):
        if len(self.edits) < 2:
            raise TaskError("a chain needs at least two rounds")


# -- scene sampling ----------------------------------------------------------


def _pick_colors(rng, count: int, exclude: Sequence[str] = ()) -> list[str]:
    pool = [c for c in PALETTE if c not in exclude]
    return [pool[i] for i in rng.choice(len(pool), size=count, replace=False)]


def _random_scene(rng, canvas: int, n_shapes: int, background: Optional[str] = None) -> Scene:
    bg = background or list(PALETTE)[rng.integers(len(PALETTE))]
    anchor_names = list(anchors(canvas))
    chosen = [anchor_names[i] for i in rng.choice(len(anchor_names), size=n_shapes, replace=False)]
    colors = _pick_colors(rng, n_shapes, exclude=[bg])
    combos = []
    used = set()
    for color, anchor in zip(colors, chosen):
        shape = SHAPES[rng.integers(len(SHAPES))]
        while (shape, color) in used:
            shape = SHAPES[rng.integers(len(SHAPES))]
        used.add((shape, color))
        combos.append(Placement(shape=shape, color=color, anchor=anchor))
    return Scene(background=bg, placements=tuple(combos), canvas=canvas)


def _placeholder(canvas: int) -> tuple:
    return (np.zeros((canvas, canvas, 3), dtype=np.float32), None)


def _single_unit(
    instruction: str,
    inputs: Sequence[tuple],
    kind: TaskKind,
    canvas: int,
    input_roles: Optional[Sequence[FrameRole]] = None,
) -> LongContextConditionUnit:
    roles = list(input_roles or [FrameRole.SOURCE] * len(inputs))
    frames = list(inputs) + [_placeholder(canvas)]
    roles.append(FrameRole.TARGET_PLACEHOLDER)
    unit = ConditionUnit(
        instruction=instruction,
        frames=tuple(
            VisualFrame.build(img, mask, role=role) for (img, mask), role in zip(frames, roles)
        ),
        kind=kind,
    )
    return build_lcu([], unit, history_window=0)


# -- the task generators -----------------------------------------------------


def _gen_text_guided(rng, canvas: int) -> tuple[LongContextConditionUnit, np.ndarray, dict]:
    scene = _random_scene(rng, canvas, n_shapes=1)
    p = scene.placements[0]
    instruction = (
        f"draw a {p.color} {p.shape} on a {scene.background} background at the {p.anchor}"
    )
    lcu = _single_unit(instruction, [], TaskKind.TEXT_GUIDED, canvas)
    return lcu, scene.render(), {"scene": scene}


def _lowlevel_scene(rng, canvas: int) -> Scene:
    return _random_scene(rng, canvas, n_shapes=int(rng.integers(1, 3)), background="black")


def _gen_low_level(rng, canvas: int):
    scene = _lowlevel_scene(rng, canvas)
    instruction = "trace the edges of the shapes in {image1}"
    lcu = _single_unit(instruction, [(scene.render(), None)], TaskKind.LOW_LEVEL, canvas)
    return lcu, edge_map(scene), {"scene": scene}


def _gen_controllable(rng, canvas: int):
    scene = _lowlevel_scene(rng, canvas)
    parts = " and ".join(f"a {p.color} {p.shape}" for p in scene.placements)
    instruction = (
        f"render {parts} on a {scene.background} background matching the outline in "
        "{image1}"
    )
    lcu = _single_unit(instruction, [(edge_map(scene), None)], TaskKind.CONTROLLABLE, canvas)
    return lcu, scene.render(), {"scene": scene}


def _gen_semantic(rng, canvas: int, force_invert: bool = False):
    scene = _random_scene(rng, canvas, n_shapes=int(rng.integers(1, 4)))
    image = scene.render()
    if force_invert or rng.random() < 0.5:
        instruction = "invert the colors of {image1}"
        target = edit_invert(image)
        meta = {"edit": "invert"}
    else:
        present = [scene.background] + [p.color for p in scene.placements]
        src = present[rng.integers(len(present))]
        dst = _pick_colors(rng, 1, exclude=present)[0]
        instruction = f"turn every {src} area {dst} in {{image1}}"
        target = image.copy()
        hit = np.all(image == np.asarray(PALETTE[src], dtype=np.float32), axis=2)
        target[hit] = PALETTE[dst]
        meta = {"edit": f"swap:{src}->{dst}"}
    lcu = _single_unit(instruction, [(image, None)], TaskKind.SEMANTIC, canvas)
    return lcu, target, meta


def _gen_element(rng, canvas: int):
    scene = _random_scene(rng, canvas, n_shapes=int(rng.integers(1, 4)))
    if rng.random() < 0.5 and scene.placements:
        victim = scene.placements[rng.integers(len(scene.placements))]
        instruction = f"remove the {victim.color} {victim.shape} from {{image1}}"
        target_scene = scene.without(victim)
        meta = {"op": "remove", "placement": victim}
    else:
        free = [a for a in anchors(canvas) if a not in {p.anchor for p in scene.placements}]
        anchor = free[rng.integers(len(free))]
        color = _pick_colors(rng, 1, exclude=[scene.background])[0]
        shape = SHAPES[rng.integers(len(SHAPES))]
        added = Placement(shape=shape, color=color, anchor=anchor)
        instruction = f"add a {color} {shape} at the {anchor} of {{image1}}"
        target_scene = scene.with_added(added)
        meta = {"op": "add", "placement": added}
    lcu = _single_unit(instruction, [(scene.render(), None)], TaskKind.ELEMENT, canvas)
    return lcu, target_scene.render(), meta


def _gen_repaint(rng, canvas: int):
    scene = _random_scene(rng, canvas, n_shapes=int(rng.integers(1, 3)))
    image = scene.render()
    r0, c0 = rng.integers(0, canvas - 4, size=2)
    h, w = rng.integers(2, 6, size=2)
    if rng.random() < 0.05:
        h = w = 0  # empty edit region: the target is the input unchanged
    mask = np.zeros((canvas, canvas), dtype=np.float32)
    mask[r0 : r0 + h, c0 : c0 + w] = 1.0
    color = _pick_colors(rng, 1)[0]
    instruction = f"fill the marked region of {{image1}} with {color}"
    target = image.copy()
    target[mask > 0] = PALETTE[color]
    lcu = _single_unit(instruction, [(image, mask)], TaskKind.REPAINT, canvas)
    return lcu, target, {"color": color, "mask_area": float(mask.sum())}


def _gen_layer(rng, canvas: int):
    bg = list(PALETTE)[rng.integers(len(PALETTE))]
    color = _pick_colors(rng, 1, exclude=[bg, "white"])[0]  # keep the subject visible on white
    shape = SHAPES[rng.integers(len(SHAPES))]
    anchor = list(anchors(canvas))[rng.integers(len(anchors(canvas)))]
    scene = Scene(bg, (Placement(shape, color, anchor),), canvas)
    p = scene.placements[0]
    image = scene.render()
    if rng.random() < 0.5:
        instruction = f"lift the {p.color} {p.shape} out of {{image1}} onto a white background"
        target = np.ones_like(image)
        cells = shape_cells(p.shape, anchors(canvas)[p.anchor], canvas)
        target[cells] = PALETTE[p.color]
        meta = {"op": "foreground"}
    else:
        instruction = "keep only the background of {image1}"
        target = np.empty_like(image)
        target[:] = PALETTE[scene.background]
        meta = {"op": "background"}
    lcu = _single_unit(instruction, [(image, None)], TaskKind.LAYER, canvas)
    return lcu, target, meta


def _gen_reference(rng, canvas: int):
    n_refs = int(rng.integers(2, 4))
    common_color = _pick_colors(rng, 1, exclude=["white"])[0]
    common_shape = SHAPES[rng.integers(len(SHAPES))]
    inputs = []
    anchor_names = list(anchors(canvas))
    used_combos = {(common_shape, common_color)}
    for _ in range(n_refs):
        bg = _pick_colors(rng, 1, exclude=[common_color])[0]
        spots = [anchor_names[i] for i in rng.choice(len(anchor_names), size=2, replace=False)]
        d_shape, d_color = common_shape, common_color
        while (d_shape, d_color) in used_combos:
            d_shape = SHAPES[rng.integers(len(SHAPES))]
            d_color = _pick_colors(rng, 1, exclude=[bg])[0]
        used_combos.add((d_shape, d_color))
        scene = Scene(
            background=bg,
            placements=(
                Placement(common_shape, common_color, spots[0]),
                Placement(d_shape, d_color, spots[1]),
            ),
            canvas=canvas,
        )
        inputs.append((scene.render(), None))
    refs = " and ".join("{image%d}" % (i + 1) for i in range(n_refs))
    joiner = "both" if n_refs == 2 else "all of"
    instruction = f"draw the shape that appears in {joiner} {refs} at the middle of a white canvas"
    target_scene = Scene(
        background="white",
        placements=(Placement(common_shape, common_color, "middle"),),
        canvas=canvas,
    )
    roles = [FrameRole.REFERENCE] * n_refs
    lcu = _single_unit(instruction, inputs, TaskKind.REFERENCE, canvas, input_roles=roles)
    return lcu, target_scene.render(), {"common": (common_shape, common_color)}


def _gen_copy_source(rng, canvas: int):
    scene_a = _random_scene(rng, canvas, n_shapes=1)
    scene_b = _random_scene(rng, canvas, n_shapes=1)
    while np.array_equal(scene_a.render(), scene_b.render()):
        scene_b = _random_scene(rng, canvas, n_shapes=1)
    designated = int(rng.integers(1, 3))
    # reference only the designated frame: the frozen codec has no word-order
    # semantics beyond fixed position offsets, so the instruction's meaning
    # must survive as a token set
    instruction = f"reproduce {{image{designated}}} exactly"
    images = [scene_a.render(), scene_b.render()]
    lcu = _single_unit(
        instruction, [(images[0], None), (images[1], None)], TaskKind.FREE_FORM, canvas
    )
    target = images[designated - 1]
    return lcu, target, {"designated": designated, "images": images}


def _edit_instruction(edit: str, frame_id: int) -> str:
    _, template = EDITS[edit]
    return template.format(ref=f"{{image{frame_id}}}")


def generate_chain(spec: ChainSpec, seed: int) -> TrainSample:
    """Multi-round sample: history units carry their generated outputs and
    the final target is the last round's ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence([0xC4A1, seed]))
    canvas = spec.canvas
    units = []
    frame_id = 1
    current_input = _random_scene(rng, canvas, n_shapes=int(rng.integers(1, 3))).render()
    target = None
    for j, edit_name in enumerate(spec.edits):
        fn, _ = EDITS[edit_name]
        is_last = j == len(spec.edits) - 1
        if j > 0:
            if spec.fresh_inputs:
                current_input = _random_scene(rng, canvas, n_shapes=int(rng.integers(1, 3))).render()
            else:
                current_input = target  # previous round's ground truth
        target = fn(current_input)
        if is_last and spec.fresh_inputs:
            instruction = "repeat the previous edit on {image%d}" % frame_id
        else:
            instruction = _edit_instruction(edit_name, frame_id)
        if is_last:
            frames = (
                VisualFrame.build(current_input, role=FrameRole.SOURCE),
                VisualFrame.build(
                    np.zeros((canvas, canvas, 3), dtype=np.float32),
                    role=FrameRole.TARGET_PLACEHOLDER,
                ),
            )
            frame_id += 2
        else:
            frames = (
                VisualFrame.build(current_input, role=FrameRole.SOURCE),
                VisualFrame.build(target, role=FrameRole.GENERATED),
            )
            frame_id += 2
        units.append(ConditionUnit(instruction=instruction, frames=frames, kind=TaskKind.SEMANTIC))
    lcu = build_lcu(units[:-1], units[-1], history_window=spec.history_window)
    candidates = {name: EDITS[name][0](current_input) for name in EDITS}
    return TrainSample(
        lcu=lcu,
        target_image=target,
        kind="chain",
        seed=seed,
        meta={
            "edits": spec.edits,
            "final_input": current_input,
            "candidates": candidates,
        },
    )


REPEAT_EDIT_FAMILY = ("invert", "swap-red-blue")


def _gen_chain_repeat(canvas: int, seed: int, with_history: bool) -> TrainSample:
    # the edit comes straight from the seed so the m=1 and m=0 variants of
    # one seed describe the same underlying chain
    edit = REPEAT_EDIT_FAMILY[seed % len(REPEAT_EDIT_FAMILY)]
    spec = ChainSpec(edits=(edit, edit), history_window=1 if with_history else 0,
                     fresh_inputs=True, canvas=canvas)
    sample = generate_chain(spec, seed)
    if not with_history:
        current = sample.lcu.units[-1]
        # renumber the lone unit's frame reference: its source is frame 1 now
        unit = ConditionUnit(
            instruction="repeat the previous edit on {image1}",
            frames=current.frames,
            kind=current.kind,
        )
        lcu = build_lcu([], unit, history_window=0)
        sample = TrainSample(
            lcu=lcu, target_image=sample.target_image, kind="chain-repeat-m0",
            seed=seed, meta=dict(sample.meta, ambiguous=True),
        )
    else:
        sample = TrainSample(
            lcu=sample.lcu, target_image=sample.target_image, kind="chain-repeat",
            seed=seed, meta=sample.meta,
        )
    return sample


def generate(kind: str, seed: int, canvas: int = DEFAULT_CANVAS) -> TrainSample:
    """Deterministic sample for one task family; same (kind, seed, canvas)
    always yields identical bytes."""
    if kind in ("low-level-analysis", "controllable-generation"):
        # a shared stream makes the two families exact mutual inverses on
        # the same seed: the (image, feature) pair appears in both directions
        rng = np.random.default_rng(np.random.SeedSequence([0x10ED, seed]))
    else:
        rng = np.random.default_rng(np.random.SeedSequence([hash_kind(kind), seed]))
    if kind == "chain-repeat":
        return _gen_chain_repeat(canvas, seed, with_history=True)
    if kind == "chain-repeat-m0":
        return _gen_chain_repeat(canvas, seed, with_history=False)
    if kind == "chain-edit":
        names = list(EDITS)
        edits = tuple(names[i] for i in rng.integers(0, len(names), size=int(rng.integers(2, 4))))
        return generate_chain(ChainSpec(edits=edits, history_window=len(edits) - 1, canvas=canvas), seed)

    table = {
        "text-guided": _gen_text_guided,
        "low-level-analysis": _gen_low_level,
        "controllable-generation": _gen_controllable,
        "semantic-editing": _gen_semantic,
        "element-editing": _gen_element,
        "repainting": _gen_repaint,
        "layer-editing": _gen_layer,
        "reference-generation": _gen_reference,
        "copy-source": _gen_copy_source,
    }
    if kind == "invert":
        lcu, target, meta = _gen_semantic(rng, canvas, force_invert=True)
        return TrainSample(lcu=lcu, target_image=target, kind=kind, seed=seed, meta=meta)
    if kind not in table:
        raise TaskError(f"unknown task kind {kind!r}")
    lcu, target, meta = table[kind](rng, canvas)
    return TrainSample(lcu=lcu, target_image=target, kind=kind, seed=seed, meta=meta)


TASK_KINDS = (
    "text-guided",
    "low-level-analysis",
    "controllable-generation",
    "semantic-editing",
    "element-editing",
    "repainting",
    "layer-editing",
    "reference-generation",
)
EXTRA_KINDS = ("invert", "copy-source", "chain-edit", "chain-repeat", "chain-repeat-m0")


def hash_kind(kind: str) -> int:
    return int.from_bytes(kind.encode("utf-8")[:4].ljust(4, b"\0"), "big")


def make_batch_fn(canvas: int = DEFAULT_CANVAS, seed: int = 0):
    """Batch supplier for the stage driver: one task family per batch,
    seeds drawn from a dedicated stream so runs are reproducible."""
    rng = np.random.default_rng(seed)

    def batch_fn(stage, batch_size: int):
        kind = stage.tasks[int(rng.integers(len(stage.tasks)))]
        seeds = rng.integers(0, 2**31 - 1, size=batch_size)
        return [generate(kind, int(s), canvas=canvas) for s in seeds]

    return batch_fn
