"""Noise schedule, training objective, samplers, and the stage driver.

Noise-prediction diffusion with a cosine signal schedule and a
deterministic reverse sampler.  Only the target frame is ever noised;
every history/condition frame enters the transformer clean.  Guidance is
trained by dropping instructions on a fraction of steps and applied at
inference by mixing the conditional and instruction-dropped predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .context import TokenizedContext, target_x0_tokens, tokenize_context
from .model import LongContextTransformer, PreparedContext, save_checkpoint


class DiffusionError(ValueError):
    pass


class StageCapError(DiffusionError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients, one per step, decreasing from ~1 to ~0."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 1:
            raise DiffusionError("schedule must be a 1-D array of at least one step")
        if ab.min() <= 0.0 or ab.max() > 1.0:
            raise DiffusionError("signal coefficients must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise DiffusionError("signal coefficients must be non-increasing")
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def cosine(cls, steps: int, offset: float = 0.008, floor: float = 5e-3) -> "NoiseSchedule":
        """Cosine signal curve with a floor on the terminal signal.

        Without the floor the last steps carry a vanishing x0 component, so
        a noise-predicting model gets no training signal to honor its
        conditioning exactly where sampling starts.
        """
        t = np.arange(1, steps + 1, dtype=np.float64) / steps
        f = np.cos((t + offset) / (1 + offset) * math.pi / 2) ** 2
        f0 = math.cos(offset / (1 + offset) * math.pi / 2) ** 2
        ab = np.clip(f / f0, floor, 0.9999)
        return cls(alpha_bar=np.minimum.accumulate(ab))

    @property
    def steps(self) -> int:
        return int(self.alpha_bar.size)

    def coeffs(self, t: Tensor, dtype: torch.dtype) -> tuple[Tensor, Tensor]:
        """(sqrt(signal), sqrt(noise)) gathered at integer steps t."""
        if t.min() < 0 or t.max() >= self.steps:
            raise DiffusionError(f"step index outside [0, {self.steps})")
        ab = torch.from_numpy(self.alpha_bar).to(device=t.device)[t]
        return ab.sqrt().to(dtype)[:, None, None], (1 - ab).sqrt().to(dtype)[:, None, None]


def q_sample(x0: Tensor, t: Tensor, noise: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Forward diffusion: sqrt(a)*x0 + sqrt(1-a)*noise at per-element steps t."""
    signal, spread = schedule.coeffs(t, x0.dtype)
    return signal * x0 + spread * noise


def to_model_space(tokens: np.ndarray | Tensor):
    return tokens * 2.0 - 1.0


def from_model_space(tokens: np.ndarray | Tensor):
    return (tokens + 1.0) / 2.0


@dataclass(frozen=True)
class StageConfig:
    name: str
    tasks: tuple[str, ...]
    visual_cap: int = 1024
    max_images: int = 1
    steps: int = 1000
    batch_size: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tasks": list(self.tasks),
            "visual_cap": self.visual_cap,
            "max_images": self.max_images,
            "steps": self.steps,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StageConfig":
        return cls(
            name=doc["name"],
            tasks=tuple(doc["tasks"]),
            visual_cap=int(doc.get("visual_cap", 1024)),
            max_images=int(doc.get("max_images", 1)),
            steps=int(doc.get("steps", 1000)),
            batch_size=doc.get("batch_size"),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    weight_decay: float = 5e-4
    batch_size: int = 16
    cfg_dropout: float = 0.1
    timesteps: int = 100
    grad_clip: float = 1.0
    terminal_boost: float = 0.1
    seed: int = 0
    stages: tuple[StageConfig, ...] = field(
        default_factory=lambda: (
            StageConfig(name="single-image", tasks=("text-guided",), visual_cap=1024,
                        max_images=1, steps=1000),
            StageConfig(name="multi-image", tasks=("semantic-editing",), visual_cap=1024,
                        max_images=9, steps=1000),
        )
    )

    def __post_init__(self):
        caps = [s.visual_cap for s in self.stages]
        images = [s.max_images for s in self.stages]
        if any(b < a for a, b in zip(caps, caps[1:])):
            raise DiffusionError("stage visual caps must be non-decreasing")
        if any(b < a for a, b in zip(images, images[1:])):
            raise DiffusionError("stage image caps must be non-decreasing")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "cfg_dropout": self.cfg_dropout,
            "timesteps": self.timesteps,
            "grad_clip": self.grad_clip,
            "terminal_boost": self.terminal_boost,
            "seed": self.seed,
            "stages": [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        kwargs = dict(
            learning_rate=float(doc.get("learning_rate", 2e-5)),
            weight_decay=float(doc.get("weight_decay", 5e-4)),
            batch_size=int(doc.get("batch_size", 16)),
            cfg_dropout=float(doc.get("cfg_dropout", 0.1)),
            timesteps=int(doc.get("timesteps", 100)),
            grad_clip=float(doc.get("grad_clip", 1.0)),
            terminal_boost=float(doc.get("terminal_boost", 0.1)),
            seed=int(doc.get("seed", 0)),
        )
        if doc.get("stages"):
            kwargs["stages"] = tuple(StageConfig.from_dict(s) for s in doc["stages"])
        return cls(**kwargs)


class Trainer:
    """Owns the optimizer and RNG streams for one model."""

    def __init__(
        self,
        model: LongContextTransformer,
        config: TrainConfig,
        schedule: Optional[NoiseSchedule] = None,
    ):
        self.model = model
        self.config = config
        self.schedule = schedule or NoiseSchedule.cosine(config.timesteps)
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        self.rng = np.random.default_rng(config.seed)
        self.noise_gen = torch.Generator().manual_seed(config.seed + 1)
        self.step_count = 0
        self._context_cache: dict = {}

    def _draw_steps(self, count: int) -> np.ndarray:
        """Uniform steps with extra mass on the terminal step, which decides
        what the first reverse step commits to."""
        t = self.rng.integers(0, self.schedule.steps, size=count)
        boost = self.rng.random(count) < self.config.terminal_boost
        t[boost] = self.schedule.steps - 1
        return t

    def _signature(self, tc: TokenizedContext) -> tuple:
        return (
            tc.visual_tokens.shape,
            tc.frames,
            tuple(len(ids) for ids in tc.unit_token_ids),
        )

    def training_step(self, samples: Sequence) -> float:
        """One optimizer update from a list of forge samples.

        Samples are grouped by identical context structure so each group
        runs as one batched forward; the loss reads only the target
        frame's predictions and conditioning frames stay clean.
        """
        if not samples:
            raise DiffusionError("empty batch")
        groups: dict[tuple, list] = {}
        for sample in samples:
            drop = self.config.cfg_dropout > 0 and self.rng.random() < self.config.cfg_dropout
            tc = tokenize_context(
                sample.lcu,
                self.model.vocab,
                self.model.config.codec,
                text_len=self.model.config.text_len,
                drop_instructions=drop,
            )
            groups.setdefault(self._signature(tc), []).append((tc, sample))

        self.optimizer.zero_grad(set_to_none=True)
        total_loss = 0.0
        total = len(samples)
        loss_accum = None
        for sig, members in groups.items():
            pc = self._context_cache.get(sig)
            if pc is None:
                pc = self.model.prepare(members[0][0])
                self._context_cache[sig] = pc
            visual = torch.from_numpy(np.stack([tc.visual_tokens for tc, _ in members]))
            key_ids = torch.stack(
                [
                    torch.cat([torch.from_numpy(tc.unit_token_ids[u]) for u in pc.frame_unit])
                    for tc, _ in members
                ]
            )
            x0 = torch.from_numpy(
                np.stack(
                    [
                        target_x0_tokens(s.target_image, self.model.config.codec)
                        for _, s in members
                    ]
                )
            )
            x0 = to_model_space(x0)
            t = torch.from_numpy(self._draw_steps(len(members))).long()
            noise = torch.randn(x0.shape, generator=self.noise_gen, dtype=x0.dtype)
            x_t = q_sample(x0, t, noise, self.schedule)
            # Terminal-step alignment: the reverse process starts from pure
            # noise carrying no trace of the target, but q_sample always
            # leaves a sqrt(signal) trace.  Training the last step on pure
            # noise (with the consistent label) forces the first sampling
            # step to commit from the conditioning instead of reading a
            # phantom trace out of the start noise.
            terminal = (t == self.schedule.steps - 1)[:, None, None]
            if terminal.any():
                pure = torch.randn(x0.shape, generator=self.noise_gen, dtype=x0.dtype)
                signal, spread = self.schedule.coeffs(t, x0.dtype)
                noise = torch.where(terminal, (pure - signal * x0) / spread, noise)
                x_t = torch.where(terminal, pure, x_t)
            pred = self.model(pc, x_t, t, visual=visual, key_ids=key_ids)
            group_loss = torch.mean((pred - noise) ** 2)
            weighted = group_loss * (len(members) / total)
            loss_accum = weighted if loss_accum is None else loss_accum + weighted
            total_loss += float(group_loss.detach()) * len(members) / total

        if not math.isfinite(total_loss):
            raise DiffusionError(
                f"non-finite loss {total_loss} at step {self.step_count}; "
                f"lr={self.config.learning_rate}, groups={[len(v) for v in groups.values()]}"
            )
        loss_accum.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return total_loss


def sampling_steps(total: int, requested: int) -> list[int]:
    """Descending step plan from the noisiest step down to 0."""
    if requested < 1 or requested > total:
        raise DiffusionError(f"sampler steps must be in [1, {total}]")
    idx = np.linspace(total - 1, 0, requested).round().astype(int)
    plan = []
    for i in idx:
        if not plan or plan[-1] != int(i):
            plan.append(int(i))
    return plan


@torch.no_grad()
def sample_tokens(
    model: LongContextTransformer,
    pc: PreparedContext,
    schedule: NoiseSchedule,
    steps: int,
    guidance_scale: float = 1.0,
    pc_uncond: Optional[PreparedContext] = None,
    generator: Optional[torch.Generator] = None,
    predict: Optional[Callable[[PreparedContext, Tensor, Tensor], Tensor]] = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Deterministic reverse process over the target frame's tokens.

    Returns x0 in model space.  ``predict`` overrides the network (used by
    oracle tests); guidance_scale 1 never evaluates the unconditional
    branch, so it is exactly the unguided path.
    """
    model.validate_finite()
    entry = pc.target_entry
    shape = (1, entry.token_count, model.config.token_dim)
    x = torch.randn(shape, generator=generator, dtype=dtype)
    net = predict or (lambda ctx, xt, t: model(ctx, xt, t))
    plan = sampling_steps(schedule.steps, steps)
    ab = schedule.alpha_bar
    for i, t_idx in enumerate(plan):
        t = torch.tensor([t_idx], dtype=torch.long)
        eps = net(pc, x, t)
        if guidance_scale != 1.0:
            if pc_uncond is None:
                raise DiffusionError("guidance requires the instruction-dropped context")
            eps_u = net(pc_uncond, x, t)
            eps = eps_u + guidance_scale * (eps - eps_u)
        a_t = ab[t_idx]
        x0_hat = (x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        if i + 1 < len(plan):
            a_next = ab[plan[i + 1]]
            x = math.sqrt(a_next) * x0_hat + math.sqrt(1 - a_next) * eps
        else:
            x = x0_hat
    return x


def sample(
    model: LongContextTransformer,
    lcu,
    schedule: NoiseSchedule,
    steps: int = 50,
    guidance_scale: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Generate the target image for an LCU; deterministic given the seed."""
    tc = tokenize_context(lcu, model.vocab, model.config.codec, text_len=model.config.text_len)
    pc = model.prepare(tc)
    pc_uncond = None
    if guidance_scale != 1.0:
        tc_u = tokenize_context(
            lcu, model.vocab, model.config.codec,
            text_len=model.config.text_len, drop_instructions=True,
        )
        pc_uncond = model.prepare(tc_u)
    gen = torch.Generator().manual_seed(seed)
    x0 = sample_tokens(
        model, pc, schedule, steps,
        guidance_scale=guidance_scale, pc_uncond=pc_uncond, generator=gen,
    )
    entry = pc.target_entry
    tokens = from_model_space(x0[0].numpy())
    from .latent import tokens_to_image

    image, _ = tokens_to_image(
        tokens, entry.grid_h, entry.grid_w, pc.image_channels, model.config.codec
    )
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def run_stages(
    model: LongContextTransformer,
    config: TrainConfig,
    batch_fn: Callable[[StageConfig, int], Sequence],
    out_dir,
    log_every: int = 200,
    log: Optional[Callable[[str], None]] = None,
) -> list[Path]:
    """Drive the staged curriculum; each stage inherits the previous
    weights and writes one checkpoint with a cumulative step counter.

    ``batch_fn(stage, batch_size)`` supplies forge samples; samples that
    violate the stage's frame or token caps raise StageCapError.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, config)
    say = log or (lambda msg: None)
    paths = []
    for idx, stage in enumerate(config.stages):
        if stage.visual_cap > model.config.visual_cap:
            raise StageCapError(
                f"stage {stage.name} cap {stage.visual_cap} exceeds model cap "
                f"{model.config.visual_cap}"
            )
        batch_size = stage.batch_size or config.batch_size
        running = None
        for _ in range(stage.steps):
            batch = list(batch_fn(stage, batch_size))
            enforce_stage_caps(batch, stage, model)
            loss = trainer.training_step(batch)
            running = loss if running is None else 0.98 * running + 0.02 * loss
            if trainer.step_count % log_every == 0:
                say(f"stage {stage.name}: step {trainer.step_count}, loss {running:.5f}")
        path = out_dir / f"stage{idx + 1}_{stage.name}.ckpt"
        save_checkpoint(path, model, step=trainer.step_count, extra={"stage": stage.name})
        paths.append(path)
        say(f"stage {stage.name}: wrote {path}")
    return paths


def enforce_stage_caps(batch: Sequence, stage: StageConfig, model: LongContextTransformer) -> None:
    for sample in batch:
        frames = sample.lcu.total_frames
        if frames > stage.max_images:
            raise StageCapError(
                f"sample with {frames} frames violates stage '{stage.name}' cap "
                f"of {stage.max_images} images"
            )
        tokens = sum(
            model.config.codec.tokens_per_frame(f.height, f.width)
            for unit in sample.lcu.units
            for f in unit.frames
        )
        if tokens > stage.visual_cap:
            raise StageCapError(
                f"sample with {tokens} visual tokens violates stage '{stage.name}' cap "
                f"of {stage.visual_cap}"
            )
