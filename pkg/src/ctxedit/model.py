"""Long-context diffusion transformer.

Every visual token of every frame in the context participates in one full
self-attention; cross-attention is restricted so a frame's tokens only
read the instruction of their own unit (shifted by that frame's indicator
embedding).  Timestep conditioning is adaptive-norm modulation with
zero-initialized gates, so a freshly constructed block stack is the
identity map.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .context import TokenizedContext
from .latent import CodecConfig
from .text import DEFAULT_TEXT_LEN, DEFAULT_VOCAB_SIZE, TextCodec, Vocabulary

CHECKPOINT_MAGIC = b"CTXE"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int = 96
    depth: int = 3
    heads: int = 4
    ff_mult: int = 4
    rope_base: float = 10000.0
    image_channels: int = 3
    downsample: int = 2
    patch: int = 2
    visual_cap: int = 1024
    vocab_size: int = DEFAULT_VOCAB_SIZE
    text_len: int = DEFAULT_TEXT_LEN
    hash_seed: int = 0
    text_seed: int = 0
    text_std: float = 0.25

    def __post_init__(self):
        if self.width % self.heads:
            raise ModelError(f"width {self.width} not divisible by {self.heads} heads")
        if (self.width // self.heads) % 6:
            raise ModelError(
                f"head width {self.width // self.heads} must be divisible by 6 "
                "(three rotary axes, two dims per rotation)"
            )

    @property
    def codec(self) -> CodecConfig:
        return CodecConfig(self.downsample, self.patch, self.visual_cap)

    @property
    def token_dim(self) -> int:
        return self.codec.token_dim(self.image_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def rope3d(x: Tensor, positions: Tensor, base: float = 10000.0) -> Tensor:
    """Rotate the last dim of ``x`` by three independent position axes.

    ``x`` is (..., S, d) with d divisible by 6; ``positions`` is (S, 3)
    integer (frame counter, row, column).  Each axis owns d/3 dims, rotated
    in adjacent pairs by angles pos * base**(-2j / d_axis).  Angles are
    computed in float64 and cast to the input dtype.
    """
    d = x.shape[-1]
    if d % 6:
        raise ModelError(f"rotary width {d} must be divisible by 6")
    d_axis = d // 3
    half = d_axis // 2
    freqs = base ** (
        -2.0 * torch.arange(half, dtype=torch.float64, device=x.device) / d_axis
    )
    pos = positions.to(torch.float64)
    parts = []
    for axis in range(3):
        sub = x[..., axis * d_axis : (axis + 1) * d_axis]
        angles = pos[..., axis : axis + 1] * freqs  # (S, half)
        cos = angles.cos().to(x.dtype)
        sin = angles.sin().to(x.dtype)
        even = sub[..., 0::2]
        odd = sub[..., 1::2]
        rot_even = even * cos - odd * sin
        rot_odd = even * sin + odd * cos
        parts.append(torch.stack((rot_even, rot_odd), dim=-1).flatten(-2))
    return torch.cat(parts, dim=-1)


def apply_indicators(
    unit_text: Sequence[Tensor],
    visual: Tensor,
    frame_unit: Sequence[int],
    frame_of_token: Tensor,
    indicator_rows: Tensor,
) -> tuple[list[Tensor], Tensor]:
    """Add each frame's indicator embedding to its visual tokens and to a
    per-frame copy of its unit's whole text sequence.

    unit_text: per-unit text embeddings (L_m, d); visual: (..., S, d);
    frame_unit: unit index per frame; frame_of_token: (S,) frame index per
    visual token; indicator_rows: (F, d) embedding per frame.
    Returns (per-frame text replicas, shifted visual tokens).
    """
    shifted = visual + indicator_rows[frame_of_token]
    replicas = [
        unit_text[frame_unit[g]] + indicator_rows[g] for g in range(len(frame_unit))
    ]
    return replicas, shifted


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rope_base: float = 10000.0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.rope_base = rope_base
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        queries: Tensor,
        keys_values: Tensor,
        q_pos: Optional[Tensor] = None,
        k_pos: Optional[Tensor] = None,
        mask: Optional[Tensor] = None,
    ) -> Tensor:
        b, sq, _ = queries.shape
        q = self._split(self.to_q(queries))
        k = self._split(self.to_k(keys_values))
        v = self._split(self.to_v(keys_values))
        if q_pos is not None:
            q = rope3d(q, q_pos, self.rope_base)
        if k_pos is not None:
            k = rope3d(k, k_pos, self.rope_base)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, sq, -1)
        return self.proj(out)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


class ContextBlock(nn.Module):
    """Self-attention over the whole visual sequence, frame-restricted
    cross-attention to instructions, gated feed-forward; all three
    branches gated by the timestep so the block is the identity at init."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rope_base: float):
        super().__init__()
        self.norm_sa = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm_ca = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm_ff = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.self_attn = MultiHeadAttention(dim, heads, rope_base)
        self.cross_attn = MultiHeadAttention(dim, heads, rope_base)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.GELU(approximate="tanh"), nn.Linear(ff_mult * dim, dim)
        )
        self.modulation = nn.Linear(dim, 7 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(
        self,
        x: Tensor,
        text_keys: Tensor,
        cross_mask: Tensor,
        positions: Tensor,
        t_emb: Tensor,
    ) -> Tensor:
        mods = self.modulation(torch.nn.functional.silu(t_emb)).unsqueeze(1)
        shift_sa, scale_sa, gate_sa, gate_ca, shift_ff, scale_ff, gate_ff = mods.chunk(7, dim=-1)
        h = modulate(self.norm_sa(x), shift_sa, scale_sa)
        x = x + gate_sa * self.self_attn(h, h, q_pos=positions, k_pos=positions)
        h = self.norm_ca(x)
        x = x + gate_ca * self.cross_attn(h, text_keys, mask=cross_mask)
        h = modulate(self.norm_ff(x), shift_ff, scale_ff)
        x = x + gate_ff * self.ff(h)
        return x


def timestep_embedding(t: Tensor, dim: int, dtype: torch.dtype) -> Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([args.cos(), args.sin()], dim=-1).to(dtype)


@dataclass
class PreparedContext:
    """Device-side view of a TokenizedContext, shared across a batch."""

    visual: Tensor           # (S, token_dim) raw [0,1]
    positions: Tensor        # (S, 3) long
    frame_of_token: Tensor   # (S,) long
    frame_unit: tuple[int, ...]
    indicator_vocab_ids: Tensor  # (F,) long, vocabulary row per frame
    unit_token_ids: tuple[Tensor, ...]
    cross_mask: Tensor       # (S, K) bool
    key_slices: tuple[tuple[int, int], ...]  # per frame, into the key axis
    key_frame: Tensor        # (K,) long, frame index per text-key slot
    key_pos: Tensor          # (K,) long, token position within its instruction
    target_frames: tuple[int, ...]
    frames: tuple            # FrameEntry tuple from the tokenized context
    image_channels: int

    @property
    def key_ids(self) -> Tensor:
        """Concatenated per-frame instruction ids (the unbatched key layout)."""
        if not self.frame_unit:
            return self.key_frame.new_zeros((0,))
        return torch.cat([self.unit_token_ids[u] for u in self.frame_unit], dim=0)

    @property
    def target_slice(self) -> tuple[int, int]:
        if len(self.target_frames) != 1:
            raise ModelError(f"expected exactly one target frame, found {len(self.target_frames)}")
        entry = self.frames[self.target_frames[0]]
        return entry.token_start, entry.token_start + entry.token_count

    @property
    def target_entry(self):
        if len(self.target_frames) != 1:
            raise ModelError(f"expected exactly one target frame, found {len(self.target_frames)}")
        return self.frames[self.target_frames[0]]


class LongContextTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.vocab = Vocabulary(size=config.vocab_size, hash_seed=config.hash_seed)
        codec = TextCodec(
            self.vocab,
            dim=config.width,
            seed=config.text_seed,
            init_std=config.text_std,
            max_len=config.text_len,
        )
        # frozen stand-in for a pretrained text encoder; buffers, not parameters
        self.register_buffer("text_table", torch.from_numpy(codec.table.copy()))
        self.register_buffer("text_pos", torch.from_numpy(codec.position_table.copy()))

        d = config.width
        self.patch_embed = nn.Linear(config.token_dim, d)
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            ContextBlock(d, config.heads, config.ff_mult, config.rope_base)
            for _ in range(config.depth)
        )
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.head_modulation = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, config.token_dim)
        nn.init.zeros_(self.head_modulation.weight)
        nn.init.zeros_(self.head_modulation.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    # -- bookkeeping -------------------------------------------------------

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def validate_finite(self) -> None:
        for name, tensor in self.state_dict().items():
            if tensor.is_floating_point() and not torch.isfinite(tensor).all():
                raise ModelError(f"non-finite values in {name}")

    def indicator_embedding(self, k: int) -> Tensor:
        return self.text_table[self.vocab.indicator_id(k)]

    # -- context preparation ----------------------------------------------

    def prepare(self, tc: TokenizedContext, device: Optional[torch.device] = None) -> PreparedContext:
        device = device or self.text_table.device
        frame_unit = tuple(f.unit_index for f in tc.frames)
        indicator_ids = torch.tensor(
            [self.vocab.indicator_id(f.indicator_id) for f in tc.frames],
            dtype=torch.long,
            device=device,
        )
        unit_ids = tuple(
            torch.from_numpy(np.asarray(ids, dtype=np.int64)).to(device)
            for ids in tc.unit_token_ids
        )
        key_slices = []
        key_frame_of = []
        key_pos_list = []
        cursor = 0
        for g, f in enumerate(tc.frames):
            length = int(unit_ids[f.unit_index].shape[0])
            key_slices.append((cursor, cursor + length))
            key_frame_of.extend([g] * length)
            key_pos_list.extend(range(length))
            cursor += length
        frame_of_token = torch.from_numpy(tc.frame_of_token).to(device)
        key_frame = torch.tensor(key_frame_of, dtype=torch.long, device=device)
        key_pos = torch.tensor(key_pos_list, dtype=torch.long, device=device)
        cross_mask = frame_of_token[:, None] == key_frame[None, :]
        return PreparedContext(
            visual=torch.from_numpy(tc.visual_tokens).to(device),
            positions=torch.from_numpy(tc.positions).to(device),
            frame_of_token=frame_of_token,
            frame_unit=frame_unit,
            indicator_vocab_ids=indicator_ids,
            unit_token_ids=unit_ids,
            cross_mask=cross_mask,
            key_slices=tuple(key_slices),
            key_frame=key_frame,
            key_pos=key_pos,
            target_frames=tuple(i for i, f in enumerate(tc.frames) if f.is_target),
            frames=tc.frames,
            image_channels=tc.image_channels,
        )

    # -- forward ------------------------------------------------------------

    def backbone(
        self,
        visual_emb: Tensor,
        pc: PreparedContext,
        t_emb: Tensor,
        key_ids: Optional[Tensor] = None,
    ) -> Tensor:
        """Run the block stack over already-embedded visual tokens.

        ``key_ids`` optionally overrides the text-key ids with a per-batch
        (B, K) tensor laid out like pc.key_frame (for batches whose
        instructions differ in content but not in length).
        """
        dtype = visual_emb.dtype
        batch = visual_emb.shape[0]
        table = self.text_table.to(dtype)
        positions = self.text_pos.to(dtype)
        indicator_rows = table[pc.indicator_vocab_ids]
        if key_ids is None:
            unit_text = [table[ids] + positions[: len(ids)] for ids in pc.unit_token_ids]
            replicas, x = apply_indicators(
                unit_text, visual_emb, pc.frame_unit, pc.frame_of_token, indicator_rows
            )
            if replicas:
                keys = torch.cat(replicas, dim=0).unsqueeze(0).expand(batch, -1, -1)
            else:
                keys = x.new_zeros((batch, 0, x.shape[-1]))
        else:
            if key_ids.shape != (batch, pc.key_frame.shape[0]):
                raise ModelError(
                    f"key ids must be (B, {pc.key_frame.shape[0]}), got {tuple(key_ids.shape)}"
                )
            x = visual_emb + indicator_rows[pc.frame_of_token]
            keys = table[key_ids] + positions[pc.key_pos] + indicator_rows[pc.key_frame]
        for block in self.blocks:
            x = block(x, keys, pc.cross_mask, pc.positions, t_emb)
        return x

    def forward(
        self,
        pc: PreparedContext,
        noised_target: Tensor,
        t: Tensor,
        visual: Optional[Tensor] = None,
        key_ids: Optional[Tensor] = None,
        return_all: bool = False,
    ) -> Tensor:
        """Predict the noise on the target frame's tokens.

        ``noised_target`` is (B, S_target, token_dim) in model space
        ([-1, 1] scale); conditioning frames enter clean.  ``visual``
        optionally overrides the raw [0,1] condition tokens per batch
        element.  Returns the prediction restricted to the target
        positions unless ``return_all``.
        """
        start, stop = pc.target_slice
        if noised_target.ndim != 3 or noised_target.shape[1] != stop - start:
            raise ModelError(
                f"noised target must be (B, {stop - start}, {self.config.token_dim})"
            )
        dtype = noised_target.dtype
        batch = noised_target.shape[0]
        base = pc.visual if visual is None else visual
        if base.ndim == 2:
            scaled = (base.to(dtype) * 2.0 - 1.0).unsqueeze(0).repeat(batch, 1, 1)
        else:
            scaled = base.to(dtype) * 2.0 - 1.0
        scaled[:, start:stop] = noised_target
        x = self.patch_embed(scaled)
        t_emb = self.t_mlp(timestep_embedding(t, self.config.width, dtype))
        x = self.backbone(x, pc, t_emb, key_ids=key_ids)
        shift, scale = (
            self.head_modulation(torch.nn.functional.silu(t_emb)).unsqueeze(1).chunk(2, dim=-1)
        )
        out = self.head(modulate(self.norm_out(x), shift, scale))
        return out if return_all else out[:, start:stop]


# ---------------------------------------------------------------------------
# Checkpoints: flat binary archive of named float32 tensors plus a JSON text
# manifest carrying the config and its hash.  Reload is bit-exact.
# ---------------------------------------------------------------------------


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json") if path.suffix != ".json" else path


def save_checkpoint(path, model: LongContextTransformer, step: int = 0, extra: Optional[dict] = None) -> None:
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.state_dict()))]
    for name, tensor in model.state_dict().items():
        if tensor.dtype != torch.float32:
            raise ModelError(f"checkpoint tensors must be float32, {name} is {tensor.dtype}")
        data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "param_count": model.param_count(),
        "step": int(step),
        "extra": extra or {},
    }
    manifest_path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2))


def load_checkpoint(path) -> tuple[LongContextTransformer, dict]:
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ModelError("not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    offset = 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        numel = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset).reshape(shape)
        offset += numel * 4
        tensors[name] = torch.from_numpy(arr.copy())
    config = ModelConfig.from_dict(manifest["config"])
    if config.hash() != manifest["config_hash"]:
        raise ModelError("config hash mismatch in manifest")
    model = LongContextTransformer(config)
    model.load_state_dict(tensors, strict=True)
    return model, manifest
