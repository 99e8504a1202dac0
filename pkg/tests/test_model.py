import dataclasses

import numpy as np
import pytest
import torch

from ctxedit.context import tokenize_context
from ctxedit.cu import ConditionUnit, FrameRole, TaskKind, VisualFrame, build_lcu
from ctxedit.model import (
    ContextBlock,
    LongContextTransformer,
    ModelConfig,
    ModelError,
    MultiHeadAttention,
    apply_indicators,
    load_checkpoint,
    rope3d,
    save_checkpoint,
)
from util import random_image, random_lcu, randomize_weights, tiny_config


def numpy_rope_reference(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Direct per-element angle computation, independent of the torch path."""
    d = x.shape[-1]
    d_axis = d // 3
    half = d_axis // 2
    out = np.empty_like(x, dtype=np.float64)
    for axis in range(3):
        for j in range(half):
            freq = base ** (-2.0 * j / d_axis)
            i0 = axis * d_axis + 2 * j
            i1 = i0 + 1
            theta = positions[..., axis] * freq
            c, s = np.cos(theta), np.sin(theta)
            out[..., i0] = x[..., i0] * c - x[..., i1] * s
            out[..., i1] = x[..., i0] * s + x[..., i1] * c
    return out


class TestRope:
    def test_identity_at_origin(self):
        x = torch.randn(5, 12, generator=torch.Generator().manual_seed(0))
        pos = torch.zeros(5, 3, dtype=torch.long)
        assert torch.equal(rope3d(x, pos), x)

    def test_isometry(self):
        gen = torch.Generator().manual_seed(1)
        x = torch.randn(50, 24, generator=gen, dtype=torch.float64)
        pos = torch.randint(0, 100, (50, 3), generator=gen)
        rotated = rope3d(x, pos)
        assert torch.allclose(
            rotated.norm(dim=-1), x.norm(dim=-1), atol=1e-10, rtol=0
        )

    def test_matches_direct_angle_computation(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((8, 18))
        pos = rng.integers(0, 64, size=(8, 3))
        got = rope3d(torch.from_numpy(x), torch.from_numpy(pos)).numpy()
        want = numpy_rope_reference(x, pos)
        assert np.allclose(got, want, atol=1e-12)

    def test_relative_shift_invariance_per_axis(self):
        gen = torch.Generator().manual_seed(3)
        d = 24
        for _ in range(100):
            q = torch.randn(d, generator=gen, dtype=torch.float64)
            k = torch.randn(d, generator=gen, dtype=torch.float64)
            p1 = torch.randint(0, 50, (1, 3), generator=gen)
            p2 = torch.randint(0, 50, (1, 3), generator=gen)
            delta = torch.randint(0, 50, (1, 3), generator=gen)
            before = torch.dot(rope3d(q[None], p1)[0], rope3d(k[None], p2)[0])
            after = torch.dot(rope3d(q[None], p1 + delta)[0], rope3d(k[None], p2 + delta)[0])
            assert abs(before - after) < 1e-9

    def test_bad_width_rejected(self):
        with pytest.raises(ModelError):
            rope3d(torch.zeros(2, 10), torch.zeros(2, 3, dtype=torch.long))


class TestApplyIndicators:
    def test_zero_rows_are_identity(self):
        gen = torch.Generator().manual_seed(4)
        visual = torch.randn(6, 8, generator=gen)
        text = [torch.randn(3, 8, generator=gen)]
        frame_of = torch.tensor([0, 0, 0, 1, 1, 1])
        rows = torch.zeros(2, 8)
        replicas, shifted = apply_indicators(text, visual, (0, 0), frame_of, rows)
        assert torch.equal(shifted, visual)
        assert all(torch.equal(r, text[0]) for r in replicas)

    def test_swap_order_with_swapped_assignment_permutes(self):
        gen = torch.Generator().manual_seed(5)
        a, b = torch.randn(2, 8, generator=gen), torch.randn(2, 8, generator=gen)
        rows = torch.randn(2, 8, generator=gen)
        text = [torch.zeros(1, 8)]
        frame_of = torch.tensor([0, 0, 1, 1])
        _, fwd = apply_indicators(
            text, torch.cat([a, b]), (0, 0), frame_of, rows
        )
        _, swapped = apply_indicators(
            text, torch.cat([b, a]), (0, 0), frame_of, rows[[1, 0]]
        )
        assert torch.equal(swapped, torch.cat([fwd[2:], fwd[:2]]))

    def test_single_frame_uniform_shift(self):
        gen = torch.Generator().manual_seed(6)
        visual = torch.randn(4, 8, generator=gen)
        rows = torch.randn(1, 8, generator=gen)
        _, shifted = apply_indicators(
            [torch.zeros(1, 8)], visual, (0,), torch.zeros(4, dtype=torch.long), rows
        )
        assert torch.allclose(shifted - visual, rows[0].expand(4, 8))


def naive_self_attention(module: MultiHeadAttention, x: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Brute-force per-query attention in float64 numpy."""
    heads, dh = module.heads, module.head_dim
    w = {name: getattr(module, name).weight.detach().numpy().astype(np.float64)
         for name in ("to_q", "to_k", "to_v", "proj")}
    b = {name: getattr(module, name).bias.detach().numpy().astype(np.float64)
         for name in ("to_q", "to_k", "to_v", "proj")}
    q = x @ w["to_q"].T + b["to_q"]
    k = x @ w["to_k"].T + b["to_k"]
    v = x @ w["to_v"].T + b["to_v"]
    s = x.shape[0]
    out = np.empty((s, heads * dh))
    for h in range(heads):
        qh = numpy_rope_reference(q[:, h * dh : (h + 1) * dh], pos)
        kh = numpy_rope_reference(k[:, h * dh : (h + 1) * dh], pos)
        vh = v[:, h * dh : (h + 1) * dh]
        for i in range(s):
            logits = qh[i] @ kh.T / np.sqrt(dh)
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            out[i, h * dh : (h + 1) * dh] = weights @ vh
    return out @ w["proj"].T + b["proj"]


class TestSelfAttention:
    def _module(self, seed, dim=24, heads=2):
        gen = torch.Generator().manual_seed(seed)
        module = MultiHeadAttention(dim, heads)
        with torch.no_grad():
            for p in module.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.2)
        return module

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(7)
        module = self._module(7)
        for s in (1, 5, 32):
            x = rng.standard_normal((s, 24)).astype(np.float32)
            pos = rng.integers(0, 16, size=(s, 3))
            got = module(
                torch.from_numpy(x)[None],
                torch.from_numpy(x)[None],
                q_pos=torch.from_numpy(pos),
                k_pos=torch.from_numpy(pos),
            )[0].detach().numpy()
            want = naive_self_attention(module, x.astype(np.float64), pos)
            assert np.abs(got - want).max() < 1e-5

    def test_all_equal_tokens_zero_positions(self):
        module = self._module(8)
        token = torch.randn(1, 24, generator=torch.Generator().manual_seed(9))
        x = token.repeat(6, 1)[None]
        pos = torch.zeros(6, 3, dtype=torch.long)
        out = module(x, x, q_pos=pos, k_pos=pos)
        # softmax is uniform over identical keys, so each output equals the
        # projected value of that single token
        v = module.to_v(token)
        want = module.proj(v)
        assert torch.allclose(out[0], want.expand(6, -1), atol=1e-5)

    def test_single_token_attends_to_itself(self):
        module = self._module(10)
        x = torch.randn(1, 1, 24, generator=torch.Generator().manual_seed(11))
        out = module(x, x)
        want = module.proj(module.to_v(x[0]))
        assert torch.allclose(out[0], want, atol=1e-6)

    def test_no_structural_zeros_across_frames(self):
        # every token can influence every other: full-sequence Jacobian blocks
        # between different frames are nonzero
        module = self._module(12, dim=12, heads=2)
        pos = torch.tensor([[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 0, 1]])

        def fn(x):
            return module(x[None], x[None], q_pos=pos, k_pos=pos)[0]

        x = torch.randn(4, 12, generator=torch.Generator().manual_seed(13))
        jac = torch.autograd.functional.jacobian(fn, x)
        for i in range(4):
            for j in range(4):
                block = jac[i, :, j, :]
                assert block.abs().max() > 0, f"token {j} cannot reach token {i}"


def build_test_model(rng, n_units=2, frames_per_unit=2, size=8, seed=20, **cfg_kw):
    config = tiny_config(**cfg_kw)
    model = LongContextTransformer(config)
    randomize_weights(model, seed)
    lcu = random_lcu(rng, n_units=n_units, frames_per_unit=frames_per_unit, size=size)
    tc = tokenize_context(lcu, model.vocab, config.codec)
    pc = model.prepare(tc)
    return model, pc


class TestCrossAttention:
    def _cross_inputs(self, model, pc, seed):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(1, pc.visual.shape[0], model.config.width, generator=gen)
        table = model.text_table
        rows = table[pc.indicator_vocab_ids]
        unit_text = [table[ids] for ids in pc.unit_token_ids]
        replicas, _ = apply_indicators(
            unit_text, x, pc.frame_unit, pc.frame_of_token, rows
        )
        keys = torch.cat(replicas, dim=0)[None]
        return x, keys, replicas

    def test_fused_mask_equals_per_frame_loop(self):
        rng = np.random.default_rng(14)
        for trial in range(6):
            n_units = int(rng.integers(1, 4))
            frames = int(rng.integers(1, 3))
            model, pc = build_test_model(
                rng, n_units=n_units, frames_per_unit=frames, seed=15 + trial
            )
            attn = model.blocks[0].cross_attn
            x, keys, replicas = self._cross_inputs(model, pc, 30 + trial)
            fused = attn(x, keys, mask=pc.cross_mask)
            for g, (start, stop) in enumerate(pc.key_slices):
                entry = pc.frames[g]
                span = slice(entry.token_start, entry.token_start + entry.token_count)
                loop = attn(x[:, span], replicas[g][None])
                assert (fused[:, span] - loop).abs().max() < 1e-5

    def test_single_frame_mask_is_plain_cross_attention(self):
        rng = np.random.default_rng(16)
        model, pc = build_test_model(rng, n_units=1, frames_per_unit=0, seed=17)
        attn = model.blocks[0].cross_attn
        x, keys, _ = self._cross_inputs(model, pc, 18)
        fused = attn(x, keys, mask=pc.cross_mask)
        plain = attn(x, keys)
        assert torch.allclose(fused, plain, atol=0)

    def test_mask_isolation_is_bitwise(self):
        rng = np.random.default_rng(19)
        model, pc = build_test_model(rng, n_units=2, frames_per_unit=1, seed=21)
        attn = model.blocks[0].cross_attn
        x, keys, _ = self._cross_inputs(model, pc, 22)
        base = attn(x, keys, mask=pc.cross_mask)
        gen = torch.Generator().manual_seed(23)
        for trial in range(20):
            victim = int(rng.integers(len(pc.key_slices)))
            start, stop = pc.key_slices[victim]
            perturbed = keys.clone()
            perturbed[:, start:stop] += torch.randn(
                perturbed[:, start:stop].shape, generator=gen
            )
            out = attn(x, perturbed, mask=pc.cross_mask)
            for g, entry in enumerate(pc.frames):
                if g == victim:
                    continue
                span = slice(entry.token_start, entry.token_start + entry.token_count)
                assert (out[:, span] - base[:, span]).abs().max().item() == 0.0


class TestBlocks:
    def test_identity_at_init(self):
        config = tiny_config(depth=3)
        model = LongContextTransformer(config)  # fresh: gates are zero
        rng = np.random.default_rng(24)
        lcu = random_lcu(rng, n_units=1, frames_per_unit=1)
        tc = tokenize_context(lcu, model.vocab, config.codec)
        pc = model.prepare(tc)
        gen = torch.Generator().manual_seed(25)
        x = torch.randn(1, pc.visual.shape[0], config.width, generator=gen)
        keys = torch.randn(1, pc.cross_mask.shape[1], config.width, generator=gen)
        t_emb = torch.randn(1, config.width, generator=gen)
        out = x
        for block in model.blocks:
            out = block(out, keys, pc.cross_mask, pc.positions, t_emb)
        assert out.detach().numpy().tobytes() == x.numpy().tobytes()

    def test_finite_fuzz(self):
        config = tiny_config()
        model = LongContextTransformer(config)
        randomize_weights(model, 26)
        block = model.blocks[0]
        gen = torch.Generator().manual_seed(27)
        pos = torch.zeros(4, 3, dtype=torch.long)
        mask = torch.ones(4, 2, dtype=torch.bool)
        for trial in range(200):
            scale = 10.0 ** float(torch.randint(-2, 4, (1,), generator=gen))
            x = torch.randn(1, 4, config.width, generator=gen) * scale
            keys = torch.randn(1, 2, config.width, generator=gen) * scale
            t_emb = torch.randn(1, config.width, generator=gen)
            out = block(x, keys, mask, pos, t_emb)
            assert torch.isfinite(out).all()

    def test_stack_preserves_shape(self):
        config = tiny_config(depth=4)
        model = LongContextTransformer(config)
        randomize_weights(model, 28)
        gen = torch.Generator().manual_seed(29)
        x = torch.randn(2, 6, config.width, generator=gen)
        keys = torch.randn(2, 3, config.width, generator=gen)
        mask = torch.ones(6, 3, dtype=torch.bool)
        pos = torch.zeros(6, 3, dtype=torch.long)
        t_emb = torch.randn(2, config.width, generator=gen)
        for block in model.blocks:
            x_next = block(x, keys, mask, pos, t_emb)
            assert x_next.shape == x.shape
            x = x_next


class TestForward:
    def test_output_covers_target_tokens_only(self):
        rng = np.random.default_rng(30)
        model, pc = build_test_model(rng, seed=31)
        entry = pc.target_entry
        gen = torch.Generator().manual_seed(32)
        x_t = torch.randn(2, entry.token_count, model.config.token_dim, generator=gen)
        out = model(pc, x_t, torch.tensor([3, 7]))
        assert out.shape == (2, entry.token_count, model.config.token_dim)

    def test_zero_or_two_targets_rejected(self):
        rng = np.random.default_rng(33)
        config = tiny_config()
        model = LongContextTransformer(config)
        lcu = random_lcu(rng, with_target=False)
        pc = model.prepare(tokenize_context(lcu, model.vocab, config.codec))
        with pytest.raises(ModelError):
            model(pc, torch.zeros(1, 4, config.token_dim), torch.tensor([0]))

        frames = tuple(
            VisualFrame.build(
                np.zeros((8, 8, 3), dtype=np.float32), role=FrameRole.TARGET_PLACEHOLDER
            )
            for _ in range(2)
        )
        unit = ConditionUnit(instruction="two", frames=frames, kind=TaskKind.FREE_FORM)
        pc2 = model.prepare(tokenize_context(build_lcu([], unit, 0), model.vocab, config.codec))
        with pytest.raises(ModelError):
            model(pc2, torch.zeros(1, 4, config.token_dim), torch.tensor([0]))

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(34)
        model, pc = build_test_model(rng, seed=35)
        gen = torch.Generator().manual_seed(36)
        x_t = torch.randn(1, pc.target_entry.token_count, model.config.token_dim, generator=gen)
        t = torch.tensor([5])
        a = model(pc, x_t, t)
        b = model(pc, x_t, t)
        assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()

    def test_condition_frame_permutation_equivariance(self):
        rng = np.random.default_rng(37)
        model, pc = build_test_model(rng, n_units=1, frames_per_unit=3, seed=38)
        # permute the three equal-sized condition frames, moving tokens,
        # positions, frame labels, and mask rows together; target stays last
        counts = [f.token_count for f in pc.frames[:-1]]
        assert len(set(counts)) == 1
        block = counts[0]
        perm_frames = [2, 0, 1]
        row_perm = torch.cat(
            [torch.arange(g * block, (g + 1) * block) for g in perm_frames]
            + [torch.arange(3 * block, pc.visual.shape[0])]
        )
        pc_perm = dataclasses.replace(
            pc,
            visual=pc.visual[row_perm],
            positions=pc.positions[row_perm],
            frame_of_token=pc.frame_of_token[row_perm],
            cross_mask=pc.cross_mask[row_perm],
        )
        gen = torch.Generator().manual_seed(39)
        x_t = torch.randn(1, pc.target_entry.token_count, model.config.token_dim, generator=gen)
        t = torch.tensor([4])
        out = model(pc, x_t, t)
        out_perm = model(pc_perm, x_t, t)
        assert (out - out_perm).abs().max() < 1e-4

    def test_objective_mask_leaves_condition_predictions_out(self):
        rng = np.random.default_rng(40)
        model, pc = build_test_model(rng, seed=41)
        entry = pc.target_entry
        gen = torch.Generator().manual_seed(42)
        x_t = torch.randn(1, entry.token_count, model.config.token_dim, generator=gen)
        noise = torch.randn_like(x_t)
        full = model(pc, x_t, torch.tensor([2]), return_all=True)
        start, stop = pc.target_slice
        loss = ((full[:, start:stop] - noise) ** 2).mean()
        grad = torch.autograd.grad(loss, full, retain_graph=False, allow_unused=False)[0]
        cond = torch.cat([grad[:, :start], grad[:, stop:]], dim=1)
        assert torch.all(cond == 0)
        assert grad[:, start:stop].abs().max() > 0


class TestCheckpoint:
    def test_bit_exact_reload(self, tmp_path):
        config = tiny_config(depth=2)
        model = LongContextTransformer(config)
        randomize_weights(model, 43)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, step=17)
        back, manifest = load_checkpoint(path)
        assert manifest["step"] == 17
        assert manifest["config_hash"] == config.hash()
        for (name, a), (name2, b) in zip(
            model.state_dict().items(), back.state_dict().items()
        ):
            assert name == name2
            assert a.numpy().tobytes() == b.numpy().tobytes()

    def test_corrupt_magic_rejected(self, tmp_path):
        config = tiny_config()
        model = LongContextTransformer(config)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(ModelError):
            load_checkpoint(path)

    def test_param_count_excludes_frozen_buffers(self):
        config = tiny_config()
        model = LongContextTransformer(config)
        counted = model.param_count()
        frozen = model.text_table.numel() + model.text_pos.numel()
        total = sum(t.numel() for t in model.state_dict().values())
        assert counted == total - frozen

    def test_validate_finite_catches_nan(self):
        model = LongContextTransformer(tiny_config())
        with torch.no_grad():
            model.patch_embed.weight[0, 0] = float("nan")
        with pytest.raises(ModelError):
            model.validate_finite()


class TestConfig:
    def test_width_head_constraints(self):
        with pytest.raises(ModelError):
            ModelConfig(width=25, heads=2)
        with pytest.raises(ModelError):
            ModelConfig(width=32, heads=2)  # head width 16 not divisible by 6

    def test_config_round_trip(self):
        config = tiny_config(depth=5)
        again = ModelConfig.from_dict(config.to_dict())
        assert again == config
        assert again.hash() == config.hash()
