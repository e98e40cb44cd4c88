"""Vision transformer: patching, position tables, forward contract."""

import math

import numpy as np
import pytest

from saccadenet import autodiff as ad
from saccadenet.autodiff import Tensor
from saccadenet.optim import adam_init, adam_step
from saccadenet.rng import Rng
from saccadenet.vit import (
    AttentionStack,
    ViTConfig,
    init_vit_params,
    patchify,
    sinusoidal_pe,
    vit_forward,
)


class TestPatchify:
    def test_patch_counts(self):
        assert patchify(np.zeros((3, 224, 224), dtype=np.float32), 16).shape == (196, 768)
        assert patchify(np.zeros((3, 64, 64), dtype=np.float32), 8).shape == (64, 192)

    def test_constant_image_gives_identical_patches(self):
        img = np.full((3, 32, 32), 0.25, dtype=np.float32)
        patches = patchify(img, 8)
        assert (patches == patches[0]).all()

    def test_row_major_grid_placement(self):
        img = np.zeros((3, 32, 32), dtype=np.float32)
        g = 4
        img[:, 8:16, 24:32] = 1.0  # grid cell (1, 3)
        patches = patchify(img, 8)
        hot = np.flatnonzero(patches.sum(axis=1))
        assert hot.tolist() == [1 * g + 3]

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            patchify(np.zeros((3, 30, 30), dtype=np.float32), 8)


class TestSinusoidalPe:
    def test_position_zero(self):
        pe = sinusoidal_pe(5, 8)
        np.testing.assert_allclose(pe[0, 0::2], 0.0)
        np.testing.assert_allclose(pe[0, 1::2], 1.0)

    def test_range(self):
        pe = sinusoidal_pe(50, 32)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_closed_form_entry(self):
        pe = sinusoidal_pe(4, 6)
        assert abs(pe[1, 0] - math.sin(1.0)) < 1e-6

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            sinusoidal_pe(4, 7)


@pytest.fixture(scope="module")
def tiny_setup():
    config = ViTConfig(image_size=32, patch_size=8, dim=32, depth=2, heads=2, num_classes=5)
    params = init_vit_params(config, Rng(0).child("init"))
    return config, params


class TestVitForward:
    def test_attention_stack_shape_and_rows(self, tiny_setup):
        config, params = tiny_setup
        image = Rng(1).uniform(0, 1, (3, 32, 32)).astype(np.float32)
        logits, stack = vit_forward(image, params, config)
        assert logits.shape == (5,)
        assert stack.probs.shape == (config.depth, config.heads, config.seq_len, config.seq_len)
        np.testing.assert_allclose(stack.probs.sum(axis=-1), 1.0, atol=1e-5)
        assert stack.probs.min() >= 0.0

    def test_head_permutation_permutes_logits(self, tiny_setup):
        config, params = tiny_setup
        image = Rng(2).uniform(0, 1, (3, 32, 32)).astype(np.float32)
        base, _ = vit_forward(image, params, config)
        perm = np.array([3, 0, 4, 1, 2])
        permuted = dict(params)
        permuted["head.w"] = Tensor(params["head.w"].data[:, perm])
        permuted["head.b"] = Tensor(params["head.b"].data[perm])
        swapped, _ = vit_forward(image, permuted, config)
        # permuted-weight BLAS calls may take different microkernel paths,
        # so equality holds to float32 roundoff rather than bitwise
        np.testing.assert_allclose(swapped.data, base.data[perm], atol=1e-6)

    def test_inference_is_deterministic(self, tiny_setup):
        config, params = tiny_setup
        image = Rng(3).uniform(0, 1, (3, 32, 32)).astype(np.float32)
        a, _ = vit_forward(image, params, config)
        b, _ = vit_forward(image, params, config)
        assert a.data.tobytes() == b.data.tobytes()

    def test_batch_matches_single(self, tiny_setup):
        config, params = tiny_setup
        images = Rng(4).uniform(0, 1, (3, 3, 32, 32)).astype(np.float32)
        batched, stacks = vit_forward(images, params, config)
        for i in range(3):
            single, stack = vit_forward(images[i], params, config)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-6)
            np.testing.assert_allclose(stacks[i].probs, stack.probs, atol=1e-6)

    def test_learned_and_no_pe_modes(self):
        for mode in ("learned", "none"):
            config = ViTConfig(image_size=16, patch_size=8, dim=16, depth=1, heads=2,
                               num_classes=3, pe_mode=mode)
            params = init_vit_params(config, Rng(5).child("init"))
            image = Rng(6).uniform(0, 1, (3, 16, 16)).astype(np.float32)
            logits, _ = vit_forward(image, params, config)
            assert logits.shape == (3,)
            assert ("pos_embed" in params) == (mode == "learned")

    def test_untrained_accuracy_is_chance_level(self):
        """100-way classification with labels independent of the images."""
        config = ViTConfig(image_size=16, patch_size=8, dim=32, depth=1, heads=2,
                           num_classes=100)
        params = init_vit_params(config, Rng(7).child("init"))
        rng = Rng(8)
        images = rng.uniform(0, 1, (1000, 3, 16, 16)).astype(np.float32)
        labels = np.asarray(rng.integers(0, 100, 1000))
        hits = 0
        with ad.no_grad():
            for s in range(0, 1000, 200):
                logits, _ = vit_forward(images[s : s + 200], params, config)
                hits += int((logits.data.argmax(axis=1) == labels[s : s + 200]).sum())
        accuracy = hits / 1000
        assert abs(accuracy - 0.01) <= 0.01

    def test_wrong_image_size_rejected(self, tiny_setup):
        config, params = tiny_setup
        with pytest.raises(ValueError, match="does not match"):
            vit_forward(np.zeros((3, 16, 16), dtype=np.float32), params, config)


class TestOverfitSanity:
    def test_loss_strictly_decreases_for_twenty_steps(self):
        config = ViTConfig(image_size=16, patch_size=8, dim=32, depth=2, heads=2, num_classes=3)
        params = init_vit_params(config, Rng(10).child("init"))
        rng = Rng(11)
        images = rng.uniform(0, 1, (8, 3, 16, 16)).astype(np.float32)
        labels = np.asarray(rng.integers(0, 3, 8))
        tensors = list(params.values())
        state = adam_init(tensors, lr=3e-4)
        losses = []
        for _ in range(20):
            logits, _ = vit_forward(images, params, config)
            loss = ad.cross_entropy(logits, labels)
            for p in tensors:
                p.zero_grad()
            loss.backward()
            adam_step(tensors, [p.grad for p in tensors], state)
            losses.append(loss.item())
        assert all(b < a for a, b in zip(losses, losses[1:])), losses


class TestAttentionStackValidation:
    def test_rejects_non_stochastic_rows(self):
        bad = np.full((1, 1, 2, 2), 0.75, dtype=np.float32)
        with pytest.raises(ValueError, match="sum to 1"):
            AttentionStack(bad)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match="L, H, S, S"):
            AttentionStack(np.ones((2, 2)))
