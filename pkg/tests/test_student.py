"""Student: patch gathering, reduced attention, PE variants, index sources."""

import numpy as np
import pytest
from helpers import check_grads

from saccadenet import autodiff as ad
from saccadenet.autodiff import Tensor
from saccadenet.data import SaccadeRecord
from saccadenet.rng import Rng
from saccadenet.selector import SelectorConfig, init_selector_params, selection_metrics, selector_forward
from saccadenet.student import (
    SanVitConfig,
    gather_patches,
    init_sanvit_params,
    resolve_indices,
    sanvit_forward,
)
from saccadenet.vit import ViTConfig, cast_params, init_vit_params, vit_forward

BASE = ViTConfig(image_size=16, patch_size=4, dim=16, depth=2, heads=2, num_classes=3)


def student_setup(k=4, pe_variant="sin_full_preslice", seed=0):
    config = SanVitConfig(base=BASE, k=k, pe_variant=pe_variant, index_source="ground_truth")
    params = init_sanvit_params(config, Rng(seed).child("init"))
    return config, params


class TestGatherPatches:
    def test_full_identity(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
        out = gather_patches(x, np.arange(4))
        np.testing.assert_array_equal(out.data, x.data)

    def test_single_index_scatter(self):
        x = Tensor(np.random.default_rng(0).random((5, 3)), requires_grad=True)
        out = gather_patches(x, np.array([2]))
        out.sum().backward()
        expected = np.zeros((5, 3), dtype=np.float32)
        expected[2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_gradient_and_untouched_rows(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        idx = np.array([5, 0, 3])
        w = rng.standard_normal((3, 4))
        check_grads(lambda: (gather_patches(x, idx) * Tensor(w)).sum(), [x])
        x.zero_grad()
        (gather_patches(x, idx) * Tensor(w)).sum().backward()
        untouched = [i for i in range(6) if i not in idx]
        assert (x.grad[untouched] == 0.0).all()

    def test_rejects_duplicates_and_out_of_range(self):
        x = Tensor(np.zeros((4, 2)))
        with pytest.raises(ValueError, match="duplicate"):
            gather_patches(x, np.array([1, 1]))
        with pytest.raises(ValueError, match="out of range"):
            gather_patches(x, np.array([0, 7]))

    def test_order_is_honored(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(4, 2))
        out = gather_patches(x, np.array([3, 1]))
        np.testing.assert_array_equal(out.data, x.data[[3, 1]])


class TestSanvitForward:
    def test_attention_is_reduced_to_k_plus_one(self):
        config, params = student_setup(k=4)
        image = Rng(1).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        _, attn = sanvit_forward(image, np.array([0, 3, 7, 12]), params, config,
                                 return_attention=True)
        assert attn.shape == (BASE.depth, BASE.heads, config.k + 1, config.k + 1)
        full = BASE.seq_len
        assert attn.shape[-1] < full

    def test_full_selection_matches_plain_vit_bitwise(self):
        config = SanVitConfig(base=BASE, k=BASE.n_patches,
                              pe_variant="sin_full_preslice", index_source="ground_truth")
        params = init_vit_params(BASE, Rng(2).child("init"))
        identity = np.arange(BASE.n_patches)
        for seed in range(5):
            image = Rng(10 + seed).uniform(0, 1, (3, 16, 16)).astype(np.float32)
            full_logits, _ = vit_forward(image, params, BASE)
            student_logits = sanvit_forward(image, identity, params, config)
            assert student_logits.data.tobytes() == full_logits.data.tobytes()

    def test_no_pe_logits_are_permutation_invariant(self):
        config, params = student_setup(k=5, pe_variant="none")
        image = Rng(3).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        rng = np.random.default_rng(4)
        indices = np.array([1, 4, 8, 11, 14])
        base = sanvit_forward(image, indices, params, config).data
        for _ in range(10):
            shuffled = rng.permutation(indices)
            swapped = sanvit_forward(image, shuffled, params, config).data
            np.testing.assert_allclose(swapped, base, atol=1e-5)

    def test_postslice_pe_binds_slot_order(self):
        config, params = student_setup(k=3, pe_variant="learned_postslice", seed=5)
        assert params["pos_slots"].shape == (4, BASE.dim)
        image = Rng(6).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        a = sanvit_forward(image, np.array([2, 5, 9]), params, config).data
        b = sanvit_forward(image, np.array([9, 5, 2]), params, config).data
        assert np.abs(a - b).max() > 1e-4  # slot table makes order matter

    def test_batched_matches_single(self):
        config, params = student_setup(k=3)
        images = Rng(7).uniform(0, 1, (3, 3, 16, 16)).astype(np.float32)
        idx = np.array([[0, 5, 9], [1, 2, 3], [10, 12, 15]])
        batched = sanvit_forward(images, idx, params, config).data
        for i in range(3):
            single = sanvit_forward(images[i], idx[i], params, config).data
            np.testing.assert_allclose(batched[i], single, atol=1e-6)

    def test_wrong_index_count_rejected(self):
        config, params = student_setup(k=3)
        image = np.zeros((3, 16, 16), np.float32)
        with pytest.raises(ValueError, match="indices"):
            sanvit_forward(image, np.array([0, 1]), params, config)


class TestCompositeGradient:
    def test_gather_then_encode_finite_differences(self):
        base = ViTConfig(image_size=8, patch_size=4, dim=8, depth=1, heads=2, num_classes=3)
        config = SanVitConfig(base=base, k=2, pe_variant="sin_full_preslice",
                              index_source="ground_truth")
        params = cast_params(init_sanvit_params(config, Rng(8).child("init")), np.float64)
        image = np.random.default_rng(9).random((3, 8, 8))
        indices = np.array([1, 3])
        tensors = list(params.values())
        check_grads(
            lambda: ad.cross_entropy(sanvit_forward(image, indices, params, config), 1),
            tensors,
            tol=1e-3,
        )

    def test_unselected_patch_pixels_do_not_reach_gradients(self):
        config, params = student_setup(k=2, seed=10)
        rng = np.random.default_rng(11)
        image = rng.random((3, 16, 16)).astype(np.float32)
        indices = np.array([0, 5])  # grid cells (0,0) and (1,1)

        def grads_for(img):
            for p in params.values():
                p.zero_grad()
            loss = ad.cross_entropy(sanvit_forward(img, indices, params, config), 2)
            loss.backward()
            return {n: p.grad.copy() for n, p in params.items()}

        base = grads_for(image)
        tweaked = image.copy()
        tweaked[:, 12:16, 12:16] = rng.random((3, 4, 4))  # patch 15, unselected
        after = grads_for(tweaked)
        for name in base:
            assert base[name].tobytes() == after[name].tobytes(), name


class TestResolveIndices:
    def test_ground_truth_returns_stored_indices(self):
        config, _ = student_setup(k=3)
        record = SaccadeRecord(image_id=0, label=1, indices=(2, 7, 9), n_patches=16)
        config = SanVitConfig(base=BASE, k=3, pe_variant="none", index_source="ground_truth")
        out = resolve_indices(np.zeros((3, 16, 16), np.float32), config, saccade_record=record)
        assert out == [2, 7, 9]

    def test_san_source_is_deterministic(self):
        sel_cfg = SelectorConfig(stages=((4, 1), (8, 1)), input_size=16, n_outputs=16, k=3)
        sel_params = init_selector_params(sel_cfg, Rng(12).child("init"))
        config = SanVitConfig(base=BASE, k=3, pe_variant="none", index_source="san")
        image = Rng(13).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        a = resolve_indices(image, config, san_params=sel_params, selector_config=sel_cfg)
        b = resolve_indices(image, config, san_params=sel_params, selector_config=sel_cfg)
        assert a == b == sorted(a)

    def test_missing_sources_rejected(self):
        config = SanVitConfig(base=BASE, k=3, pe_variant="none", index_source="san")
        with pytest.raises(ValueError, match="selector"):
            resolve_indices(np.zeros((3, 16, 16), np.float32), config)
        config = SanVitConfig(base=BASE, k=3, pe_variant="none", index_source="ground_truth")
        with pytest.raises(ValueError, match="record"):
            resolve_indices(np.zeros((3, 16, 16), np.float32), config)

    def test_san_overlap_agrees_with_selector_metric(self):
        """resolve_indices('san') against stored records reproduces the
        selector's own overlap_at_k."""
        sel_cfg = SelectorConfig(stages=((4, 1), (8, 1)), input_size=16, n_outputs=16, k=3)
        sel_params = init_selector_params(sel_cfg, Rng(14).child("init"))
        config = SanVitConfig(base=BASE, k=3, pe_variant="none", index_source="san")
        rng = Rng(15)
        images = rng.uniform(0, 1, (12, 3, 16, 16)).astype(np.float32)
        gt = np.zeros((12, 16), dtype=np.float32)
        for row in gt:
            row[rng.gen.choice(16, size=3, replace=False)] = 1.0
        overlaps = []
        for i in range(12):
            picked = resolve_indices(images[i], config, san_params=sel_params,
                                     selector_config=sel_cfg)
            truth = set(np.flatnonzero(gt[i]).tolist())
            overlaps.append(len(set(picked) & truth) / 3)
        with ad.no_grad():
            logits = selector_forward(images, sel_params, sel_cfg).data
        metric = selection_metrics(logits, gt, k=3).overlap_at_k
        assert np.mean(overlaps) == pytest.approx(metric)
