"""Patch selector: forward contract, loss, top-k prediction, metrics."""

import math

import numpy as np
import pytest
from helpers import check_grads

from saccadenet import autodiff as ad
from saccadenet.autodiff import Tensor
from saccadenet.data import gen_shapes
from saccadenet.optim import adam_init, adam_step
from saccadenet.rng import Rng
from saccadenet.selector import (
    SelectorConfig,
    init_selector_params,
    predict_topk,
    selection_metrics,
    selector_forward,
    selector_loss,
)

TINY = SelectorConfig(stages=((4, 1), (8, 1)), input_size=16, n_outputs=4, k=2)


def tiny_params(seed=0, dtype=np.float32):
    return init_selector_params(TINY, Rng(seed).child("init"), dtype=dtype)


class TestSelectorForward:
    def test_output_length(self):
        params = tiny_params()
        image = Rng(1).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        logits = selector_forward(image, params, TINY)
        assert logits.shape == (TINY.n_outputs,)

    def test_batch_matches_single(self):
        params = tiny_params()
        images = Rng(2).uniform(0, 1, (4, 3, 16, 16)).astype(np.float32)
        batched = selector_forward(images, params, TINY)
        assert batched.shape == (4, TINY.n_outputs)
        for i in range(4):
            single = selector_forward(images[i], params, TINY)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-6)

    def test_deterministic(self):
        params = tiny_params()
        image = Rng(3).uniform(0, 1, (3, 16, 16)).astype(np.float32)
        a = selector_forward(image, params, TINY)
        b = selector_forward(image, params, TINY)
        assert a.data.tobytes() == b.data.tobytes()

    def test_wrong_input_size_rejected(self):
        with pytest.raises(ValueError, match="input_size"):
            selector_forward(np.zeros((3, 8, 8), np.float32), tiny_params(), TINY)

    def test_untrained_overlap_is_chance_level(self):
        """Against targets independent of the image, overlap ~ k/N."""
        config = SelectorConfig(stages=((8, 1), (16, 1)), input_size=32, n_outputs=16, k=2)
        params = init_selector_params(config, Rng(4).child("init"))
        images = np.stack([r.pixels for r in gen_shapes(300, seed=5, image_size=32)])
        with ad.no_grad():
            logits = selector_forward(images, params, config).data
        rng = Rng(6).gen
        gt = np.zeros((300, 16), dtype=np.float32)
        for row in gt:
            row[rng.choice(16, size=2, replace=False)] = 1.0
        overlap = selection_metrics(logits, gt, k=2).overlap_at_k
        chance = 2 / 16
        assert abs(overlap - chance) < 0.5 * chance


class TestSelectorLoss:
    def test_zero_logits_give_ln2_for_any_k(self):
        for k in (1, 2, 3):
            multi_hot = np.zeros(4, dtype=np.float32)
            multi_hot[:k] = 1.0
            loss = selector_loss(Tensor(np.zeros(4, dtype=np.float32)), multi_hot)
            assert abs(loss.item() - math.log(2)) < 1e-6

    def test_confident_correct_logits_give_zero(self):
        multi_hot = np.array([1.0, 0.0, 1.0, 0.0], dtype=np.float32)
        logits = Tensor(np.where(multi_hot > 0, 50.0, -50.0).astype(np.float32))
        assert selector_loss(logits, multi_hot).item() < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        z = Tensor(rng.standard_normal(6), requires_grad=True)
        y = np.array([1, 0, 0, 1, 0, 1], dtype=np.float64)
        check_grads(lambda: selector_loss(z, y), [z])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            selector_loss(Tensor(np.zeros(4)), np.zeros(5))


class TestEndToEndGradient:
    def test_full_network_finite_differences(self):
        params = tiny_params(dtype=np.float64)
        rng = np.random.default_rng(8)
        # move off the zero-init point: ReLU kinks make finite differences
        # meaningless exactly there
        for p in params.values():
            p.data += 0.05 * rng.standard_normal(p.shape)
        image = rng.random((3, 16, 16))
        y = np.array([1.0, 0.0, 1.0, 0.0])
        tensors = list(params.values())
        check_grads(
            lambda: selector_loss(selector_forward(image, params, TINY), y),
            tensors,
            tol=1e-3,
        )


class TestPredictTopk:
    def test_clear_maxima(self):
        logits = np.array([-1.0, 5.0, -2.0, 4.0, 0.0])
        assert predict_topk(logits, 2) == [1, 3]

    def test_shift_invariance(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal(12)
        base = predict_topk(logits, 4)
        assert predict_topk(logits + 100.0, 4) == base
        assert predict_topk(logits - 3.5, 4) == base

    def test_matches_sigmoid_sort_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            n = int(rng.integers(3, 20))
            k = int(rng.integers(1, n + 1))
            logits = rng.standard_normal(n)
            probs = 1.0 / (1.0 + np.exp(-logits))
            oracle = sorted(np.argsort(-probs, kind="stable")[:k].tolist())
            assert predict_topk(logits, k) == oracle


class TestSelectionMetrics:
    def test_perfect_prediction(self):
        gt = np.array([1, 0, 1, 0, 0, 1], dtype=np.float32)
        logits = np.where(gt > 0, 50.0, -50.0)
        m = selection_metrics(logits, gt, k=3)
        assert m.per_patch_accuracy == 1.0
        assert m.sensitivity == 1.0
        assert m.specificity == 1.0
        assert m.overlap_at_k == 1.0

    def test_complement_prediction(self):
        gt = np.array([1, 0, 1, 0], dtype=np.float32)
        logits = np.where(gt > 0, -50.0, 50.0)
        m = selection_metrics(logits, gt, k=2)
        assert m.sensitivity == 0.0
        assert m.specificity == 0.0
        assert m.overlap_at_k == 0.0

    def test_all_negative_predictor(self):
        n, k = 8, 3
        gt = np.zeros(n, dtype=np.float32)
        gt[:k] = 1.0
        logits = np.full(n, -5.0)
        m = selection_metrics(logits, gt, k=k)
        assert m.per_patch_accuracy == pytest.approx((n - k) / n)
        assert m.specificity == 1.0
        assert m.sensitivity == 0.0

    def test_no_positives_reports_absent_sensitivity(self):
        gt = np.zeros(5, dtype=np.float32)
        m = selection_metrics(np.zeros(5) - 1.0, gt, k=1)
        assert m.sensitivity is None
        assert m.specificity == 1.0

    def test_accuracy_reconstructs_from_sensitivity_specificity(self):
        rng = np.random.default_rng(11)
        n, k = 20, 5
        gt = np.zeros(n, dtype=np.float32)
        gt[rng.choice(n, size=k, replace=False)] = 1.0
        logits = rng.standard_normal(n)
        m = selection_metrics(logits, gt, k=k)
        rebuilt = m.sensitivity * (k / n) + m.specificity * ((n - k) / n)
        assert m.per_patch_accuracy == pytest.approx(rebuilt)

    def test_overlap_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(12)
        logits = rng.standard_normal((6, 10))
        gt = np.zeros((6, 10), dtype=np.float32)
        for row in gt:
            row[rng.choice(10, size=3, replace=False)] = 1.0
        base = selection_metrics(logits, gt, k=3).overlap_at_k
        for transform in (lambda x: 2.0 * x + 5.0, np.exp, lambda x: x**3 + x):
            assert selection_metrics(transform(logits), gt, k=3).overlap_at_k == base


class TestTrainingSanity:
    def test_held_out_loss_decreases_over_three_epochs(self):
        config = SelectorConfig(stages=((8, 1), (16, 1)), input_size=16, n_outputs=4, k=1)
        params = init_selector_params(config, Rng(13).child("init"))
        records = gen_shapes(96, seed=14, image_size=16)
        images = np.stack([r.pixels for r in records])
        # target: the patch holding most of the shape mask
        quads = np.stack([
            np.array([r.mask[:8, :8].sum(), r.mask[:8, 8:].sum(),
                      r.mask[8:, :8].sum(), r.mask[8:, 8:].sum()])
            for r in records
        ])
        gt = np.eye(4, dtype=np.float32)[quads.argmax(axis=1)]
        train_x, train_y = images[:64], gt[:64]
        held_x, held_y = images[64:], gt[64:]
        tensors = list(params.values())
        state = adam_init(tensors, lr=3e-3)
        held_losses = []
        shuffle = Rng(15)
        for _ in range(3):
            order = shuffle.permutation(len(train_x))
            for s in range(0, len(order), 16):
                sel = order[s : s + 16]
                loss = selector_loss(selector_forward(train_x[sel], params, config), train_y[sel])
                for p in tensors:
                    p.zero_grad()
                loss.backward()
                adam_step(tensors, [p.grad for p in tensors], state)
            with ad.no_grad():
                held = selector_loss(selector_forward(held_x, params, config), held_y)
            held_losses.append(held.item())
        assert held_losses[1] < held_losses[0]
        assert held_losses[2] < held_losses[1]
