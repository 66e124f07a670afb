import math

import numpy as np
import pytest

from qpi import autodiff as ad
from qpi.autodiff import Tensor
from qpi.config import base_config, tiny_config
from qpi.errors import InputError, UsageError
from qpi.heads import (ClassifierParams, ConvFilterBank, classify, cnn_condense, conv_feature_map,
                       head_param_shapes, max_over_time, mean_pool, predicted_label)
from qpi.registry import ParamRegistry


def hand_conv(X, w, b):
    """Windowed hand sum: e_i = relu(sum_{r,c} w[r,c] X[i+r,c] + b)."""
    n, d = X.shape
    g = w.shape[0]
    out = []
    for i in range(n - g + 1):
        acc = b
        for r in range(g):
            for c in range(d):
                acc += w[r, c] * X[i + r, c]
        out.append(max(acc, 0.0))
    return np.array(out)


def make_bank(rng, widths, filters, d, std=1.0):
    reg = ParamRegistry()
    for g in widths:
        for j in range(filters):
            reg.add(f"head.cnn.width{g}.filter{j}.weight", Tensor(std * rng.normal(size=(g, d))))
            reg.add(f"head.cnn.width{g}.filter{j}.bias", Tensor(np.array(0.1 * rng.normal())))
    return reg, ConvFilterBank.from_registry(reg, widths, filters)


class TestConvFeatureMap:
    def test_zero_filter(self, rng):
        out = conv_feature_map(Tensor(rng.normal(size=(7, 3))), Tensor(np.zeros((3, 3))), 0.0).data
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_length(self, rng):
        assert conv_feature_map(Tensor(rng.normal(size=(32, 4))), Tensor(rng.normal(size=(3, 4))), 0.0).shape == (30,)

    def test_hand_example(self):
        out = conv_feature_map(Tensor([[1.0], [2.0], [3.0], [4.0]]), Tensor([[1.0], [1.0]]), 0.0).data
        np.testing.assert_array_equal(out, [3.0, 5.0, 7.0])

    def test_too_short(self, rng):
        with pytest.raises(UsageError, match=r"n=2.*g=3"):
            conv_feature_map(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(3, 4))), 0.0)

    def test_against_hand_sum(self, rng):
        for _ in range(50):
            n, d, g = int(rng.integers(5, 15)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
            X, w, b = rng.normal(size=(n, d)), rng.normal(size=(g, d)), float(rng.normal())
            out = conv_feature_map(Tensor(X), Tensor(w), b).data
            np.testing.assert_allclose(out, hand_conv(X, w, b), atol=1e-10)


class TestMaxOverTime:
    def test_examples(self):
        assert max_over_time(Tensor([0.1, -0.5, 0.9])).item() == 0.9
        assert max_over_time(Tensor(np.full(4, 2.5))).item() == 2.5

    def test_sort_oracle(self, rng):
        for _ in range(100):
            e = rng.normal(size=int(rng.integers(1, 40)))
            assert abs(max_over_time(Tensor(e)).item() - sorted(e, reverse=True)[0]) <= 1e-10

    def test_empty(self):
        with pytest.raises(UsageError):
            max_over_time(Tensor(np.zeros(0)))

    def test_one_gradient_entry(self, rng):
        e = Tensor(rng.normal(size=9), requires_grad=True)
        ad.backward(max_over_time(e))
        assert np.count_nonzero(e.grad) == 1
        assert e.grad[np.argmax(e.data)] == 1.0


class TestCnnCondense:
    def test_base_length(self, rng):
        cfg = base_config()
        reg, bank = make_bank(rng, cfg.widths, cfg.filters_per_width, 768, std=0.02)
        out = cnn_condense(Tensor(rng.normal(size=(12, 768))), bank, np.ones(12, bool))
        assert out.shape == (400,) == (cfg.condensed_dim,)

    def test_single_filter(self, rng):
        reg, bank = make_bank(rng, (3,), 1, 4)
        X = rng.normal(size=(8, 4))
        out = cnn_condense(Tensor(X), bank, np.ones(8, bool)).data
        expected = max_over_time(conv_feature_map(Tensor(X), bank.weights[3][0], bank.biases[3][0])).item()
        assert out.shape == (1,)
        assert out[0] == pytest.approx(expected, abs=1e-12)

    def test_order_is_width_then_filter(self, rng):
        reg, bank = make_bank(rng, (2, 3), 2, 4)
        X = rng.normal(size=(6, 4))
        out = cnn_condense(Tensor(X), bank, np.ones(6, bool)).data
        expected = [max(hand_conv(X, bank.weights[g][j].data, bank.biases[g][j].item()))
                    for g in (2, 3) for j in range(2)]
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_padding_invariance(self):
        rng = np.random.default_rng(11)
        reg, bank = make_bank(rng, (2, 3), 3, 5)
        for _ in range(100):
            length = int(rng.integers(3, 10))
            X = rng.normal(size=(length, 5))
            base = cnn_condense(Tensor(X), bank, np.ones(length, bool)).data
            extra = int(rng.integers(1, 12))
            padded = np.concatenate([X, rng.normal(scale=10.0, size=(extra, 5))])
            mask = np.arange(length + extra) < length
            out = cnn_condense(Tensor(padded), bank, mask).data
            assert np.abs(out - base).max() <= 1e-6

    def test_too_short(self, rng):
        reg, bank = make_bank(rng, (2, 3), 1, 4)
        mask = np.array([True, True, False, False])
        with pytest.raises(InputError):
            cnn_condense(Tensor(rng.normal(size=(4, 4))), bank, mask)

    def test_one_gradient_per_feature_map(self, rng):
        reg, bank = make_bank(rng, (2, 3), 2, 4)
        X = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
        mask = np.array([True] * 6 + [False])
        ad.backward(cnn_condense(X, bank, mask).sum())
        # each filter's gradient is the single winning window it saw (if it was active)
        for g in (2, 3):
            for j in range(2):
                w = bank.weights[g][j].data
                feats = hand_conv(X.data[:6], w, bank.biases[g][j].item())
                grad_w = bank.weights[g][j].grad
                if feats.max() > 0:
                    i = int(np.argmax(feats))
                    np.testing.assert_allclose(grad_w, X.data[i:i + g], atol=1e-12)
                else:
                    np.testing.assert_array_equal(grad_w, 0.0)

    def test_batched_matches_single(self, rng):
        reg, bank = make_bank(rng, (2, 3), 2, 4)
        X = rng.normal(size=(3, 7, 4))
        masks = np.arange(7)[None, :] < np.array([[4], [7], [5]])
        batched = cnn_condense(Tensor(X), bank, masks).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], cnn_condense(Tensor(X[i]), bank, masks[i]).data, atol=1e-12)

    def test_gradient_check(self, rng):
        reg, bank = make_bank(rng, (2, 3), 2, 8)
        X = reg.add("x", Tensor(rng.normal(size=(2, 6, 8))))
        mask = np.arange(6)[None, :] < np.array([[6], [4]])
        cls = ClassifierParams(reg.add("classifier.weight", Tensor(rng.normal(size=(4, 2)))),
                               reg.add("classifier.bias", Tensor(rng.normal(size=2))))
        labels = np.array([1, 0])

        def loss():
            probs = classify(cnn_condense(X, bank, mask), cls)
            return -ad.mean(ad.log(probs[np.arange(2), labels]))

        report = ad.finite_diff_check(loss, reg, tol=1e-4)
        assert report.passed, report.worst(3)


class TestMeanPool:
    def test_single_position(self, rng):
        X = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(mean_pool(Tensor(X), np.array([False, True, False, False])).data, X[1])

    def test_identical_rows(self, rng):
        row = rng.normal(size=3)
        X = np.stack([row, row, rng.normal(size=3)])
        np.testing.assert_allclose(mean_pool(Tensor(X), np.array([True, True, False])).data, row, atol=1e-15)

    def test_sum_over_three(self, rng):
        X = rng.normal(size=(6, 5))
        mask = np.array([True, False, True, False, True, False])
        np.testing.assert_allclose(mean_pool(Tensor(X), mask).data, (X[0] + X[2] + X[4]) / 3, atol=1e-12)

    def test_all_masked(self, rng):
        with pytest.raises(UsageError):
            mean_pool(Tensor(rng.normal(size=(3, 2))), np.zeros(3, bool))

    def test_permutation_invariance(self, rng):
        for _ in range(50):
            X = rng.normal(size=(8, 4))
            perm = rng.permutation(8)
            np.testing.assert_allclose(mean_pool(Tensor(X[perm]), np.ones(8, bool)).data,
                                       mean_pool(Tensor(X), np.ones(8, bool)).data, atol=1e-12)

    def test_padding_invariance(self, rng):
        for _ in range(100):
            length, extra = int(rng.integers(1, 8)), int(rng.integers(1, 8))
            X = rng.normal(size=(length + extra, 4))
            mask = np.arange(length + extra) < length
            np.testing.assert_allclose(mean_pool(Tensor(X), mask).data, X[:length].mean(0), atol=1e-6)


class TestClassify:
    def test_zero_params(self, rng):
        params = ClassifierParams(Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(classify(Tensor(rng.normal(size=4)), params).data, [0.5, 0.5])

    def test_bias_only(self, rng):
        params = ClassifierParams(Tensor(np.zeros((4, 2))), Tensor([0.0, math.log(3)]))
        np.testing.assert_allclose(classify(Tensor(rng.normal(size=4)), params).data, [0.25, 0.75], atol=1e-12)

    def test_sums_to_one(self, rng):
        params = ClassifierParams(Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2)))
        probs = classify(Tensor(rng.normal(scale=5.0, size=(30, 4))), params).data
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)

    def test_width_mismatch(self, rng):
        params = ClassifierParams(Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
        with pytest.raises(UsageError):
            classify(Tensor(np.zeros(5)), params)

    def test_tie_goes_to_zero(self):
        assert predicted_label(np.array([0.5, 0.5])) == 0
        np.testing.assert_array_equal(predicted_label(np.array([[0.9, 0.1], [0.2, 0.8]])), [0, 1])


class TestShapes:
    @pytest.mark.parametrize("setup,head,width", [("siamese", "cnn", 8), ("ma", "cnn", 4),
                                                  ("siamese", "mean", 32), ("ma", "mean", 16)])
    def test_classifier_width(self, setup, head, width):
        shapes = head_param_shapes(tiny_config(setup, head))
        assert shapes["classifier.weight"][0] == (width, 2)

    def test_base_filter_count(self):
        shapes = head_param_shapes(base_config())
        assert sum(1 for n in shapes if n.endswith(".bias") and n.startswith("head.")) == 400
