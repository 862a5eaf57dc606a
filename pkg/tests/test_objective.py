"""Losses and metrics: cross-entropy, LongLoss, accuracy, mAP."""

import math

import numpy as np
import pytest

from gestrec import ops
from gestrec.autodiff import backward, grad_check, parameter
from gestrec.objective import (Batch, LongLossParams, accuracy, batch_cross_entropy,
                               cross_entropy, long_loss, mean_average_precision,
                               mean_cross_entropy)
from gestrec.rng import Rng


class TestCrossEntropy:
    def test_perfect_prediction_limit(self):
        logits = np.array([30.0, 0.0, 0.0])
        assert float(cross_entropy(logits, 0).value) == pytest.approx(0.0, abs=1e-10)

    def test_uniform_logits(self):
        for m in (2, 10):
            val = float(cross_entropy(np.zeros(m), 1).value)
            assert val == pytest.approx(math.log(m), rel=1e-7)

    def test_direct_evaluation(self):
        val = float(cross_entropy(np.array([2.0, 0.0], np.float64), 0).value)
        assert val == pytest.approx(math.log(1 + math.exp(-2.0)), rel=1e-12)

    def test_large_logits_stable(self):
        val = float(cross_entropy(np.array([1000.0, 0.0], np.float64), 0).value)
        assert val == pytest.approx(0.0, abs=1e-12)


class TestLongLoss:
    def _batch(self, ce_target, d, m=4):
        # craft logits whose CE against label 0 equals ce_target exactly
        p0 = math.exp(-ce_target)
        rest = (1 - p0) / (m - 1)
        logits = np.log(np.array([p0] + [rest] * (m - 1), np.float64))
        return Batch(logits[None, :], np.array([0]), np.array([d]))

    def test_alpha_zero_equals_mean_ce(self):
        r = Rng(0)
        logits = r.normal((6, 10), dtype=np.float64)
        labels = np.arange(6) % 10
        distances = np.linspace(4, 20, 6)
        ll = long_loss(Batch(logits, labels, distances), LongLossParams(alpha=0.0))
        ce = mean_cross_entropy(logits, labels)
        assert float(ll.value) == float(ce.value)  # bit-for-bit

    def test_weight_zero_at_b0(self):
        b = self._batch(0.5, 4.0)
        val = float(long_loss(b, LongLossParams(alpha=1.0)).value)
        assert val == pytest.approx(0.5, abs=1e-12)

    def test_midrange_weight(self):
        b = self._batch(0.5, 12.0)
        val = float(long_loss(b, LongLossParams(alpha=1.0)).value)
        assert val == pytest.approx(0.75, abs=1e-12)

    def test_two_sample_average(self):
        p0 = math.exp(-0.2)
        rest = (1 - p0) / 3
        logits = np.log(np.array([[p0] + [rest] * 3] * 2, np.float64))
        b = Batch(logits, np.array([0, 0]), np.array([4.0, 20.0]))
        val = float(long_loss(b, LongLossParams(alpha=1.0)).value)
        assert val == pytest.approx(0.3, abs=1e-12)

    def test_clamp_behavior(self):
        b_near = self._batch(1.0, 1.0)
        clamped = float(long_loss(b_near, LongLossParams(alpha=1.0)).value)
        assert clamped == pytest.approx(1.0, abs=1e-12)  # d clamped up to b0
        raw = float(long_loss(b_near, LongLossParams(alpha=1.0,
                                                     clamp_distance=False)).value)
        assert raw == pytest.approx(1.0 * (1 + (1 - 4) / 16), abs=1e-12)

    def test_monotone_in_distance(self):
        r = Rng(1)
        logits = r.normal((1, 5), dtype=np.float64)
        vals = [float(long_loss(Batch(logits, np.array([2]), np.array([d])),
                                LongLossParams(alpha=0.7)).value)
                for d in np.linspace(4, 20, 9)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_nonnegative(self):
        r = Rng(2)
        for seed in range(5):
            logits = r.normal((4, 6), dtype=np.float64)
            b = Batch(logits, np.arange(4) % 6, np.linspace(4, 20, 4))
            assert float(long_loss(b, LongLossParams(alpha=0.5)).value) >= 0.0

    def test_gradient_is_weighted_ce_gradient(self):
        r = Rng(3)
        logits = r.normal((3, 5), dtype=np.float64)
        labels = np.array([0, 2, 4])
        distances = np.array([4.0, 12.0, 20.0])
        p = LongLossParams(alpha=1.0)

        leaf = parameter(logits, dtype=np.float64)
        backward(long_loss(Batch(leaf, labels, distances), p))
        ll_grad = leaf.grad.copy()

        leaf2 = parameter(logits, dtype=np.float64)
        backward(ops.mean(batch_cross_entropy(leaf2, labels)))
        ce_grad = leaf2.grad.copy()

        weights = p.weights(distances)
        assert np.allclose(ll_grad, ce_grad * weights[:, None], atol=1e-12)

        rep = grad_check(lambda l: long_loss(Batch(l[0], labels, distances), p),
                         [logits], tol=1e-6)
        assert rep.passed

    def test_param_validation(self):
        with pytest.raises(ValueError):
            LongLossParams(b0=10.0, b1=10.0)
        with pytest.raises(ValueError):
            LongLossParams(alpha=-0.1)

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((2, 3)), np.array([0, 3]), np.array([5.0, 5.0]))
        with pytest.raises(ValueError):
            Batch(np.zeros((2, 3)), np.array([0, 1]), np.array([5.0, -1.0]))
        with pytest.raises(ValueError):
            Batch(np.zeros((2, 3)), np.array([0]), np.array([5.0, 5.0]))


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_all_wrong(self):
        assert accuracy([0, 0, 0], [1, 2, 3]) == 0.0

    def test_three_of_four(self):
        assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([1, 2], [1, 2, 3])


def _brute_force_map(scores, labels):
    """Direct enumeration oracle: precision at each positive rank."""
    N, m = scores.shape
    aps = []
    for c in range(m):
        pos = [i for i in range(N) if labels[i] == c]
        if not pos:
            continue
        order = sorted(range(N), key=lambda i: (-scores[i, c], i))
        precs = []
        hits = 0
        for rank, idx in enumerate(order, start=1):
            if labels[idx] == c:
                hits += 1
                precs.append(hits / rank)
        aps.append(sum(precs) / len(precs))
    return sum(aps) / len(aps)


class TestMeanAveragePrecision:
    def test_perfect_ranking(self):
        scores = np.eye(4)[[0, 1, 2, 3]] * 5.0
        assert mean_average_precision(scores, [0, 1, 2, 3]) == 1.0

    def test_single_positive_sample(self):
        assert mean_average_precision(np.array([[0.3]]), [0]) == 1.0

    def test_matches_brute_force(self):
        r = Rng(0)
        for seed in range(50):
            N = 2 + seed % 4          # 2..5 samples
            m = 2 + seed % 2          # 2..3 classes
            scores = np.round(r.normal((N, m), dtype=np.float64), 2)  # force ties
            labels = np.array([r.integers(0, m) for _ in range(N)])
            if len(set(labels.tolist())) == 0:
                continue
            got = mean_average_precision(scores, labels)
            want = _brute_force_map(scores, labels)
            assert got == pytest.approx(want, abs=1e-12), seed

    def test_monotone_transform_invariance(self):
        r = Rng(5)
        scores = r.normal((8, 3), dtype=np.float64)
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
        base = mean_average_precision(scores, labels)
        transformed = scores.copy()
        transformed[:, 0] = np.exp(scores[:, 0])          # strictly increasing
        transformed[:, 1] = 3 * scores[:, 1] + 7
        transformed[:, 2] = np.tanh(scores[:, 2])
        assert mean_average_precision(transformed, labels) == pytest.approx(base, abs=1e-12)

    def test_range(self):
        r = Rng(6)
        for seed in range(10):
            scores = r.normal((6, 4), dtype=np.float64)
            labels = np.array([r.integers(0, 4) for _ in range(6)])
            v = mean_average_precision(scores, labels)
            assert 0.0 <= v <= 1.0

    def test_no_positives_rejected(self):
        with pytest.raises(ValueError):
            mean_average_precision(np.zeros((0, 3)), [])
