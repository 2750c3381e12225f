import itertools
import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.gradcheck import numeric_gradient, relative_error
from tkan.errors import ContractError, ProtocolError
from tkan.metrics import (
    binary_auc,
    cmc_curve,
    confusion_matrix,
    cosine_similarity,
    cosine_similarity_matrix,
    cross_entropy,
    cross_entropy_grad,
    rank_gallery,
    rank_k_accuracy,
    rank_probes,
    roc_auc,
    subject_sort_key,
)
from tkan.numerics import softmax


class TestCrossEntropy:
    def test_confident_and_uniform(self):
        assert cross_entropy(np.eye(3)[[0, 2]], [0, 2]) == 0.0
        assert cross_entropy(np.full((2, 74), 1.0 / 74), [0, 73]) == pytest.approx(4.3041, abs=1e-4)

    def test_log_floor(self):
        assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(np.full((1, 3), 1 / 3), [3])

    def test_gradient_with_respect_to_logits(self, rng):
        logits = rng.normal(size=(4, 5))
        labels = np.array([0, 4, 2, 2])
        analytic = cross_entropy_grad(softmax(logits), labels)
        numeric = numeric_gradient(lambda: cross_entropy(softmax(logits), labels), logits)
        assert relative_error(analytic, numeric) < 1e-7


def _cosine_oracle(a, b):
    getcontext().prec = 50
    a = [Decimal(float(v)) for v in a]
    b = [Decimal(float(v)) for v in b]
    dot = sum(x * y for x, y in zip(a, b))
    norm = (sum(x * x for x in a) * sum(y * y for y in b)).sqrt()
    return float(dot / norm)


class TestCosine:
    def test_special_cases(self):
        a = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)
        assert cosine_similarity([1.0, 0.0], [0.0, 2.0]) == 0.0
        assert cosine_similarity(np.zeros(3), a) == 0.0

    def test_against_extended_precision(self, rng):
        for _ in range(20):
            a, b = rng.normal(size=16), rng.normal(size=16)
            assert abs(cosine_similarity(a, b) - _cosine_oracle(a, b)) < 1e-12

    def test_matrix_form(self, rng):
        A, B = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        B[1] = 0.0
        matrix = cosine_similarity_matrix(A, B)
        for i, j in itertools.product(range(3), range(4)):
            assert matrix[i, j] == pytest.approx(cosine_similarity(A[i], B[j]), abs=1e-12)

    def test_zero_vectors_are_reported(self, caplog):
        with caplog.at_level("WARNING", logger="tkan.metrics"):
            assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0
            matrix = cosine_similarity_matrix(np.zeros((2, 3)), np.ones((1, 3)))
        assert_array_equal(matrix, np.zeros((2, 1)))
        assert "zero vector" in caplog.records[0].getMessage()
        assert "2 zero vector(s)" in caplog.records[1].getMessage()


class TestRanking:
    def test_subject_sort_key(self):
        assert sorted(["10", 2, "b", "a", 1], key=subject_sort_key) == [1, 2, "10", "a", "b"]

    def test_max_aggregation_and_tie_break(self):
        order, scores = rank_gallery([0.5, 0.9, 0.9, 0.1], [3, 3, 1, 2])
        assert order == [1, 3, 2]
        assert scores == [0.9, 0.9, 0.1]

    def test_allowed_mask(self):
        order, _ = rank_gallery([0.9, 0.2, 0.5], [1, 2, 3], allowed=[False, True, True])
        assert order == [3, 2]

    def test_view_exclusion_against_enumeration(self, rng):
        probe = rng.normal(size=(2, 4))
        gallery = rng.normal(size=(8, 4))
        gallery_subjects = [1, 1, 2, 2, 3, 3, 4, 4]
        gallery_views = ["000", "090"] * 4
        probe_views = ["000", "090"]
        rankings = rank_probes(
            probe, [1, 2], gallery, gallery_subjects, probe_views, gallery_views, exclude_same_view=True
        )
        for p, ranking in enumerate(rankings):
            best = {}
            for g in range(8):
                if gallery_views[g] == probe_views[p]:
                    continue
                score = cosine_similarity(probe[p], gallery[g])
                best[gallery_subjects[g]] = max(best.get(gallery_subjects[g], -2.0), score)
            expected = sorted(best, key=lambda s: (-best[s], s))
            assert ranking.ranked == expected

    def test_rank_k_and_missing_subjects(self, rng):
        rankings = rank_probes(
            np.eye(4)[[0, 1, 2]],
            [1, 2, 9],
            np.eye(4)[[0, 1, 2]],
            [1, 2, 3],
        )
        assert rankings[2].rank is None
        assert rank_k_accuracy(rankings, 1) == 100.0
        assert cmc_curve(rankings, 3) == [100.0, 100.0, 100.0]

    def test_cmc_monotone_and_scale_invariant(self, rng):
        probes, gallery = rng.normal(size=(12, 6)), rng.normal(size=(16, 6))
        probe_subjects = list(rng.integers(0, 8, size=12))
        gallery_subjects = [s for s in range(8) for _ in range(2)]
        base = rank_probes(probes, probe_subjects, gallery, gallery_subjects)
        scaled = rank_probes(3.5 * probes, probe_subjects, 3.5 * gallery, gallery_subjects)
        assert [r.ranked for r in base] == [r.ranked for r in scaled]
        curve = cmc_curve(base, 8)
        assert all(a <= b for a, b in zip(curve, curve[1:]))
        assert curve[-1] == 100.0
        assert rank_k_accuracy(base, 5) >= rank_k_accuracy(base, 1)

    def test_confusion_matrix(self):
        matrix = confusion_matrix([1, 1, 2, 3], [1, 2, 2, 7], [1, 2, 3])
        assert matrix.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 0]]


def _sweep_auc(scores, positives):
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    points = [(0.0, 0.0)]
    for threshold in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= threshold
        tpr = np.sum(predicted & positives) / positives.sum()
        fpr = np.sum(predicted & ~positives) / (~positives).sum()
        points.append((fpr, tpr))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


class TestAuc:
    def test_separated_and_tied(self):
        assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert binary_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_perfect_multiclass(self):
        result = roc_auc(np.eye(3)[[0, 1, 2, 0]], [0, 1, 2, 0])
        assert result.micro == 1.0
        assert result.macro == 1.0

    def test_against_threshold_sweep(self):
        scores = np.array(
            [
                [0.7, 0.2, 0.1],
                [0.3, 0.3, 0.4],
                [0.2, 0.5, 0.3],
                [0.4, 0.4, 0.2],
                [0.1, 0.3, 0.6],
            ]
        )
        labels = np.array([0, 2, 1, 1, 2])
        onehot = np.eye(3, dtype=bool)[labels]
        result = roc_auc(scores, labels)
        assert abs(result.micro - _sweep_auc(scores.ravel(), onehot.ravel())) < 1e-12
        per_class = [_sweep_auc(scores[:, c], onehot[:, c]) for c in range(3)]
        for c in range(3):
            assert abs(result.per_class[c] - per_class[c]) < 1e-12
        assert abs(result.macro - np.mean(per_class)) < 1e-12

    def test_monotone_transform_invariance(self, rng):
        scores = rng.normal(size=(30, 4))
        labels = rng.integers(0, 4, size=30)
        labels[:4] = [0, 1, 2, 3]
        base = roc_auc(scores, labels)
        warped = roc_auc(np.exp(3.0 * scores) + 7.0, labels)
        assert abs(base.micro - warped.micro) < 1e-12
        assert abs(base.macro - warped.macro) < 1e-12

    def test_class_without_positives_is_skipped(self):
        result = roc_auc(np.array([[0.9, 0.1, 0.0], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]]), [0, 1, 0])
        assert result.skipped == [2]
        assert set(result.per_class) == {0, 1}
        assert_allclose(result.macro, 1.0)

    def test_single_class_is_protocol_error(self):
        with pytest.raises(ProtocolError):
            roc_auc(np.full((3, 2), 0.5), [1, 1, 1])
