import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entropy_gate.errors import DimensionMismatch, LengthMismatch
from entropy_gate.metrics import class_counts, dice_average, dice_from_counts, dice_per_class


class TestDicePerClass:
    def test_half_overlap(self):
        assert dice_per_class([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5

    def test_identical(self):
        assert dice_per_class([0, 1, 1, 0, 1], [0, 1, 1, 0, 1]) == 1.0

    def test_both_empty(self):
        assert dice_per_class([0, 0, 0], [0, 0, 0]) == 1.0

    def test_empty_prediction(self):
        assert dice_per_class([0, 0, 0], [0, 1, 1]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            dice_per_class([1, 0], [1, 0, 0])

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
    def test_symmetric_and_bounded(self, pairs):
        a = [int(x) for x, _ in pairs]
        b = [int(y) for _, y in pairs]
        d = dice_per_class(a, b)
        assert d == dice_per_class(b, a)
        assert 0.0 <= d <= 1.0
        assert (d == 1.0) == (a == b)


class TestDiceAverage:
    def test_worked_2x2(self):
        rep = dice_average([np.array([[0, 0], [1, 1]])], [np.array([[0, 1], [1, 1]])], 2)
        assert rep.per_class[0] == 2 * 1 / (2 + 1)
        assert rep.per_class[1] == 2 * 2 / (2 + 3)
        assert rep.average == (2 / 3 + 4 / 5) / 2

    def test_identical(self):
        m = [np.array([[0, 1], [2, 1]]), np.array([[1, 1, 0]])]
        assert dice_average(m, m, 3).average == 1.0

    def test_complement(self):
        g = np.array([[0, 1, 1], [0, 0, 1]])
        assert dice_average([1 - g], [g], 2).average == 0.0

    def test_absent_class_counts_as_agreement(self):
        g = np.zeros((2, 2), int)
        rep = dice_average([g], [g], 3)
        assert rep.both_empty_classes == 2
        assert rep.average == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            dice_average([np.zeros((2, 2), int)], [np.zeros((2, 3), int)], 2)
        with pytest.raises(DimensionMismatch):
            dice_average([np.zeros((2, 2), int)], [], 2)

    def test_average_is_mean_of_classes(self):
        rng = np.random.default_rng(5)
        p, g = rng.integers(0, 4, (2, 9, 9))
        rep = dice_average([p], [g], 4)
        assert abs(rep.average - rep.per_class.mean()) <= 1e-12


class TestCorpusFlattening:
    def test_counts_add_exactly(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            shapes = [tuple(rng.integers(1, 12, 2)) for _ in range(int(rng.integers(1, 6)))]
            preds = [rng.integers(0, 3, s) for s in shapes]
            grounds = [rng.integers(0, 3, s) for s in shapes]
            total = np.zeros((3, 3), np.int64)
            for p, g in zip(preds, grounds):
                total += np.array(class_counts(p, g, 3))
            summed = dice_from_counts(*total)
            flat = dice_average(
                [np.concatenate([p.ravel() for p in preds])[None]],
                [np.concatenate([g.ravel() for g in grounds])[None]],
                3,
            )
            per_image = dice_average(preds, grounds, 3)
            assert np.array_equal(per_image.per_class, flat.per_class)
            assert np.array_equal(per_image.per_class, summed.per_class)
            order = rng.permutation(len(preds))
            shuffled = dice_average([preds[i] for i in order], [grounds[i] for i in order], 3)
            assert shuffled.average == per_image.average
