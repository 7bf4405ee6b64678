import numpy as np
import pytest
from test_train import toy_set

from eegssfi.isd import IsdMatrix, diagonal_gap, isd_matrix, model_averages, subject_averages
from eegssfi.nn.model import build_model
from eegssfi.ssfi import fit_normalizer


class _Const:
    """Stands in for a model: always predicts one class."""

    def __init__(self, label):
        self.label = label
        self.normalizer = None
        self.majority = 0

    def predict(self, x):
        return np.full(len(x), self.label)


def _data(subject, labels):
    x = np.zeros((len(labels), 4, 4, 6), np.float32)
    from eegssfi.train import SegmentSet

    return SegmentSet(x, labels, np.ones(len(labels), int), subject)


def test_matrix_entries_and_asymmetry():
    models = {1: _Const(0), 2: _Const(1)}
    data = {1: _data(1, [0, 0, 0, 1]), 2: _data(2, [1, 1, 2, 2])}
    m = isd_matrix(models, data)
    np.testing.assert_array_equal(m.accuracy, [[0.75, 0.0], [0.25, 0.5]])
    assert not np.allclose(m.accuracy, m.accuracy.T)
    assert m.subjects == [1, 2]


def test_averages_exclude_diagonal():
    acc = np.array([[0.9, 0.2, 0.4], [0.3, 0.8, 0.5], [0.1, 0.6, 0.7]])
    np.testing.assert_allclose(subject_averages(acc), [0.2, 0.4, 0.45])
    np.testing.assert_allclose(model_averages(acc), [0.3, 0.4, 0.35])
    assert diagonal_gap(IsdMatrix([1, 2, 3], acc)) == pytest.approx(0.8 - 2.1 / 6)
    assert np.isnan(subject_averages(np.array([[1.0]]))).all()


def test_missing_subject_named():
    with pytest.raises(KeyError, match="3"):
        isd_matrix({1: _Const(0)}, {1: _data(1, [0]), 3: _data(3, [0])})
    with pytest.raises(KeyError, match="2"):
        isd_matrix({1: _Const(0), 2: _Const(0)}, {1: _data(1, [0])})


def test_csv_round_trip():
    m = IsdMatrix([1, 4], np.array([[0.123456789, 0.5], [1 / 3, 1.0]]))
    back = IsdMatrix.from_csv(m.to_csv())
    assert back.subjects == [1, 4]
    np.testing.assert_array_equal(back.accuracy, m.accuracy)


def test_each_model_uses_its_own_normalizer():
    d1, d2 = toy_set(1, tasks=range(1, 7), seed=0), toy_set(1, tasks=range(1, 7), seed=1)
    m1 = build_model(16, seed=0)
    m2 = build_model(16, seed=0)
    m1.normalizer = fit_normalizer(d1.x)
    m2.normalizer = fit_normalizer(d2.x * 10 + 5)
    m = isd_matrix({1: m1, 2: m2}, {1: d1, 2: d2})
    assert m.accuracy.shape == (2, 2)
    assert np.all((m.accuracy >= 0) & (m.accuracy <= 1))
