import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pvigcaps import PViGClassifier, synth_dataset
from pvigcaps.exceptions import ShapeError


@pytest.fixture(scope="module")
def data():
    d = synth_dataset(2, 8, 32, seed=0)
    return d.images, np.array(["benign", "malignant"])[d.labels]


def test_fit_predict_roundtrip(data):
    X, y = data
    clf = PViGClassifier(epochs=2).fit(X, y)
    assert list(clf.classes_) == ["benign", "malignant"]
    assert set(clf.predict(X)) <= set(clf.classes_)
    proba = clf.predict_proba(X[:3])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert clf.decision_function(X).shape == (16, 2)
    assert len(clf.history_) == 2
    assert 0.0 <= clf.score(X, y) <= 1.0


def test_params_and_clone():
    clf = PViGClassifier(epochs=7, head="pooling-mlp")
    assert clf.get_params()["epochs"] == 7
    assert clone(clf).get_params() == clf.get_params()
    assert clf.set_params(lr=1e-3).lr == 1e-3


def test_pooling_head_probabilities(data):
    X, y = data
    clf = PViGClassifier(epochs=1, head="pooling-mlp").fit(X, y)
    np.testing.assert_allclose(clf.predict_proba(X).sum(axis=1), 1.0)


def test_same_seed_same_model(data):
    X, y = data
    a = PViGClassifier(epochs=1, random_state=4).fit(X, y).decision_function(X)
    b = PViGClassifier(epochs=1, random_state=4).fit(X, y).decision_function(X)
    np.testing.assert_array_equal(a, b)


def test_validation(data):
    X, y = data
    with pytest.raises(NotFittedError):
        PViGClassifier().predict(X)
    with pytest.raises(ShapeError):
        PViGClassifier(epochs=1).fit(X.reshape(16, -1), y)
    clf = PViGClassifier(epochs=1).fit(X, y)
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((2, 3, 64, 64)))
    with pytest.raises(ValueError):
        PViGClassifier(epochs=1).fit(X, y[:3])
