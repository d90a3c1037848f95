import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from asq.data import SynthSpec, synth_dataset
from asq.estimator import LevelQuantizer, QATClassifier, UniformQuantizer
from asq.layers import UnsupportedSchemeError
from oracles import brute_levels, brute_nearest


def test_uniform_quantizer_transform():
    X = np.random.default_rng(0).normal(size=(20, 6))
    q = UniformQuantizer(bits=3).fit(X)
    codes = q.codes(X)
    assert codes.min() >= -4 and codes.max() <= 3
    assert np.array_equal(q.transform(X), codes * q.step_)
    assert q.get_params() == {"bits": 3, "signed": True}
    with pytest.raises(NotFittedError):
        UniformQuantizer().transform(X)


def test_level_quantizer_matches_brute_force():
    X = np.random.default_rng(1).normal(size=(8, 5))
    q = LevelQuantizer(bits=3, scheme="post", full_levels=True).fit(X)
    levels = brute_levels("post", q.alpha_, 3)
    assert np.array_equal(q.fit_transform(X), brute_nearest(X, levels))


def test_clone_round_trips_params():
    clf = QATClassifier(width=4, bits=3, seed=7)
    twin = clone(clf)
    assert twin.get_params() == clf.get_params()
    assert twin is not clf
    twin.set_params(bits=8)
    assert twin.bits == 8 and clf.bits == 3


@pytest.fixture(scope="module")
def fitted():
    train = synth_dataset(SynthSpec(n=128, size=8, noise=0.3), 0)
    test = synth_dataset(SynthSpec(n=64, size=8, noise=0.3), 0, "test")
    labels = np.array(["ant", "bee", "cat", "dog"])
    clf = QATClassifier(width=4, float_epochs=4, qat_epochs=2, batch_size=32, seed=0)
    clf.fit(train.images, labels[train.labels])
    return clf, test, labels


def test_fit_predict(fitted):
    clf, test, labels = fitted
    assert list(clf.classes_) == list(labels)
    pred = clf.predict(test.images)
    assert set(pred) <= set(labels)
    assert np.mean(pred == labels[test.labels]) > 0.5
    proba = clf.predict_proba(test.images)
    assert proba.shape == (64, 4) and np.allclose(proba.sum(1), 1.0)
    assert np.array_equal(labels[proba.argmax(1)], pred)
    assert clf.score(test.images, labels[test.labels]) == np.mean(pred == labels[test.labels])


def test_flat_input_and_int_path(fitted):
    clf, test, labels = fitted
    flat = test.images.reshape(len(test.images), -1)
    with pytest.raises(ValueError):
        clf.predict(flat)
    clf.set_params(image_shape=(3, 8, 8))
    try:
        assert np.array_equal(clf.predict(flat), clf.predict(test.images))
    finally:
        clf.set_params(image_shape=None)
    assert np.mean(clf.predict_int(test.images) == clf.predict(test.images)) >= 0.95


def test_fit_validation():
    X = np.zeros((4, 3, 8, 8))
    with pytest.raises(ValueError):
        QATClassifier().fit(X, [0, 0, 0, 0])
    with pytest.raises(ValueError):
        QATClassifier().fit(X, [0, 1, 0])
    with pytest.raises(ValueError):
        QATClassifier().fit(np.zeros((4, 3, 8, 6)), [0, 1, 0, 1])
    with pytest.raises(NotFittedError):
        QATClassifier().predict(X)


def test_scheme1_has_no_int_export():
    data = synth_dataset(SynthSpec(n=16, size=8), 0)
    clf = QATClassifier(width=4, scheme="scheme1", float_epochs=1, qat_epochs=1).fit(
        data.images, data.labels)
    with pytest.raises(UnsupportedSchemeError):
        clf.export_int()
