import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from hybridad.errors import DimensionError
from hybridad.estimators import ImageClassifier, SliceExtractor, SliceResizer, SoftVotingClassifier


def stripes(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    base = np.tile((np.arange(size) % 4 < 2).astype(float), (size, 1))
    X = np.stack([(base if i % 2 == 0 else base.T) * 0.8 + 0.1 for i in range(n)])
    X = np.clip(X + 0.05 * rng.standard_normal(X.shape), 0, 1)
    y = np.where(np.arange(n) % 2 == 0, "horizontal", "vertical")
    return X, y


def small(**kw):
    params = dict(widths=(4, 4, 4, 4), dense_units=(8,), epochs=6, batch_size=16, lr=1e-3,
                  augment=False, channels=1)
    params.update(kw)
    return ImageClassifier(**params)


@pytest.fixture(scope="module")
def fitted():
    X, y = stripes(96)
    return small().fit(X, y), small(random_state=1).fit(X, y)


def test_params_and_clone():
    est = small(lr=5e-4)
    params = est.get_params()
    assert params["lr"] == 5e-4 and params["widths"] == (4, 4, 4, 4)
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")
    assert est.set_params(epochs=3).epochs == 3


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 16, 16)))
    with pytest.raises(NotFittedError):
        SoftVotingClassifier([("a", small())]).fit()


def test_fit_predict_separable(fitted):
    clf, _ = fitted
    X, y = stripes(40, seed=3)
    assert list(clf.classes_) == ["horizontal", "vertical"]
    assert clf.score(X, y) >= 0.95
    proba = clf.predict_proba(X)
    assert proba.shape == (40, 2) and np.abs(proba.sum(axis=1) - 1).max() < 1e-9
    assert clf.n_features_in_ == 256 and len(clf.history_) <= 6


def test_channel_axis_accepted(fitted):
    clf, _ = fitted
    X, _ = stripes(4, seed=4)
    assert np.array_equal(clf.predict_proba(X[:, None]), clf.predict_proba(X))


def test_fit_is_deterministic():
    X, y = stripes(32)
    a = small(epochs=2).fit(X, y).predict_proba(X)
    b = small(epochs=2).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_input_validation(fitted):
    clf, _ = fitted
    with pytest.raises(DimensionError):
        clf.predict(np.zeros((2, 8, 8)))
    with pytest.raises(DimensionError):
        small().fit(np.zeros((6, 2, 16, 16)), [0, 1] * 3)
    with pytest.raises(ValueError):
        small().fit(np.zeros((6, 16, 16)), [0] * 6)
    with pytest.raises(ValueError):
        small(validation_fraction=1.0).fit(*stripes(12))


def test_soft_voting(fitted):
    a, b = fitted
    X, y = stripes(20, seed=5)
    vote = SoftVotingClassifier([("b", b), ("a", a)], weights=[3.0, 1.0]).fit()
    want = (a.predict_proba(X) + 3 * b.predict_proba(X)) / 4
    assert np.abs(vote.predict_proba(X) - want).max() < 1e-12
    assert vote.score(X, y) >= 0.95
    same = SoftVotingClassifier([("a", a), ("a2", a)]).fit()
    assert np.array_equal(same.predict_proba(X), a.predict_proba(X))


def test_soft_voting_rejects_mismatched_classes(fitted):
    a, _ = fitted
    X, y = stripes(24)
    other = small(epochs=1).fit(X, np.where(y == "horizontal", "h", "v"))
    with pytest.raises(ValueError, match="classes_"):
        SoftVotingClassifier([("a", a), ("o", other)]).fit()


def test_slice_extractor():
    vols = np.random.default_rng(0).random((2, 6, 5, 12)) * 100
    ext = SliceExtractor(z_lo=3, z_hi=7).fit(vols)
    out = ext.transform(vols)
    assert out.shape == (10, 6, 5)
    assert out.min() == 0.0 and out.max() == 1.0
    assert ext.expand_labels(["a", "b"]).tolist() == ["a"] * 5 + ["b"] * 5
    with pytest.raises(DimensionError):
        SliceExtractor(z_lo=3, z_hi=12).transform(vols)


def test_pipeline_resize_then_classify():
    X, y = stripes(96, size=32)
    pipe = Pipeline([("resize", SliceResizer((16, 16))), ("clf", small())]).fit(X, y)
    Xt, yt = stripes(20, seed=9, size=32)
    assert pipe.score(Xt, yt) >= 0.95
    assert clone(pipe).get_params()["resize__size"] == (16, 16)
