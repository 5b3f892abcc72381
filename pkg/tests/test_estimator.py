import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lang2face.au_codec import ParseError, describe_text
from lang2face.estimator import ExpressionSynthesizer
from lang2face.renderer import IdentityParams, render


def data(n=8, size=32):
    X, y = [], []
    for s in range(n):
        p = IdentityParams.from_seed(s)
        au = {"AU26": 1 + s % 5, "AU1": 2}
        X.append((render(p, {}, size), describe_text(au, "female", "P2")))
        y.append(render(p, au, size))
    return X, y


def small(**kw):
    return ExpressionSynthesizer(steps=4, pretrain_steps=2, base_resolution=8, batch_size=4, **kw)


def test_params_round_trip():
    est = small(seed=3)
    assert est.get_params()["seed"] == 3
    assert clone(est).get_params() == est.get_params()
    est.set_params(disable_attention=True)
    assert est._config().disable_attention


def test_fit_predict_score():
    X, y = data()
    est = small().fit(X, y)
    pred = est.predict(X[:3])
    assert pred.shape == (3, 32, 32, 3)
    assert pred.min() >= -1 and pred.max() <= 1
    assert -1 <= est.score(X, y) <= 1
    assert len(est.loss_curve_) == 4


def test_fit_deterministic():
    X, y = data()
    a, b = small().fit(X, y).predict(X), small().fit(X, y).predict(X)
    assert (a == b).all()


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(data(2)[0])


def test_rejects_free_text_and_wrong_size():
    X, y = data(4)
    with pytest.raises(ParseError):
        small().fit([(X[0][0], "make him smile")] + X[1:], y)
    with pytest.raises(ValueError):
        small().fit(*data(4, size=64))
