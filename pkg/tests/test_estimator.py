import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dualrec import DualTranslator
from dualrec.synth import build_ground_truth, cipher_task, sample_corpora

FAST = dict(batch_size=8, checkpoint_every=25, max_updates=300, lr_pretrain=0.05)


@pytest.fixture(scope="module")
def data():
    gt = build_ground_truth(cipher_task(n_symbols=3, max_len=2, noise_eps=0.0, seed=2))
    return gt, sample_corpora(gt, 40, 20, 20, 0, 0, seed=0)


def test_params_and_clone():
    est = DualTranslator(strategy="BT", max_len=3, train_params={"batch_size": 4})
    params = est.get_params()
    assert params["strategy"] == "BT" and params["max_len"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(strategy="IBT-batch")
    assert est.strategy == "IBT-batch"


def test_not_fitted():
    est = DualTranslator()
    for call in (est.predict, est.inverse_predict, est.predict_log_proba):
        with pytest.raises(NotFittedError):
            call([("a",)])


def test_fit_predict_round_trip(data):
    gt, c = data
    X = [s for s, _ in c.parallel]
    y = [t for _, t in c.parallel]
    est = DualTranslator(model="tabular", train_params=FAST).fit(X, y, gt=gt)
    assert est.score(X, y) == pytest.approx(1.0)
    assert est.inverse_predict(y) == [tuple(s) for s in X]
    assert est.transform(X[:3]) == est.predict(X[:3])
    lp = est.predict_log_proba(X[:2])
    assert lp.shape == (2, len(gt.dst_space))
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-9)
    assert est.log_likelihood(X, y) > np.log(0.5)
    assert est.curves_ and est.result_.final


def test_fit_infers_spaces_and_uses_mono(data):
    _, c = data
    X = [s for s, _ in c.parallel]
    y = [t for _, t in c.parallel]
    est = DualTranslator(strategy="IBT-batch", train_params=dict(FAST, max_updates=40)).fit(
        X, y, mono_x=c.mono_x, mono_y=c.mono_y)
    assert est.forward_.src_space.max_len == 2
    assert len(est.predict(c.mono_x[:5])) == 5


def test_fit_rejects_bad_input():
    est = DualTranslator()
    with pytest.raises(ValueError):
        est.fit([("a",)], [])
    with pytest.raises(ValueError):
        est.fit([], [])
    with pytest.raises(ValueError):
        DualTranslator(strategy="nope").fit([("a",)], [("b",)])
