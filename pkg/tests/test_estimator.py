import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import load_digits

from tac import TACClassifier


@pytest.fixture(scope="module")
def digits_xy():
    d = load_digits()
    X = (d.data / 16.0 - 0.3) / 0.4
    rng = np.random.default_rng(0)
    idx = rng.permutation(len(X))
    return X[idx[:800]], d.target[idx[:800]], X[idx[800:1000]], d.target[idx[800:1000]]


def test_get_params_and_clone():
    est = TACClassifier(epochs=3, quant_bits=2)
    params = est.get_params()
    assert params["epochs"] == 3 and params["quant_bits"] == 2
    assert clone(est).get_params() == params


def test_fit_predict_all_stages(digits_xy):
    X, y, Xt, yt = digits_xy
    est = TACClassifier(epochs=10, finetune_epochs=1).fit(X, y)
    assert set(est.stage_states_) == {"trained", "pruned", "quantized"}
    assert est.score(Xt, yt) > 0.8
    np.testing.assert_array_equal(est.predict(Xt), est.predict(Xt, engine="xnor"))
    proba = est.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    report = est.compression_report()
    assert report.compression_rate > 1 and report.computation_saving > 1


def test_string_labels_and_train_only(digits_xy):
    X, y, Xt, _ = digits_xy
    names = np.array(["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"])
    est = TACClassifier(epochs=2, stages="train").fit(X, names[y])
    assert set(est.stage_states_) == {"trained"}
    assert set(est.predict(Xt)) <= set(names)


def test_binary_problem_resizes_head(digits_xy):
    X, y, _, _ = digits_xy
    sel = y < 2
    est = TACClassifier(epochs=2, stages="prune", finetune_epochs=1, prune_schedule=(0.5,)).fit(X[sel], y[sel])
    assert est.state_.graph.n_classes == 2


def test_bad_inputs(digits_xy):
    X, y, _, _ = digits_xy
    with pytest.raises(ValueError):
        TACClassifier(stages="everything").fit(X, y)
    with pytest.raises(ValueError):
        TACClassifier(epochs=1, stages="train").fit(X[:, :10], y)
    with pytest.raises(Exception):
        TACClassifier().predict(X)
