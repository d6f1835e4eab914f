import numpy as np
import pytest
from sklearn.base import clone

from selfaux.estimator import MultiTaskNetwork, resolve_architecture
from selfaux.exceptions import ConfigurationError, DivergedError, ShapeError
from selfaux.model import mlp_spec
from selfaux.validation import check_inputs, check_seed, check_targets, check_task_weights


def regression_data(n=200, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    Y = np.stack([X @ rng.normal(size=d), X @ rng.normal(size=d) + 3.0], axis=1)
    return X, Y


def small_reg(**kw):
    params = dict(architecture=mlp_spec(4, (16,), (8,), n_tasks=2), epochs=30, batch_size=32, learning_rate=0.05)
    params.update(kw)
    return MultiTaskNetwork(**params)


def test_get_params_and_clone():
    est = small_reg(gamma=0.3, aux="fc")
    params = est.get_params()
    assert params["gamma"] == 0.3 and params["aux"] == "fc"
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")
    est.set_params(epochs=2)
    assert est.epochs == 2


def test_fit_predict_learns_linear_targets():
    X, Y = regression_data()
    est = small_reg().fit(X, Y)
    pred = est.predict(X)
    assert pred.shape == (200, 2)
    baseline = np.var(Y, axis=0)
    mse = np.mean((pred - Y) ** 2, axis=0)
    assert np.all(mse < 0.1 * baseline)
    assert est.score(X, Y) == pytest.approx(-np.mean(mse))
    np.testing.assert_allclose(est.train_losses_, mse, rtol=1e-10)
    assert len(est.history_) == 30 and est.history_[-1][0] < est.history_[0][0]


def test_list_and_array_targets_agree():
    X, Y = regression_data(n=50)
    a = small_reg(epochs=2).fit(X, Y)
    b = small_reg(epochs=2).fit(X, [Y[:, 0], Y[:, 1]])
    np.testing.assert_array_equal(a.predict(X), b.predict(X))


def test_standardisation_reports_original_units():
    X, Y = regression_data(n=80)
    est = small_reg(epochs=0).fit(X, Y * 100)
    np.testing.assert_allclose(est.y_mean_, (Y * 100).mean(axis=0))
    pred = est.predict(X)
    np.testing.assert_allclose(est.train_losses_, np.mean((pred - Y * 100) ** 2, axis=0), rtol=1e-10)


def test_same_seed_same_model_different_seed_differs():
    X, Y = regression_data(n=60)
    a = small_reg(epochs=3, random_state=7).fit(X, Y).predict(X)
    b = small_reg(epochs=3, random_state=7).fit(X, Y).predict(X)
    c = small_reg(epochs=3, random_state=8).fit(X, Y).predict(X)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_classification_predicts_indices():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(120, 4))
    Y = np.stack([(X[:, 0] > 0).astype(int), (X[:, 1] > 0).astype(int) * 2], axis=1)
    spec = mlp_spec(4, (16,), (8,), n_tasks=2, head="classification", head_dim=3)
    est = MultiTaskNetwork(spec, optimizer="adam", learning_rate=0.02, epochs=40, batch_size=16).fit(X, Y)
    pred = est.predict(X)
    assert set(np.unique(pred)) <= {0.0, 1.0, 2.0}
    assert max(est.task_metrics(X, Y)) < 0.1
    logits = est.decision_function(X)
    assert logits[0].shape == (120, 3)


@pytest.mark.parametrize("kind", ["linear", "uncertainty", "mgda_ub", "pcgrad"])
def test_every_strategy_fits(kind):
    X, Y = regression_data(n=64)
    est = small_reg(strategy=kind, epochs=3, aux="fc", gamma=0.5).fit(X, Y)
    assert np.all(np.isfinite(est.predict(X)))


def test_divergence_raises_and_flags():
    X, Y = regression_data(n=64)
    est = small_reg(learning_rate=1e6, epochs=5)
    with pytest.raises(DivergedError):
        est.fit(X, Y * 1e3)
    assert est.diverged_


def test_unfitted_predict():
    with pytest.raises(AttributeError):
        small_reg().predict(np.zeros((1, 4)))


def test_input_validation():
    X, Y = regression_data(n=20)
    with pytest.raises(ShapeError):
        small_reg().fit(X[:, :3], Y)
    with pytest.raises(ValueError):
        small_reg().fit(np.where(X > 1, np.nan, X), Y)
    with pytest.raises(ShapeError):
        small_reg().fit(X, Y[:10])
    with pytest.raises(ConfigurationError):
        small_reg(task_weights=(1.0,)).fit(X, Y)
    with pytest.raises(ConfigurationError):
        small_reg(random_state=-1).fit(X, Y)
    with pytest.raises(ConfigurationError):
        small_reg(strategy="nope").fit(X, Y)


def test_resolve_architecture_forms():
    spec = mlp_spec(4, (6,), (3,))
    assert resolve_architecture(spec) is spec
    assert resolve_architecture(spec.to_dict()) == spec
    assert resolve_architecture("synthetic").input_dim == 200
    assert resolve_architecture(spec, "fc").aux[0].kind == "fc"
    with pytest.raises(ConfigurationError):
        resolve_architecture(3)


def test_validation_helpers():
    assert check_inputs([[1, 2]]).dtype == np.float64
    with pytest.raises(ValueError):
        check_targets(None, 2, ["regression"])
    with pytest.raises(ValueError):
        check_targets([[0.5, 1.0]], 2, ["classification"])
    with pytest.raises(ValueError):
        check_targets([[0, 5]], 2, ["classification"], [3])
    assert check_targets(np.array([1.0, 2.0]), 2, ["regression"])[0].tolist() == [1.0, 2.0]
    assert check_task_weights(None, 2) is None
    with pytest.raises(ConfigurationError):
        check_task_weights([0, 0], 2)
    assert check_seed(None) == 0 and check_seed(np.uint64(2**63)) == 2**63
    with pytest.raises(ConfigurationError):
        check_seed(1.5)
    with pytest.raises(ConfigurationError):
        check_seed(True)
