"""Estimator-contract tests: params, validation, fitted state, chaining."""
from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kap.data import SplitCounts, WorldSpec, gen_bundle
from kap.estimators import (
    DistilledRegressor,
    MetaPenaltyLearner,
    PenalizedRegressor,
    TaskRegressor,
)
from kap.objectives import RegularizerWeights

HIDDEN = ((16, 4, "tanh"),)


@pytest.fixture(scope="module")
def bundle():
    return gen_bundle(WorldSpec(), SplitCounts(160, 48, 96, 48), seed=2)


@pytest.fixture(scope="module")
def teacher(bundle):
    src = bundle.source_train
    est = TaskRegressor(hidden=HIDDEN, iterations=250, batch_size=16, lr=5e-3)
    return est.fit(src.superior, src.labels)


def test_get_set_params_and_clone():
    est = TaskRegressor(hidden=HIDDEN, iterations=7, lr=0.5)
    params = est.get_params()
    assert params["iterations"] == 7
    assert params["lr"] == 0.5
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(iterations=9)
    assert est.iterations == 9


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        TaskRegressor().predict(np.zeros((2, 3)))


def test_fit_returns_self_and_predicts(bundle):
    src = bundle.source_train
    est = TaskRegressor(hidden=HIDDEN, iterations=200, batch_size=16, lr=5e-3)
    assert est.fit(src.weak, src.labels) is est
    pred = est.predict(bundle.source_val.weak)
    assert pred.shape == (48, 15)
    assert est.n_features_in_ == 12
    assert est.n_outputs_ == 15
    # better than predicting the training mean
    mean_pred = np.tile(src.labels.mean(axis=0), (48, 1))
    val = bundle.source_val.labels
    assert np.linalg.norm(pred - val) < np.linalg.norm(mean_pred - val)


def test_predict_rejects_wrong_width(bundle):
    src = bundle.source_train
    est = TaskRegressor(hidden=HIDDEN, iterations=10).fit(src.weak, src.labels)
    with pytest.raises(ValueError, match="features"):
        est.predict(src.superior)


def test_fit_rejects_misaligned_targets(bundle):
    src = bundle.source_train
    with pytest.raises(ValueError, match="rows"):
        TaskRegressor(hidden=HIDDEN, iterations=5).fit(src.weak, src.labels[:-3])


def test_zero_penalty_matches_unpenalized_bitwise(bundle):
    src = bundle.source_train
    kwargs = dict(hidden=HIDDEN, iterations=60, batch_size=16, lr=5e-3,
                  init_seed=4, batch_seed=4)
    plain = PenalizedRegressor(penalty=None, **kwargs).fit(src.weak, src.labels)
    zero = PenalizedRegressor(penalty=0.0, **kwargs).fit(src.weak, src.labels)
    np.testing.assert_array_equal(plain.predict(bundle.source_val.weak),
                                  zero.predict(bundle.source_val.weak))


def test_constant_penalty_shrinks_weights(bundle):
    src = bundle.source_train
    kwargs = dict(hidden=HIDDEN, iterations=150, batch_size=16, lr=5e-3)
    plain = PenalizedRegressor(penalty=None, **kwargs).fit(src.weak, src.labels)
    heavy = PenalizedRegressor(penalty=3.0, **kwargs).fit(src.weak, src.labels)
    assert (np.linalg.norm(heavy.network_.params.flat())
            < np.linalg.norm(plain.network_.params.flat()))


def test_distilled_regressor_requires_teacher_and_superior(bundle):
    src = bundle.source_train
    with pytest.raises(ValueError, match="teacher"):
        DistilledRegressor(hidden=HIDDEN).fit(src.weak, src.labels,
                                              superior=src.superior)
    est = DistilledRegressor(teacher=TaskRegressor(), hidden=HIDDEN)
    with pytest.raises(NotFittedError):
        est.fit(src.weak, src.labels, superior=src.superior)


def test_distilled_regressor_fits(bundle, teacher):
    src = bundle.source_train
    est = DistilledRegressor(teacher=teacher, hidden=HIDDEN, att_weight=5.0,
                             warmup_iterations=40, iterations=120,
                             batch_size=16, lr=5e-3)
    with pytest.raises(ValueError, match="superior"):
        est.fit(src.weak, src.labels)
    est.fit(src.weak, src.labels, superior=src.superior)
    assert est.predict(bundle.source_val.weak).shape == (48, 15)
    assert {"loss_act", "loss_att"} <= set(est.loss_rows_[-1])


def test_meta_learner_produces_usable_weights(bundle, teacher):
    src = bundle.source_train
    learner = MetaPenaltyLearner(teacher=teacher, hidden=HIDDEN, att_weight=5.0,
                                 warmup_iterations=30, iterations=90,
                                 batch_size=16, lr=5e-3, meta_lr=5e-3)
    learner.fit(src.weak, src.labels, superior=src.superior)
    weights = learner.weights_
    assert isinstance(weights, RegularizerWeights)
    assert weights.phi.same_layout(learner.network_.params)
    assert float(np.abs(weights.phi.flat()).max()) > 0.0

    downstream = PenalizedRegressor(penalty=weights, hidden=HIDDEN,
                                    iterations=80, batch_size=16, lr=5e-3)
    downstream.fit(bundle.target_train.weak, bundle.target_train.labels)
    assert downstream.predict(bundle.target_test.weak).shape == (48, 15)
