"""Scikit-learn style wrappers around the training arms.

Each arm maps onto an estimator: plain supervised fitting, fitting under
a fixed or learned penalty, teacher-guided distillation, and the meta
loop that learns penalty weights.  All follow the usual contract: pass
hyperparameters in `__init__` verbatim, learn in `fit` (which returns
self), expose fitted state via trailing-underscore attributes, and
validate inputs on both `fit` and `predict`.

Labels are always 2-d (n_samples, 3 * joints) coordinate blocks.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from kap.autodiff import ParamSet
from kap.networks import LayerSpec, Network, NetworkSpec
from kap.objectives import DistillConfig, RegularizerWeights
from kap.training import (
    MetaConfig,
    TrainConfig,
    baseline_train,
    distill_student,
    meta_train,
    regularized_train,
    train_teacher,
)

DEFAULT_HIDDEN = ((64, 8, "relu"), (64, 8, "relu"))


def check_features(X, *, expected: int | None = None) -> np.ndarray:
    """Validate a 2-d float feature matrix, optionally pinning its width."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if expected is not None and X.shape[1] != expected:
        raise ValueError(f"X has {X.shape[1]} features, expected {expected}")
    return X


def check_targets(X: np.ndarray, y) -> np.ndarray:
    """Validate a 2-d coordinate target aligned with X."""
    y = check_array(y, dtype=np.float64, ensure_2d=True)
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    return y


def _hidden_spec(hidden) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec(int(w), int(c), str(a)) for w, c, a in hidden)


def _as_network(teacher) -> Network:
    if isinstance(teacher, Network):
        return teacher
    if isinstance(teacher, BaseEstimator):
        check_is_fitted(teacher, "network_")
        return teacher.network_
    raise TypeError("teacher must be a Network or a fitted estimator "
                    "exposing network_")


class _FittedPredictorMixin:
    """Shared predict path for estimators that hold a fitted network."""

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_features(X, expected=self.n_features_in_)
        return self.network_.forward(X)


class TaskRegressor(_FittedPredictorMixin, RegressorMixin, BaseEstimator):
    """Supervised network regression; the teacher and baseline arm.

    `init_seed` fixes the weight draw, `batch_seed` the batch stream, so
    a fitted model is a pure function of (data, params).
    """

    def __init__(self, hidden=DEFAULT_HIDDEN, iterations=1500, batch_size=32,
                 lr=1e-3, init_seed=0, batch_seed=0):
        self.hidden = hidden
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.init_seed = init_seed
        self.batch_seed = batch_seed

    def _spec(self, X, y) -> NetworkSpec:
        return NetworkSpec(input_dim=X.shape[1], output_dim=y.shape[1],
                           hidden=_hidden_spec(self.hidden),
                           init_seed=self.init_seed)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                           lr=self.lr, seed=self.batch_seed)

    def fit(self, X, y):
        X = check_features(X)
        y = check_targets(X, y)
        result = train_teacher(X, y, self._spec(X, y), self._train_config())
        self.network_ = result.network
        self.loss_rows_ = result.loss_rows
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self


class PenalizedRegressor(_FittedPredictorMixin, RegressorMixin, BaseEstimator):
    """Network regression under a per-parameter penalty.

    `penalty` is None (plain training), a float (constant decay on every
    parameter), or RegularizerWeights (for example meta-learned ones).
    This is the meta-test arm and the decay-sweep arm.
    """

    def __init__(self, penalty=None, norm="l2", hidden=DEFAULT_HIDDEN,
                 iterations=1200, batch_size=32, lr=1e-3, init_seed=0,
                 batch_seed=0):
        self.penalty = penalty
        self.norm = norm
        self.hidden = hidden
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.init_seed = init_seed
        self.batch_seed = batch_seed

    def fit(self, X, y):
        X = check_features(X)
        y = check_targets(X, y)
        spec = NetworkSpec(input_dim=X.shape[1], output_dim=y.shape[1],
                           hidden=_hidden_spec(self.hidden),
                           init_seed=self.init_seed)
        cfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                          lr=self.lr, seed=self.batch_seed)
        if self.penalty is None:
            result = baseline_train(X, y, spec, cfg)
            self.weights_ = None
        else:
            if isinstance(self.penalty, RegularizerWeights):
                weights = self.penalty
            else:
                phi = ParamSet({name: np.full(shape, float(self.penalty))
                                for name, shape in spec.param_layout()})
                weights = RegularizerWeights(phi, self.norm)
            result = regularized_train(X, y, spec, cfg, weights)
            self.weights_ = weights
        self.network_ = result.network
        self.loss_rows_ = result.loss_rows
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self


class DistilledRegressor(_FittedPredictorMixin, RegressorMixin, BaseEstimator):
    """Student guided by a fitted teacher through activation matching.

    `fit` needs the paired superior view: `fit(X, y, superior=X_sup)`.
    """

    def __init__(self, teacher=None, att_weight=10.0, attention_layers=None,
                 warmup_iterations=400, iterations=1200, hidden=DEFAULT_HIDDEN,
                 batch_size=32, lr=1e-3, init_seed=0, batch_seed=0):
        self.teacher = teacher
        self.att_weight = att_weight
        self.attention_layers = attention_layers
        self.warmup_iterations = warmup_iterations
        self.iterations = iterations
        self.hidden = hidden
        self.batch_size = batch_size
        self.lr = lr
        self.init_seed = init_seed
        self.batch_seed = batch_seed

    def _distill_config(self) -> DistillConfig:
        layers = self.attention_layers
        return DistillConfig(att_weight=self.att_weight,
                             attention_layers=None if layers is None
                             else tuple(layers))

    def fit(self, X, y, superior=None):
        if self.teacher is None:
            raise ValueError("a fitted teacher is required")
        if superior is None:
            raise ValueError("fit requires the paired superior view: "
                             "fit(X, y, superior=...)")
        teacher = _as_network(self.teacher)
        X = check_features(X)
        y = check_targets(X, y)
        superior = check_features(superior, expected=teacher.spec.input_dim)
        if superior.shape[0] != X.shape[0]:
            raise ValueError("X and superior have different numbers of rows")
        spec = NetworkSpec(input_dim=X.shape[1], output_dim=y.shape[1],
                           hidden=_hidden_spec(self.hidden),
                           init_seed=self.init_seed)
        cfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                          lr=self.lr, seed=self.batch_seed)
        result = distill_student(X, superior, y, teacher, spec, cfg,
                                 self._distill_config(),
                                 warmup_iterations=self.warmup_iterations)
        self.network_ = result.network
        self.loss_rows_ = result.loss_rows
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self


class MetaPenaltyLearner(_FittedPredictorMixin, RegressorMixin, BaseEstimator):
    """Learns per-parameter penalty weights alongside a guided student.

    After `fit(X, y, superior=X_sup)`, `weights_` holds the learned
    penalty, ready to be handed to PenalizedRegressor on a dataset that
    lacks the superior view; `predict` serves the guided student itself.
    """

    def __init__(self, teacher=None, att_weight=10.0, attention_layers=None,
                 warmup_iterations=400, iterations=1200, hidden=DEFAULT_HIDDEN,
                 batch_size=32, lr=1e-3, meta_lr=1e-3, inner_steps=1, norm="l2",
                 meta_grad_mode="closed_form", phi_clip=None, init_seed=0,
                 batch_seed=0):
        self.teacher = teacher
        self.att_weight = att_weight
        self.attention_layers = attention_layers
        self.warmup_iterations = warmup_iterations
        self.iterations = iterations
        self.hidden = hidden
        self.batch_size = batch_size
        self.lr = lr
        self.meta_lr = meta_lr
        self.inner_steps = inner_steps
        self.norm = norm
        self.meta_grad_mode = meta_grad_mode
        self.phi_clip = phi_clip
        self.init_seed = init_seed
        self.batch_seed = batch_seed

    def fit(self, X, y, superior=None):
        if self.teacher is None:
            raise ValueError("a fitted teacher is required")
        if superior is None:
            raise ValueError("fit requires the paired superior view: "
                             "fit(X, y, superior=...)")
        teacher = _as_network(self.teacher)
        X = check_features(X)
        y = check_targets(X, y)
        superior = check_features(superior, expected=teacher.spec.input_dim)
        if superior.shape[0] != X.shape[0]:
            raise ValueError("X and superior have different numbers of rows")
        spec = NetworkSpec(input_dim=X.shape[1], output_dim=y.shape[1],
                           hidden=_hidden_spec(self.hidden),
                           init_seed=self.init_seed)
        cfg = MetaConfig(iterations=self.iterations,
                         warmup_iterations=self.warmup_iterations,
                         batch_size=self.batch_size, lr=self.lr,
                         meta_lr=self.meta_lr, inner_steps=self.inner_steps,
                         norm=self.norm, meta_grad_mode=self.meta_grad_mode,
                         phi_clip=self.phi_clip, seed=self.batch_seed)
        layers = self.attention_layers
        dcfg = DistillConfig(att_weight=self.att_weight,
                             attention_layers=None if layers is None
                             else tuple(layers))
        result = meta_train(X, superior, y, teacher, spec, cfg, dcfg)
        self.network_ = result.network
        self.weights_ = result.weights
        self.loss_rows_ = result.loss_rows
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self
