"""Cross-modal knowledge distillation and generalization, desk scale.

A teacher trained on a superior modality guides a student on a weak
modality (activation and attention matching); the same supervision is
distilled further into a per-parameter regularizer that transfers to a
target dataset where the superior modality is missing.
"""
from __future__ import annotations

from kap.autodiff import Adam, ParamSet, Sgd, backward_grad, finite_diff_grad
from kap.data import SplitCounts, WorldSpec, build_world, gen_bundle
from kap.estimators import (
    DistilledRegressor,
    MetaPenaltyLearner,
    PenalizedRegressor,
    TaskRegressor,
)
from kap.evaluation import auc, epe, param_stats, pck_curve
from kap.networks import LayerSpec, Network, NetworkSpec, init_network
from kap.objectives import DistillConfig, RegularizerWeights
from kap.training import MetaConfig, TrainConfig

__all__ = [
    "Adam",
    "DistillConfig",
    "DistilledRegressor",
    "LayerSpec",
    "MetaConfig",
    "MetaPenaltyLearner",
    "Network",
    "NetworkSpec",
    "ParamSet",
    "PenalizedRegressor",
    "RegularizerWeights",
    "Sgd",
    "SplitCounts",
    "TaskRegressor",
    "TrainConfig",
    "WorldSpec",
    "auc",
    "backward_grad",
    "build_world",
    "epe",
    "finite_diff_grad",
    "gen_bundle",
    "init_network",
    "param_stats",
    "pck_curve",
]

__version__ = "0.1.0"
