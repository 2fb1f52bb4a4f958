"""Training objectives: task loss, distillation matching, learned penalty.

Two composite objectives drive everything:

* guided loss: task loss plus activation/attention matching against a
  frozen teacher trace (the distillation signal).
* regularized loss: task loss plus a per-parameter penalty whose weights
  are themselves learned; weights may go negative, which rewards growing
  a parameter instead of shrinking it.

All losses are batch means and work on Vars or plain ndarrays alike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kap import autodiff as ad
from kap.autodiff import ParamSet, value_of
from kap.networks import ActivationTrace, load_checkpoint, save_checkpoint

# Attention maps with L2 norm below this are treated as identically zero
# rather than normalized, keeping the map (and its gradient) finite.
DEGENERATE_NORM = 1e-12

NORM_KINDS = ("l2", "l1")


def task_loss(pred, target):
    """Mean over the batch of the squared Euclidean residual norm."""
    target = np.asarray(target, dtype=np.float64)
    if value_of(pred).shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    diff = pred - target
    return ad.square(diff).sum() / float(target.shape[0])


def activation_loss(student_trace: ActivationTrace, teacher_trace: ActivationTrace):
    """Squared distance between final hidden maps, averaged over the batch."""
    qs, qt = student_trace.last, teacher_trace.last
    st, tt = value_of(qs), value_of(qt)
    if st.shape != tt.shape:
        raise ValueError("student and teacher final maps have different shapes")
    return ad.square(qs - value_of(qt)).sum() / float(st.shape[0])


def attention_map(hidden):
    """Per-position energy, L2-normalized per sample.

    `hidden` is a (batch, channels, spatial) map; the result is
    (batch, spatial) with unit L2 norm per row.  Rows whose raw energy
    norm falls below DEGENERATE_NORM come back as exact zeros instead of
    a division blow-up, and contribute no gradient.
    """
    if value_of(hidden).ndim != 3:
        raise ValueError("attention_map expects a (batch, channels, spatial) input")
    energy = ad.square(hidden).sum(axis=1)
    sq_norm = ad.square(energy).sum(axis=1, keepdims=True)
    alive = (value_of(sq_norm) >= DEGENERATE_NORM ** 2).astype(np.float64)
    safe = sq_norm + (1.0 - alive)
    return (energy / ad.sqrt(safe)) * alive


def attention_loss(student_trace: ActivationTrace, teacher_trace: ActivationTrace,
                   layers=None):
    """Sum over selected layers of the batch-mean squared map difference.

    `layers` indexes into the hidden traces; None means every hidden layer.
    """
    if len(student_trace) != len(teacher_trace):
        raise ValueError("traces have different depths")
    if layers is None:
        layers = range(len(student_trace))
    total = 0.0
    for i in layers:
        ms = attention_map(student_trace.hidden[i])
        mt = attention_map(teacher_trace.hidden[i])
        batch = value_of(ms).shape[0]
        total = total + ad.square(ms - value_of(mt)).sum() / float(batch)
    return total


@dataclass(frozen=True)
class DistillConfig:
    """Weighting and layer selection for the matching losses."""

    att_weight: float = 1000.0
    attention_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.att_weight < 0.0:
            raise ValueError("att_weight must be non-negative")


def distill_loss(student_trace, teacher_trace, cfg: DistillConfig):
    """Activation term plus weighted attention term.

    Returns (loss, act_value, att_value); the two floats are the
    unweighted component values for logging.
    """
    act = activation_loss(student_trace, teacher_trace)
    att = attention_loss(student_trace, teacher_trace, cfg.attention_layers)
    loss = act + cfg.att_weight * att
    return loss, float(value_of(act)), float(value_of(att))


def guided_loss(pred, target, student_trace, teacher_trace, cfg: DistillConfig):
    """Task loss plus the distillation terms; returns (loss, parts)."""
    task = task_loss(pred, target)
    dist, act_value, att_value = distill_loss(student_trace, teacher_trace, cfg)
    loss = task + dist
    parts = {"loss_reg": float(value_of(task)),
             "loss_act": act_value,
             "loss_att": att_value}
    return loss, parts


# -- learned per-parameter penalty -------------------------------------------


@dataclass(frozen=True)
class RegularizerWeights:
    """One penalty weight per network parameter, plus the norm it scales.

    l2 penalizes weight * theta^2, l1 penalizes weight * |theta|.
    Negative weights are allowed and push the parameter to grow.
    """

    phi: ParamSet
    norm: str = "l2"

    def __post_init__(self):
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")

    @classmethod
    def zeros(cls, like: ParamSet, norm: str = "l2") -> "RegularizerWeights":
        return cls(ParamSet.zeros_like(like), norm)

    @classmethod
    def constant(cls, like: ParamSet, value: float, norm: str = "l2") -> "RegularizerWeights":
        return cls(ParamSet.full_like(like, value), norm)


def penalty(theta, weights: RegularizerWeights):
    """Sum over parameters of weight-scaled theta^2 (l2) or |theta| (l1)."""
    total = 0.0
    for name, w in weights.phi.items():
        if name not in theta:
            raise ValueError(f"penalty weight '{name}' has no matching parameter")
        t = theta[name]
        term = ad.square(t) if weights.norm == "l2" else ad.absolute(t)
        total = total + (w * term).sum()
    return total


def regularized_loss(pred, target, theta, weights: RegularizerWeights):
    """Task loss plus learned penalty; returns (loss, parts)."""
    task = task_loss(pred, target)
    pen = penalty(theta, weights)
    loss = task + pen
    parts = {"loss_reg": float(value_of(task)), "loss_R": float(value_of(pen))}
    return loss, parts


def save_regularizer(path: str, weights: RegularizerWeights) -> None:
    save_checkpoint(path, {"kind": "regularizer", "norm": weights.norm}, weights.phi)


def load_regularizer(path: str) -> RegularizerWeights:
    spec, phi = load_checkpoint(path)
    if spec.get("kind") != "regularizer":
        raise ValueError("checkpoint does not hold regularizer weights")
    return RegularizerWeights(phi, spec["norm"])
