"""Training arms: teacher, baseline, distillation, and the meta loop.

The meta loop alternates three moves per iteration, all on one sampled
batch: an expectation step that applies the current penalty weights to a
lookahead copy of the student, a maximization step that nudges the
penalty weights down the hypergradient of the teacher-guided loss at that
lookahead, and an ordinary student step on the guided loss itself.  At
meta-test time the learned weights act as a fixed prior on a fresh
student that never sees the teacher.

Per-parameter updates under the penalty have a closed form (plain
shrink-or-grow weight decay), which also yields the hypergradient in one
backward pass when the lookahead is a single step; a finite-difference
route is kept as an independent oracle and as the fallback for deeper
lookaheads.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from kap import autodiff as ad
from kap.autodiff import Adam, ParamSet, Sgd, backward_grad, finite_diff_grad
from kap.networks import Network, NetworkSpec, forward_trace, init_network
from kap.objectives import (
    NORM_KINDS,
    DistillConfig,
    RegularizerWeights,
    guided_loss,
    penalty,
    regularized_loss,
    task_loss,
)

LOSS_FIELDS = ("iteration", "loss_total", "loss_reg", "loss_act", "loss_att",
               "loss_R")
LOSS_CAP = 1e6
META_GRAD_MODES = ("closed_form", "finite_diff_oracle")

_BATCH_STREAM = 101


class DivergenceError(RuntimeError):
    """Training blew past the loss cap or went non-finite."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss diverged at iteration {iteration}: {value!r}")
        self.iteration = iteration
        self.value = value


def _guard(value: float, iteration: int) -> float:
    if not np.isfinite(value) or value > LOSS_CAP:
        raise DivergenceError(iteration, value)
    return value


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the single-objective arms."""

    iterations: int
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr < 0.0:
            raise ValueError("lr must be non-negative")


@dataclass(frozen=True)
class MetaConfig:
    """Knobs for the penalty-learning loop.

    `lr` drives both the student step and the lookahead step; `meta_lr`
    drives the penalty weights.  The closed-form hypergradient is exact
    only for a single lookahead step, so deeper lookaheads must use the
    finite-difference route.
    """

    iterations: int
    warmup_iterations: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    meta_lr: float = 1e-3
    inner_steps: int = 1
    norm: str = "l2"
    meta_grad_mode: str = "closed_form"
    phi_clip: float | None = None
    seed: int = 0
    fd_eps: float = 1e-6

    def __post_init__(self):
        if self.iterations < 0 or self.warmup_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr < 0.0 or self.meta_lr < 0.0:
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")
        if self.meta_grad_mode not in META_GRAD_MODES:
            raise ValueError(f"meta_grad_mode must be one of {META_GRAD_MODES}")
        if self.meta_grad_mode == "closed_form" and self.inner_steps != 1:
            raise ValueError("closed_form hypergradient requires inner_steps=1")
        if self.phi_clip is not None and self.phi_clip <= 0.0:
            raise ValueError("phi_clip must be positive when set")
        if self.fd_eps <= 0.0:
            raise ValueError("fd_eps must be positive")


@dataclass(frozen=True)
class TrainResult:
    network: Network
    loss_rows: tuple[dict, ...]

    @property
    def final_loss(self) -> float:
        return self.loss_rows[-1]["loss_total"] if self.loss_rows else float("nan")


@dataclass(frozen=True)
class MetaTrainResult:
    network: Network
    weights: RegularizerWeights
    loss_rows: tuple[dict, ...]


def _check_xy(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("training arrays must be 2-d")
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("x and y must share a non-empty first dimension")
    return x, y


def _batch_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _BATCH_STREAM])


def _task_phase(spec: NetworkSpec, theta: ParamSet, x, y, cfg: TrainConfig,
                rng, adam: Adam, rows: list, start: int) -> ParamSet:
    """Adam on the bare task loss; shared by teacher, warmup, baseline."""
    n = x.shape[0]
    for k in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        xb, yb = x[idx], y[idx]

        def objective(p):
            out, _ = forward_trace(spec, p, xb)
            return task_loss(out, yb)

        value, grads = backward_grad(objective, theta)
        _guard(value, start + k)
        rows.append({"iteration": start + k, "loss_total": value,
                     "loss_reg": value})
        theta = adam.step(theta, grads)
    return theta


def train_teacher(x, y, spec: NetworkSpec, cfg: TrainConfig) -> TrainResult:
    """Fit a fresh network to (x, y) by batched Adam on the task loss."""
    x, y = _check_xy(x, y)
    net = init_network(spec)
    rows: list[dict] = []
    theta = _task_phase(spec, net.params, x, y, cfg, _batch_rng(cfg.seed),
                        Adam(cfg.lr), rows, start=0)
    return TrainResult(net.with_params(theta), tuple(rows))


def baseline_train(x, y, spec: NetworkSpec, cfg: TrainConfig,
                   norm: str = "l2",
                   strength: float | None = None) -> TrainResult:
    """Student trained on the task loss, optionally with a constant penalty.

    With `strength` unset the penalty never enters the graph; with it set,
    every parameter gets the same fixed weight under the chosen norm.
    """
    if strength is None:
        return train_teacher(x, y, spec, cfg)
    if strength < 0.0:
        raise ValueError("strength must be non-negative")
    weights = RegularizerWeights.constant(init_network(spec).params, strength,
                                          norm)
    return regularized_train(x, y, spec, cfg, weights)


def regularized_train(x, y, spec: NetworkSpec, cfg: TrainConfig,
                      weights: RegularizerWeights) -> TrainResult:
    """Fresh network trained on task loss plus the per-parameter penalty.

    This is the meta-test arm when `weights` were meta-learned, and the
    constant-decay sweep arm when they are a filled constant.
    """
    x, y = _check_xy(x, y)
    net = init_network(spec)
    theta = net.params
    if not weights.phi.same_layout(theta):
        raise ValueError("penalty weights do not match the network layout")
    rng = _batch_rng(cfg.seed)
    adam = Adam(cfg.lr)
    rows: list[dict] = []
    n = x.shape[0]
    for k in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        xb, yb = x[idx], y[idx]

        def objective(p):
            out, _ = forward_trace(spec, p, xb)
            return regularized_loss(out, yb, p, weights)

        value, parts, grads = backward_grad(objective, theta, has_aux=True)
        _guard(value, k)
        rows.append({"iteration": k, "loss_total": value, **parts})
        theta = adam.step(theta, grads)
    return TrainResult(net.with_params(theta), tuple(rows))


meta_test = regularized_train


def _check_trace_geometry(teacher_spec: NetworkSpec, student_spec: NetworkSpec):
    t = [(h.channels, h.spatial) for h in teacher_spec.hidden]
    s = [(h.channels, h.spatial) for h in student_spec.hidden]
    if t != s:
        raise ValueError("teacher and student hidden geometries differ, "
                         "matching losses are undefined")
    if teacher_spec.output_dim != student_spec.output_dim:
        raise ValueError("teacher and student output dimensions differ")


def distill_student(x_weak, x_sup, y, teacher: Network, spec: NetworkSpec,
                    cfg: TrainConfig, distill_cfg: DistillConfig,
                    warmup_iterations: int = 0) -> TrainResult:
    """Two-phase student: task-only warmup, then teacher-guided training.

    The teacher runs outside the tape, so its parameters are frozen by
    construction.  Both phases draw batches from one stream and the
    optimizer restarts at the phase boundary.
    """
    x_weak, y = _check_xy(x_weak, y)
    x_sup, _ = _check_xy(x_sup, y)
    _check_trace_geometry(teacher.spec, spec)
    net = init_network(spec)
    rng = _batch_rng(cfg.seed)
    rows: list[dict] = []
    warm_cfg = TrainConfig(iterations=warmup_iterations, batch_size=cfg.batch_size,
                           lr=cfg.lr, seed=cfg.seed)
    theta = _task_phase(spec, net.params, x_weak, y, warm_cfg, rng, Adam(cfg.lr),
                        rows, start=0)
    adam = Adam(cfg.lr)
    n = x_weak.shape[0]
    for k in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        xb, yb, xsb = x_weak[idx], y[idx], x_sup[idx]
        _, teacher_trace = teacher.forward_trace(xsb)

        def objective(p):
            out, trace = forward_trace(spec, p, xb)
            return guided_loss(out, yb, trace, teacher_trace, distill_cfg)

        value, parts, grads = backward_grad(objective, theta, has_aux=True)
        _guard(value, warmup_iterations + k)
        rows.append({"iteration": warmup_iterations + k, "loss_total": value,
                     **parts})
        theta = adam.step(theta, grads)
    return TrainResult(net.with_params(theta), tuple(rows))


# -- penalty updates and hypergradients --------------------------------------


def penalty_step(theta: ParamSet, task_grad: ParamSet,
                 weights: RegularizerWeights, alpha: float) -> ParamSet:
    """One plain gradient step on task loss plus penalty, in closed form.

    l2 weights shrink (or grow, when negative) each parameter by the
    factor (1 - 2*alpha*weight) before the task-gradient step; l1 weights
    subtract a signed constant instead.
    """
    if not theta.same_layout(task_grad) or not theta.same_layout(weights.phi):
        raise ValueError("parameter, gradient, and weight layouts must match")
    out = {}
    for name, t in theta.items():
        g, w = task_grad[name], weights.phi[name]
        if weights.norm == "l2":
            out[name] = t * (1.0 - 2.0 * alpha * w) - alpha * g
        else:
            out[name] = t - alpha * (g + w * np.sign(t))
    return ParamSet(out)


def inner_update(task_objective, theta: ParamSet, weights: RegularizerWeights,
                 alpha: float, steps: int = 1) -> ParamSet:
    """Lookahead: `steps` closed-form penalty steps, regradding in between.

    Each step recomputes the task gradient at the current point, so two
    one-step calls compose to the same result as one two-step call.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    current = theta
    for _ in range(steps):
        _, grad = backward_grad(task_objective, current)
        current = penalty_step(current, grad, weights, alpha)
    return current


def hyper_grad_from_outer(theta: ParamSet, outer_grad: ParamSet, alpha: float,
                          norm: str) -> ParamSet:
    """Chain the outer gradient at the lookahead back onto the weights.

    A single closed-form lookahead moves parameter i by -2*alpha*theta_i
    per unit of l2 weight (or -alpha*sign(theta_i) for l1), so the
    hypergradient is an elementwise product; no second tape is needed.
    """
    if norm not in NORM_KINDS:
        raise ValueError(f"norm must be one of {NORM_KINDS}")
    if norm == "l2":
        return outer_grad.combine(theta, lambda g, t: g * (-2.0 * alpha * t))
    return outer_grad.combine(theta, lambda g, t: g * (-alpha) * np.sign(t))


def penalty_meta_grad(task_objective, outer_objective, theta: ParamSet,
                      weights: RegularizerWeights, alpha: float,
                      inner_steps: int = 1, mode: str = "closed_form",
                      fd_eps: float = 1e-6) -> ParamSet:
    """Gradient of outer_objective(lookahead(weights)) w.r.t. the weights.

    `task_objective` and `outer_objective` map a parameter dict (Vars or
    ndarrays) to a scalar.  The closed-form route does one backward pass;
    the finite-difference route re-runs the lookahead per weight
    coordinate and exists as an oracle and for inner_steps > 1.
    """
    if mode == "closed_form":
        if inner_steps != 1:
            raise ValueError("closed_form hypergradient requires inner_steps=1")
        lookahead = inner_update(task_objective, theta, weights, alpha)
        _, outer_grad = backward_grad(outer_objective, lookahead)
        return hyper_grad_from_outer(theta, outer_grad, alpha, weights.norm)
    if mode != "finite_diff_oracle":
        raise ValueError(f"meta_grad_mode must be one of {META_GRAD_MODES}")

    def through_lookahead(phi_arrays) -> float:
        probe = RegularizerWeights(ParamSet(phi_arrays), weights.norm)
        current = theta
        for _ in range(inner_steps):
            def full(p):
                return task_objective(p) + penalty(p, probe)

            _, grad = backward_grad(full, current)
            current = Sgd(alpha).step(current, grad)
        return float(ad.value_of(outer_objective(current)))

    return finite_diff_grad(through_lookahead, weights.phi, eps=fd_eps)


def meta_train(x_weak, x_sup, y, teacher: Network, spec: NetworkSpec,
               cfg: MetaConfig, distill_cfg: DistillConfig) -> MetaTrainResult:
    """Learn penalty weights alongside a guided student.

    Per iteration, on one batch: lookahead the student through the
    penalty, step the weights down the hypergradient of the guided loss
    at the lookahead, then step the student itself on the guided loss.
    The lookahead is discarded; only weights and student persist.
    """
    x_weak, y = _check_xy(x_weak, y)
    x_sup, _ = _check_xy(x_sup, y)
    _check_trace_geometry(teacher.spec, spec)
    net = init_network(spec)
    rng = _batch_rng(cfg.seed)
    rows: list[dict] = []
    warm_cfg = TrainConfig(iterations=cfg.warmup_iterations,
                           batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    theta = _task_phase(spec, net.params, x_weak, y, warm_cfg, rng, Adam(cfg.lr),
                        rows, start=0)
    weights = RegularizerWeights.zeros(theta, cfg.norm)
    phi_opt = Sgd(cfg.meta_lr)
    adam = Adam(cfg.lr)
    n = x_weak.shape[0]
    for k in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        xb, yb, xsb = x_weak[idx], y[idx], x_sup[idx]
        _, teacher_trace = teacher.forward_trace(xsb)

        def batch_task(p):
            out, _ = forward_trace(spec, p, xb)
            return task_loss(out, yb)

        def batch_guided(p):
            out, trace = forward_trace(spec, p, xb)
            return guided_loss(out, yb, trace, teacher_trace, distill_cfg)

        phi_grad = penalty_meta_grad(batch_task, lambda p: batch_guided(p)[0],
                                     theta, weights, cfg.lr, cfg.inner_steps,
                                     cfg.meta_grad_mode, cfg.fd_eps)
        penalty_value = float(penalty(dict(theta), weights))
        phi = phi_opt.step(weights.phi, phi_grad)
        if cfg.phi_clip is not None:
            phi = phi.map(lambda a: np.clip(a, -cfg.phi_clip, cfg.phi_clip))
        weights = RegularizerWeights(phi, cfg.norm)

        value, parts, grads = backward_grad(batch_guided, theta, has_aux=True)
        _guard(value, cfg.warmup_iterations + k)
        rows.append({"iteration": cfg.warmup_iterations + k, "loss_total": value,
                     **parts, "loss_R": penalty_value})
        theta = adam.step(theta, grads)
    return MetaTrainResult(net.with_params(theta), weights, tuple(rows))


# -- loss traces --------------------------------------------------------------


def write_loss_csv(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOSS_FIELDS), restval="")
        writer.writeheader()
        for row in rows:
            out = {"iteration": row["iteration"]}
            for key in LOSS_FIELDS[1:]:
                if key in row:
                    out[key] = repr(float(row[key]))
            writer.writerow(out)


def read_loss_csv(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            row: dict = {"iteration": int(raw["iteration"])}
            for key in LOSS_FIELDS[1:]:
                if raw.get(key, "") != "":
                    row[key] = float(raw[key])
            rows.append(row)
    return rows
