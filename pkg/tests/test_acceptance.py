"""Acceptance gate: one test per release criterion, at its stated tolerance.

Criteria 5, 6, 8, and the meta-loss EMA invariant share one full run of
the bundled default study (all arms, seeds 0-4); criterion 10 reruns a
single seed end to end and compares bytes.  The rest are unit scale.
Each test prints its measured numbers before asserting, so a red line
always comes with the evidence.
"""
from __future__ import annotations

import os
import time
from types import SimpleNamespace

import numpy as np
import pytest

from kap.autodiff import ParamSet, backward_grad, finite_diff_grad, value_of
from kap.evaluation import auc, epe
from kap.experiment import (
    collect_records,
    default_config_dict,
    generate_data,
    parse_config,
    run_arm,
)
from kap.networks import LayerSpec, NetworkSpec, forward_trace, init_network
from kap.objectives import (
    DistillConfig,
    RegularizerWeights,
    activation_loss,
    attention_loss,
    attention_map,
    guided_loss,
    penalty,
    task_loss,
)
from kap.training import (
    MetaConfig,
    TrainConfig,
    baseline_train,
    inner_update,
    meta_train,
    penalty_meta_grad,
    read_loss_csv,
    regularized_train,
    train_teacher,
)

CONFIG = parse_config(default_config_dict())
ALL_ARMS = ("teacher", "baseline", "distill", "meta-train", "meta-test", "sweep")


def rel_err(got: ParamSet, want: ParamSet) -> float:
    g, w = got.flat(), want.flat()
    return float(np.linalg.norm(g - w)) / max(float(np.linalg.norm(w)), 1e-30)


def shift_from_zero(params: ParamSet) -> ParamSet:
    # keep |theta| >= 0.01 so l1 signs are stable under 1e-6 probes
    return params.map(lambda a: a + 0.05 * np.sign(a) + 0.01)


def make_problem(seed: int, l1_safe: bool = False):
    """A student objective pair plus a frozen teacher trace, < 100 params."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(input_dim=5, output_dim=3,
                       hidden=(LayerSpec(10, 2, "tanh"),), init_seed=seed)
    params = init_network(spec).params
    if l1_safe:
        params = shift_from_zero(params)
    teacher = init_network(NetworkSpec(input_dim=4, output_dim=3,
                                       hidden=(LayerSpec(10, 2, "tanh"),),
                                       init_seed=seed + 500))
    x = rng.normal(size=(5, 5))
    y = rng.normal(size=(5, 3))
    _, teacher_trace = teacher.forward_trace(rng.normal(size=(5, 4)))
    cfg = DistillConfig(att_weight=10.0)

    def task(p):
        return task_loss(forward_trace(spec, p, x)[0], y)

    def outer(p):
        out, trace = forward_trace(spec, p, x)
        return guided_loss(out, y, trace, teacher_trace, cfg)[0]

    return SimpleNamespace(spec=spec, params=params, x=x, y=y,
                           teacher_trace=teacher_trace, cfg=cfg,
                           task=task, outer=outer, rng=rng)


# -- unit-scale criteria -------------------------------------------------------


def test_criterion_01_gradients_match_finite_differences():
    started = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        prob = make_problem(seed)
        theta = shift_from_zero(prob.params)
        phi = prob.params.map(lambda a: prob.rng.normal(scale=0.1, size=a.shape))
        w2 = RegularizerWeights(phi, "l2")
        w1 = RegularizerWeights(phi, "l1")

        def act(p):
            return activation_loss(forward_trace(prob.spec, p, prob.x)[1],
                                   prob.teacher_trace)

        def att(p):
            return attention_loss(forward_trace(prob.spec, p, prob.x)[1],
                                  prob.teacher_trace)

        losses = (
            prob.task,
            act,
            att,
            prob.outer,
            lambda p: prob.task(p) + penalty(p, w2),
            lambda p: prob.task(p) + penalty(p, w1),
        )
        for objective in losses:
            _, grads = backward_grad(objective, theta)
            fd = finite_diff_grad(lambda p: float(value_of(objective(p))),
                                  theta, eps=1e-6)
            worst = max(worst, rel_err(grads, fd))
    elapsed = time.perf_counter() - started
    print(f"criterion 1 (gradient correctness): max rel err {worst:.3e} over "
          f"20 seeds x 6 losses, {elapsed:.1f}s")
    assert worst < 1e-5


def test_criterion_02_meta_gradient_matches_oracle():
    started = time.perf_counter()
    # worked scalar: task (t-1)^2, outer t^2, theta=2, alpha=0.1, phi=0
    theta = ParamSet({"t": np.array([2.0])})
    weights = RegularizerWeights.zeros(theta, "l2")

    def scalar_task(p):
        return ((p["t"] - 1.0) ** 2).sum()

    def scalar_outer(p):
        return (p["t"] ** 2).sum()

    closed = penalty_meta_grad(scalar_task, scalar_outer, theta, weights, 0.1)
    oracle = penalty_meta_grad(scalar_task, scalar_outer, theta, weights, 0.1,
                               mode="finite_diff_oracle")
    assert abs(float(closed["t"][0]) - (-1.44)) <= 1e-12
    assert abs(float(oracle["t"][0]) - (-1.44)) <= 1e-6

    worst = 0.0
    for seed in range(10):
        for norm in ("l2", "l1"):
            prob = make_problem(seed, l1_safe=(norm == "l1"))
            phi = prob.params.map(
                lambda a: prob.rng.normal(scale=1e-2, size=a.shape))
            weights = RegularizerWeights(phi, norm)
            closed = penalty_meta_grad(prob.task, prob.outer, prob.params,
                                       weights, alpha=1e-3)
            oracle = penalty_meta_grad(prob.task, prob.outer, prob.params,
                                       weights, alpha=1e-3,
                                       mode="finite_diff_oracle")
            worst = max(worst, rel_err(closed, oracle))
    elapsed = time.perf_counter() - started
    print(f"criterion 2 (meta-gradient vs oracle): scalar case -1.44 ok, "
          f"max rel err {worst:.3e} over 10 states x 2 norms, {elapsed:.1f}s")
    assert worst < 1e-5


def test_criterion_03_inner_step_matches_generic_step():
    started = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        for norm in ("l2", "l1"):
            prob = make_problem(seed + 40, l1_safe=(norm == "l1"))
            phi = prob.params.map(
                lambda a: prob.rng.normal(scale=0.05, size=a.shape))
            weights = RegularizerWeights(phi, norm)
            alpha = 1e-3
            closed = inner_update(prob.task, prob.params, weights, alpha)

            def full(p):
                return prob.task(p) + penalty(p, weights)

            _, grad = backward_grad(full, prob.params)
            generic = prob.params.combine(grad, lambda t, g: t - alpha * g)
            for name in closed:
                worst = max(worst,
                            float(np.max(np.abs(closed[name] - generic[name]))))
    elapsed = time.perf_counter() - started
    print(f"criterion 3 (closed-form inner step): max elementwise diff "
          f"{worst:.3e} over 10 states x 2 norms, {elapsed:.1f}s")
    assert worst <= 1e-12


def test_criterion_04_degeneracy_contracts_bitwise():
    started = time.perf_counter()
    rng = np.random.default_rng(4)
    x = rng.normal(size=(96, 6))
    y = rng.normal(size=(96, 4))
    spec = NetworkSpec(input_dim=6, output_dim=4,
                       hidden=(LayerSpec(12, 3, "relu"),), init_seed=4)
    cfg = TrainConfig(iterations=120, batch_size=16, lr=3e-3, seed=0)

    plain = baseline_train(x, y, spec, cfg)
    zero_phi = regularized_train(x, y, spec, cfg,
                                 RegularizerWeights.zeros(init_network(spec).params))
    for name in plain.network.params:
        np.testing.assert_array_equal(zero_phi.network.params[name],
                                      plain.network.params[name])

    sigma = 0.3
    const_base = baseline_train(x, y, spec, cfg, norm="l2", strength=sigma)
    const_phi = regularized_train(
        x, y, spec, cfg,
        RegularizerWeights.constant(init_network(spec).params, sigma, "l2"))
    for name in const_base.network.params:
        np.testing.assert_array_equal(const_phi.network.params[name],
                                      const_base.network.params[name])

    teacher = init_network(NetworkSpec(input_dim=4, output_dim=4,
                                       hidden=(LayerSpec(12, 3, "relu"),),
                                       init_seed=99))
    x_sup = rng.normal(size=(96, 4))
    frozen = meta_train(x, x_sup, y, teacher, spec,
                        MetaConfig(iterations=60, warmup_iterations=20,
                                   batch_size=16, lr=3e-3, meta_lr=0.0, seed=0),
                        DistillConfig(att_weight=10.0))
    stuck = max(float(np.max(np.abs(a))) for _, a in frozen.weights.phi.items())
    elapsed = time.perf_counter() - started
    print(f"criterion 4 (degeneracy contracts): zero-phi and constant-phi "
          f"bitwise equal, zero meta-lr keeps |phi|={stuck}, {elapsed:.1f}s")
    assert stuck == 0.0


def test_criterion_07_meta_gradient_descends():
    started = time.perf_counter()
    wins = 0
    for seed in range(10):
        norm = "l2" if seed % 2 == 0 else "l1"
        prob = make_problem(seed + 70, l1_safe=(norm == "l1"))
        phi = prob.params.map(lambda a: prob.rng.normal(scale=1e-2, size=a.shape))
        weights = RegularizerWeights(phi, norm)
        alpha = 1e-3
        grad = penalty_meta_grad(prob.task, prob.outer, prob.params, weights,
                                 alpha)
        before = float(value_of(prob.outer(
            inner_update(prob.task, prob.params, weights, alpha))))
        stepped = RegularizerWeights(
            phi.combine(grad, lambda p, g: p - 1e-4 * g), norm)
        after = float(value_of(prob.outer(
            inner_update(prob.task, prob.params, stepped, alpha))))
        wins += after < before
    elapsed = time.perf_counter() - started
    print(f"criterion 7 (meta-gradient descends): outer loss decreased in "
          f"{wins}/10 states, {elapsed:.1f}s")
    assert wins >= 9


def test_criterion_09_metric_hand_values():
    started = time.perf_counter()
    assert epe(np.array([[5.0, 12.0, 0.0]]), np.zeros((1, 3))) == 13.0
    assert abs(auc(np.linspace(0.0, 1.0, 20), np.linspace(0.0, 1.0, 20))
               - 0.5) <= 1e-12
    assert abs(auc(np.linspace(0.0, 7.0, 20), np.linspace(0.0, 1.0, 20))
               - 0.5) <= 1e-12
    hidden = np.random.default_rng(9).normal(size=(4, 3, 7))
    norms = np.linalg.norm(attention_map(hidden), axis=-1)
    worst = float(np.max(np.abs(norms - 1.0)))
    elapsed = time.perf_counter() - started
    print(f"criterion 9 (metric hand values): epe 13 exact, ramp auc 0.5, "
          f"attention norm off by {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-9


# -- study-scale criteria ------------------------------------------------------


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data_dir = str(root / "data")
    runs_dir = str(root / "runs")
    generate_data(CONFIG, data_dir)
    timings = {}
    for arm in ALL_ARMS:
        started = time.perf_counter()
        run_arm(CONFIG, arm, data_dir, runs_dir)
        timings[arm] = time.perf_counter() - started
    records = collect_records(runs_dir)
    epe_by = {}
    stats_by = {}
    for record in records:
        epe_by.setdefault(record.setting, {})[record.seed] = record.epe
        stats_by.setdefault(record.setting, {})[record.seed] = (
            record.near_zero_frac, record.abs_max)
    return SimpleNamespace(data_dir=data_dir, runs_dir=runs_dir,
                           records=records, epe=epe_by, stats=stats_by,
                           timings=timings)


def test_criterion_05_distillation_gain(study):
    seeds = CONFIG.seeds
    wins = 0
    for seed in seeds:
        teacher = study.epe["teacher"][seed]
        base = study.epe["baseline_source"][seed]
        distill = study.epe["distill"][seed]
        wins += teacher < base and distill < base
    arm_time = sum(study.timings[a] for a in ("teacher", "baseline", "distill"))
    detail = " ".join(
        f"s{s}:[t={study.epe['teacher'][s]:.3f} b={study.epe['baseline_source'][s]:.3f} "
        f"d={study.epe['distill'][s]:.3f}]" for s in seeds)
    print(f"criterion 5 (distillation gain): both clauses in {wins}/{len(seeds)} "
          f"seeds, arms took {arm_time / 60:.1f} min; {detail}")
    assert wins >= 4


def test_criterion_06_generalization_gain(study):
    meta = float(np.median(list(study.epe["meta_test"].values())))
    base = float(np.median(list(study.epe["baseline_target"].values())))
    l2_arms = {s: float(np.median(list(v.values())))
               for s, v in study.epe.items() if s.startswith("sweep_l2@")}
    best_l2 = min(l2_arms.values())
    arm_time = sum(study.timings[a] for a in ("meta-train", "meta-test", "sweep"))
    print(f"criterion 6 (generalization gain): median epe meta={meta:.4f} "
          f"baseline={base:.4f} best constant-l2={best_l2:.4f} "
          f"bound={1.05 * best_l2:.4f}, arms took {arm_time / 60:.1f} min; "
          f"l2 arms {l2_arms}")
    assert meta < base
    assert meta <= 1.05 * best_l2


def test_criterion_08_weight_histogram_sharpens_and_spreads(study):
    seeds = CONFIG.seeds
    wins = 0
    detail = []
    for seed in seeds:
        nz_meta, max_meta = study.stats["meta_test"][seed]
        nz_base, max_base = study.stats["baseline_target"][seed]
        wins += nz_meta > nz_base and max_meta >= max_base
        detail.append(f"s{seed}:[nz {nz_base:.4f}->{nz_meta:.4f} "
                      f"absmax {max_base:.2f}->{max_meta:.2f}]")
    print(f"criterion 8 (sharper peak, wider spread): {wins}/{len(seeds)} "
          f"seeds; {' '.join(detail)}")
    assert wins >= 4


def test_invariant_meta_train_loss_ema_decreases(study):
    ratios = []
    for seed in CONFIG.seeds:
        rows = read_loss_csv(
            os.path.join(study.runs_dir, f"meta_train_s{seed}.loss.csv"))
        guided = [float(r["loss_total"]) for r in rows
                  if float(r["iteration"]) >= CONFIG.distill_warmup]
        ema = None
        ema_tenth = None
        for i, v in enumerate(guided, start=1):
            ema = v if ema is None else 0.99 * ema + 0.01 * v
            if i == len(guided) // 10:
                ema_tenth = ema
        ratios.append(ema / ema_tenth)
        assert ema < ema_tenth
    print(f"invariant (guided-loss EMA decreases): K vs K/10 ratios "
          f"{[f'{r:.3f}' for r in ratios]}")


def test_criterion_10_pipeline_determinism(study, tmp_path):
    started = time.perf_counter()
    data2 = str(tmp_path / "data")
    runs2 = str(tmp_path / "runs")
    generate_data(CONFIG, data2)
    for arm in ALL_ARMS:
        run_arm(CONFIG, arm, data2, runs2, seeds=[0])

    def read(root, name):
        with open(os.path.join(root, name), "rb") as fh:
            return fh.read()

    mismatched = []
    for name in ("data.json", "thresholds.json"):
        if read(data2, name) != read(study.data_dir, name):
            mismatched.append(name)
    rerun_files = sorted(os.listdir(runs2))
    for name in rerun_files:
        if read(runs2, name) != read(study.runs_dir, name):
            mismatched.append(name)
    elapsed = time.perf_counter() - started
    print(f"criterion 10 (determinism): {len(rerun_files) + 2} files "
          f"byte-compared, {len(mismatched)} mismatched, "
          f"{elapsed / 60:.1f} min; mismatches: {mismatched}")
    assert mismatched == []
