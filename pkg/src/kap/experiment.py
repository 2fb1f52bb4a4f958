"""Experiment driver: config schema, pipeline arms, and reporting.

One JSON config describes a whole study.  The `run` entry points execute
one arm (teacher, baseline, distill, meta-train, meta-test, sweep) for
one or more seeds, writing self-contained artifacts per run: checkpoint,
loss trace, and a one-row metrics CSV stamped with the config hash, arm,
and seed.  No timestamps or machine state leak into any artifact, so
reruns are byte-identical.

Evaluation thresholds are frozen once per data directory, anchored to
the median per-joint error of the canonical-seed baseline on the target
test split; every later run reuses that axis.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from kap.data import (
    DatasetBundle,
    SplitCounts,
    WorldSpec,
    gen_bundle,
    load_bundle,
    save_bundle,
)
from kap.evaluation import (
    MetricsRecord,
    default_thresholds,
    evaluate_model,
    per_joint_distances,
    read_metrics_csv,
    write_metrics_csv,
)
from kap.networks import LayerSpec, Network, NetworkSpec, load_network, save_network
from kap.objectives import (
    NORM_KINDS,
    DistillConfig,
    load_regularizer,
    save_regularizer,
)
from kap.training import (
    META_GRAD_MODES,
    MetaConfig,
    TrainConfig,
    baseline_train,
    distill_student,
    meta_test,
    meta_train,
    train_teacher,
    write_loss_csv,
)

ARMS = ("teacher", "baseline", "distill", "meta-train", "meta-test", "sweep")

DATA_FILE = "data.json"
THRESHOLDS_FILE = "thresholds.json"
CONFIG_ECHO = "config.json"

# init-seed streams: every arm that creates a fresh network of a given
# role at run seed k must land on the same weights
_TEACHER_INIT = 1000
_STUDENT_SOURCE_INIT = 2000
_STUDENT_TARGET_INIT = 3000


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a study needs beyond the data directory."""

    world: WorldSpec
    counts: SplitCounts
    hidden: tuple[LayerSpec, ...]
    seeds: tuple[int, ...]
    batch_size: int
    lr: float
    teacher_iterations: int
    distill_warmup: int
    distill_iterations: int
    finetune_iterations: int
    att_weight: float
    attention_layers: tuple[int, ...] | None
    meta_lr: float
    inner_steps: int
    norm: str
    meta_grad_mode: str
    phi_clip: float | None
    sweep_arms: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")
        if self.meta_grad_mode not in META_GRAD_MODES:
            raise ValueError(f"meta_grad_mode must be one of {META_GRAD_MODES}")
        if not self.sweep_arms:
            raise ValueError("sweep arms must not be empty")
        for norm, strength in self.sweep_arms:
            if norm not in NORM_KINDS:
                raise ValueError(f"sweep norm must be one of {NORM_KINDS}")
            if strength < 0:
                raise ValueError("sweep strengths must be non-negative")
        if len(set(self.sweep_arms)) != len(self.sweep_arms):
            raise ValueError("sweep arms must be distinct")
        # delegate range checks on shared knobs
        TrainConfig(iterations=self.teacher_iterations,
                    batch_size=self.batch_size, lr=self.lr)
        MetaConfig(iterations=self.distill_iterations,
                   warmup_iterations=self.distill_warmup,
                   batch_size=self.batch_size, lr=self.lr, meta_lr=self.meta_lr,
                   inner_steps=self.inner_steps, norm=self.norm,
                   meta_grad_mode=self.meta_grad_mode, phi_clip=self.phi_clip)
        if self.finetune_iterations < 0:
            raise ValueError("finetune_iterations must be non-negative")

    # -- derived specs -----------------------------------------------------

    def teacher_spec(self, seed: int) -> NetworkSpec:
        return NetworkSpec(input_dim=self.world.sup_dim,
                           output_dim=self.world.label_dim, hidden=self.hidden,
                           init_seed=_TEACHER_INIT + seed)

    def student_spec(self, seed: int, domain: str) -> NetworkSpec:
        base = _STUDENT_SOURCE_INIT if domain == "source" else _STUDENT_TARGET_INIT
        return NetworkSpec(input_dim=self.world.weak_dim,
                           output_dim=self.world.label_dim, hidden=self.hidden,
                           init_seed=base + seed)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(att_weight=self.att_weight,
                             attention_layers=self.attention_layers)

    def train_config(self, iterations: int, seed: int) -> TrainConfig:
        return TrainConfig(iterations=iterations, batch_size=self.batch_size,
                           lr=self.lr, seed=seed)

    def meta_config(self, seed: int) -> MetaConfig:
        return MetaConfig(iterations=self.distill_iterations,
                          warmup_iterations=self.distill_warmup,
                          batch_size=self.batch_size, lr=self.lr,
                          meta_lr=self.meta_lr, inner_steps=self.inner_steps,
                          norm=self.norm, meta_grad_mode=self.meta_grad_mode,
                          phi_clip=self.phi_clip, seed=seed)


def default_config_dict() -> dict:
    """The bundled desk-scale study configuration.

    The attention weight and the meta learning rate are recalibrated for
    the bundled toy networks and short schedules; conv-scale feature maps
    and epoch-scale training sit near att_weight=1e3 and meta_lr=1e-3
    instead, both one edit away.
    """
    return {
        "world": WorldSpec().to_json_dict(),
        "counts": SplitCounts().to_json_dict(),
        "network": {"hidden": [[64, 8, "relu"], [64, 8, "relu"]]},
        "training": {
            "batch_size": 32,
            "lr": 1e-3,
            "teacher_iterations": 1500,
            "distill_warmup": 400,
            "distill_iterations": 1200,
            "finetune_iterations": 1200,
        },
        "distill": {"att_weight": 10.0, "attention_layers": None},
        "meta": {
            "meta_lr": 1.0,
            "inner_steps": 1,
            "norm": "l1",
            "meta_grad_mode": "closed_form",
            "phi_clip": None,
        },
        "sweep": {"arms": [[norm, strength]
                           for norm in ("l1", "l2")
                           for strength in (1e-5, 1e-4, 1e-3, 1e-2)]},
        "seeds": [0, 1, 2, 3, 4],
    }


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document, filling defaults for missing keys."""
    base = default_config_dict()
    doc = dict(doc)
    unknown = set(doc) - set(base)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    merged = {}
    for section, default in base.items():
        given = doc.get(section, default)
        if isinstance(default, dict):
            extra = set(given) - set(default)
            if extra:
                raise ValueError(f"unknown keys in '{section}': {sorted(extra)}")
            merged[section] = {**default, **given}
        else:
            merged[section] = given
    att_layers = merged["distill"]["attention_layers"]
    return ExperimentConfig(
        world=WorldSpec.from_json_dict(merged["world"]),
        counts=SplitCounts.from_json_dict(merged["counts"]),
        hidden=tuple(LayerSpec(int(w), int(c), str(a))
                     for w, c, a in merged["network"]["hidden"]),
        seeds=tuple(int(s) for s in merged["seeds"]),
        batch_size=int(merged["training"]["batch_size"]),
        lr=float(merged["training"]["lr"]),
        teacher_iterations=int(merged["training"]["teacher_iterations"]),
        distill_warmup=int(merged["training"]["distill_warmup"]),
        distill_iterations=int(merged["training"]["distill_iterations"]),
        finetune_iterations=int(merged["training"]["finetune_iterations"]),
        att_weight=float(merged["distill"]["att_weight"]),
        attention_layers=None if att_layers is None
        else tuple(int(i) for i in att_layers),
        meta_lr=float(merged["meta"]["meta_lr"]),
        inner_steps=int(merged["meta"]["inner_steps"]),
        norm=str(merged["meta"]["norm"]),
        meta_grad_mode=str(merged["meta"]["meta_grad_mode"]),
        phi_clip=None if merged["meta"]["phi_clip"] is None
        else float(merged["meta"]["phi_clip"]),
        sweep_arms=tuple((str(norm), float(strength))
                         for norm, strength in merged["sweep"]["arms"]),
    )


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "world": config.world.to_json_dict(),
        "counts": config.counts.to_json_dict(),
        "network": {"hidden": [[h.width, h.channels, h.activation]
                               for h in config.hidden]},
        "training": {
            "batch_size": config.batch_size,
            "lr": config.lr,
            "teacher_iterations": config.teacher_iterations,
            "distill_warmup": config.distill_warmup,
            "distill_iterations": config.distill_iterations,
            "finetune_iterations": config.finetune_iterations,
        },
        "distill": {"att_weight": config.att_weight,
                    "attention_layers": None if config.attention_layers is None
                    else list(config.attention_layers)},
        "meta": {
            "meta_lr": config.meta_lr,
            "inner_steps": config.inner_steps,
            "norm": config.norm,
            "meta_grad_mode": config.meta_grad_mode,
            "phi_clip": config.phi_clip,
        },
        "sweep": {"arms": [[norm, strength]
                           for norm, strength in config.sweep_arms]},
        "seeds": list(config.seeds),
    }


def canonical_config_json(config: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(config), sort_keys=True,
                      separators=(",", ":")) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_config_json(config).encode()).hexdigest()


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(json.load(fh))


# -- data and threshold management --------------------------------------------


def generate_data(config: ExperimentConfig, out_dir: str) -> str:
    """Write the dataset bundle for this config; returns the data path."""
    os.makedirs(out_dir, exist_ok=True)
    bundle = gen_bundle(config.world, config.counts, seed=config.world.world_seed)
    path = os.path.join(out_dir, DATA_FILE)
    save_bundle(path, bundle)
    return path


def ensure_thresholds(config: ExperimentConfig, bundle: DatasetBundle,
                      data_dir: str) -> np.ndarray:
    """Load the frozen threshold axis, computing it on first use.

    The axis spans [0, 2 * median per-joint error] of the canonical-seed
    baseline student on the target test split.  It is stored next to the
    data and stamped with the config hash, so mixed-config reuse fails
    loudly instead of silently skewing curves.
    """
    path = os.path.join(data_dir, THRESHOLDS_FILE)
    digest = config_hash(config)
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("config_hash") != digest:
            raise ValueError(
                "thresholds in this data directory were frozen under a "
                "different config; use a fresh data directory")
        return np.array(doc["thresholds"], dtype=np.float64)
    seed = config.seeds[0]
    result = baseline_train(bundle.target_train.weak, bundle.target_train.labels,
                            config.student_spec(seed, "target"),
                            config.train_config(config.finetune_iterations, seed))
    pred = result.network.forward(bundle.target_test.weak)
    reference = float(np.median(per_joint_distances(pred,
                                                    bundle.target_test.labels)))
    thresholds = default_thresholds(reference)
    doc = {
        "config_hash": digest,
        "reference_error": reference,
        "source": {"arm": "baseline", "setting": "baseline_target", "seed": seed,
                   "split": "target_test"},
        "thresholds": thresholds.tolist(),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)
    return thresholds


def echo_config(config: ExperimentConfig, out_dir: str) -> None:
    """Record the effective config; refuse to mix configs in one directory."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_ECHO)
    text = canonical_config_json(config)
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            if fh.read() != text:
                raise ValueError(f"{path} was written by a different config; "
                                 "use a separate output directory")
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# -- single-run execution ------------------------------------------------------


def _run_id(config: ExperimentConfig, setting: str, seed: int) -> str:
    return f"{config_hash(config)[:8]}:{setting}:s{seed}"


def _artifact(out_dir: str, setting: str, seed: int, kind: str) -> str:
    return os.path.join(out_dir, f"{setting}_s{seed}.{kind}")


def _emit(out_dir: str, config: ExperimentConfig, setting: str, seed: int,
          network: Network, loss_rows, record: MetricsRecord) -> None:
    save_network(_artifact(out_dir, setting, seed, "ckpt.json"), network)
    write_loss_csv(_artifact(out_dir, setting, seed, "loss.csv"), loss_rows)
    write_metrics_csv(_artifact(out_dir, setting, seed, "metrics.csv"), [record])


def _evaluate(config: ExperimentConfig, setting: str, seed: int, network: Network,
              x_eval, y_eval, thresholds) -> MetricsRecord:
    return evaluate_model(_run_id(config, setting, seed), setting, seed,
                          network.forward(x_eval), y_eval, thresholds,
                          network.params)


def _teacher_path(out_dir: str, seed: int) -> str:
    return _artifact(out_dir, "teacher", seed, "ckpt.json")


def _regularizer_path(out_dir: str, seed: int) -> str:
    return os.path.join(out_dir, f"regularizer_s{seed}.ckpt.json")


def _load_teacher(out_dir: str, seed: int) -> Network:
    path = _teacher_path(out_dir, seed)
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing teacher checkpoint {path}; run the teacher arm first")
    return load_network(path)


def run_single(config: ExperimentConfig, arm: str, data_dir: str, out_dir: str,
               seed: int) -> list[MetricsRecord]:
    """Execute one arm at one seed; returns the metric records written."""
    bundle = load_bundle(os.path.join(data_dir, DATA_FILE))
    if bundle.world != config.world:
        raise ValueError("data directory was generated for a different world")
    thresholds = ensure_thresholds(config, bundle, data_dir)
    src, val = bundle.source_train, bundle.source_val
    tgt_train, tgt_test = bundle.target_train, bundle.target_test
    records: list[MetricsRecord] = []

    def emit(setting, network, loss_rows, x_eval, y_eval):
        record = _evaluate(config, setting, seed, network, x_eval, y_eval,
                           thresholds)
        _emit(out_dir, config, setting, seed, network, loss_rows, record)
        records.append(record)

    if arm == "teacher":
        result = train_teacher(src.superior, src.labels, config.teacher_spec(seed),
                               config.train_config(config.teacher_iterations, seed))
        emit("teacher", result.network, result.loss_rows, val.superior, val.labels)
    elif arm == "baseline":
        result = baseline_train(src.weak, src.labels,
                                config.student_spec(seed, "source"),
                                config.train_config(config.teacher_iterations, seed))
        emit("baseline_source", result.network, result.loss_rows,
             val.weak, val.labels)
        result = baseline_train(tgt_train.weak, tgt_train.labels,
                                config.student_spec(seed, "target"),
                                config.train_config(config.finetune_iterations,
                                                    seed))
        emit("baseline_target", result.network, result.loss_rows,
             tgt_test.weak, tgt_test.labels)
    elif arm == "distill":
        teacher = _load_teacher(out_dir, seed)
        result = distill_student(src.weak, src.superior, src.labels, teacher,
                                 config.student_spec(seed, "source"),
                                 config.train_config(config.distill_iterations,
                                                     seed),
                                 config.distill_config(),
                                 warmup_iterations=config.distill_warmup)
        emit("distill", result.network, result.loss_rows, val.weak, val.labels)
    elif arm == "meta-train":
        teacher = _load_teacher(out_dir, seed)
        result = meta_train(src.weak, src.superior, src.labels, teacher,
                            config.student_spec(seed, "source"),
                            config.meta_config(seed), config.distill_config())
        save_regularizer(_regularizer_path(out_dir, seed), result.weights)
        emit("meta_train", result.network, result.loss_rows, val.weak, val.labels)
    elif arm == "meta-test":
        reg_path = _regularizer_path(out_dir, seed)
        if not os.path.exists(reg_path):
            raise FileNotFoundError(
                f"missing regularizer checkpoint {reg_path}; "
                "run the meta-train arm first")
        weights = load_regularizer(reg_path)
        result = meta_test(tgt_train.weak, tgt_train.labels,
                           config.student_spec(seed, "target"),
                           config.train_config(config.finetune_iterations, seed),
                           weights)
        emit("meta_test", result.network, result.loss_rows,
             tgt_test.weak, tgt_test.labels)
    elif arm == "sweep":
        for norm, strength in config.sweep_arms:
            result = baseline_train(tgt_train.weak, tgt_train.labels,
                                    config.student_spec(seed, "target"),
                                    config.train_config(config.finetune_iterations,
                                                        seed),
                                    norm=norm, strength=strength)
            emit(f"sweep_{norm}@{strength:g}", result.network, result.loss_rows,
                 tgt_test.weak, tgt_test.labels)
    else:
        raise ValueError(f"unknown arm '{arm}'; expected one of {ARMS}")
    return records


def _job(args: tuple) -> list[MetricsRecord]:
    config_doc, arm, data_dir, out_dir, seed = args
    return run_single(parse_config(config_doc), arm, data_dir, out_dir, seed)


def run_arm(config: ExperimentConfig, arm: str, data_dir: str, out_dir: str,
            seeds=None) -> list[MetricsRecord]:
    """Execute one arm for the given seeds (default: all configured seeds).

    KAP_THREADS > 1 fans seeds out over worker processes; artifacts are
    per-seed files, so the result is identical either way.
    """
    if arm not in ARMS:
        raise ValueError(f"unknown arm '{arm}'; expected one of {ARMS}")
    seeds = list(config.seeds) if seeds is None else list(seeds)
    echo_config(config, out_dir)
    bundle = load_bundle(os.path.join(data_dir, DATA_FILE))
    ensure_thresholds(config, bundle, data_dir)
    threads = max(1, int(os.environ.get("KAP_THREADS", "1")))
    jobs = [(config_to_dict(config), arm, data_dir, out_dir, seed)
            for seed in seeds]
    records: list[MetricsRecord] = []
    if threads == 1 or len(jobs) == 1:
        for job in jobs:
            records.extend(_job(job))
    else:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            for result in pool.map(_job, jobs):
                records.extend(result)
    return records


# -- reporting -----------------------------------------------------------------

_SOURCE_BASELINE = "baseline_source"
_TARGET_BASELINE = "baseline_target"

REPORT_FIELDS = ("setting", "n_runs", "epe_median", "epe_per_seed",
                 "auc_median", "near_zero_frac_median", "abs_max_median",
                 "epe_gain_vs_baseline")

CALIBRATION_NOTE = (
    "att_weight=10 and meta_lr=1.0 are desk-scale calibrations for the "
    "bundled toy networks and short schedules; conv-scale feature maps and "
    "epoch-scale training sit near att_weight=1e3 and meta_lr=1e-3.")


def _setting_domain(setting: str) -> str:
    if setting in ("teacher", _SOURCE_BASELINE, "distill", "meta_train"):
        return "source"
    return "target"


def collect_records(runs_dir: str) -> list[MetricsRecord]:
    names = sorted(n for n in os.listdir(runs_dir) if n.endswith(".metrics.csv"))
    records: list[MetricsRecord] = []
    for name in names:
        records.extend(read_metrics_csv(os.path.join(runs_dir, name)))
    if not records:
        raise FileNotFoundError(f"no *.metrics.csv files under {runs_dir}")
    return records


def summarize(records: list[MetricsRecord]) -> list[dict]:
    """Median-aggregate per setting, with a gain against the domain baseline.

    Gain is baseline minus arm, so positive numbers mean the arm improved
    on the plain student of its evaluation domain.  The column stays
    empty when that baseline was not run.
    """
    by_setting: dict[str, list[MetricsRecord]] = {}
    for record in records:
        by_setting.setdefault(record.setting, []).append(record)

    def med(setting, field):
        return float(np.median([getattr(r, field) for r in by_setting[setting]]))

    rows = []
    for setting in sorted(by_setting):
        runs = sorted(by_setting[setting], key=lambda r: r.seed)
        row = {
            "setting": setting,
            "n_runs": len(runs),
            "epe_median": med(setting, "epe"),
            "epe_per_seed": " ".join(f"s{r.seed}={r.epe:.6g}" for r in runs),
            "auc_median": med(setting, "auc"),
            "near_zero_frac_median": med(setting, "near_zero_frac"),
            "abs_max_median": med(setting, "abs_max"),
        }
        baseline = (_SOURCE_BASELINE if _setting_domain(setting) == "source"
                    else _TARGET_BASELINE)
        if baseline in by_setting and setting != baseline:
            row["epe_gain_vs_baseline"] = med(baseline, "epe") - row["epe_median"]
        rows.append(row)
    return rows


def write_report(runs_dir: str, out_path: str) -> list[dict]:
    import csv

    rows = summarize(collect_records(runs_dir))
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(REPORT_FIELDS), restval="")
        writer.writeheader()
        for row in rows:
            out = {k: (repr(v) if isinstance(v, float) else v)
                   for k, v in row.items()}
            writer.writerow(out)
        fh.write(f"# note: {CALIBRATION_NOTE}\n")
    return rows


def plot_pck(runs_dir: str, out_path: str) -> None:
    """Optional PCK figure; median curve per setting."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = collect_records(runs_dir)
    by_setting: dict[str, list[MetricsRecord]] = {}
    for record in records:
        by_setting.setdefault(record.setting, []).append(record)
    fig, ax = plt.subplots(figsize=(6, 4))
    for setting, recs in sorted(by_setting.items()):
        cols = list(recs[0].pck)
        if not cols:
            continue
        thresholds = [float(c.split("@", 1)[1]) for c in cols]
        curve = np.median(np.array([[r.pck[c] for c in cols] for r in recs]),
                          axis=0)
        ax.plot(thresholds, curve, label=setting)
    ax.set_xlabel("threshold")
    ax.set_ylabel("fraction of joints within threshold")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_param_histograms(runs_dir: str, out_path: str,
                          settings=(_TARGET_BASELINE, "meta_test")) -> None:
    """Optional parameter-distribution figure, pooled over seeds."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pooled: dict[str, list[np.ndarray]] = {}
    for name in sorted(os.listdir(runs_dir)):
        if not name.endswith(".ckpt.json"):
            continue
        setting = name.rsplit("_s", 1)[0]
        if setting in settings:
            network = load_network(os.path.join(runs_dir, name))
            pooled.setdefault(setting, []).append(network.params.flat())
    if not pooled:
        raise FileNotFoundError(
            f"no checkpoints for settings {settings} under {runs_dir}")
    fig, ax = plt.subplots(figsize=(6, 4))
    for setting in settings:
        if setting not in pooled:
            continue
        values = np.concatenate(pooled[setting])
        ax.hist(values, bins=81, histtype="step", density=True, label=setting)
    ax.set_xlabel("parameter value")
    ax.set_ylabel("density")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
