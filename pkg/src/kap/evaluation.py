"""Pose-style metrics and parameter-distribution summaries.

Predictions and targets are flat (n, 3*joints) arrays; every metric first
regroups them into (n, joints, 3) so distances are per-joint Euclidean
norms in 3-space.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from kap.autodiff import ParamSet

NEAR_ZERO_EPS = 1e-3
PCK_POINTS = 20
HIST_BINS = 41


def _to_joints(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] % 3 != 0:
        raise ValueError("expected (n, 3*joints) coordinates")
    return arr.reshape(arr.shape[0], arr.shape[1] // 3, 3)


def per_joint_distances(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Euclidean distance per sample and joint, shape (n, joints)."""
    p, t = _to_joints(pred), _to_joints(target)
    if p.shape != t.shape:
        raise ValueError("prediction and target shapes differ")
    return np.linalg.norm(p - t, axis=2)


def epe(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-joint position error."""
    return float(per_joint_distances(pred, target).mean())


def pck_curve(pred: np.ndarray, target: np.ndarray,
              thresholds: np.ndarray) -> np.ndarray:
    """Fraction of joints within each threshold (inclusive)."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.ndim != 1 or thresholds.size == 0:
        raise ValueError("thresholds must be a non-empty 1-d array")
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be non-decreasing")
    dists = per_joint_distances(pred, target).ravel()
    return np.array([(dists <= t).mean() for t in thresholds])


def auc(thresholds: np.ndarray, pck_values: np.ndarray) -> float:
    """Trapezoidal area under the PCK curve, normalized to [0, 1]."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    pck_values = np.asarray(pck_values, dtype=np.float64)
    if thresholds.shape != pck_values.shape or thresholds.ndim != 1:
        raise ValueError("thresholds and pck values must be matching 1-d arrays")
    span = thresholds[-1] - thresholds[0]
    if span <= 0.0:
        raise ValueError("threshold range must be positive")
    return float(np.trapezoid(pck_values, thresholds) / span)


def default_thresholds(reference_error: float, points: int = PCK_POINTS) -> np.ndarray:
    """Evenly spaced thresholds over [0, 2 * reference_error].

    The reference is typically the median per-joint error of a baseline
    model, so curves from different arms share one frozen axis.
    """
    if reference_error <= 0.0:
        raise ValueError("reference_error must be positive")
    return np.linspace(0.0, 2.0 * reference_error, points)


@dataclass(frozen=True)
class ParamStats:
    """Histogram and summary statistics of a parameter vector."""

    counts: np.ndarray
    bin_edges: np.ndarray
    near_zero_frac: float
    abs_max: float


def param_stats(params: ParamSet, bins: int = HIST_BINS,
                near_zero_eps: float = NEAR_ZERO_EPS) -> ParamStats:
    """Histogram over the symmetric range [-max|theta|, max|theta|].

    An all-zero vector degenerates to a single bin holding everything.
    """
    flat = params.flat()
    if flat.size == 0:
        raise ValueError("parameter set is empty")
    abs_max = float(np.abs(flat).max())
    near_zero = float((np.abs(flat) < near_zero_eps).mean())
    if abs_max == 0.0:
        return ParamStats(counts=np.array([flat.size]),
                          bin_edges=np.array([0.0, 0.0]),
                          near_zero_frac=near_zero, abs_max=0.0)
    counts, edges = np.histogram(flat, bins=bins, range=(-abs_max, abs_max))
    return ParamStats(counts=counts, bin_edges=edges,
                      near_zero_frac=near_zero, abs_max=abs_max)


# -- per-run metric records -----------------------------------------------


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluated model: identity, pose metrics, weight statistics."""

    run_id: str
    setting: str
    seed: int
    epe: float
    auc: float
    pck: dict[str, float] = field(default_factory=dict)
    near_zero_frac: float = 0.0
    abs_max: float = 0.0


def pck_column(threshold: float) -> str:
    return f"pck@{threshold:.6g}"


def evaluate_model(run_id: str, setting: str, seed: int, pred: np.ndarray,
                   target: np.ndarray, thresholds: np.ndarray,
                   params: ParamSet) -> MetricsRecord:
    curve = pck_curve(pred, target, thresholds)
    stats = param_stats(params)
    return MetricsRecord(
        run_id=run_id,
        setting=setting,
        seed=seed,
        epe=epe(pred, target),
        auc=auc(thresholds, curve),
        pck={pck_column(t): float(v) for t, v in zip(thresholds, curve)},
        near_zero_frac=stats.near_zero_frac,
        abs_max=stats.abs_max,
    )


def metrics_fieldnames(records: list[MetricsRecord]) -> list[str]:
    pck_cols: list[str] = []
    for record in records:
        for col in record.pck:
            if col not in pck_cols:
                pck_cols.append(col)
    return ["run_id", "setting", "seed", "epe", "auc", *pck_cols,
            "near_zero_frac", "abs_max"]


def write_metrics_csv(path: str, records: list[MetricsRecord]) -> None:
    if not records:
        raise ValueError("no records to write")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=metrics_fieldnames(records),
                                restval="")
        writer.writeheader()
        for record in records:
            row = {
                "run_id": record.run_id,
                "setting": record.setting,
                "seed": record.seed,
                "epe": repr(record.epe),
                "auc": repr(record.auc),
                "near_zero_frac": repr(record.near_zero_frac),
                "abs_max": repr(record.abs_max),
            }
            row.update({k: repr(v) for k, v in record.pck.items()})
            writer.writerow(row)


def read_metrics_csv(path: str) -> list[MetricsRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    records = []
    for row in rows:
        pck = {k: float(v) for k, v in row.items()
               if k.startswith("pck@") and v != ""}
        records.append(MetricsRecord(
            run_id=row["run_id"],
            setting=row["setting"],
            seed=int(row["seed"]),
            epe=float(row["epe"]),
            auc=float(row["auc"]),
            pck=pck,
            near_zero_frac=float(row["near_zero_frac"]),
            abs_max=float(row["abs_max"]),
        ))
    return records
