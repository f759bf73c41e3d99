"""Classification and registration metrics, plus metric report writers.

Undefined metrics (no positive labels) are returned as NaN, never as 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

UNDEFINED = float("nan")


def _binary(x, name):
    x = np.asarray(x).reshape(-1)
    if not np.isin(x, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return x.astype(bool)


def precision_recall(predictions, labels) -> tuple[float, float]:
    pred, lab = _binary(predictions, "predictions"), _binary(labels, "labels")
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    tp = np.sum(pred & lab)
    p = tp / pred.sum() if pred.sum() else 0.0
    r = tp / lab.sum() if lab.sum() else UNDEFINED
    return float(p), float(r)


def f1(predictions, labels) -> float:
    pred, lab = _binary(predictions, "predictions"), _binary(labels, "labels")
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    if not lab.any():
        return UNDEFINED
    tp = int(np.sum(pred & lab))
    if tp == 0:
        return 0.0
    p = tp / pred.sum()
    r = tp / lab.sum()
    return float(2 * p * r / (p + r))


@dataclass
class PRCurve:
    thresholds: np.ndarray  # descending scores
    precision: np.ndarray
    recall: np.ndarray
    n_positive: int


def pr_curve(scores, labels) -> PRCurve:
    """Precision and recall at every rank of the descending-score order.

    Ties are broken by the original input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    lab = _binary(labels, "labels")
    order = np.argsort(-scores, kind="stable")
    hits = lab[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    n_pos = int(lab.sum())
    recall = tp / n_pos if n_pos else np.full(len(hits), np.nan)
    return PRCurve(scores[order], tp / ranks, recall, n_pos)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean of the precision at the rank of each positive."""
    curve = pr_curve(scores, labels)
    if curve.n_positive == 0:
        return UNDEFINED
    lab = _binary(labels, "labels")[np.argsort(-np.asarray(scores, float).reshape(-1),
                                               kind="stable")]
    return float(curve.precision[lab].sum() / curve.n_positive)


def rotation_error(R_hat, R) -> float:
    """Angle of R_hat^T R in degrees."""
    R_hat, R = np.asarray(R_hat, float), np.asarray(R, float)
    c = (np.trace(R_hat.T @ R) - 1) / 2
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t_hat, t) -> float:
    return float(np.linalg.norm(np.asarray(t_hat, float) - np.asarray(t, float)))


@dataclass
class RegistrationOutcome:
    rotation_error: float  # degrees; NaN for failed registrations
    translation_error: float
    failed: bool = False


def evaluate_registration(estimate, truth) -> RegistrationOutcome:
    """Compare an estimated RigidTransform (None on failure) against the truth."""
    if estimate is None:
        return RegistrationOutcome(UNDEFINED, UNDEFINED, True)
    return RegistrationOutcome(rotation_error(estimate.R, truth.R),
                               translation_error(estimate.t, truth.t))


def success_rate(results, rot_thresh_deg: float = 15.0, trans_thresh: float = 0.30) -> float:
    if rot_thresh_deg <= 0 or trans_thresh <= 0:
        raise ValueError("thresholds must be positive")
    results = list(results)
    if not results:
        raise ValueError("empty result set")
    ok = [not r.failed and r.rotation_error < rot_thresh_deg
          and r.translation_error < trans_thresh for r in results]
    return float(np.mean(ok))


def registration_summary(results, rot_thresh_deg: float = 15.0,
                         trans_thresh: float = 0.30) -> dict:
    """Success rate plus mean errors over the successful registrations only."""
    rate = success_rate(results, rot_thresh_deg, trans_thresh)
    good = [r for r in results if not r.failed and r.rotation_error < rot_thresh_deg
            and r.translation_error < trans_thresh]
    return {
        "success_rate": rate,
        "rotation_error": float(np.mean([r.rotation_error for r in good])) if good else UNDEFINED,
        "translation_error": (float(np.mean([r.translation_error for r in good]))
                              if good else UNDEFINED),
        "n": len(results),
    }


@dataclass
class MetricRecord:
    task: str
    model: str
    seed: int
    metric: str
    value: float


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec) if isinstance(rec, MetricRecord) else rec,
                                sort_keys=True) + "\n")


def write_csv(path, records: list[MetricRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "model", "seed", "metric", "value"])
        for r in records:
            writer.writerow([r.task, r.model, r.seed, r.metric, repr(float(r.value))])
