"""NME, yaw binning, per-bin summaries and CED curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, OutOfRange
from .model import (MorphableModel, as_params, euler_from_rotation, project,
                    rotation_from_quaternion)

YAW_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))
BIN_LABELS = ("[0,30]", "[30,60]", "[60,90]")


@dataclass
class EvalRecord:
    sample_id: int
    pred: np.ndarray | None
    gt: np.ndarray | None
    yaw: float
    nme: float


def sample_landmarks(model: MorphableModel, p) -> np.ndarray:
    return project(model, p).reshape(-1, 2)[model.landmark_indices]


def nme(pred, gt, mask=None) -> float:
    """Mean point error over sqrt(w * h) of the ground-truth hull, in percent.

    ``mask`` restricts both the error and the hull to a landmark subset
    (e.g. visible points only).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, gt = pred[mask], gt[mask]
    if len(gt) == 0:
        raise DegenerateInput("no landmarks to evaluate")
    w, h = np.ptp(gt, axis=0)
    size = np.sqrt(w * h)
    if not size > 0:
        raise DegenerateInput("ground-truth landmarks have a zero-area hull")
    return float(100.0 * np.mean(np.linalg.norm(pred - gt, axis=1)) / size)


def yaw_of(q) -> float:
    """Yaw in degrees from the normalised quaternion (pitch -> yaw -> roll order)."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    R = rotation_from_quaternion(q / np.linalg.norm(q))
    yaw = np.rad2deg(euler_from_rotation(R)[1])
    if abs(yaw) > 90.0 + 1e-9:
        raise OutOfRange(f"yaw {yaw} outside [-90, 90]")
    return float(yaw)


def yaw_bin(yaw: float) -> int:
    """Index into YAW_BINS; a boundary goes to the lower bin, 90 to the last."""
    a = abs(float(yaw))
    if a > 90.0:
        raise OutOfRange(f"|yaw| = {a} exceeds 90 degrees")
    if a <= 30.0:
        return 0
    if a <= 60.0:
        return 1
    return 2


def make_record(model: MorphableModel, sample_id, p_pred, p_gt, mask=None) -> EvalRecord:
    pred = sample_landmarks(model, p_pred)
    gt = sample_landmarks(model, p_gt)
    return EvalRecord(sample_id, pred, gt, yaw_of(as_params(model, p_gt).q),
                      nme(pred, gt, mask))


def ced(errors, thresholds) -> np.ndarray:
    """Fraction of errors <= t for each threshold."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    return np.searchsorted(e, np.asarray(thresholds, dtype=np.float64), side="right") / e.size


def summarize(records, thresholds=None, ddof: int = 1) -> dict:
    """Per-bin mean NME, mean of the bin means, their std and the CED curve.

    ``ddof=1`` (sample std over the bins) reproduces the published
    robustness column; pass 0 for the population convention. Empty bins
    are reported as None and skipped.
    """
    records = list(records)
    if not records:
        raise DegenerateInput("no records to summarise")
    errors = np.array([r.nme for r in records])
    bins = np.array([yaw_bin(r.yaw) for r in records])
    per_bin = []
    for k in range(len(YAW_BINS)):
        sel = errors[bins == k]
        per_bin.append(float(sel.mean()) if sel.size else None)
    present = np.array([m for m in per_bin if m is not None])
    std = float(present.std(ddof=ddof)) if present.size > ddof else 0.0
    if thresholds is None:
        thresholds = np.linspace(0.0, max(10.0, float(np.ceil(errors.max()))), 101)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    return {
        "bins": dict(zip(BIN_LABELS, per_bin)),
        "counts": dict(zip(BIN_LABELS, [int((bins == k).sum()) for k in range(3)])),
        "mean": float(present.mean()),
        "std": std,
        "overall": float(errors.mean()),
        "thresholds": thresholds,
        "ced": ced(errors, thresholds),
    }


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "yaw", "nme"])
        for r in records:
            w.writerow([r.sample_id, repr(float(r.yaw)), repr(float(r.nme))])


def read_records_csv(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        return [EvalRecord(int(row["id"]), None, None, float(row["yaw"]), float(row["nme"]))
                for row in csv.DictReader(fh)]


def write_ced_csv(path, thresholds, fractions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fraction"])
        for t, f in zip(thresholds, fractions):
            w.writerow([repr(float(t)), repr(float(f))])


def ced_svg(thresholds, fractions, width=400, height=300) -> str:
    """Minimal standalone SVG polyline of a CED curve."""
    t = np.asarray(thresholds, dtype=np.float64)
    f = np.asarray(fractions, dtype=np.float64)
    span = t.max() - t.min() or 1.0
    xs = 40 + (t - t.min()) / span * (width - 60)
    ys = height - 30 - f * (height - 50)
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<line x1="40" y1="{height - 30}" x2="{width - 20}" y2="{height - 30}" stroke="black"/>'
            f'<line x1="40" y1="20" x2="40" y2="{height - 30}" stroke="black"/>'
            f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>'
            f'<text x="{width / 2}" y="{height - 5}" font-size="12">NME (%)</text></svg>')
