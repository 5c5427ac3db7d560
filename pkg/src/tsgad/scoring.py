"""Deviation scoring, threshold calibration, and point-wise metrics.

Each timestamp in a split gets one forecast (from the window ending just
before it) and one reconstruction (the last row of the window ending at it).
Absolute errors are normalized per sensor by median/IQR statistics computed
on the validation split, the anomaly score A(t) is the max over both heads
and all sensors, and the alarm threshold is the validation maximum of A(t)
with a strict-inequality verdict rule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import DataError, TimeSeriesDataset, VAL, TEST, split_range
from .fileio import atomic_write_text
from .model import Detector

IQR_FLOOR = 1e-6


@dataclass
class HeadOutputs:
    """Per-timestamp model outputs aligned to their scored timestamps."""

    times: np.ndarray  # (M,) timestamps [split_start + d, split_end]
    truth: np.ndarray  # (M, N) ground-truth rows
    pred: np.ndarray | None  # (M, N) one-step forecasts
    recon: np.ndarray | None  # (M, N) reconstructed rows


def head_outputs(
    det: Detector, ds: TimeSeriesDataset, which: int, batch: int = 256
) -> HeadOutputs:
    """Sweep a split with the model in evaluation mode.

    Window positions run one step past the forecast sweep so every scored
    timestamp t also has the reconstruction row of the window ending at t.
    """
    d = det.config.window
    span = split_range(ds, which)
    if span is None:
        raise DataError(f"split {which} is empty")
    s, e = span
    if e - s + 1 <= d:
        raise DataError(
            f"split {which} has {e - s + 1} rows; too short for window d={d}"
        )
    positions = np.arange(s, e - d + 2)
    windows = np.stack([ds.values[a : a + d].T for a in positions])
    mask = None if det.config.no_pred else det.structure()[0]

    preds, recons = [], []
    for i in range(0, len(positions), batch):
        out = det.forward(windows[i : i + batch], record=False, mask=mask)
        if out.pred is not None:
            preds.append(out.pred.data)
        if out.recon is not None:
            recons.append(out.recon.data[:, -1, :])  # last reconstructed row

    times = np.arange(s + d, e + 1)
    truth = ds.values[times]
    pred = None
    if preds:
        all_preds = np.concatenate(preds)  # position a forecasts t = a + d
        pred = all_preds[times - d - s]
    recon = None
    if recons:
        all_recons = np.concatenate(recons)  # position a reconstructs t = a + d - 1
        recon = all_recons[times - d + 1 - s]
    return HeadOutputs(times, truth, pred, recon)


@dataclass
class ErrSeries:
    """Per-sensor absolute errors for each head, aligned to `times`."""

    times: np.ndarray
    pred: np.ndarray | None
    recon: np.ndarray | None


def compute_errors(outputs: HeadOutputs) -> ErrSeries:
    pred = None if outputs.pred is None else np.abs(outputs.truth - outputs.pred)
    recon = None if outputs.recon is None else np.abs(outputs.truth - outputs.recon)
    return ErrSeries(outputs.times, pred, recon)


@dataclass
class RobustStats:
    """Validation-split medians and inter-quartile ranges, per sensor."""

    pred_med: np.ndarray | None
    pred_iqr: np.ndarray | None
    recon_med: np.ndarray | None
    recon_iqr: np.ndarray | None


def _med_iqr(err: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if err.shape[0] == 0:
        raise DataError("cannot compute robust statistics from empty errors")
    med = np.median(err, axis=0)
    q1, q3 = np.percentile(err, [25.0, 75.0], axis=0)
    return med, q3 - q1


def robust_stats(errs: ErrSeries) -> RobustStats:
    pm = pi = rm = ri = None
    if errs.pred is not None:
        pm, pi = _med_iqr(errs.pred)
    if errs.recon is not None:
        rm, ri = _med_iqr(errs.recon)
    return RobustStats(pm, pi, rm, ri)


def robust_normalize(errs: ErrSeries, stats: RobustStats) -> ErrSeries:
    """(err - median) / max(IQR, floor), per sensor and head."""

    def norm(err, med, iqr):
        if err is None:
            return None
        if med is None:
            raise DataError("statistics missing for a head that produced errors")
        return (err - med) / np.maximum(iqr, IQR_FLOOR)

    return ErrSeries(
        errs.times,
        norm(errs.pred, stats.pred_med, stats.pred_iqr),
        norm(errs.recon, stats.recon_med, stats.recon_iqr),
    )


def aggregate(scores: ErrSeries) -> np.ndarray:
    """A(t): max over both heads and all sensors of the normalized scores."""
    parts = [p for p in (scores.pred, scores.recon) if p is not None]
    if not parts:
        raise DataError("no head scores to aggregate")
    return np.concatenate(parts, axis=1).max(axis=1)


def calibrate_threshold(val_scores: np.ndarray) -> float:
    if val_scores.size == 0:
        raise DataError("cannot calibrate a threshold on an empty series")
    return float(np.max(val_scores))


def verdicts(scores: np.ndarray, threshold: float) -> np.ndarray:
    return (scores > threshold).astype(np.int64)  # strict: equality is normal


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


def metrics(verdict: np.ndarray, labels: np.ndarray) -> Metrics:
    verdict = np.asarray(verdict)
    labels = np.asarray(labels)
    if verdict.shape != labels.shape:
        raise DataError(f"verdicts {verdict.shape} vs labels {labels.shape}")
    tp = int(np.sum((verdict == 1) & (labels == 1)))
    fp = int(np.sum((verdict == 1) & (labels == 0)))
    fn = int(np.sum((verdict == 0) & (labels == 1)))
    tn = int(np.sum((verdict == 0) & (labels == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall
        else 0.0
    )
    return Metrics(precision, recall, f1, tp, fp, fn, tn)


@dataclass
class ScoreResult:
    times: np.ndarray
    a_pred: np.ndarray | None
    a_recon: np.ndarray | None
    scores: np.ndarray  # A(t)
    threshold: float
    verdict: np.ndarray
    labels: np.ndarray | None


def score_dataset(
    det: Detector, ds: TimeSeriesDataset, which: int = TEST, batch: int = 256
) -> ScoreResult:
    """Calibrate on the validation split, then score `which`."""
    val_errs = compute_errors(head_outputs(det, ds, VAL, batch))
    stats = robust_stats(val_errs)
    threshold = calibrate_threshold(aggregate(robust_normalize(val_errs, stats)))

    out = head_outputs(det, ds, which, batch)
    scores = robust_normalize(compute_errors(out), stats)
    agg = aggregate(scores)
    labels = None if ds.labels is None else ds.labels[out.times]
    return ScoreResult(
        out.times, scores.pred, scores.recon, agg, threshold, verdicts(agg, threshold), labels
    )


def write_scores(
    path: str,
    result: ScoreResult,
    sensor_names: list[str],
    per_sensor: bool = False,
) -> None:
    """Score CSV: `# threshold=...` comment line, then one row per timestamp."""
    header = ["t", "A", "verdict"]
    if result.labels is not None:
        header.append("label")
    if per_sensor:
        if result.a_pred is not None:
            header += [f"pred_{s}" for s in sensor_names]
        if result.a_recon is not None:
            header += [f"recon_{s}" for s in sensor_names]
    lines = [f"# threshold={result.threshold!r}", ",".join(header)]
    for i, t in enumerate(result.times):
        row = [str(int(t)), repr(float(result.scores[i])), str(int(result.verdict[i]))]
        if result.labels is not None:
            row.append(str(int(result.labels[i])))
        if per_sensor:
            if result.a_pred is not None:
                row += [repr(float(x)) for x in result.a_pred[i]]
            if result.a_recon is not None:
                row += [repr(float(x)) for x in result.a_recon[i]]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_scores(path: str) -> tuple[float, list[dict]]:
    """Parse a score CSV back into (threshold, row dicts)."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# threshold="):
            raise DataError(f"{path}: missing threshold header line")
        try:
            threshold = float(first.split("=", 1)[1])
        except ValueError:
            raise DataError(f"{path}: bad threshold value {first!r}") from None
        rows = []
        for raw in csv.DictReader(fh):
            try:
                row = {
                    "t": int(raw["t"]),
                    "A": float(raw["A"]),
                    "verdict": int(raw["verdict"]),
                }
            except (KeyError, TypeError, ValueError):
                raise DataError(f"{path}: malformed score row {raw!r}") from None
            if raw.get("label") is not None:
                row["label"] = int(raw["label"])
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no score rows")
    return threshold, rows
