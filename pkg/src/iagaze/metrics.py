"""Saliency metrics (CC, KL divergence, SIM, AUC) and the dataset evaluator.

Definitions follow the MIT saliency benchmark. KL is weighted by the ground
truth: ``sum G * log(G / (P + eps) + eps)`` on sum-normalized maps.
"""
from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FixationSet, fixations_to_heatmap, resize_map
from .errors import MetricError

EPS = 2.220446e-16
# Published full-scale numbers for IA with the ViT-B/16 encoder on held-out
# interaction categories. Reported alongside full-scale runs, never asserted.
REFERENCE_FULL_SCALE = {"cc": 0.4013, "kldiv": 2.7114, "sim": 0.7205, "auc": 0.5953}
AUC_VARIANT = "judd-positives/all-pixel-negatives, full threshold sweep (ties count 1/2)"


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def _as_distribution(m, name):
    if np.any(m < 0):
        raise MetricError(f"{name} map has negative values")
    s = m.sum()
    if not s > 0:
        raise MetricError(f"{name} map sums to zero")
    return m / s


def cc(pred, gt) -> float:
    p, g = _pair(pred, gt)
    sp, sg = p.std(), g.std()
    if sp == 0 or sg == 0:
        warnings.warn("cc: constant map, correlation defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.mean((p - p.mean()) / sp * ((g - g.mean()) / sg)))


def kldiv(pred, gt) -> float:
    p, g = _pair(pred, gt)
    P = _as_distribution(p, "prediction")
    G = _as_distribution(g, "ground-truth")
    return float(np.sum(G * np.log(G / (P + EPS) + EPS)))


def sim(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.minimum(_as_distribution(p, "prediction"), _as_distribution(g, "ground-truth")).sum())


def fixation_mask(fixations: FixationSet, rows: int, cols: int) -> np.ndarray:
    """Boolean map of fixated pixels; points round to the nearest pixel."""
    mask = np.zeros((rows, cols), dtype=bool)
    for p in fixations.points:
        r = min(max(int(np.floor(p.y + 0.5)), 0), rows - 1)
        c = min(max(int(np.floor(p.x + 0.5)), 0), cols - 1)
        mask[r, c] = True
    return mask


def auc(pred, fixations: FixationSet) -> float:
    """Area under the ROC of fixated vs non-fixated pixels.

    Positives are the deduplicated fixated pixels, negatives every other
    pixel. The threshold sweeps every distinct prediction value, so the
    trapezoidal area equals ``P[pos > neg] + 0.5 * P[pos == neg]``.
    """
    s = np.asarray(pred, dtype=np.float64)
    if not fixations.points:
        raise MetricError(f"{fixations.sample_id}: AUC needs at least one fixation")
    mask = fixation_mask(fixations, *s.shape)
    pos, neg = s[mask], s[~mask]
    if neg.size == 0:
        raise MetricError(f"{fixations.sample_id}: every pixel is fixated, no negatives")
    thresholds = np.unique(s)[::-1]
    # counts of values >= each threshold
    tp = np.searchsorted(np.sort(-pos), -thresholds, side="right") / pos.size
    fp = np.searchsorted(np.sort(-neg), -thresholds, side="right") / neg.size
    tpr = np.concatenate([[0.0], tp, [1.0]])
    fpr = np.concatenate([[0.0], fp, [1.0]])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))


@dataclass
class MetricReport:
    cc: float
    kldiv: float
    sim: float
    auc: float
    n_samples: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def sample_metrics(pred, gt, fixations) -> dict:
    return {"cc": cc(pred, gt), "kldiv": kldiv(pred, gt), "sim": sim(pred, gt), "auc": auc(pred, fixations)}


def evaluate(records, predictor, split=None, sigma=None, jobs: int = 1, csv_path=None) -> tuple[MetricReport, list[dict]]:
    """Score predictions against fixation heatmaps, averaging per-sample metrics.

    ``predictor`` is either a mapping ``sample_id -> map`` or a callable
    taking an ``HOISample``. Predictions are bilinearly resized to the image
    size when they differ. With ``split``, only its test ids are scored.
    """
    if split is not None:
        keep = set(split.test_ids)
        records = [r for r in records if r[0].sample_id in keep]
    if not records:
        raise MetricError("no samples to evaluate")
    if callable(predictor):
        preds = {s.sample_id: predictor(s) for s, _ in records}
    else:
        preds = dict(predictor)
    missing = [s.sample_id for s, _ in records if preds.get(s.sample_id) is None]
    if missing:
        raise MetricError(f"missing predictions for {missing}")

    def score(rec):
        sample, fix = rec
        gt = fixations_to_heatmap(fix, sample.width, sample.height, sigma)
        pred = np.asarray(preds[sample.sample_id], dtype=np.float64)
        if pred.shape != gt.shape:
            pred = resize_map(pred, *gt.shape, mode="bilinear")
        return {"sample_id": sample.sample_id, **sample_metrics(pred, gt, fix)}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(score, records))
    else:
        rows = [score(r) for r in records]
    means = {k: float(np.mean([r[k] for r in rows])) for k in ("cc", "kldiv", "sim", "auc")}
    report = MetricReport(**means, n_samples=len(rows), meta={"auc_variant": AUC_VARIANT})
    if csv_path is not None:
        write_rows(rows, csv_path)
    return report, rows


def write_rows(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["sample_id", "cc", "kldiv", "sim", "auc"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})


def write_report(report: MetricReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
