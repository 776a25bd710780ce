"""Mask IoU, COCO-style mask average precision and report files.

The JSON report has this shape (keys are written sorted)::

    {
      "AP": float, "AP50": float, "AP75": float,
      "config": {...} | null,
      "seeds": [int, ...],
      "wall_clock": float | null,
      "scenes": [{"name": str, "ious": [float, ...],
                  "trace": [{step, phase, lr, ...}, ...]}, ...]
    }
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def mask_iou(pred, gt):
    """Intersection over union of two binary masks; two empty masks count as 1."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask sizes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass(frozen=True)
class Detection:
    image: str
    category: int
    score: float
    mask: np.ndarray


@dataclass(frozen=True)
class GroundTruth:
    image: str
    category: int
    mask: np.ndarray


def _match(dets, gts, ious, threshold):
    """Greedy COCO matching; returns a TP flag per detection (score order)."""
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for d in range(len(dets)):
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        for g in range(len(gts)):
            if taken[g] or ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
    return tp


def interpolated_precision(tp, n_gt):
    """101-point interpolated precision for TP flags in descending-score order."""
    tp = np.asarray(tp, dtype=bool)
    if n_gt == 0:
        raise ValueError("no ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _category_ap(dets, gts, thresholds):
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    dets = [dets[k] for k in order]
    # IoU only between a detection and ground truths of the same image
    ious = np.zeros((len(dets), len(gts)))
    for d, det in enumerate(dets):
        for g, gt in enumerate(gts):
            if det.image == gt.image:
                ious[d, g] = mask_iou(det.mask, gt.mask)
    out = []
    for t in thresholds:
        tp = np.zeros(len(dets), dtype=bool)
        for image in sorted({gt.image for gt in gts} | {d.image for d in dets}):
            di = [k for k, det in enumerate(dets) if det.image == image]
            gi = [k for k, gt in enumerate(gts) if gt.image == image]
            if di:
                tp[di] = _match(di, gi, ious[np.ix_(di, gi)], t)
        out.append(interpolated_precision(tp, len(gts)))
    return np.array(out)


def average_precision(detections, ground_truths, thresholds=IOU_THRESHOLDS):
    """Mask AP averaged over IoU thresholds and categories.

    Returns ``(AP, AP50, AP75)``. Categories without ground truth are
    skipped; with no ground truth at all every value is 0.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    categories = sorted({g.category for g in ground_truths})
    if not categories:
        return 0.0, 0.0, 0.0
    table = np.array([
        _category_ap([d for d in detections if d.category == c],
                     [g for g in ground_truths if g.category == c], thresholds)
        for c in categories
    ])
    per_threshold = table.mean(axis=0)

    def at(t):
        hit = np.isclose(thresholds, t)
        return float(per_threshold[hit][0]) if hit.any() else float("nan")

    return float(per_threshold.mean()), at(0.5), at(0.75)


@dataclass
class MetricsReport:
    scenes: list = field(default_factory=list)  # {"name", "ious", "trace"}
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    config: dict = None
    seeds: list = field(default_factory=list)
    wall_clock: float = None

    def to_dict(self):
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "config": self.config,
            "seeds": list(self.seeds),
            "wall_clock": self.wall_clock,
            "scenes": [{"name": s["name"], "ious": list(s["ious"]), "trace": list(s.get("trace", []))}
                       for s in self.scenes],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(scenes=d["scenes"], ap=d["AP"], ap50=d["AP50"], ap75=d["AP75"],
                   config=d["config"], seeds=d["seeds"], wall_clock=d["wall_clock"])

    def mean_iou(self):
        ious = [v for s in self.scenes for v in s["ious"]]
        return float(np.mean(ious)) if ious else float("nan")


def report_json(report):
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def emit_report(report, path):
    Path(path).write_text(report_json(report))


def read_report(path):
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def emit_csv(report, path):
    """One row per instance plus a trailing summary row."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["scene", "instance", "iou"])
        for s in report.scenes:
            for i, v in enumerate(s["ious"]):
                out.writerow([s["name"], i, f"{v:.6f}"])
        out.writerow(["AP", report.ap, ""])
        out.writerow(["AP50", report.ap50, ""])
        out.writerow(["AP75", report.ap75, ""])


def evaluate(names, prob_masks, gt_masks, categories, scores=None, traces=None, config=None,
             seeds=(), wall_clock=None):
    """Score final masks against ground truth.

    ``prob_masks``, ``gt_masks``, ``categories`` (and ``scores``) are nested
    per scene, per instance. Masks are binarised at 0.5. Without explicit
    scores the mean probability inside the binarised mask is used.
    """
    from .matching import prediction_score

    scenes, dets, gts = [], [], []
    for k, name in enumerate(names):
        ious = []
        for i, (prob, gt) in enumerate(zip(prob_masks[k], gt_masks[k])):
            pred = np.asarray(prob) > 0.5
            ious.append(mask_iou(pred, gt))
            score = prediction_score(prob) if scores is None else scores[k][i]
            dets.append(Detection(name, int(categories[k][i]), float(score), pred))
            gts.append(GroundTruth(name, int(categories[k][i]), np.asarray(gt, dtype=bool)))
        scenes.append({"name": name, "ious": ious, "trace": traces[k] if traces else []})
    ap, ap50, ap75 = average_precision(dets, gts)
    return MetricsReport(scenes, ap, ap50, ap75, config, list(seeds), wall_clock)
