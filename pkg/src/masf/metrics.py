"""Detection metrics: precision, recall, all-points AP, mAP@0.5 and mAP@0.5:0.95."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from masf.errors import DataError
from masf.postproc import iou_matrix

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)


@dataclass
class PRCurve:
    points: list  # (recall, precision), recall ascending
    n_gt: int


@dataclass
class EvalReport:
    per_class_ap: dict
    map50: float
    map5095: float
    precision: float
    recall: float
    params_m: float = 0.0
    gflops: float = 0.0
    flagged_classes: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def table(self) -> str:
        """Aligned plain-text table with tab-separated columns."""
        head = ["P", "R", "mAP50 (%)", "mAP50:95 (%)", "Params (M)", "GFLOPs"]
        row = [f"{self.precision:.3f}", f"{self.recall:.3f}", f"{100 * self.map50:.1f}",
               f"{100 * self.map5095:.1f}", f"{self.params_m:.3f}", f"{self.gflops:.3f}"]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        fmt = "\t".join("{:<%d}" % w for w in widths)
        return fmt.format(*head) + "\n" + fmt.format(*row) + "\n"


def match_predictions(dets, gts, iou_threshold: float) -> np.ndarray:
    """TP flags for ``dets`` (score-descending) against ``gts`` of one image and class.

    Each detection takes the highest-IoU unmatched ground truth at or above the
    threshold; IoU ties go to the lower ground-truth index.
    """
    flags = np.zeros(len(dets), dtype=bool)
    if not len(dets) or not len(gts):
        return flags
    ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
    used = np.zeros(len(gts), dtype=bool)
    for k in range(len(dets)):
        cand = np.where(used, -1.0, ious[k])
        j = int(np.argmax(cand))  # first maximum wins ties
        if cand[j] >= iou_threshold:
            used[j] = True
            flags[k] = True
    return flags


def precision_recall(flags, n_gt: int) -> tuple[float, float]:
    flags = np.asarray(flags, dtype=bool)
    tp = int(flags.sum())
    n = flags.size
    return (tp / n if n else 0.0), (tp / n_gt if n_gt else 0.0)


def pr_curve(flags, n_gt: int) -> PRCurve:
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    rank = np.arange(1, flags.size + 1)
    recall = tp / n_gt if n_gt else np.zeros(flags.size)
    return PRCurve(list(zip(recall.tolist(), (tp / rank).tolist())), n_gt)


def average_precision(flags, n_gt: int, method: str = "all_points") -> float:
    """Area under the enveloped P-R curve for score-descending TP flags."""
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0 or flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[0.0], tp / np.arange(1, flags.size + 1)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if method == "all_points":
        return float(np.sum(np.diff(recall) * envelope[1:]))
    if method == "11_point":
        vals = []
        for r in np.linspace(0, 1, 11):
            hit = recall >= r
            vals.append(envelope[hit].max() if hit.any() else 0.0)
        return float(np.mean(vals))
    raise ValueError(f"unknown AP method {method!r}")


def mean_ap(per_class_ap: dict) -> float:
    if not per_class_ap:
        raise DataError("no evaluable classes")
    return float(np.mean(list(per_class_ap.values())))


def _class_flags(predictions: dict, ground_truth: dict, thresholds):
    """Per class: (score array, flags per threshold, n_gt) pooled over images."""
    classes = {g.class_id for gts in ground_truth.values() for g in gts}
    classes |= {d.class_id for dets in predictions.values() for d in dets}
    out = {}
    for cls in sorted(classes):
        scores, flags, n_gt = [], [[] for _ in thresholds], 0
        for image_id in sorted(set(ground_truth) | set(predictions), key=str):
            g = [x for x in ground_truth.get(image_id, []) if x.class_id == cls]
            d = sorted((x for x in predictions.get(image_id, []) if x.class_id == cls),
                       key=lambda x: -x.score)
            n_gt += len(g)
            scores.extend(x.score for x in d)
            for t, thr in enumerate(thresholds):
                flags[t].append(match_predictions(d, g, thr))
        scores = np.asarray(scores, dtype=np.float64)
        order = np.argsort(-scores, kind="stable")
        out[cls] = (scores[order], [np.concatenate(f)[order] if f else np.zeros(0, bool)
                                    for f in flags], n_gt)
    return out


def evaluate(predictions: dict, ground_truth: dict, method: str = "all_points") -> EvalReport:
    """Full report over images keyed by id; ``ground_truth`` values are GroundTruth lists."""
    pooled = _class_flags(predictions, ground_truth, IOU_THRESHOLDS)
    per_t = [dict() for _ in IOU_THRESHOLDS]
    flagged = []
    tp50 = n_det = n_gt_total = 0
    for cls, (_, flags, n_gt) in pooled.items():
        if n_gt == 0:
            flagged.append(cls)
            continue
        for t in range(len(IOU_THRESHOLDS)):
            per_t[t][cls] = average_precision(flags[t], n_gt, method)
        tp50 += int(flags[0].sum())
        n_det += flags[0].size
        n_gt_total += n_gt
    map50 = mean_ap(per_t[0])
    map5095 = float(np.mean([mean_ap(d) for d in per_t]))
    return EvalReport(
        per_class_ap=per_t[0], map50=map50, map5095=map5095,
        precision=tp50 / n_det if n_det else 0.0,
        recall=tp50 / n_gt_total if n_gt_total else 0.0,
        flagged_classes=flagged,
    )


def map_over_thresholds(predictions: dict, ground_truth: dict) -> tuple[float, float]:
    r = evaluate(predictions, ground_truth)
    return r.map50, r.map5095


def class_pr_curves(predictions: dict, ground_truth: dict, iou_threshold: float = 0.5) -> dict:
    pooled = _class_flags(predictions, ground_truth, [iou_threshold])
    return {cls: pr_curve(f[0], n) for cls, (_, f, n) in pooled.items() if n}
