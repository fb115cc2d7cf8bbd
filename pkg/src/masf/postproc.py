"""Raw head outputs to detections: decode, IoU and per-class greedy NMS."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from masf.errors import ConfigError, ShapeError

SIZE_CAP = 8.0  # box side limit, in strides
LOG_CAP = math.log(SIZE_CAP)


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    score: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class GroundTruth:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def longest_side(self) -> float:
        return max(self.x2 - self.x1, self.y2 - self.y1)


def softplus(z):
    return np.logaddexp(0.0, z)


def bounded_size(t):
    """Smooth ``min(exp(t), SIZE_CAP)``: ``exp(log cap - softplus(log cap - t))``."""
    return np.exp(LOG_CAP - softplus(LOG_CAP - np.asarray(t, dtype=np.float64)))


def sigmoid(z):
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(z, dtype=np.float64))


def decode_boxes(raw: np.ndarray, stride: int) -> np.ndarray:
    """Per-cell boxes ``(N, H, W, 4)`` as x1, y1, x2, y2 from a ``(N, 4 + C, H, W)`` map."""
    _, _, h, w = raw.shape
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    with np.errstate(invalid="ignore", over="ignore"):
        return _boxes(raw, gx, gy, stride)


def _boxes(raw, gx, gy, stride):
    cx = (gx + sigmoid(raw[:, 0])) * stride
    cy = (gy + sigmoid(raw[:, 1])) * stride
    bw = bounded_size(raw[:, 2]) * stride
    bh = bounded_size(raw[:, 3]) * stride
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)


def decode_arrays(raw: dict, config, score_threshold: float = 0.25,
                  stats: dict | None = None) -> list[tuple]:
    """Per image ``(boxes (k, 4), class_ids (k,), scores (k,))`` above ``score_threshold``.

    ``config`` supplies ``strides`` (level -> stride), ``image_size`` and ``num_classes``.
    Cells with a non-finite regressor are skipped and counted in
    ``stats["nonfinite_cells"]``.
    """
    strides, image_size = config.strides, config.image_size
    for lv, arr in raw.items():
        c = arr.shape[1]
        if c != 4 + config.num_classes:
            raise ShapeError(f"level {lv}: expected {4 + config.num_classes} channels, got {c}")
    batch = next(iter(raw.values())).shape[0]
    parts = [[] for _ in range(batch)]
    skipped = 0
    for lv, arr in raw.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        boxes = decode_boxes(arr, strides[lv])
        scores = sigmoid(arr[:, 4:]).transpose(0, 2, 3, 1)
        finite = np.all(np.isfinite(arr[:, :4]), axis=1) & np.all(np.isfinite(boxes), axis=-1)
        skipped += int((~finite).sum())
        boxes = np.clip(np.where(finite[..., None], boxes, 0.0), 0.0, float(image_size))
        valid = finite & (boxes[..., 2] > boxes[..., 0]) & (boxes[..., 3] > boxes[..., 1])
        hit = (scores >= score_threshold) & valid[..., None]
        n, i, j, c = np.nonzero(hit)
        for k in range(batch):
            sel = n == k
            parts[k].append((boxes[k, i[sel], j[sel]], c[sel], scores[k, i[sel], j[sel], c[sel]]))
    if stats is not None:
        stats["nonfinite_cells"] = stats.get("nonfinite_cells", 0) + skipped
    out = []
    for p in parts:
        if not p:
            out.append((np.zeros((0, 4)), np.zeros(0, int), np.zeros(0)))
            continue
        out.append(tuple(np.concatenate(x) for x in zip(*p)))
    return out


def to_detections(boxes, class_ids, scores) -> list[Detection]:
    return [Detection(float(b[0]), float(b[1]), float(b[2]), float(b[3]), int(c), float(s))
            for b, c, s in zip(boxes, class_ids, scores)]


def decode(raw: dict, config, score_threshold: float = 0.25,
           stats: dict | None = None) -> list[list[Detection]]:
    """One list of detections per image; every (cell, class) pair above threshold is emitted."""
    return [to_detections(*t) for t in decode_arrays(raw, config, score_threshold, stats)]


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms_indices(boxes, scores, class_ids, iou_threshold: float = 0.5) -> np.ndarray:
    """Survivor indices ordered by (score desc, index asc); suppression is per class."""
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.lexsort((np.arange(scores.size), -scores))
    keep = np.zeros(scores.size, dtype=bool)
    for cls in np.unique(class_ids):
        idx = order[class_ids[order] == cls]
        ious = iou_matrix(boxes[idx], boxes[idx])
        suppressed = np.zeros(idx.size, dtype=bool)
        for k in range(idx.size):
            if suppressed[k]:
                continue
            keep[idx[k]] = True
            suppressed |= ious[k] > iou_threshold
    return order[keep[order]]


def nms(dets: list[Detection], iou_threshold: float = 0.5,
        max_det: int | None = None) -> list[Detection]:
    """Greedy per-class suppression; ties in score resolve by input order."""
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not dets:
        return []
    keep = nms_indices([d.box for d in dets], [d.score for d in dets],
                       [d.class_id for d in dets], iou_threshold)
    return [dets[i] for i in keep[:max_det]]


def postprocess(raw: dict, config, score_threshold: float = 0.25, iou_threshold: float = 0.5,
                pre_nms_topk: int = 1000, max_det: int = 300,
                stats: dict | None = None) -> list[list[Detection]]:
    """Decode, keep the ``pre_nms_topk`` best scores, suppress, cap at ``max_det``."""
    out = []
    for boxes, cls, scores in decode_arrays(raw, config, score_threshold, stats):
        if scores.size > pre_nms_topk:
            top = np.lexsort((np.arange(scores.size), -scores))[:pre_nms_topk]
            top.sort()
            boxes, cls, scores = boxes[top], cls[top], scores[top]
        keep = nms_indices(boxes, scores, cls, iou_threshold)[:max_det]
        out.append(to_detections(boxes[keep], cls[keep], scores[keep]))
    return out


def write_predictions(path, predictions: dict):
    """JSON Lines dump: one ``{image_id, class_id, score, x1, y1, x2, y2}`` per detection."""
    with open(path, "w") as fh:
        for image_id, dets in predictions.items():
            for d in dets:
                rec = {"image_id": image_id, **asdict(d)}
                rec = {k: rec[k] for k in ("image_id", "class_id", "score", "x1", "y1", "x2", "y2")}
                fh.write(json.dumps(rec) + "\n")


def read_predictions(path) -> dict:
    preds: dict = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            preds.setdefault(r["image_id"], []).append(
                Detection(r["x1"], r["y1"], r["x2"], r["y2"], int(r["class_id"]), r["score"]))
    return preds
