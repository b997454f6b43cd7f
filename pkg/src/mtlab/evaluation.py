"""Detection decoding, greedy NMS and all-point-interpolated mAP50."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nnet
from .nnet import ForwardOutput, ModelConfig, ParamVec


class DegenerateBoxWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    cls: int
    score: float


def _corners(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        warnings.warn("zero-area box in iou", DegenerateBoxWarning, stacklevel=2)
        return 0.0
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` cxcywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def clip_box(box):
    x0, y0, x1, y1 = (min(max(v, 0.0), 1.0) for v in _corners(box))
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def nms(dets: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-class NMS; ties in score keep the lower detection index first."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    cls = np.array([dets[i].cls for i in order])
    overlap = (iou_matrix(boxes, boxes) > iou_thresh) & (cls[:, None] == cls[None, :])
    alive = np.ones(len(order), dtype=bool)
    kept: list[Detection] = []
    for j in range(len(order)):
        if alive[j]:
            kept.append(dets[order[j]])
            alive &= ~overlap[j]
    return kept


def decode(output: ForwardOutput, score_floor: float = 0.05,
           config: ModelConfig = ModelConfig(), iou_thresh: float = 0.5,
           index: int = 0) -> list[Detection]:
    """Detections of image ``index`` in a batched output.

    Each cell proposes its best foreground class, scored by that class's
    probability; proposals under ``score_floor`` are dropped before NMS.
    """
    probs = output.class_probs[index]
    boxes = nnet.decode_offsets(output.offsets[index], config)
    fg = probs[:, :-1]
    cls = fg.argmax(axis=1)
    score = fg.max(axis=1)
    dets = [Detection(clip_box(tuple(boxes[r])), int(cls[r]), float(score[r]))
            for r in np.flatnonzero(score >= score_floor)]
    dets = [d for d in dets if d.box[2] > 0 and d.box[3] > 0]
    return nms(dets, iou_thresh)


def average_precision(dets, gts, iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP of one class over a whole test set.

    ``dets`` are ``(image_id, score, box)`` and ``gts`` maps image id to a
    list of boxes.  Returns ``nan`` when there are no ground truths.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return float("nan")
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    matched = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    gt_arrays = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        img, _, box = dets[i]
        g = gt_arrays.get(img)
        if g is None or len(g) == 0:
            continue
        ious = iou_matrix(np.asarray(box)[None], g)[0]
        j = int(ious.argmax())
        if ious[j] >= iou_thresh and not matched[img][j]:
            matched[img][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(all_dets: list[list[Detection]], scenes, num_classes: int = 3,
                        iou_thresh: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP and mAP (mean over classes that have ground truth)."""
    per_class = {}
    for k in range(num_classes):
        gts = {i: [b for b, c in zip(s.boxes, s.classes) if c == k] for i, s in enumerate(scenes)}
        dets = [(i, d.score, d.box) for i, ds in enumerate(all_dets) for d in ds if d.cls == k]
        per_class[k] = average_precision(dets, gts, iou_thresh)
    valid = [v for v in per_class.values() if not np.isnan(v)]
    return per_class, float(np.mean(valid)) if valid else float("nan")


def evaluate(params: ParamVec, scenes, config: ModelConfig = ModelConfig(),
             score_floor: float = 0.05, chunk: int = 256) -> tuple[dict[int, float], float]:
    """Run the detector on ``scenes`` and compute per-class AP50 and mAP50."""
    all_dets: list[list[Detection]] = []
    for start in range(0, len(scenes), chunk):
        part = scenes[start:start + chunk]
        out = nnet.forward(params, np.stack([s.image for s in part]), config)
        all_dets.extend(decode(out, score_floor, config, index=i) for i in range(len(part)))
    return evaluate_detections(all_dets, scenes, config.num_classes)
