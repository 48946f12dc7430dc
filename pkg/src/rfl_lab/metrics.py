"""Detection metrics: IoU, per-class average precision, mAP, and mRecall.

Matching is greedy per class (and per image when image ids are used):
detections are visited in descending score order, each claims the
still-unmatched ground-truth box of the same class and image with the
highest IoU, provided that IoU reaches the match threshold.  Score ties
are broken by the candidate's best achievable IoU against the unmatched
ground truths, then by input order, so rankings are deterministic.

Average precision is the area under the precision-recall curve with the
monotone precision envelope evaluated at every point (no 11-point
sampling).  mAP averages AP over classes that have at least one ground
truth; classes that only appear in detections contribute AP 0 on their
own but are excluded from the mean.  Plain recall is the matched
fraction of all ground truths; mRecall is the unweighted mean of the
per-class matched fractions, which makes it insensitive to how many
instances each class has.

Degenerate zero-area boxes have IoU 0 against everything (including
themselves) and therefore never match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    source: str = ""
    image_id: str = ""

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int
    image_id: str = ""


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint or zero-area boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _match_class(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float
) -> list[bool]:
    """True-positive flags for one class's detections, in ranked order.

    Detections are processed in descending score order; within a tied
    score group the detection with the highest IoU against a currently
    unmatched ground truth goes first (then input order).  Each
    processed detection claims its best unmatched same-image ground
    truth when that IoU reaches the threshold.
    """
    unmatched: set[int] = set(range(len(gts)))

    def best_unmatched(idx: int) -> tuple[int, float]:
        best_g, best_v = -1, 0.0
        for g in unmatched:
            if gts[g].image_id != dets[idx].image_id:
                continue
            v = iou(dets[idx].box, gts[g].box)
            if v > best_v:
                best_g, best_v = g, v
        return best_g, best_v

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    flags: list[bool] = []
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and dets[order[j]].score == dets[order[i]].score:
            j += 1
        group = list(order[i:j])
        while group:
            if len(group) == 1:
                pick = group.pop()
            else:
                pick = min(group, key=lambda idx: (-best_unmatched(idx)[1], idx))
                group.remove(pick)
            best_g, best_v = best_unmatched(pick)
            if best_g >= 0 and best_v >= iou_thresh:
                unmatched.discard(best_g)
                flags.append(True)
            else:
                flags.append(False)
        i = j
    return flags


def average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> float:
    """Area under the all-points interpolated PR curve for one class.

    With no ground truths the AP is defined as 0 (any detections are all
    false positives); such classes are excluded from mAP by
    :func:`map_and_mrecall`.
    """
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    if not gts or not dets:
        return 0.0
    return _ap_from_flags(_match_class(dets, gts, iou_thresh), len(gts))


def _ap_from_flags(flags: Sequence[bool], n_gt: int) -> float:
    tp = 0
    recalls, precisions = [], []
    for k, flag in enumerate(flags, start=1):
        tp += int(flag)
        recalls.append(tp / n_gt)
        precisions.append(tp / k)

    # Monotone precision envelope, integrated over recall increments.
    envelope = [0.0] * len(precisions)
    running_max = 0.0
    for k in range(len(precisions) - 1, -1, -1):
        running_max = max(running_max, precisions[k])
        envelope[k] = running_max
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(recalls)):
        ap += (recalls[k] - prev_recall) * envelope[k]
        prev_recall = recalls[k]
    return ap


@dataclass
class ClassMetrics:
    ap: float
    recall: float
    gt_count: int
    det_count: int


@dataclass
class EvalSummary:
    map: float
    recall: float
    m_recall: float
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)


def map_and_mrecall(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> EvalSummary:
    """mAP, class-agnostic recall, mRecall, and the per-class table.

    Classes are those with at least one ground truth; detections of
    other classes count as false positives nowhere and are ignored.
    """
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    if not gts:
        raise ValueError("ground-truth set is empty")

    by_class_gt: dict[int, list[GroundTruth]] = {}
    for gt in gts:
        by_class_gt.setdefault(gt.class_id, []).append(gt)
    by_class_det: dict[int, list[Detection]] = {}
    for det in dets:
        by_class_det.setdefault(det.class_id, []).append(det)

    per_class: dict[int, ClassMetrics] = {}
    total_matched = 0
    for cls in sorted(by_class_gt):
        cls_gts = by_class_gt[cls]
        cls_dets = by_class_det.get(cls, [])
        flags = _match_class(cls_dets, cls_gts, iou_thresh)
        matched = sum(flags)
        total_matched += matched
        per_class[cls] = ClassMetrics(
            ap=_ap_from_flags(flags, len(cls_gts)) if cls_dets else 0.0,
            recall=matched / len(cls_gts),
            gt_count=len(cls_gts),
            det_count=len(cls_dets),
        )

    m_ap = sum(m.ap for m in per_class.values()) / len(per_class)
    m_recall = sum(m.recall for m in per_class.values()) / len(per_class)
    recall = total_matched / len(gts)
    return EvalSummary(map=m_ap, recall=recall, m_recall=m_recall, per_class=per_class)


# ---------------------------------------------------------------------------
# JSONL io: one object per line with fields box [x1,y1,x2,y2], class_id,
# score (detections only), image_id and source optional.
# ---------------------------------------------------------------------------


def detection_to_json(det: Detection) -> dict:
    rec = {
        "box": [det.box.x1, det.box.y1, det.box.x2, det.box.y2],
        "class_id": det.class_id,
        "score": det.score,
    }
    if det.image_id:
        rec["image_id"] = det.image_id
    if det.source:
        rec["source"] = det.source
    return rec


def write_detections_jsonl(dets: Iterable[Detection], path: str | Path) -> None:
    with open(path, "w") as fh:
        for det in dets:
            fh.write(json.dumps(detection_to_json(det), sort_keys=True) + "\n")


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                Detection(
                    box=Box(*rec["box"]),
                    class_id=int(rec["class_id"]),
                    score=float(rec.get("score", 1.0)),
                    source=rec.get("source", ""),
                    image_id=rec.get("image_id", ""),
                )
            )
    return out


def write_groundtruths_jsonl(gts: Iterable[GroundTruth], path: str | Path) -> None:
    with open(path, "w") as fh:
        for gt in gts:
            rec: dict = {
                "box": [gt.box.x1, gt.box.y1, gt.box.x2, gt.box.y2],
                "class_id": gt.class_id,
            }
            if gt.image_id:
                rec["image_id"] = gt.image_id
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_groundtruths_jsonl(path: str | Path) -> list[GroundTruth]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                GroundTruth(
                    box=Box(*rec["box"]),
                    class_id=int(rec["class_id"]),
                    image_id=rec.get("image_id", ""),
                )
            )
    return out
