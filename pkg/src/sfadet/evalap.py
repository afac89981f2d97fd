"""COCO-style AP/AR evaluation with 10 IoU thresholds, 101-point
interpolated precision, a 100-detection cap and the three area buckets
(small < 32^2 <= medium < 96^2 <= large).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .detect import DetectionSet, iou_xywh
from .hsi import eval_annotation_access

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))
RECALL_POINTS = np.arange(101) / 100.0
MAX_DETS = 100
AREA_SMALL_MAX = 32 * 32          # exclusive upper edge of "small"
AREA_MEDIUM_MAX = 96 * 96         # exclusive upper edge of "medium"
BUCKETS = {
    "all": (0.0, float("inf")),
    "small": (0.0, AREA_SMALL_MAX),
    "medium": (AREA_SMALL_MAX, AREA_MEDIUM_MAX),
    "large": (AREA_MEDIUM_MAX, float("inf")),
}


def iou(a, b):
    """IoU of two xywh boxes; 0 when the union is empty."""
    return float(iou_xywh([a], [b])[0, 0])


def size_bucket(box):
    """small / medium / large by box area with edges at 32^2 and 96^2."""
    area = float(box[2]) * float(box[3])
    if area < AREA_SMALL_MAX:
        return "small"
    if area < AREA_MEDIUM_MAX:
        return "medium"
    return "large"


@dataclass
class EvalReport:
    ap50: float
    ap: float
    ap_small: float
    ap_medium: float
    ap_large: float
    ar: float
    ar_small: float
    ar_medium: float
    ar_large: float
    per_class: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {
                "AP@0.5": self.ap50,
                "AP": self.ap,
                "AP_small": self.ap_small,
                "AP_medium": self.ap_medium,
                "AP_large": self.ap_large,
                "AR": self.ar,
                "AR_small": self.ar_small,
                "AR_medium": self.ar_medium,
                "AR_large": self.ar_large,
                "per_class": self.per_class,
            },
            indent=1,
        )

    def to_table(self, label="result"):
        cols = ["AP@0.5", "AP", "AP_small", "AP_medium", "AP_large",
                "AR", "AR_small", "AR_medium", "AR_large"]
        vals = [self.ap50, self.ap, self.ap_small, self.ap_medium, self.ap_large,
                self.ar, self.ar_small, self.ar_medium, self.ar_large]
        head = f"{'':20s}" + "".join(f"{c:>11s}" for c in cols)
        row = f"{label:20s}" + "".join(f"{100 * v:10.2f}%" for v in vals)
        return head + "\n" + row


def group_detections(records, known_image_ids):
    """Group JSON detection records into per-image DetectionSets.

    Records may carry an optional unique "id"; duplicates are rejected.
    """
    seen_ids = set()
    per_image = {i: [] for i in known_image_ids}
    for r in records:
        if "id" in r:
            if r["id"] in seen_ids:
                raise ValueError(f"duplicate detection id {r['id']}")
            seen_ids.add(r["id"])
        img = r["image_id"]
        if img not in per_image:
            raise ValueError(f"detection references unknown image id {img}")
        per_image[img].append((r["bbox"], r["score"], r["category_id"]))
    out = []
    for i in known_image_ids:
        recs = per_image[i]
        if recs:
            out.append(DetectionSet(
                np.array([r[0] for r in recs], dtype=np.float64),
                np.array([r[1] for r in recs], dtype=np.float64),
                np.array([r[2] for r in recs], dtype=np.int64),
            ))
        else:
            out.append(DetectionSet(np.zeros((0, 4)), np.zeros(0),
                                    np.zeros(0, np.int64)))
    return out


def _match_image(det_boxes, det_scores, gt_boxes, gt_ignore, thresh):
    """Greedy per-image matching at one IoU threshold.

    Detections in descending score order each take the highest-IoU unmatched
    valid gt; if only an ignored gt overlaps, the detection is ignored.
    Returns (matched_gt_flags, det_status) with status 1 TP, 0 FP, -1 ignored.
    """
    order = np.argsort(-det_scores, kind="stable")
    g_taken = np.zeros(len(gt_boxes), dtype=bool)
    status = np.zeros(len(det_boxes), dtype=np.int64)
    matched_valid = np.zeros(len(gt_boxes), dtype=bool)
    if len(gt_boxes) and len(det_boxes):
        ious = iou_xywh(det_boxes, gt_boxes)
    for d in order:
        best_g, best_iou = -1, thresh - 1e-12
        best_ign_g, best_ign_iou = -1, thresh - 1e-12
        for g in range(len(gt_boxes)):
            if g_taken[g]:
                continue
            v = ious[d, g]
            if gt_ignore[g]:
                if v > best_ign_iou:
                    best_ign_g, best_ign_iou = g, v
            elif v > best_iou:
                best_g, best_iou = g, v
        if best_g >= 0:
            g_taken[best_g] = True
            matched_valid[best_g] = True
            status[d] = 1
        elif best_ign_g >= 0:
            g_taken[best_ign_g] = True
            status[d] = -1
        else:
            status[d] = 0
    return matched_valid, status


def _ap_from_matches(scores, statuses, n_gt):
    """101-point interpolated AP from pooled (score, status) detections."""
    if n_gt == 0:
        return None, None
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    st = np.asarray(statuses)[order]
    st = st[st >= 0]  # drop ignored detections
    if len(st) == 0:
        return 0.0, 0.0
    tp = np.cumsum(st == 1)
    fp = np.cumsum(st == 0)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope (monotone non-increasing from the right)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    prec_at = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    ap = float(prec_at.mean())
    max_recall = float(recall[-1])
    return ap, max_recall


def evaluate(dets, gt_samples) -> EvalReport:
    """Score per-image DetectionSets against annotated samples."""
    if len(dets) != len(gt_samples):
        raise ValueError("detections and ground truth differ in image count")
    with eval_annotation_access():
        gt_boxes = [np.asarray(s.boxes, dtype=np.float64).reshape(-1, 4)
                    for s in gt_samples]
        gt_classes = [np.asarray(s.classes, dtype=np.int64) for s in gt_samples]
    class_ids = sorted(
        set(int(c) for cs in gt_classes for c in cs)
        | set(int(c) for d in dets for c in d.classes)
    )

    # cap detections per image per class
    capped = []
    for d in dets:
        keep = []
        for c in class_ids:
            idx = np.flatnonzero(d.classes == c)
            idx = idx[np.argsort(-d.scores[idx], kind="stable")][:MAX_DETS]
            keep.extend(idx.tolist())
        keep = np.array(sorted(keep), dtype=np.int64)
        capped.append((d.boxes[keep], d.scores[keep], d.classes[keep]))

    bucket_ap = {}
    bucket_ar = {}
    per_class = {}
    for bname, (lo, hi) in BUCKETS.items():
        aps = {t: [] for t in IOU_THRESHOLDS}
        recalls = {t: [] for t in IOU_THRESHOLDS}
        for c in class_ids:
            has_gt = False
            per_t_scores = {t: [] for t in IOU_THRESHOLDS}
            per_t_status = {t: [] for t in IOU_THRESHOLDS}
            n_gt_valid = 0
            for img in range(len(dets)):
                sel = gt_classes[img] == c
                g = gt_boxes[img][sel]
                areas = g[:, 2] * g[:, 3] if len(g) else np.zeros(0)
                ignore = ~((areas >= lo) & (areas < hi))
                n_gt_valid += int((~ignore).sum())
                db, ds, dc = capped[img]
                dsel = dc == c
                for t in IOU_THRESHOLDS:
                    _, status = _match_image(db[dsel], ds[dsel], g, ignore, t)
                    per_t_scores[t].extend(ds[dsel].tolist())
                    per_t_status[t].extend(status.tolist())
            if n_gt_valid == 0:
                continue
            has_gt = True
            for t in IOU_THRESHOLDS:
                ap, mrec = _ap_from_matches(
                    per_t_scores[t], per_t_status[t], n_gt_valid
                )
                aps[t].append(ap)
                recalls[t].append(mrec)
            if has_gt and bname == "all":
                per_class[c] = {
                    "AP@0.5": aps[IOU_THRESHOLDS[0]][-1],
                    "AP": float(np.mean([aps[t][-1] for t in IOU_THRESHOLDS])),
                }
        flat_aps = [v for t in IOU_THRESHOLDS for v in aps[t]]
        flat_recalls = [v for t in IOU_THRESHOLDS for v in recalls[t]]
        bucket_ap[bname] = float(np.mean(flat_aps)) if flat_aps else 0.0
        bucket_ar[bname] = float(np.mean(flat_recalls)) if flat_recalls else 0.0
        if bname == "all":
            ap50s = aps[IOU_THRESHOLDS[0]]
            ap50 = float(np.mean(ap50s)) if ap50s else 0.0

    return EvalReport(
        ap50=ap50,
        ap=bucket_ap["all"],
        ap_small=bucket_ap["small"],
        ap_medium=bucket_ap["medium"],
        ap_large=bucket_ap["large"],
        ar=bucket_ar["all"],
        ar_small=bucket_ar["small"],
        ar_medium=bucket_ar["medium"],
        ar_large=bucket_ar["large"],
        per_class=per_class,
    )
