"""Anchor-based detection heads: a light RPN over the three pyramid levels
and a small ROI head with bilinear 4x4 pooling. Boxes are (x, y, w, h) in
pixels with a top-left origin unless noted; anchors are (cx, cy, w, h).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssam import FPN_WIDTH, _conv_init

STRIDES = (2, 4, 8)
BASE_SIZES = (16, 32, 64)
ASPECT_RATIOS = (0.5, 1.0, 2.0)
ROI_POOL = 4
ROI_HIDDEN = 64


@dataclass
class DetectionSet:
    """Scored, class-labeled boxes for one image, sorted by descending score."""

    boxes: np.ndarray    # (K, 4) xywh
    scores: np.ndarray   # (K,)
    classes: np.ndarray  # (K,) 1-based category ids

    def __len__(self):
        return len(self.scores)


def detections_to_json(dets, image_ids):
    out = []
    for det, img in zip(dets, image_ids):
        for box, score, cls in zip(det.boxes, det.scores, det.classes):
            out.append({
                "image_id": int(img),
                "bbox": [round(float(v), 3) for v in box],
                "score": round(float(score), 5),
                "category_id": int(cls),
            })
    return out


# ---------------------------------------------------------------------------
# geometry


def iou_xywh(a, b):
    """Pairwise IoU matrix between (N,4) and (M,4) xywh boxes."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    ix = np.maximum(
        0.0,
        np.minimum(ax2[:, None], bx2[None, :])
        - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    iy = np.maximum(
        0.0,
        np.minimum(ay2[:, None], by2[None, :])
        - np.maximum(a[:, None, 1], b[None, :, 1]),
    )
    inter = ix * iy
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def xywh_to_cxcywh(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 0] = boxes[..., 0] + boxes[..., 2] / 2
    out[..., 1] = boxes[..., 1] + boxes[..., 3] / 2
    return out


def cxcywh_to_xywh(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2
    return out


def encode_deltas(gt_xywh, anchors_cxcywh):
    """Regression targets (dx, dy, dw, dh) from anchors to ground truth."""
    g = xywh_to_cxcywh(gt_xywh)
    a = np.asarray(anchors_cxcywh, dtype=np.float64)
    return np.stack(
        [
            (g[..., 0] - a[..., 0]) / a[..., 2],
            (g[..., 1] - a[..., 1]) / a[..., 3],
            np.log(g[..., 2] / a[..., 2]),
            np.log(g[..., 3] / a[..., 3]),
        ],
        axis=-1,
    )


def decode_deltas(deltas, anchors_cxcywh):
    """Inverse of :func:`encode_deltas`; returns xywh boxes."""
    d = np.asarray(deltas, dtype=np.float64)
    a = np.asarray(anchors_cxcywh, dtype=np.float64)
    dw = np.clip(d[..., 2], -8.0, 8.0)
    dh = np.clip(d[..., 3], -8.0, 8.0)
    cx = a[..., 0] + d[..., 0] * a[..., 2]
    cy = a[..., 1] + d[..., 1] * a[..., 3]
    w = a[..., 2] * np.exp(dw)
    h = a[..., 3] * np.exp(dh)
    return cxcywh_to_xywh(np.stack([cx, cy, w, h], axis=-1))


def generate_anchors(level_shapes):
    """Anchor (cx, cy, w, h) arrays for each pyramid level.

    ``level_shapes`` is a list of (H, W) feature-map shapes for strides
    2/4/8. Each location gets one anchor per aspect ratio at the level's
    base size (equal-area family).
    """
    out = []
    for (h, w), stride, base in zip(level_shapes, STRIDES, BASE_SIZES):
        ys = (np.arange(h) + 0.5) * stride
        xs = (np.arange(w) + 0.5) * stride
        cy, cx = np.meshgrid(ys, xs, indexing="ij")
        anchors = np.zeros((h, w, len(ASPECT_RATIOS), 4))
        for k, r in enumerate(ASPECT_RATIOS):
            aw = base / np.sqrt(r)
            ah = base * np.sqrt(r)
            anchors[..., k, 0] = cx
            anchors[..., k, 1] = cy
            anchors[..., k, 2] = aw
            anchors[..., k, 3] = ah
        out.append(anchors.reshape(-1, 4))
    return out


def level_for_box(box_xywh):
    """Scale-to-level heuristic: clamp(floor(log2(sqrt(area)/16)) + 1, 1, 3)."""
    area = max(float(box_xywh[2]) * float(box_xywh[3]), 1e-6)
    lvl = int(np.floor(np.log2(np.sqrt(area) / 16.0))) + 1
    return min(max(lvl, 1), 3)


def nms(boxes, scores, iou_thresh):
    """Greedy NMS; returns kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: non-finite scores")
    # tie-break on (-score, x, y, w, h) for order independence
    order = np.lexsort(
        (boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores)
    ) if len(boxes) else np.array([], dtype=np.int64)
    keep = []
    alive = np.ones(len(boxes), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive[i] = False
        rest = order[alive[order]]
        if len(rest):
            ious = iou_xywh(boxes[i : i + 1], boxes[rest])[0]
            alive[rest[ious > iou_thresh]] = False
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# parameters


def init_detect_params(num_classes, rng):
    """Learnable tensors for the RPN and ROI heads, keyed by name."""
    t = {}
    t["rpn.conv.w"], t["rpn.conv.b"] = _conv_init(rng, FPN_WIDTH, FPN_WIDTH, 3)
    t["rpn.obj.w"], t["rpn.obj.b"] = _conv_init(rng, len(ASPECT_RATIOS), FPN_WIDTH, 1)
    t["rpn.reg.w"], t["rpn.reg.b"] = _conv_init(
        rng, 4 * len(ASPECT_RATIOS), FPN_WIDTH, 1
    )
    feat_dim = FPN_WIDTH * ROI_POOL * ROI_POOL
    std = np.sqrt(2.0 / feat_dim)
    t["roi.fc.w"] = Tensor(
        rng.normal(0, std, size=(feat_dim, ROI_HIDDEN)), requires_grad=True
    )
    t["roi.fc.b"] = Tensor(np.zeros(ROI_HIDDEN), requires_grad=True)
    std2 = np.sqrt(2.0 / ROI_HIDDEN)
    t["roi.cls.w"] = Tensor(
        rng.normal(0, std2, size=(ROI_HIDDEN, num_classes + 1)), requires_grad=True
    )
    t["roi.cls.b"] = Tensor(np.zeros(num_classes + 1), requires_grad=True)
    t["roi.reg.w"] = Tensor(
        rng.normal(0, std2, size=(ROI_HIDDEN, 4 * num_classes)), requires_grad=True
    )
    t["roi.reg.b"] = Tensor(np.zeros(4 * num_classes), requires_grad=True)
    return t


# ---------------------------------------------------------------------------
# RPN


def rpn_forward(fpn_levels, params):
    """Per-level objectness logits and box deltas.

    Returns (logits, deltas): lists of (N, H*W*A) and (N, H*W*A, 4) tensors
    whose anchor order matches :func:`generate_anchors`.
    """
    if len(fpn_levels) != 3:
        raise ad.ShapeError("rpn_forward: expected 3 pyramid levels")
    logits, deltas = [], []
    a = len(ASPECT_RATIOS)
    for lvl in fpn_levels:
        x = ad.relu(ad.conv2d(lvl, params["rpn.conv.w"], params["rpn.conv.b"],
                              padding=1))
        n, _, h, w = x.shape
        obj = ad.conv2d(x, params["rpn.obj.w"], params["rpn.obj.b"])
        reg = ad.conv2d(x, params["rpn.reg.w"], params["rpn.reg.b"])
        # (N, A, H, W) -> (N, H, W, A) -> flat, matching anchor layout
        obj = ad.reshape(ad.transpose(obj, (0, 2, 3, 1)), (n, h * w * a))
        reg = ad.reshape(
            ad.transpose(ad.reshape(reg, (n, a, 4, h, w)), (0, 3, 4, 1, 2)),
            (n, h * w * a, 4),
        )
        logits.append(obj)
        deltas.append(reg)
    return logits, deltas


def assign_anchors(anchors_cxcywh, gt_xywh, pos_iou=0.7, neg_iou=0.3):
    """Anchor labels: 1 positive, 0 negative, -1 ignore; plus matched gt index."""
    n = len(anchors_cxcywh)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_xywh) == 0:
        return labels, matched
    ious = iou_xywh(cxcywh_to_xywh(anchors_cxcywh), gt_xywh)  # (A, G)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[:] = -1
    labels[best_iou <= neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # best anchor per gt is always positive
    for g in range(ious.shape[1]):
        top = ious[:, g].max()
        if top > 0:
            labels[ious[:, g] >= top - 1e-9] = 1
    matched[labels == 1] = best_gt[labels == 1]
    return labels, matched


def rpn_loss(logits_flat, deltas_flat, anchors_cxcywh, gt_xywh, rng,
             num_samples=32, pos_fraction=0.5, pos_iou=0.7, neg_iou=0.3):
    """Sampled binary objectness + smooth-L1 box loss for one image.

    ``logits_flat``/``deltas_flat`` are (A,) and (A, 4) tensors over the
    concatenated per-level anchors.
    """
    a = len(anchors_cxcywh)
    labels, matched = assign_anchors(anchors_cxcywh, gt_xywh, pos_iou, neg_iou)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(num_samples * pos_fraction))
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), num_samples - len(pos))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    sampled = np.concatenate([pos, neg])
    n_sampled = max(len(sampled), 1)

    cls_mask = np.zeros(a, dtype=np.float32)
    cls_mask[sampled] = 1.0
    targets = np.zeros(a, dtype=np.float32)
    targets[pos] = 1.0
    bce = ad.bce_with_logits(logits_flat, targets)
    cls_term = ad.scale(ad.tsum(ad.mul(bce, Tensor(cls_mask))), 1.0 / n_sampled)

    if len(pos):
        reg_targets = np.zeros((a, 4), dtype=np.float32)
        reg_targets[pos] = encode_deltas(
            np.asarray(gt_xywh)[matched[pos]], anchors_cxcywh[pos]
        )
        reg_mask = np.zeros((a, 4), dtype=np.float32)
        reg_mask[pos] = 1.0
        sl1 = ad.smooth_l1(deltas_flat, reg_targets)
        # per-coordinate mean over positives so the box signal stays strong
        # even when negatives dominate the sample
        reg_term = ad.scale(ad.tsum(ad.mul(sl1, Tensor(reg_mask))),
                            1.0 / (4.0 * len(pos)))
        return ad.add(cls_term, reg_term)
    return cls_term


def rpn_proposals(logits, deltas, anchors, image_size, pre_nms=200, post_nms=32,
                  nms_thresh=0.7, min_size=2.0):
    """Decode per-level RPN outputs into per-image proposal boxes (xywh).

    ``logits``/``deltas`` are the rpn_forward outputs; plain numpy path.
    """
    n = logits[0].shape[0]
    out = []
    for i in range(n):
        scores = np.concatenate([l.data[i] for l in logits])
        dts = np.concatenate([d.data[i] for d in deltas], axis=0)
        allanch = np.concatenate(anchors, axis=0)
        boxes = decode_deltas(dts, allanch)
        # clip to image
        x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, image_size)
        y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, image_size)
        x1 = np.clip(boxes[:, 0], 0, image_size)
        y1 = np.clip(boxes[:, 1], 0, image_size)
        boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
        valid = (boxes[:, 2] >= min_size) & (boxes[:, 3] >= min_size)
        boxes, scores = boxes[valid], scores[valid]
        if len(boxes) > pre_nms:
            top = np.argpartition(-scores, pre_nms)[:pre_nms]
            boxes, scores = boxes[top], scores[top]
        keep = nms(boxes, scores, nms_thresh)[:post_nms]
        out.append((boxes[keep], scores[keep]))
    return out


# ---------------------------------------------------------------------------
# ROI head


def _roi_features(fpn_levels, proposals_per_image):
    """Pool 4x4 features for every proposal; returns (features, row_meta).

    row_meta[i] = (image_index, proposal_index) for feature row i; rows are
    grouped by pyramid level.
    """
    by_level = {1: [], 2: [], 3: []}
    for img, props in enumerate(proposals_per_image):
        for j, box in enumerate(props):
            lvl = level_for_box(box)
            x, y, w, h = box
            stride = STRIDES[lvl - 1]
            by_level[lvl].append(
                (img, j, [img, x / stride, y / stride, (x + w) / stride,
                          (y + h) / stride])
            )
    feats, meta = [], []
    for lvl in (1, 2, 3):
        if not by_level[lvl]:
            continue
        rois = np.array([r[2] for r in by_level[lvl]], dtype=np.float32)
        pooled = ad.roi_pool_bilinear(fpn_levels[lvl - 1], rois, ROI_POOL)
        feats.append(ad.reshape(pooled, (len(rois), -1)))
        meta.extend((r[0], r[1]) for r in by_level[lvl])
    features = feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)
    return features, meta


def _roi_mlp(features, params):
    h = ad.relu(ad.add(ad.matmul(features, params["roi.fc.w"]), params["roi.fc.b"]))
    cls = ad.add(ad.matmul(h, params["roi.cls.w"]), params["roi.cls.b"])
    reg = ad.add(ad.matmul(h, params["roi.reg.w"]), params["roi.reg.b"])
    return cls, reg


def roi_loss(fpn_levels, proposals_per_image, gt_per_image, params,
             fg_iou=0.5):
    """Classification + box-refinement loss over all proposals in a batch.

    ``gt_per_image`` is a list of (boxes_xywh, classes) pairs; classes are
    1-based. Proposals should include the gt boxes during training so
    positives exist.
    """
    if all(len(p) == 0 for p in proposals_per_image):
        raise ValueError("roi_loss: no proposals")
    features, meta = _roi_features(fpn_levels, proposals_per_image)
    cls_logits, reg = _roi_mlp(features, params)
    r = len(meta)

    labels = np.zeros(r, dtype=np.int64)
    reg_mask = np.zeros((r, reg.shape[1]), dtype=np.float32)
    full_targets = np.zeros((r, reg.shape[1]), dtype=np.float32)
    for row, (img, j) in enumerate(meta):
        gt_boxes, gt_classes = gt_per_image[img]
        if len(gt_boxes) == 0:
            continue
        box = proposals_per_image[img][j]
        ious = iou_xywh([box], gt_boxes)[0]
        g = int(ious.argmax())
        if ious[g] >= fg_iou:
            cls = int(gt_classes[g])
            labels[row] = cls
            t = encode_deltas(np.asarray(gt_boxes[g]), xywh_to_cxcywh(box))
            sl = slice(4 * (cls - 1), 4 * cls)
            full_targets[row, sl] = t
            reg_mask[row, sl] = 1.0

    ce = ad.cross_entropy_logits(cls_logits, labels)
    cls_term = ad.tmean(ce)
    sl1 = ad.smooth_l1(reg, full_targets)
    # normalize by foreground count, not total rows, so the refinement
    # signal does not vanish when most proposals are background
    n_fg = max(int((labels > 0).sum()), 1)
    reg_term = ad.scale(ad.tsum(ad.mul(sl1, Tensor(reg_mask))), 1.0 / (4.0 * n_fg))
    return ad.add(cls_term, reg_term)


def roi_predict(fpn_levels, proposals_per_image, params, num_classes,
                score_floor=0.05, nms_thresh=0.5, max_dets=100):
    """Score and refine proposals into final per-image detections.

    A proposal is emitted only when a foreground class strictly beats the
    background score, so an untrained zero head yields no detections.
    """
    n_images = len(proposals_per_image)
    if all(len(p) == 0 for p in proposals_per_image):
        return [DetectionSet(np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64))
                for _ in range(n_images)]
    features, meta = _roi_features(fpn_levels, proposals_per_image)
    cls_logits, reg = _roi_mlp(features, params)
    logits = cls_logits.data.astype(np.float64)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    regd = reg.data

    per_image = [[] for _ in range(n_images)]
    for row, (img, j) in enumerate(meta):
        box = proposals_per_image[img][j]
        for c in range(1, num_classes + 1):
            p = probs[row, c]
            if p <= probs[row, 0] or p < score_floor:
                continue
            d = regd[row, 4 * (c - 1) : 4 * c]
            refined = decode_deltas(d, xywh_to_cxcywh(box))
            per_image[img].append((refined, p, c))

    out = []
    for img in range(n_images):
        if not per_image[img]:
            out.append(
                DetectionSet(np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64))
            )
            continue
        boxes = np.array([d[0] for d in per_image[img]])
        scores = np.array([d[1] for d in per_image[img]])
        classes = np.array([d[2] for d in per_image[img]], dtype=np.int64)
        kept_all = []
        for c in np.unique(classes):
            idx = np.flatnonzero(classes == c)
            keep = nms(boxes[idx], scores[idx], nms_thresh)
            kept_all.extend(idx[keep])
        kept_all = np.array(kept_all, dtype=np.int64)
        order = np.argsort(-scores[kept_all], kind="stable")[:max_dets]
        kept = kept_all[order]
        out.append(DetectionSet(boxes[kept], scores[kept], classes[kept]))
    return out
