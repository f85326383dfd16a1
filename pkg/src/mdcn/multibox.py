"""Default boxes, jaccard matching, offset coding and the multibox loss."""

import math
from dataclasses import dataclass

import numpy as np

from .kernels import log_softmax, softmax
from .tensor import ShapeError

VARIANCES = (0.1, 0.2)
FULL_RATIOS = (2.0, 0.5, 3.0, 1.0 / 3.0)
RATIO_LABELS = {1.0: "1", 2.0: "2", 0.5: "1/2", 3.0: "3", 1.0 / 3.0: "1/3"}


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, xmin, ymin, xmax, ymax):
        return cls((xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin, ymax - ymin)

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


def center_to_corners(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_center(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(boxes[..., :2] + boxes[..., 2:]) / 2, boxes[..., 2:] - boxes[..., :2]], axis=-1)


def iou(a, b):
    """Jaccard overlap (intersection over union) of two boxes."""
    ax0, ay0, ax1, ay1 = a.corners() if isinstance(a, Box) else a
    bx0, by0, bx1, by1 = b.corners() if isinstance(b, Box) else b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def iou_matrix(a, b):
    """Pairwise IoU of corner-form boxes ``a`` [n, 4] and ``b`` [m, 4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass(frozen=True)
class TapAnchors:
    map_size: int
    scale: float
    ratios: tuple = (1.0,) + FULL_RATIOS
    # scale of the extra ratio-1 box; None disables it
    extra_scale: float = None

    @property
    def k(self):
        return len(self.ratios) + (self.extra_scale is not None)


@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray  # [A, 4] center form, normalized
    taps: tuple  # TapAnchors per tap
    tap_index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    ratio_labels: tuple

    def __len__(self):
        return len(self.boxes)

    @property
    def corners(self):
        return center_to_corners(self.boxes)

    def dump(self):
        """One line per box: ``tap row col ratio cx cy w h``."""
        lines = []
        for t, r, c, lab, box in zip(self.tap_index, self.rows, self.cols, self.ratio_labels, self.boxes):
            lines.append(f"{t} {r} {c} {lab} " + " ".join(f"{v:.10f}" for v in box))
        return "\n".join(lines) + ("\n" if lines else "")


def _cell_shapes(tap):
    shapes = [(tap.scale, 1.0, "1")]
    if tap.extra_scale is not None:
        shapes.append((tap.extra_scale, 1.0, "1'"))
    for r in tap.ratios:
        if r == 1.0:
            continue
        shapes.append((tap.scale, r, RATIO_LABELS.get(r, f"{r:g}")))
    return shapes


def generate_anchors(taps):
    """Tile default boxes over every tap, ordered (tap, row, col, box)."""
    boxes, tap_index, rows, cols, labels = [], [], [], [], []
    for t, tap in enumerate(taps):
        if tap.map_size < 1:
            raise ValueError(f"tap {t}: map size must be >= 1")
        f = tap.map_size
        shapes = _cell_shapes(tap)
        centers = (np.arange(f) + 0.5) / f
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        wh = np.array([[s * math.sqrt(r), s / math.sqrt(r)] for s, r, _ in shapes])
        k = len(shapes)
        grid = np.empty((f, f, k, 4))
        grid[..., 0] = cx[..., None]
        grid[..., 1] = cy[..., None]
        grid[..., 2:] = wh[None, None]
        boxes.append(np.clip(grid.reshape(-1, 4), 0.0, 1.0))
        rr, cc, _ = np.meshgrid(np.arange(f), np.arange(f), np.arange(k), indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        tap_index.append(np.full(f * f * k, t))
        labels.extend([lab for _, _, lab in shapes] * (f * f))
    if not boxes:
        return AnchorSet(np.zeros((0, 4)), (), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), ())
    return AnchorSet(
        np.concatenate(boxes),
        tuple(taps),
        np.concatenate(tap_index),
        np.concatenate(rows),
        np.concatenate(cols),
        tuple(labels),
    )


def ssd_taps(map_sizes, boxes_per_tap, smin=0.2, smax=0.9):
    """Linearly spaced scales with an extra sqrt(s_k * s_k+1) box per tap.

    Six boxes per cell use ratios {1, 2, 1/2, 3, 1/3}; four use {1, 2, 1/2}.
    """
    m = len(map_sizes)
    step = (smax - smin) / (m - 1) if m > 1 else 0.0
    scales = [smin + step * i for i in range(m + 1)]
    taps = []
    for i, (f, k) in enumerate(zip(map_sizes, boxes_per_tap)):
        if k == 6:
            ratios = (1.0,) + FULL_RATIOS
        elif k == 4:
            ratios = (1.0, 2.0, 0.5)
        else:
            raise ValueError(f"unsupported boxes per cell: {k}")
        taps.append(TapAnchors(f, scales[i], ratios, math.sqrt(scales[i] * scales[i + 1])))
    return taps


def anchors_for_network(network, input_size=None, smin=0.2, smax=0.9):
    shapes = network.tap_shapes(input_size)
    return generate_anchors(ssd_taps([h for _, h, _ in shapes], [k for k, _, _ in shapes], smin, smax))


@dataclass(frozen=True)
class MatchAssignment:
    gt_index: np.ndarray  # [A] matched ground-truth index, -1 for negatives

    @property
    def positive(self):
        return self.gt_index >= 0

    @property
    def num_positive(self):
        return int(np.count_nonzero(self.gt_index >= 0))


def match(gt_boxes, anchors, threshold=0.5):
    """Two-phase jaccard matching.

    Phase one pairs each ground truth with a distinct anchor by repeatedly
    taking the global maximum overlap.  Phase two makes every other anchor
    whose best overlap exceeds ``threshold`` positive for that ground truth.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    anchor_boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    if len(anchor_boxes) == 0:
        raise ValueError("empty anchor set")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    result = np.full(len(anchor_boxes), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return MatchAssignment(result)
    overlaps = iou_matrix(center_to_corners(gt_boxes), center_to_corners(anchor_boxes))
    work = overlaps.copy()
    for _ in range(min(len(gt_boxes), len(anchor_boxes))):
        g, a = np.unravel_index(np.argmax(work), work.shape)
        result[a] = g
        work[g, :] = -1.0
        work[:, a] = -1.0
    free = result < 0
    best_gt = np.argmax(overlaps, axis=0)
    best = overlaps[best_gt, np.arange(len(anchor_boxes))]
    take = free & (best > threshold)
    result[take] = best_gt[take]
    return MatchAssignment(result)


def encode(gt, anchor, variances=VARIANCES):
    """Center-size offsets of ``gt`` relative to ``anchor`` (arrays [..., 4])."""
    gt = np.asarray(gt.as_array() if isinstance(gt, Box) else gt, dtype=np.float64)
    anchor = np.asarray(anchor.as_array() if isinstance(anchor, Box) else anchor, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0) or np.any(anchor[..., 2:] <= 0):
        raise ValueError("box sizes must be positive")
    v1, v2 = variances
    out = np.empty(np.broadcast_shapes(gt.shape, anchor.shape))
    out[..., :2] = (gt[..., :2] - anchor[..., :2]) / (anchor[..., 2:] * v1)
    out[..., 2:] = np.log(gt[..., 2:] / anchor[..., 2:]) / v2
    return out


def decode(offsets, anchor, variances=VARIANCES):
    anchor = np.asarray(anchor.as_array() if isinstance(anchor, Box) else anchor, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if np.any(anchor[..., 2:] <= 0):
        raise ValueError("anchor sizes must be positive")
    v1, v2 = variances
    out = np.empty(np.broadcast_shapes(offsets.shape, anchor.shape))
    out[..., :2] = anchor[..., :2] + offsets[..., :2] * v1 * anchor[..., 2:]
    out[..., 2:] = anchor[..., 2:] * np.exp(offsets[..., 2:] * v2)
    return out


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


@dataclass(frozen=True)
class LossReport:
    total: float
    conf: float
    loc: float
    num_positive: int
    alpha: float = 1.0


def _loss_parts(class_logits, loc_preds, assignments, gts, anchors, alpha, neg_ratio, variances):
    anchor_boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    b, a, _ = class_logits.shape
    if loc_preds.shape != (b, a, 4):
        raise ShapeError(f"loc_preds shape {loc_preds.shape} does not match logits {(b, a, 4)}")
    if len(assignments) != b or len(gts) != b:
        raise ShapeError(f"{len(assignments)} assignments / {len(gts)} gt sets for batch of {b}")
    if len(anchor_boxes) != a:
        raise ShapeError(f"{len(anchor_boxes)} anchors for {a} predictions")
    for i, m in enumerate(assignments):
        if m.gt_index.shape != (a,):
            raise ShapeError(f"assignment {i} covers {m.gt_index.shape[0]} anchors, expected {a}")
    conf_terms = np.zeros((b, a))
    loc_terms = np.zeros((b, a))
    grad_logits = np.zeros_like(class_logits)
    grad_loc = np.zeros_like(loc_preds)
    n_total = sum(m.num_positive for m in assignments)
    if n_total == 0:
        return conf_terms, loc_terms, grad_logits, grad_loc, 0
    logp = log_softmax(class_logits, axis=-1)
    for i, (m, (boxes, labels)) in enumerate(zip(assignments, gts)):
        pos = np.flatnonzero(m.gt_index >= 0)
        if len(pos) == 0:
            continue
        target = np.zeros(a, dtype=np.int64)
        target[pos] = np.asarray(labels, dtype=np.int64)[m.gt_index[pos]]
        neg_loss = -logp[i, :, 0].copy()
        neg_loss[pos] = -np.inf
        order = np.argsort(-neg_loss, kind="stable")
        n_neg = min(neg_ratio * len(pos), a - len(pos))
        chosen = np.sort(np.concatenate([pos, order[:n_neg]]))
        conf_terms[i, chosen] = -logp[i, chosen, target[chosen]]
        probs = np.exp(logp[i, chosen])
        probs[np.arange(len(chosen)), target[chosen]] -= 1.0
        grad_logits[i, chosen] = probs

        enc = encode(np.asarray(boxes)[m.gt_index[pos]], anchor_boxes[pos], variances)
        diff = loc_preds[i, pos] - enc
        loc_terms[i, pos] = smooth_l1(diff).sum(axis=-1)
        grad_loc[i, pos] = alpha * smooth_l1_grad(diff)
    grad_logits /= n_total
    grad_loc /= n_total
    return conf_terms, loc_terms, grad_logits, grad_loc, n_total


def multibox_loss(class_logits, loc_preds, assignments, gts, anchors, alpha=1.0, neg_ratio=3, variances=VARIANCES):
    """Joint confidence + localization loss over a batch.

    ``class_logits`` [B, A, c+1] (background is class 0), ``loc_preds``
    [B, A, 4], one :class:`MatchAssignment` per image and ``gts`` as a list
    of ``(boxes [G, 4] center form, labels [G] in 1..c)``.  Negatives are
    mined per image by confidence loss, ``neg_ratio`` per positive.

    Returns ``(report, grad_logits, grad_loc)``.
    """
    conf_t, loc_t, g_logits, g_loc, n = _loss_parts(
        class_logits, loc_preds, assignments, gts, anchors, alpha, neg_ratio, variances
    )
    if n == 0:
        return LossReport(0.0, 0.0, 0.0, 0, alpha), g_logits, g_loc
    conf_sum = float(conf_t.sum())
    loc_sum = float(loc_t.sum())
    total = (conf_sum + alpha * loc_sum) / n
    return LossReport(float(total), conf_sum, loc_sum, n, alpha), g_logits, g_loc


def multibox_loss_terms(class_logits, loc_preds, assignments, gts, anchors, alpha=1.0, neg_ratio=3, variances=VARIANCES):
    """Per-anchor contributions [B, A] to the total loss; they sum to ``report.total``."""
    conf_t, loc_t, _, _, n = _loss_parts(class_logits, loc_preds, assignments, gts, anchors, alpha, neg_ratio, variances)
    return (conf_t + alpha * loc_t) / max(n, 1)


def class_probabilities(logits):
    return softmax(logits, axis=-1)
