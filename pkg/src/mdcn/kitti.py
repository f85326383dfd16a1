"""KITTI label ingestion, NMS and average-precision evaluation."""

from dataclasses import dataclass, field

import numpy as np

from .multibox import iou_matrix

CLASSES = ("Car", "Pedestrian", "Cyclist")
DIFFICULTIES = ("easy", "moderate", "hard")
IOU_SWEEP = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8)
CLASS_ALIASES = {"Van": "Car"}

# (min bbox height px, max occlusion level, max truncation) per difficulty
KITTI_LEVELS = (
    ("easy", 40.0, 0, 0.15),
    ("moderate", 25.0, 1, 0.30),
    ("hard", 25.0, 2, 0.50),
)


class KittiFormatError(ValueError):
    pass


def difficulty_of(height, occlusion, truncation):
    for name, min_h, max_occ, max_trunc in KITTI_LEVELS:
        if height >= min_h and occlusion <= max_occ and truncation <= max_trunc:
            return name
    return "ignored"


def _level(difficulty):
    return DIFFICULTIES.index(difficulty) if difficulty in DIFFICULTIES else len(DIFFICULTIES)


@dataclass(frozen=True)
class GroundTruth:
    cls: str
    box: tuple  # xmin, ymin, xmax, ymax in pixels
    truncation: float = 0.0
    occlusion: int = 0
    difficulty: str = field(default=None)

    def __post_init__(self):
        if self.difficulty is None:
            if self.cls == "DontCare":
                diff = "ignored"
            else:
                diff = difficulty_of(self.box[3] - self.box[1], self.occlusion, self.truncation)
            object.__setattr__(self, "difficulty", diff)

    def counts_at(self, difficulty):
        """True when this object is evaluated under ``difficulty`` (None: all)."""
        if self.cls == "DontCare":
            return False
        if difficulty is None:
            return True
        return _level(self.difficulty) <= _level(difficulty)


@dataclass(frozen=True)
class DetectionRecord:
    cls: str
    box: tuple
    confidence: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not np.all(np.isfinite([x0, y0, x1, y1, self.confidence])):
            raise ValueError("detection has non-finite values")
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"invalid detection box {self.box}")


def parse_kitti_labels(text):
    """Parse KITTI ``label_2`` text into :class:`GroundTruth` records."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise KittiFormatError(f"line {lineno}: expected 15 fields, got {len(fields)}")
        try:
            trunc = float(fields[1])
            occ = int(float(fields[2]))
            box = tuple(float(v) for v in fields[4:8])
            [float(v) for v in fields[8:15]]
        except ValueError as exc:
            raise KittiFormatError(f"line {lineno}: {exc}") from exc
        cls = CLASS_ALIASES.get(fields[0], fields[0])
        out.append(GroundTruth(cls, box, trunc, occ))
    return out


def format_kitti_label(gt):
    x0, y0, x1, y1 = gt.box
    return (
        f"{gt.cls} {gt.truncation:.2f} {gt.occlusion} -10 "
        f"{x0:.2f} {y0:.2f} {x1:.2f} {y1:.2f} -1 -1 -1 -1000 -1000 -1000 -10"
    )


def format_detections(dets):
    return "".join(f"{d.cls} {d.confidence:.6f} {d.box[0]:.2f} {d.box[1]:.2f} {d.box[2]:.2f} {d.box[3]:.2f}\n" for d in dets)


def parse_detections(text):
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) != 6:
            raise KittiFormatError(f"line {lineno}: expected 6 fields, got {len(fields)}")
        try:
            conf, *box = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise KittiFormatError(f"line {lineno}: {exc}") from exc
        out.append(DetectionRecord(fields[0], tuple(box), conf))
    return out


def nms(dets, iou_threshold=0.45):
    """Greedy non-maximum suppression.

    Boxes are visited by descending confidence (ties in input order); a box
    survives when its IoU with every survivor is at most ``iou_threshold``.
    """
    if not dets:
        return []
    conf = np.array([d.confidence for d in dets])
    order = np.argsort(-conf, kind="stable")
    boxes = np.array([d.box for d in dets], dtype=np.float64)[order]
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    keep = []
    for i in range(len(dets)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive &= overlaps[i] <= iou_threshold
    return [dets[i] for i in keep]


@dataclass(frozen=True)
class APResult:
    cls: str
    difficulty: str
    iou_threshold: float
    recall: tuple
    precision: tuple
    ap: float
    num_gt: int


def interpolated_ap(recall, precision, points=11):
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if points == 11:
        levels = np.linspace(0.0, 1.0, 11)
    elif points == 40:
        levels = np.linspace(1.0 / 40, 1.0, 40)
    else:
        raise ValueError("points must be 11 or 40")
    total = 0.0
    for r in levels:
        mask = recall >= r - 1e-12
        total += precision[mask].max() if mask.any() else 0.0
    return total / len(levels)


def average_precision(dets, gts, cls, difficulty="moderate", iou_threshold=0.5, points=11):
    """AP of class ``cls`` over a set of images.

    ``dets`` and ``gts`` are per-image lists aligned by index.  Each
    detection (highest confidence first) is compared with the ground truth
    it overlaps most in its image.  Above the threshold it is a true
    positive on first claim and a false positive on repeats; overlaps with
    ignored objects or DontCare regions are dropped from the ranking.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} label lists")
    per_image = []
    num_gt = 0
    for img_gts in gts:
        rel = [g for g in img_gts if g.cls == cls or g.cls == "DontCare"]
        counted = np.array([g.counts_at(difficulty) and g.cls == cls for g in rel], dtype=bool)
        boxes = np.array([g.box for g in rel], dtype=np.float64).reshape(-1, 4)
        per_image.append((boxes, counted, np.zeros(len(rel), dtype=bool)))
        num_gt += int(counted.sum())
    flat = [(d.confidence, i, d.box) for i, img in enumerate(dets) for d in img if d.cls == cls]
    order = sorted(range(len(flat)), key=lambda j: -flat[j][0])
    outcomes = []
    for j in order:
        _, img, box = flat[j]
        boxes, counted, taken = per_image[img]
        if len(boxes) == 0:
            outcomes.append(False)
            continue
        ov = iou_matrix(np.array([box]), boxes)[0]
        g = int(np.argmax(ov))
        if ov[g] >= iou_threshold:
            if not counted[g]:
                continue
            if not taken[g]:
                taken[g] = True
                outcomes.append(True)
                continue
        outcomes.append(False)
    tp = np.cumsum(outcomes, dtype=np.float64)
    fp = np.cumsum(np.logical_not(outcomes), dtype=np.float64)
    if num_gt == 0:
        # nothing to recall: undefined, left out of the mean
        return APResult(cls, difficulty, iou_threshold, (), (), float("nan"), 0)
    if len(outcomes) == 0:
        return APResult(cls, difficulty, iou_threshold, (), (), 0.0, num_gt)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    ap = interpolated_ap(recall, precision, points)
    return APResult(cls, difficulty, iou_threshold, tuple(recall), tuple(precision), float(ap), num_gt)


def iou_sweep(dets, gts, classes=CLASSES, thresholds=IOU_SWEEP, difficulty="hard", points=11):
    """AP per class at each IoU threshold: ``{cls: (ap at t0, ap at t1, ...)}``."""
    return {
        c: tuple(average_precision(dets, gts, c, difficulty, t, points).ap for t in thresholds) for c in classes
    }


@dataclass(frozen=True)
class EvalReport:
    cells: dict  # (cls, difficulty) -> APResult
    classes: tuple = CLASSES
    difficulties: tuple = DIFFICULTIES

    @property
    def mean_ap(self):
        """Mean over cells with ground truth; NaN when none has any."""
        vals = [r.ap for r in self.cells.values() if r.num_gt > 0]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_detections(dets, gts, classes=CLASSES, difficulties=DIFFICULTIES, iou_threshold=0.5, points=11):
    cells = {}
    for c in classes:
        for d in difficulties:
            cells[(c, d)] = average_precision(dets, gts, c, d, iou_threshold, points)
    return EvalReport(cells, tuple(classes), tuple(difficulties))


def evaluate_model(model, images, labels, **kwargs):
    """Run ``model`` (image -> detections) over ``images`` and build the class x difficulty table."""
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} label sets")
    dets = [list(model(img)) for img in images]
    return evaluate_detections(dets, labels, **kwargs)


def _pct(v, digits):
    return "n/a" if np.isnan(v) else f"{100 * v:.{digits}f}"


def format_table1(report, name="model"):
    head = ["Model"] + [f"{c}/{d}" for c in report.classes for d in report.difficulties] + ["mAP"]
    vals = [name] + [_pct(report.cells[(c, d)].ap, 2) for c in report.classes for d in report.difficulties]
    vals.append(_pct(report.mean_ap, 2))
    widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    return fmt.format(*head) + "\n" + fmt.format(*vals) + "\n"


def format_table2(sweep, thresholds=IOU_SWEEP, name="model"):
    head = ["Class", "Method"] + [f"{t:g}" for t in thresholds]
    rows = [[c, name] + [_pct(v, 1) for v in vals] for c, vals in sweep.items()]
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
    return "".join(fmt.format(*r) + "\n" for r in [head] + rows)


def report_records(report, sweep=None, thresholds=IOU_SWEEP):
    lines = [
        f"ap class={c} difficulty={d} iou={r.iou_threshold:g} value={r.ap!r} num_gt={r.num_gt}"
        for (c, d), r in report.cells.items()
    ]
    lines.append(f"map value={report.mean_ap!r}")
    for c, vals in (sweep or {}).items():
        for t, v in zip(thresholds, vals):
            lines.append(f"sweep class={c} iou={t:g} value={v!r}")
    return "\n".join(lines) + "\n"
