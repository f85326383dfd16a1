"""SGD training, learning-rate schedule, gradient verification, toy data."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .images import PIXEL_MEAN, PIXEL_STD, resize_bilinear
from .kitti import CLASSES, GroundTruth
from .multibox import anchors_for_network, corners_to_center, match, multibox_loss
from .netbuilder import dump_graph, parse_graph
from .network import Network
from .tensor import ShapeError, load_mdt, save_mdt

PAPER_MILESTONES = (80000, 100000)
PAPER_TOTAL = 120000


@dataclass
class OptimizerState:
    velocity: dict
    momentum: float = 0.9
    weight_decay: float = 0.0005
    base_lr: float = 1e-3
    iteration: int = 0

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls({k: np.zeros_like(v) for k, v in params.items()}, **kwargs)


def sgd_step(params, grads, state, lr):
    """One momentum step with L2 weight decay added to the gradient.

    v <- momentum * v - lr * (g + weight_decay * p);  p <- p + v
    Returns new parameter and state objects; inputs are left untouched.
    """
    new_params, new_velocity = {}, {}
    for key, p in params.items():
        g = grads[key]
        v = state.velocity[key]
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{key}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = state.momentum * v - lr * (g + state.weight_decay * p)
        new_velocity[key] = v
        new_params[key] = p + v
    new_state = OptimizerState(new_velocity, state.momentum, state.weight_decay, state.base_lr, state.iteration + 1)
    return new_params, new_state


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-3
    milestones: tuple = PAPER_MILESTONES
    gamma: float = 0.1
    total: int = PAPER_TOTAL
    warmup: int = 0

    def __post_init__(self):
        m = tuple(self.milestones)
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError(f"milestones must be strictly increasing: {m}")
        if m and m[-1] >= self.total:
            raise ValueError(f"milestones {m} must be below total {self.total}")
        if self.base_lr < 0 or self.warmup < 0:
            raise ValueError("base_lr and warmup must be non-negative")

    @classmethod
    def scaled(cls, total, base_lr=1e-3, warmup=0):
        """The 80k/100k-of-120k schedule compressed to ``total`` iterations."""
        f = total / PAPER_TOTAL
        # very short runs can round two milestones together; keep the distinct ones
        ms = sorted({int(round(m * f)) for m in PAPER_MILESTONES} - {0})
        return cls(base_lr, tuple(m for m in ms if m < total), 0.1, total, warmup)


def schedule_lr(schedule, iteration):
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    passed = sum(1 for m in schedule.milestones if iteration >= m)
    lr = schedule.base_lr * schedule.gamma**passed
    if iteration < schedule.warmup:
        lr *= (iteration + 1) / schedule.warmup
    return lr


# ---- gradient verification ---------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple
    tolerance: float

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn, params, analytic, tolerance=1e-6, eps=1e-5, sample=64, seed=0, signature=None, floor=1e-8):
    """Compare ``analytic`` gradients with central differences of ``fn``.

    ``fn(params) -> float`` evaluates the loss; ``sample`` coordinates are
    drawn at random across all parameter tensors (``None`` checks all).
    ``fn`` may also return the loss as an array of terms; the two sides are
    then differenced term by term before summing, which keeps roundoff in
    large sums from swamping small gradients.  If ``signature`` is
    given, coordinates whose +/- perturbations change it (a ReLU or max-pool
    switch) are skipped rather than compared.
    """
    base = fn(params)
    if not np.all(np.isfinite(base)):
        raise FloatingPointError("loss is not finite")
    sig0 = signature(params) if signature else None
    rng = np.random.default_rng(seed)
    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    picks = rng.choice(total, size=total if sample is None else min(sample, total), replace=False)
    picks.sort()
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, worst_err, checked, skipped = None, 0.0, 0, 0
    for flat in picks:
        ki = int(np.searchsorted(offsets, flat, side="right") - 1)
        key, idx = keys[ki], int(flat - offsets[ki])
        arr = params[key]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + eps
        f_plus = fn(params)
        s_plus = signature(params) if signature else None
        arr.flat[idx] = orig - eps
        f_minus = fn(params)
        s_minus = signature(params) if signature else None
        arr.flat[idx] = orig
        if not (np.all(np.isfinite(f_plus)) and np.all(np.isfinite(f_minus))):
            raise FloatingPointError("loss is not finite")
        if signature and (s_plus != sig0 or s_minus != sig0):
            skipped += 1
            continue
        numeric = float(np.sum(np.asarray(f_plus) - np.asarray(f_minus))) / (2 * eps)
        err = relative_error(float(analytic[key].flat[idx]), numeric, floor)
        checked += 1
        if err >= worst_err:
            worst_err, worst = err, (key, idx, float(analytic[key].flat[idx]), numeric)
    return GradCheckReport(worst_err, checked, skipped, worst, tolerance)


def network_grad_check(network, x, gts, tolerance=1e-6, eps=1e-5, sample=64, seed=0, smin=0.2, smax=0.9, alpha=1.0, neg_ratio=3):
    """Grad-check the full detection loss through every layer of ``network``."""
    anchors = anchors_for_network(network, x.shape[-1], smin, smax)
    assignments = [match(boxes, anchors) for boxes, _ in gts]

    def loss(params):
        net = Network(network.graph, params)
        loc, conf, _ = net.forward(x, keep=False)
        return multibox_loss(conf, loc, assignments, gts, anchors, alpha, neg_ratio)[0].total

    def signature(params):
        net = Network(network.graph, params)
        loc, conf, state = net.forward(x)
        logp = conf - conf.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        mined = tuple(np.argsort(logp[i, :, 0], kind="stable").tobytes() for i in range(len(x)))
        return net.kink_signature(state), hash(mined)

    loc, conf, state = network.forward(x)
    _, g_conf, g_loc = multibox_loss(conf, loc, assignments, gts, anchors, alpha, neg_ratio)
    grads = network.backward(state, g_loc, g_conf)
    params = {k: v.copy() for k, v in network.params.items()}
    return grad_check(loss, params, grads, tolerance, eps, sample, seed, signature)


# ---- synthetic scenes --------------------------------------------------


@dataclass(frozen=True)
class SyntheticScene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    boxes: np.ndarray  # [G, 4] pixel corners
    labels: np.ndarray  # [G] class index in 1..3
    occlusion: np.ndarray  # [G] KITTI-style level 0..2

    def ground_truth(self, class_names=CLASSES):
        return [
            GroundTruth(class_names[int(c) - 1], tuple(float(v) for v in b), 0.0, int(o))
            for b, c, o in zip(self.boxes, self.labels, self.occlusion)
        ]

    def normalized(self):
        """Boxes in center form relative to the image size, plus labels."""
        _, h, w = self.image.shape
        scale = np.array([w, h, w, h], dtype=np.float64)
        return corners_to_center(self.boxes / scale).reshape(-1, 4), self.labels.copy()


# class palette: base RGB and (min, max) width/height aspect
_PALETTE = {
    1: ((0.85, 0.25, 0.2), (1.4, 2.2)),  # car: wide rectangle
    2: ((0.2, 0.75, 0.3), (0.35, 0.6)),  # pedestrian: tall ellipse
    3: ((0.25, 0.35, 0.9), (0.8, 1.2)),  # cyclist: triangle
}


def _shape_mask(cls, x0, y0, x1, y1, yy, xx):
    if cls == 1:
        return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    a, b = (x1 - x0) / 2, (y1 - y0) / 2
    if cls == 2:
        return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    # apex at top centre, base along the bottom edge
    t = (yy - y0) / (y1 - y0)
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= a * t)


def make_scene(rng, size, classes, max_overlap=0.3):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    gy = rng.uniform(0.3, 0.6) + rng.uniform(-0.15, 0.15) * (yy / size)
    gx = rng.uniform(-0.15, 0.15) * (xx / size)
    image = np.clip(gy + gx + rng.normal(0, 0.04, (3, size, size)), 0, 1)
    owner = np.full((size, size), -1)
    boxes, labels, areas = [], [], []
    for cls in classes:
        color, (amin, amax) = _PALETTE[cls]
        for _ in range(30):
            side = rng.uniform(0.14, 0.42) * size
            aspect = rng.uniform(amin, amax)
            w = min(side * math.sqrt(aspect), size - 2)
            h = min(side / math.sqrt(aspect), size - 2)
            x0 = rng.uniform(0, size - w)
            y0 = rng.uniform(0, size - h)
            cand = np.array([x0, y0, x0 + w, y0 + h])
            if all(_box_iou(cand, b) <= max_overlap for b in boxes):
                break
        else:
            continue
        mask = _shape_mask(cls, *cand, yy, xx)
        if not mask.any():
            continue
        tint = np.clip(np.array(color) + rng.uniform(-0.12, 0.12, 3), 0, 1)
        image[:, mask] = tint[:, None] + rng.normal(0, 0.03, (3, int(mask.sum())))
        owner[mask] = len(boxes)
        areas.append(int(mask.sum()))
        boxes.append(cand)
        labels.append(cls)
    image = np.clip(image, 0, 1)
    occ = []
    for i, area in enumerate(areas):
        visible = np.count_nonzero(owner == i) / area
        occ.append(0 if visible >= 0.9 else 1 if visible >= 0.6 else 2)
    return SyntheticScene(
        image,
        np.array(boxes, dtype=np.float64).reshape(-1, 4),
        np.array(labels, dtype=np.int64),
        np.array(occ, dtype=np.int64),
    )


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def make_synthetic_dataset(seed, n_images, size=150, max_objects=4):
    """Reproducible scenes of rectangles, ellipses and triangles.

    Object classes cycle 1, 2, 3 across the whole dataset, so the class
    histogram is balanced to within one object.
    """
    if size < 75:
        raise ValueError("synthetic scenes need size >= 75")
    rng = np.random.default_rng(seed)
    scenes, counter = [], 0
    for _ in range(n_images):
        n = int(rng.integers(1, max_objects + 1))
        classes = [(counter + j) % 3 + 1 for j in range(n)]
        counter += n
        scenes.append(make_scene(rng, size, classes))
    return scenes


# ---- training loop -----------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    lr: float
    total: float
    conf: float
    loc: float
    num_positive: int

    def line(self):
        return f"{self.iteration} {self.lr!r} {self.total!r} {self.conf!r} {self.loc!r} {self.num_positive}"

    @classmethod
    def parse(cls, line):
        it, lr, tot, conf, loc, n = line.split()
        return cls(int(it), float(lr), float(tot), float(conf), float(loc), int(n))


@dataclass(frozen=True)
class TrainOptions:
    batch_size: int = 8
    alpha: float = 1.0
    neg_ratio: int = 3
    match_threshold: float = 0.5
    flip: bool = True
    crop: bool = False
    seed: int = 0
    smin: float = 0.2
    smax: float = 0.9
    checkpoint_every: int = 0


@dataclass
class TrainResult:
    network: Network
    state: OptimizerState
    trace: list = field(default_factory=list)


def _augment(scene, flip, crop_box):
    """Apply crop (x0, y0, side in pixels) then horizontal flip."""
    image, boxes, labels = scene.image, scene.boxes, scene.labels
    _, h, w = image.shape
    if crop_box is not None:
        cx, cy, side = crop_box
        image = resize_bilinear(image[:, cy : cy + side, cx : cx + side], h, w)
        boxes = boxes - np.array([cx, cy, cx, cy])
        boxes = np.clip(boxes, 0, side) * (w / side)
        keep = ((boxes[:, 2] - boxes[:, 0]) > 2) & ((boxes[:, 3] - boxes[:, 1]) > 2)
        boxes, labels = boxes[keep], labels[keep]
    if flip:
        image = image[:, :, ::-1]
        boxes = np.stack([w - boxes[:, 2], boxes[:, 1], w - boxes[:, 0], boxes[:, 3]], axis=1).reshape(-1, 4)
    scale = np.array([w, h, w, h], dtype=np.float64)
    return image, corners_to_center(boxes / scale).reshape(-1, 4), labels


def train(network, dataset, schedule, state=None, options=TrainOptions(), checkpoint_dir=None, on_record=None):
    """Run ``schedule.total - state.iteration`` SGD iterations on ``dataset``."""
    if not dataset:
        raise ValueError("dataset is empty")
    size = network.graph.input_size
    for scene in dataset:
        if scene.image.shape[1:] != (size, size):
            raise ShapeError(f"scene is {scene.image.shape[1:]}, network expects {size}x{size}")
    state = state or OptimizerState.for_params(network.params, base_lr=schedule.base_lr)
    anchors = anchors_for_network(network, smin=options.smin, smax=options.smax)
    rng = np.random.default_rng(options.seed)
    match_cache = {}
    params = network.params
    trace = []
    order, cursor = rng.permutation(len(dataset)), 0
    while state.iteration < schedule.total:
        it = state.iteration
        batch_idx = []
        while len(batch_idx) < options.batch_size:
            if cursor == len(order):
                order, cursor = rng.permutation(len(dataset)), 0
            batch_idx.append(int(order[cursor]))
            cursor += 1
        flips = rng.random(len(batch_idx)) < 0.5 if options.flip else np.zeros(len(batch_idx), bool)
        images, gts, assignments = [], [], []
        for i, flip in zip(batch_idx, flips):
            crop = None
            if options.crop and rng.random() < 0.5:
                side = int(rng.integers(int(0.7 * size), size + 1))
                crop = (int(rng.integers(0, size - side + 1)), int(rng.integers(0, size - side + 1)), side)
            image, boxes, labels = _augment(dataset[i], bool(flip), crop)
            key = (i, bool(flip), crop)
            if key not in match_cache:
                match_cache[key] = match(boxes, anchors, options.match_threshold)
            images.append((image - PIXEL_MEAN) / PIXEL_STD)
            gts.append((boxes, labels))
            assignments.append(match_cache[key])
        x = np.ascontiguousarray(np.stack(images))
        net = Network(network.graph, params)
        # overflow is reported by the divergence guard below, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            loc, conf, fstate = net.forward(x)
            report, g_conf, g_loc = multibox_loss(conf, loc, assignments, gts, anchors, options.alpha, options.neg_ratio)
        if not math.isfinite(report.total):
            raise FloatingPointError(f"loss diverged at iteration {it}")
        grads = net.backward(fstate, g_loc, g_conf)
        del fstate
        lr = schedule_lr(schedule, it)
        params, state = sgd_step(params, grads, state, lr)
        rec = TraceRecord(it, lr, report.total, report.conf, report.loc, report.num_positive)
        trace.append(rec)
        if on_record:
            on_record(rec)
        done = state.iteration
        if checkpoint_dir and options.checkpoint_every and done % options.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"iter_{done:06d}", Network(network.graph, params), state, schedule, options)
    final = Network(network.graph, params)
    if checkpoint_dir:
        save_checkpoint(Path(checkpoint_dir) / "final", final, state, schedule, options)
    return TrainResult(final, state, trace)


def format_trace(trace):
    return "".join(r.line() + "\n" for r in trace)


# ---- checkpoints -------------------------------------------------------


def save_checkpoint(path, network, state=None, schedule=None, options=None, extra=None):
    """Write graph text, one MDT1 file per parameter (and velocity), manifest."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "graph.txt").write_text(dump_graph(network.graph))
    for key in sorted(network.params):
        save_mdt(path / "params" / f"{key}.mdt", network.params[key])
    manifest = {"params": sorted(network.params)}
    if state is not None:
        (path / "velocity").mkdir(exist_ok=True)
        for key in sorted(state.velocity):
            save_mdt(path / "velocity" / f"{key}.mdt", state.velocity[key])
        manifest["optimizer"] = {
            "iteration": state.iteration,
            "momentum": state.momentum,
            "weight_decay": state.weight_decay,
            "base_lr": state.base_lr,
        }
    if schedule is not None:
        manifest["schedule"] = asdict(schedule)
    if options is not None:
        manifest["options"] = asdict(options)
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(network, optimizer_state_or_None, manifest)``."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{path} is not a checkpoint (no manifest.json)")
    manifest = json.loads((path / "manifest.json").read_text())
    graph = parse_graph((path / "graph.txt").read_text())
    params = {key: load_mdt(path / "params" / f"{key}.mdt") for key in manifest["params"]}
    network = Network(graph, params)
    state = None
    if "optimizer" in manifest:
        opt = manifest["optimizer"]
        velocity = {key: load_mdt(path / "velocity" / f"{key}.mdt") for key in manifest["params"]}
        state = OptimizerState(velocity, opt["momentum"], opt["weight_decay"], opt["base_lr"], opt["iteration"])
    return network, state, manifest
