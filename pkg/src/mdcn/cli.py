"""Command-line entry point: ``mdcn <command> [options]``.

Precedence: built-in defaults < ``--config`` file < explicit flags.
All randomness derives from ``--seed``.  ``MDCN_THREADS`` caps the number of
worker threads used for per-image detection and evaluation.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import kernels as K
from .config import Config, ConfigError, dump_config, override, parse_config
from .detect import Detector
from .images import encode_ppm, load_image
from .kitti import (
    CLASSES,
    IOU_SWEEP,
    evaluate_detections,
    format_detections,
    format_kitti_label,
    format_table1,
    format_table2,
    iou_sweep,
    parse_detections,
    parse_kitti_labels,
    report_records,
)
from .multibox import anchors_for_network
from .netbuilder import (
    TABLE_III_PARAMS,
    VARIANTS,
    assemble_model,
    count_parameters,
    format_summary,
    normalize_variant,
    receptive_field,
    summarize,
    summary_records,
    tiny_detector_graph,
)
from .network import Network
from .trainer import (
    OptimizerState,
    Schedule,
    TrainOptions,
    grad_check,
    load_checkpoint,
    make_synthetic_dataset,
    network_grad_check,
    train,
)


def _threads():
    raw = os.environ.get("MDCN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MDCN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MDCN_THREADS must be a positive integer, got {raw!r}")
    return n


def _ordered_map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _load_config(args):
    # report commands describe the full-size model unless told otherwise
    cfg = Config(profile="canonical", input_size=300) if getattr(args, "canonical", False) else Config()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text(), cfg)
    flags = {}
    for key in ("variant", "profile", "input_size", "seed", "iterations", "n_images", "base_lr", "output_dir"):
        if hasattr(args, key):
            flags[key] = getattr(args, key)
    return override(cfg, **flags)


def _graph_for(cfg):
    return assemble_model(cfg.variant, cfg.model_config())


# ---- commands ----------------------------------------------------------


def cmd_summarize(args, out):
    cfg = _load_config(args)
    summary = summarize(_graph_for(cfg))
    out.write(summary_records(summary) if args.format == "records" else format_summary(summary))


def cmd_count_params(args, out):
    cfg = _load_config(args)
    if args.all:
        for v in VARIANTS:
            total = count_parameters(assemble_model(v, cfg.model_config())).total
            line = f"{v:<8} {total:>11,}"
            if cfg.profile == "canonical" and cfg.input_size == 300:
                target = TABLE_III_PARAMS[v]
                line += f"  published {target:.3g}  rel {100 * (total / target - 1):+.2f}%"
            out.write(line + "\n")
        return
    report = count_parameters(_graph_for(cfg))
    width = max(len(lid) for lid, _ in report.rows)
    for lid, n in report.rows:
        out.write(f"{lid:<{width}}  {n:>11,}\n")
    out.write(f"{'total':<{width}}  {report.total:>11,}\n")


def cmd_rf_report(args, out):
    cfg = _load_config(args)
    graph = _graph_for(cfg)
    rf = receptive_field(graph)
    width = max(len(r.id) for r in rf.rows)
    out.write(f"{'layer':<{width}}  {'rf':>5}  {'stride':>6}  coverage\n")
    for r in rf.rows:
        out.write(f"{r.id:<{width}}  {r.rf:>5}  {r.stride:>6}  {r.coverage:.4f}\n")
    for tap in graph.source_taps:
        r = rf[tap]
        out.write(f"tap {tap} rf={r.rf} stride={r.stride} coverage={r.coverage:.4f}\n")


def cmd_gen_anchors(args, out):
    cfg = _load_config(args)
    net_graph = _graph_for(cfg)
    anchors = anchors_for_network(_ShapeOnly(net_graph), smin=cfg.anchor_smin, smax=cfg.anchor_smax)
    text = anchors.dump()
    if args.out:
        Path(args.out).write_text(text)
        out.write(f"wrote {len(anchors)} anchors to {args.out}\n")
    else:
        out.write(text)


class _ShapeOnly:
    """Just enough of a Network for anchor generation without allocating weights."""

    def __init__(self, graph):
        self.graph = graph

    tap_shapes = Network.tap_shapes


def kernel_grad_checks(seed=0, tolerance=1e-6):
    """Finite-difference checks of every layer kernel on random small inputs."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, forward, backward, params):
        w = {k: rng.standard_normal(forward(params).shape) for k in ("out",)}["out"]
        analytic = backward(params, w)
        report = grad_check(lambda p: forward(p) * w, params, analytic, tolerance, sample=40, seed=seed)
        results.append((name, report))

    x = rng.standard_normal((2, 3, 5, 5))
    conv_p = {"x": x, "w": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal(4)}

    def conv_fwd(p):
        return K.conv2d_forward(p["x"], K.ConvParams(p["w"], p["b"], 2, 1, 1))

    def conv_bwd(p, g):
        dx, dw, db = K.conv2d_backward(p["x"], K.ConvParams(p["w"], p["b"], 2, 1, 1), g)
        return {"x": dx, "w": dw, "b": db}

    check("conv2d", conv_fwd, conv_bwd, conv_p)
    dil_p = {"x": rng.standard_normal((1, 2, 7, 7)), "w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)}

    def dil_fwd(p):
        return K.conv2d_forward(p["x"], K.ConvParams(p["w"], p["b"], 1, 2, 2))

    def dil_bwd(p, g):
        dx, dw, db = K.conv2d_backward(p["x"], K.ConvParams(p["w"], p["b"], 1, 2, 2), g)
        return {"x": dx, "w": dw, "b": db}

    check("conv2d-dilated", dil_fwd, dil_bwd, dil_p)
    # distinct values spaced well beyond the step keep the argmax fixed
    pool_x = rng.permutation(72).reshape(1, 2, 6, 6) * 0.01

    def pool_fwd(p):
        return K.maxpool2d(p["x"], 3, 2, 1, True)[0]

    def pool_bwd(p, g):
        _, idx = K.maxpool2d(p["x"], 3, 2, 1, True)
        return {"x": K.maxpool2d_backward(g, idx, p["x"].shape)}

    check("maxpool2d", pool_fwd, pool_bwd, {"x": pool_x.astype(np.float64)})
    rx = rng.standard_normal((2, 3, 4, 4))
    rx = np.sign(rx) * (np.abs(rx) + 0.1)
    check("relu", lambda p: K.relu(p["x"]), lambda p, g: {"x": K.relu_backward(p["x"], g)}, {"x": rx})
    sx = {"x": rng.standard_normal((4, 5))}
    check(
        "softmax",
        lambda p: K.softmax(p["x"], axis=1),
        lambda p, g: {"x": K.softmax_backward(K.softmax(p["x"], axis=1), g, axis=1)},
        sx,
    )
    lp = {"x": rng.standard_normal((2, 4, 3, 3)), "s": rng.uniform(1, 3, 4)}

    def l2_bwd(p, g):
        dx, ds = K.l2_normalize_scale_backward(p["x"], p["s"], g)
        return {"x": dx, "s": ds}

    check("l2norm", lambda p: K.l2_normalize_scale(p["x"], p["s"]), l2_bwd, lp)
    return results


def tiny_loss_grad_check(seed=0, tolerance=1e-6, sample=64):
    graph = tiny_detector_graph(8)
    net = Network(graph, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((2, 3, 8, 8))
    gts = [
        (np.array([[0.3, 0.4, 0.4, 0.5]]), np.array([1])),
        (np.array([[0.6, 0.5, 0.5, 0.3], [0.3, 0.3, 0.2, 0.2]]), np.array([2, 3])),
    ]
    return network_grad_check(net, x, gts, tolerance, 1e-5, sample, seed)


def cmd_gradcheck(args, out):
    results = kernel_grad_checks(args.seed or 0, args.tolerance)
    results.append(("multibox-loss+network", tiny_loss_grad_check(args.seed or 0, args.tolerance)))
    failed = 0
    for name, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        failed += not rep.passed
        out.write(f"{status} {name:<22} max_rel_err={rep.max_rel_error:.3e} checked={rep.checked} skipped={rep.skipped}\n")
    out.write(f"{len(results) - failed}/{len(results)} passed\n")
    return 1 if failed else 0


def export_dataset(scenes, root):
    root = Path(root)
    (root / "image_2").mkdir(parents=True, exist_ok=True)
    (root / "label_2").mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        (root / "image_2" / f"{i:06d}.ppm").write_bytes(encode_ppm(scene.image))
        labels = "".join(format_kitti_label(g) + "\n" for g in scene.ground_truth())
        (root / "label_2" / f"{i:06d}.txt").write_text(labels)


def cmd_make_data(args, out):
    cfg = _load_config(args)
    scenes = make_synthetic_dataset(cfg.seed, cfg.n_images, cfg.input_size)
    export_dataset(scenes, args.out)
    out.write(f"wrote {len(scenes)} scenes to {args.out}\n")


def cmd_train_toy(args, out):
    cfg = _load_config(args)
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(dump_config(cfg))
    dataset = make_synthetic_dataset(cfg.seed, cfg.n_images, cfg.input_size)
    net = Network(_graph_for(cfg), seed=cfg.seed)
    schedule = Schedule.scaled(cfg.iterations, cfg.base_lr, cfg.warmup)
    options = TrainOptions(
        cfg.batch_size, cfg.alpha, cfg.neg_ratio, cfg.match_threshold, cfg.flip, cfg.crop,
        cfg.seed, cfg.anchor_smin, cfg.anchor_smax, cfg.checkpoint_every,
    )
    state = OptimizerState.for_params(net.params, momentum=cfg.momentum, weight_decay=cfg.weight_decay, base_lr=cfg.base_lr)
    trace_path = root / "trace.txt"
    with trace_path.open("w") as fh:
        result = train(net, dataset, schedule, state, options, root / "checkpoints", lambda r: fh.write(r.line() + "\n"))
    if cfg.eval_images:
        export_dataset(make_synthetic_dataset(cfg.seed + 1, cfg.eval_images, cfg.input_size), root / "heldout")
    last = result.trace[-1]
    out.write(f"trained {len(result.trace)} iterations; final loss {last.total:.6f}\n")
    out.write(f"checkpoint {root / 'checkpoints' / 'final'}\ntrace {trace_path}\n")


def _detector_from_checkpoint(path, cfg):
    net, _, manifest = load_checkpoint(path)
    opts = manifest.get("options", {})
    return Detector(
        net,
        conf_floor=cfg.conf_floor,
        nms_threshold=cfg.nms_threshold,
        top_k=cfg.top_k,
        smin=opts.get("smin", cfg.anchor_smin),
        smax=opts.get("smax", cfg.anchor_smax),
    )


def cmd_detect(args, out):
    cfg = _load_config(args)
    det = _detector_from_checkpoint(args.checkpoint, cfg)
    out.write(format_detections(det(load_image(args.image))))


def _read_data_dir(root):
    root = Path(root)
    label_dir = root / "label_2"
    if not label_dir.is_dir():
        raise FileNotFoundError(f"{label_dir} not found")
    ids = sorted(p.stem for p in label_dir.glob("*.txt"))
    labels = [parse_kitti_labels((label_dir / f"{i}.txt").read_text()) for i in ids]
    return ids, labels


def _find_image(root, image_id):
    for ext in (".ppm", ".mdt"):
        p = Path(root) / "image_2" / f"{image_id}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no image for label {image_id} in {root}/image_2")


def cmd_eval(args, out):
    cfg = _load_config(args)
    ids, labels = _read_data_dir(args.data)
    if bool(args.checkpoint) == bool(args.detections):
        raise ConfigError("give exactly one of --checkpoint or --detections")
    if args.detections:
        det_dir = Path(args.detections)
        missing = [i for i in ids if not (det_dir / f"{i}.txt").exists()]
        if missing:
            raise FileNotFoundError(f"no detections for images {missing[:3]}")
        dets = [parse_detections((det_dir / f"{i}.txt").read_text()) for i in ids]
    else:
        detector = _detector_from_checkpoint(args.checkpoint, cfg)
        dets = _ordered_map(lambda i: detector(load_image(_find_image(args.data, i))), ids)
    points = 40 if args.ap40 else 11
    report = evaluate_detections(dets, labels, CLASSES, points=points)
    sweep = iou_sweep(dets, labels, CLASSES, IOU_SWEEP, args.sweep_difficulty, points)
    if args.format == "records":
        out.write(report_records(report, sweep))
    else:
        out.write(format_table1(report, args.name))
        out.write("\n" + format_table2(sweep, IOU_SWEEP, args.name))
        out.write("mAP " + ("n/a" if np.isnan(report.mean_ap) else f"{100 * report.mean_ap:.1f}") + "\n")


# ---- argument parsing --------------------------------------------------


def _variant(s):
    try:
        return normalize_variant(s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mdcn",
        description=__doc__.split("\n\n")[0],
        epilog="Flags override keys read from --config; unset flags keep the config value.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, help="seed for all randomness")
        if model:
            p.add_argument("--variant", type=_variant, help="ssd-300, mdcn-i1 or mdcn-i2")
            p.add_argument("--profile", choices=("toy", "canonical"), help="network width profile")
            p.add_argument("--input-size", dest="input_size", type=int)

    def canonical_default(p):
        p.set_defaults(canonical=True)

    p = sub.add_parser("summarize", help="per-layer shape/params/receptive field report")
    common(p)
    canonical_default(p)
    p.add_argument("--format", choices=("text", "records"), default="text")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("count-params", help="parameter table")
    common(p)
    canonical_default(p)
    p.add_argument("--all", action="store_true", help="totals for all variants")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("rf-report", help="receptive field table")
    common(p)
    canonical_default(p)
    p.set_defaults(func=cmd_rf_report)

    p = sub.add_parser("gen-anchors", help="dump default boxes: tap row col ratio cx cy w h")
    common(p)
    p.add_argument("--out", help="write to file instead of stdout")
    p.set_defaults(func=cmd_gen_anchors)

    p = sub.add_parser("gradcheck", help="finite-difference verification of kernels and loss")
    common(p, model=False)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-data", help="export a synthetic KITTI-layout dataset")
    common(p)
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train-toy", help="train on synthetic scenes")
    common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--out", dest="output_dir")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("detect", help="detections for one image (PPM or MDT1)")
    common(p, model=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="Table-I/II style AP report over a KITTI-layout directory")
    common(p, model=False)
    p.add_argument("--data", required=True, help="directory with label_2/ (and image_2/)")
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="directory of per-image detection files")
    p.add_argument("--format", choices=("text", "records"), default="text")
    p.add_argument("--name", default="model")
    p.add_argument("--sweep-difficulty", dest="sweep_difficulty", default="hard", choices=("easy", "moderate", "hard"))
    p.add_argument("--ap40", action="store_true", help="40-point interpolation instead of 11")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args, out)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"mdcn {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return code or 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
