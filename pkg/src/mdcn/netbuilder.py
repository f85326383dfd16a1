"""Declarative network graphs for SSD-300 and the MDCN variants.

A graph is an ordered list of :class:`LayerSpec` records.  The builders in
this module only describe networks; :mod:`mdcn.network` executes them.
Static analysis (shapes, parameter counts, receptive fields) works on the
description alone.
"""

import itertools
from dataclasses import dataclass, field, replace

from .kernels import conv_output_size, pool_output_size
from .tensor import ShapeError

KINDS = ("conv", "pool", "relu", "l2norm", "concat", "predict-tap")
VARIANTS = ("SSD-300", "MDCN-I1", "MDCN-I2")
INPUT_ID = "data"

# Parameter counts reported for the three detectors at 300x300.
TABLE_III_PARAMS = {"SSD-300": 2.41e7, "MDCN-I1": 2.54e7, "MDCN-I2": 2.55e7}


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"layer {self.id!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class NetworkGraph:
    layers: tuple
    source_taps: tuple = ()
    variant: str = None
    input_size: int = 300
    input_channels: int = 3

    def __post_init__(self):
        seen = {INPUT_ID}
        for layer in self.layers:
            if layer.id in seen:
                raise GraphError(f"duplicate layer id {layer.id!r}")
            for src in layer.inputs:
                if src not in seen:
                    raise GraphError(f"layer {layer.id!r} reads {src!r} before it is defined")
            seen.add(layer.id)
        for tap in self.source_taps:
            if tap not in seen:
                raise GraphError(f"tap {tap!r} is not a layer")

    def __getitem__(self, layer_id):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def predict_layers(self):
        return [l for l in self.layers if l.kind == "predict-tap"]

    def inception_units(self):
        """Names of the deep units that contain an inception concat."""
        return [l.params["unit"] for l in self.layers if l.kind == "concat"]

    def with_input_size(self, size):
        return replace(self, input_size=size)


@dataclass(frozen=True)
class UnitConfig:
    """One deep unit: 1x1 bottleneck then a 3x3 of width ``out_channels``.

    With ``branch_channels`` set and the unit selected for inception, an
    information-square inception module of width ``4 * branch_channels``
    is stacked on the 3x3 output.
    """

    name: str
    bottleneck: int
    out_channels: int
    stride: int = 2
    pad: int = 1
    branch_channels: int = None


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 300
    num_classes: int = 3
    stages: tuple = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
    fc_channels: int = 1024
    fc6_dilation: int = 6
    units: tuple = (
        UnitConfig("conv6", 256, 512, 2, 1, 128),
        UnitConfig("conv7", 128, 256, 2, 1, 64),
        UnitConfig("conv8", 128, 256, 1, 0, 64),
        UnitConfig("conv9", 128, 256, 1, 0),
    )
    anchors_per_tap: tuple = (4, 6, 6, 6, 6, 4)
    l2norm_scale: float = 20.0

    @classmethod
    def toy(cls, input_size=150, num_classes=3):
        """Narrow, shallower VGG-style net with five taps (19, 10, 5, 3, 1 at 150)."""
        return cls(
            input_size=input_size,
            num_classes=num_classes,
            stages=((8, 1), (16, 1), (32, 2), (64, 2), (64, 1)),
            fc_channels=128,
            fc6_dilation=3,
            units=(
                UnitConfig("conv6", 32, 64, 2, 1, 16),
                UnitConfig("conv7", 32, 64, 2, 1, 16),
                UnitConfig("conv8", 32, 64, 1, 0, 16),
            ),
            anchors_per_tap=(4, 6, 6, 6, 4),
        )

    def with_branch_widths(self, widths):
        units = list(self.units)
        it = iter(widths)
        for i, u in enumerate(units):
            if u.branch_channels is not None:
                units[i] = replace(u, branch_channels=next(it))
        return replace(self, units=tuple(units))


@dataclass(frozen=True)
class InceptionUnitSpec:
    prefix: str
    in_channels: int
    bottleneck_channels: int
    branch_channels: int
    input_id: str = INPUT_ID
    # optional 3x3 between the bottleneck and the branches (downsampling entrance)
    entrance_channels: int = None
    stride: int = 1
    pad: int = 1

    def __post_init__(self):
        for name in ("in_channels", "bottleneck_channels", "branch_channels"):
            if getattr(self, name) < 1:
                raise GraphError(f"{name} must be positive")


def conv(layer_id, src, cin, cout, kernel, stride=1, pad=0, dilation=1):
    return LayerSpec(
        layer_id,
        "conv",
        {"cin": cin, "cout": cout, "kernel": kernel, "stride": stride, "pad": pad, "dilation": dilation},
        (src,),
    )


def conv_relu(layer_id, src, cin, cout, kernel, stride=1, pad=0, dilation=1):
    return [
        conv(layer_id, src, cin, cout, kernel, stride, pad, dilation),
        LayerSpec(f"{layer_id}_relu", "relu", {}, (layer_id,)),
    ]


def pool(layer_id, src, kernel, stride, pad=0, ceil=True):
    return LayerSpec(
        layer_id, "pool", {"kernel": kernel, "stride": stride, "pad": pad, "ceil": int(ceil)}, (src,)
    )


def _backbone_layers(config):
    layers = []
    src, cin = INPUT_ID, 3
    tap = None
    for s, (width, depth) in enumerate(config.stages, start=1):
        for i in range(1, depth + 1):
            layers += conv_relu(f"conv{s}_{i}", src, cin, width, 3, 1, 1)
            src, cin = layers[-1].id, width
        if s == 4:
            tap = (f"conv4_{depth}", src, cin)
        if s < len(config.stages):
            layers.append(pool(f"pool{s}", src, 2, 2, 0, True))
        else:
            layers.append(pool(f"pool{s}", src, 3, 1, 1, False))
        src = layers[-1].id
    d = config.fc6_dilation
    layers += conv_relu("fc6", src, cin, config.fc_channels, 3, 1, d, d)
    layers += conv_relu("fc7", layers[-1].id, config.fc_channels, config.fc_channels, 1)
    return layers, tap


def build_backbone(input_size=300, config=None):
    """VGG-16 conv stack with fc6/fc7 realized as dilated 3x3 and 1x1 convs."""
    config = replace(config or ModelConfig(), input_size=input_size)
    layers, _ = _backbone_layers(config)
    graph = NetworkGraph(tuple(layers), (), None, input_size)
    shapes = infer_shapes(graph)
    if min(shapes[layers[-1].id][1:]) < 1:
        raise ShapeError(f"input size {input_size} too small for the backbone")
    return graph


def build_inception_unit(spec):
    """Layers of one deep unit ending in the information-square concat.

    Output channel blocks, in order: 1x1 branch, shared 3x3 branch, the same
    shared 3x3 output again, and the second 3x3 of the stacked branch.
    """
    p = spec.prefix
    layers = conv_relu(f"{p}_1", spec.input_id, spec.in_channels, spec.bottleneck_channels, 1)
    width = spec.bottleneck_channels
    if spec.entrance_channels is not None:
        layers += conv_relu(f"{p}_2", layers[-1].id, width, spec.entrance_channels, 3, spec.stride, spec.pad)
        width = spec.entrance_channels
    elif spec.stride != 1:
        raise GraphError(f"unit {p!r}: downsampling needs an entrance 3x3")
    trunk = layers[-1].id
    c = spec.branch_channels
    layers += conv_relu(f"{p}_b1", trunk, width, c, 1)
    layers += conv_relu(f"{p}_b3", trunk, width, c, 3, 1, 1)
    layers += conv_relu(f"{p}_b5", f"{p}_b3_relu", c, c, 3, 1, 1)
    blocks = (f"{p}_b1_relu", f"{p}_b3_relu", f"{p}_b3_relu", f"{p}_b5_relu")
    layers.append(LayerSpec(f"{p}_concat", "concat", {"unit": p}, blocks))
    return layers


def _plain_unit(u, src, cin):
    layers = conv_relu(f"{u.name}_1", src, cin, u.bottleneck, 1)
    layers += conv_relu(f"{u.name}_2", layers[-1].id, u.bottleneck, u.out_channels, 3, u.stride, u.pad)
    return layers


def inception_units_for(variant, config):
    names = [u.name for u in config.units if u.branch_channels is not None]
    if variant == "SSD-300":
        return set()
    if variant == "MDCN-I1":
        return set(names[:2])
    if variant == "MDCN-I2":
        return set(names[:3])
    raise GraphError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def normalize_variant(name):
    key = name.strip().upper().replace("_", "-")
    aliases = {"SSD": "SSD-300", "SSD300": "SSD-300", "MDCN-I1": "MDCN-I1", "MDCN-I2": "MDCN-I2", "SSD-300": "SSD-300"}
    if key not in aliases:
        raise GraphError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return aliases[key]


def assemble_model(variant, config=None):
    """Full detector graph: backbone, deep units and one predict-tap per source."""
    variant = normalize_variant(variant)
    config = config or ModelConfig()
    incept = inception_units_for(variant, config)
    layers, (conv4_name, conv4_src, conv4_ch) = _backbone_layers(config)
    norm_id = f"{conv4_name}_norm"
    # keep the l2norm right after its source so the graph stays readable
    idx = next(i for i, l in enumerate(layers) if l.id == conv4_src) + 1
    layers.insert(idx, LayerSpec(norm_id, "l2norm", {"channels": conv4_ch, "scale": config.l2norm_scale}, (conv4_src,)))
    taps = [(conv4_name, norm_id, conv4_ch), ("fc7", "fc7_relu", config.fc_channels)]
    src, cin = "fc7_relu", config.fc_channels
    for u in config.units:
        if u.name in incept:
            spec = InceptionUnitSpec(u.name, cin, u.bottleneck, u.branch_channels, src, u.out_channels, u.stride, u.pad)
            layers += build_inception_unit(spec)
            cin = 4 * u.branch_channels
        else:
            layers += _plain_unit(u, src, cin)
            cin = u.out_channels
        src = layers[-1].id
        taps.append((u.name, src, cin))
    if len(taps) != len(config.anchors_per_tap):
        raise GraphError(f"{len(taps)} taps but {len(config.anchors_per_tap)} anchor counts configured")
    ncls = config.num_classes + 1
    for (name, source, ch), k in zip(taps, config.anchors_per_tap):
        layers.append(
            LayerSpec(f"{name}_mbox", "predict-tap", {"cin": ch, "k": k, "classes": ncls, "tap": name}, (source,))
        )
    graph = NetworkGraph(tuple(layers), tuple(t[1] for t in taps), variant, config.input_size)
    shapes = infer_shapes(graph)
    last = shapes[taps[-1][1]]
    if last[1] != 1 or last[2] != 1:
        raise ShapeError(f"top map is {last[1]}x{last[2]}, expected 1x1 at input {config.input_size}")
    return graph


def infer_shapes(graph, input_size=None):
    """Map every layer id to its output shape (C, H, W)."""
    size = input_size or graph.input_size
    shapes = {INPUT_ID: (graph.input_channels, size, size)}
    for layer in graph.layers:
        ins = [shapes[i] for i in layer.inputs]
        p = layer.params
        if layer.kind == "conv":
            c, h, w = ins[0]
            if c != p["cin"]:
                raise ShapeError(f"layer {layer.id}: input has {c} channels, expected {p['cin']}")
            args = (p["kernel"], p["stride"], p["pad"], p["dilation"])
            out = (p["cout"], conv_output_size(h, *args), conv_output_size(w, *args))
        elif layer.kind == "pool":
            c, h, w = ins[0]
            k, s, pad = p["kernel"], p["stride"], p["pad"]
            if k > h + 2 * pad or k > w + 2 * pad:
                raise ShapeError(f"layer {layer.id}: window {k} larger than {h}x{w} input")
            out = (c, pool_output_size(h, k, s, pad, bool(p["ceil"])), pool_output_size(w, k, s, pad, bool(p["ceil"])))
        elif layer.kind in ("relu", "l2norm"):
            out = ins[0]
        elif layer.kind == "concat":
            spatial = {s[1:] for s in ins}
            if len(spatial) != 1:
                raise ShapeError(f"layer {layer.id}: concat inputs differ spatially {sorted(spatial)}")
            out = (sum(s[0] for s in ins),) + ins[0][1:]
        else:  # predict-tap
            c, h, w = ins[0]
            if c != p["cin"]:
                raise ShapeError(f"layer {layer.id}: input has {c} channels, expected {p['cin']}")
            out = (p["k"] * (p["classes"] + 4), h, w)
        if out[1] < 1 or out[2] < 1:
            raise ShapeError(f"layer {layer.id}: output map {out[1]}x{out[2]} is empty at input {size}")
        shapes[layer.id] = out
    return shapes


def tap_sizes(graph, input_size=None):
    shapes = infer_shapes(graph, input_size)
    return tuple(shapes[t][1] for t in graph.source_taps)


def layer_param_shapes(layer):
    """Named parameter shapes owned by ``layer``."""
    p = layer.params
    if layer.kind == "conv":
        k = p["kernel"]
        return {"weight": (p["cout"], p["cin"], k, k), "bias": (p["cout"],)}
    if layer.kind == "l2norm":
        return {"scale": (p["channels"],)}
    if layer.kind == "predict-tap":
        k, cin = p["k"], p["cin"]
        return {
            "loc_weight": (4 * k, cin, 3, 3),
            "loc_bias": (4 * k,),
            "conf_weight": (k * p["classes"], cin, 3, 3),
            "conf_bias": (k * p["classes"],),
        }
    return {}


@dataclass(frozen=True)
class ParamReport:
    rows: tuple  # (layer_id, count)
    total: int


def count_parameters(graph):
    rows = []
    for layer in graph.layers:
        n = 0
        for shape in layer_param_shapes(layer).values():
            size = 1
            for d in shape:
                size *= d
            n += size
        if n:
            rows.append((layer.id, n))
    return ParamReport(tuple(rows), sum(n for _, n in rows))


def stacked_vs_direct_ratio(width):
    """Parameters of two stacked 3x3 convs over one 5x5 conv, all at ``width``."""
    stacked = NetworkGraph((conv("a", INPUT_ID, width, width, 3), conv("b", "a", width, width, 3)))
    direct = NetworkGraph((conv("a", INPUT_ID, width, width, 5),))
    return count_parameters(stacked).total / count_parameters(direct).total


@dataclass(frozen=True)
class RFRow:
    id: str
    rf: int
    stride: int
    coverage: float


@dataclass(frozen=True)
class RFReport:
    input_size: int
    rows: tuple

    def __getitem__(self, layer_id):
        for row in self.rows:
            if row.id == layer_id:
                return row
        raise KeyError(layer_id)


def receptive_field(graph, input_size=None):
    """Receptive field size and effective stride of every layer.

    Uses rf' = rf + (k - 1) * dilation * stride_product and a multiplicative
    stride product; a concat takes the largest field among its inputs.
    """
    size = input_size or graph.input_size
    state = {INPUT_ID: (1, 1)}
    rows = []
    for layer in graph.layers:
        p = layer.params
        if layer.kind == "concat":
            rf = max(state[i][0] for i in layer.inputs)
            jump = max(state[i][1] for i in layer.inputs)
        else:
            rf, jump = state[layer.inputs[0]]
            if layer.kind == "conv":
                rf += (p["kernel"] - 1) * p["dilation"] * jump
                jump *= p["stride"]
            elif layer.kind == "pool":
                rf += (p["kernel"] - 1) * jump
                jump *= p["stride"]
            elif layer.kind == "predict-tap":
                rf += 2 * jump
            elif layer.kind not in ("relu", "l2norm"):
                raise GraphError(f"receptive field undefined for kind {layer.kind!r}")
        state[layer.id] = (rf, jump)
        rows.append(RFRow(layer.id, rf, jump, min(1.0, rf / size)))
    return RFReport(size, tuple(rows))


def calibrate_widths(config=None, grid=(64, 128, 256), tolerance=0.03):
    """Grid-search the inception branch widths against the published totals.

    Returns ``(feasible, best)`` where ``feasible`` lists every width triple
    that keeps all three variants within ``tolerance`` of their targets with
    the ordering SSD < I1 < I2, and ``best`` minimizes the worst relative
    error.
    """
    config = config or ModelConfig()
    ssd = count_parameters(assemble_model("SSD-300", config)).total
    feasible, best = [], None
    n_units = sum(1 for u in config.units if u.branch_channels is not None)
    for widths in itertools.product(grid, repeat=n_units):
        cfg = config.with_branch_widths(widths)
        totals = {
            "SSD-300": ssd,
            "MDCN-I1": count_parameters(assemble_model("MDCN-I1", cfg)).total,
            "MDCN-I2": count_parameters(assemble_model("MDCN-I2", cfg)).total,
        }
        worst = max(abs(totals[v] / TABLE_III_PARAMS[v] - 1) for v in VARIANTS)
        ordered = totals["SSD-300"] < totals["MDCN-I1"] < totals["MDCN-I2"]
        if ordered and worst <= tolerance:
            feasible.append((widths, worst, totals))
            if best is None or worst < best[1]:
                best = (widths, worst, totals)
    return feasible, best


# ---- graph text format -------------------------------------------------


def _fmt_value(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(s):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def dump_graph(graph):
    lines = [
        "# mdcn graph v1",
        f"variant {graph.variant or '-'}",
        f"input {graph.input_channels} {graph.input_size}",
    ]
    for layer in graph.layers:
        params = " ".join(f"{k}={_fmt_value(v)}" for k, v in layer.params.items())
        head = f"layer {layer.id} {layer.kind}" + (f" {params}" if params else "")
        lines.append(f"{head} <- {' '.join(layer.inputs)}")
    lines.append("taps " + " ".join(graph.source_taps))
    return "\n".join(lines) + "\n"


def parse_graph(text):
    variant, size, channels, taps, layers = None, 300, 3, (), []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        word, _, rest = line.partition(" ")
        try:
            if word == "variant":
                variant = None if rest == "-" else rest
            elif word == "input":
                channels, size = (int(v) for v in rest.split())
            elif word == "taps":
                taps = tuple(rest.split())
            elif word == "layer":
                head, _, ins = rest.partition(" <- ")
                lid, kind, *kv = head.split()
                params = {k: _parse_value(v) for k, v in (item.split("=", 1) for item in kv)}
                layers.append(LayerSpec(lid, kind, params, tuple(ins.split())))
            else:
                raise GraphError(f"unknown record {word!r}")
        except (ValueError, TypeError) as exc:
            raise GraphError(f"line {lineno}: {exc}") from exc
    return NetworkGraph(tuple(layers), taps, variant, size, channels)


# ---- summary report ----------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    id: str
    kind: str
    shape: tuple  # (C, H, W)
    params: int
    rf: int
    stride: int
    coverage: float


@dataclass(frozen=True)
class TapRow:
    name: str
    source: str
    size: int
    channels: int
    k: int
    outputs: int  # k * (classes + 4) * size * size


@dataclass(frozen=True)
class Summary:
    variant: str
    input_size: int
    rows: tuple
    taps: tuple
    total: int


def summarize(graph, input_size=None):
    size = input_size or graph.input_size
    shapes = infer_shapes(graph, size)
    counts = dict(count_parameters(graph).rows)
    rf = receptive_field(graph, size)
    rows = tuple(
        SummaryRow(l.id, l.kind, shapes[l.id], counts.get(l.id, 0), r.rf, r.stride, r.coverage)
        for l, r in zip(graph.layers, rf.rows)
    )
    taps = []
    for layer in graph.predict_layers():
        c, h, w = shapes[layer.inputs[0]]
        p = layer.params
        taps.append(TapRow(p["tap"], layer.inputs[0], h, c, p["k"], p["k"] * (p["classes"] + 4) * h * w))
    return Summary(graph.variant or "-", size, rows, tuple(taps), sum(r.params for r in rows))


def format_summary(summary):
    head = ("layer", "kind", "output", "params", "rf", "stride", "coverage")
    body = [
        (r.id, r.kind, "x".join(map(str, r.shape)), f"{r.params:,}", str(r.rf), str(r.stride), f"{r.coverage:.3f}")
        for r in summary.rows
    ]
    widths = [max(len(row[i]) for row in (head, *body)) for i in range(len(head))]
    fmt = "  ".join(f"{{:<{w}}}" if i < 2 else f"{{:>{w}}}" for i, w in enumerate(widths))
    lines = [f"{summary.variant} @ {summary.input_size}x{summary.input_size}", fmt.format(*head)]
    lines += [fmt.format(*row) for row in body]
    for t in summary.taps:
        lines.append(f"tap {t.name:<8} {t.size:>3}x{t.size:<3} channels={t.channels:<5} k={t.k} outputs={t.outputs:,}")
    lines.append(f"total params {summary.total:,}")
    return "\n".join(lines) + "\n"


def summary_records(summary):
    lines = [f"summary variant={summary.variant} input_size={summary.input_size}"]
    for r in summary.rows:
        lines.append(
            f"layer id={r.id} kind={r.kind} shape={'x'.join(map(str, r.shape))} params={r.params} "
            f"rf={r.rf} stride={r.stride} coverage={r.coverage!r}"
        )
    for t in summary.taps:
        lines.append(
            f"tap name={t.name} source={t.source} size={t.size} channels={t.channels} k={t.k} outputs={t.outputs}"
        )
    lines.append(f"total params={summary.total}")
    return "\n".join(lines) + "\n"


def parse_summary_records(text):
    variant, size, rows, taps, total = None, None, [], [], None
    for line in text.splitlines():
        if not line.strip():
            continue
        tag, *items = line.split()
        kv = dict(item.split("=", 1) for item in items)
        if tag == "summary":
            variant, size = kv["variant"], int(kv["input_size"])
        elif tag == "layer":
            shape = tuple(int(v) for v in kv["shape"].split("x"))
            rows.append(
                SummaryRow(kv["id"], kv["kind"], shape, int(kv["params"]), int(kv["rf"]), int(kv["stride"]), float(kv["coverage"]))
            )
        elif tag == "tap":
            taps.append(
                TapRow(kv["name"], kv["source"], int(kv["size"]), int(kv["channels"]), int(kv["k"]), int(kv["outputs"]))
            )
        elif tag == "total":
            total = int(kv["params"])
        else:
            raise GraphError(f"unknown summary record {tag!r}")
    return Summary(variant, size, tuple(rows), tuple(taps), total)


def tiny_detector_graph(input_size=8, num_classes=3):
    """Small MDCN-style net for gradient checks: conv, pool, one inception unit, l2norm and two taps."""
    layers = conv_relu("conv1", INPUT_ID, 3, 4, 3, 1, 1)
    layers.append(pool("pool1", "conv1_relu", 2, 2))
    layers.append(LayerSpec("conv1_norm", "l2norm", {"channels": 4, "scale": 2.0}, ("conv1_relu",)))
    layers += build_inception_unit(InceptionUnitSpec("unit", 4, 4, 2, "pool1", 4, 2, 1))
    ncls = num_classes + 1
    layers.append(LayerSpec("conv1_mbox", "predict-tap", {"cin": 4, "k": 4, "classes": ncls, "tap": "conv1"}, ("conv1_norm",)))
    layers.append(LayerSpec("unit_mbox", "predict-tap", {"cin": 8, "k": 4, "classes": ncls, "tap": "unit"}, ("unit_concat",)))
    return NetworkGraph(tuple(layers), ("conv1_norm", "unit_concat"), None, input_size)
