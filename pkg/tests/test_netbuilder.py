import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdcn import kernels as K
from mdcn.netbuilder import (
    INPUT_ID,
    VARIANTS,
    GraphError,
    InceptionUnitSpec,
    LayerSpec,
    ModelConfig,
    NetworkGraph,
    assemble_model,
    build_backbone,
    build_inception_unit,
    calibrate_widths,
    conv,
    count_parameters,
    dump_graph,
    format_summary,
    infer_shapes,
    normalize_variant,
    parse_graph,
    parse_summary_records,
    pool,
    receptive_field,
    stacked_vs_direct_ratio,
    summarize,
    summary_records,
    tap_sizes,
    tiny_detector_graph,
)
from mdcn.network import Network
from mdcn.tensor import ShapeError

# frozen from a hand tally of every conv / l2norm / head tensor (see unit oracle below)
CANONICAL_TOTALS = {"SSD-300": 24_050_112, "MDCN-I1": 25_054_208, "MDCN-I2": 25_255_104}
TOY_TOTALS = {"SSD-300": 409_504, "MDCN-I1": 434_688, "MDCN-I2": 447_280}


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


# ---- backbone and assembled variants ---------------------------------------


def test_backbone_canonical_sizes():
    shapes = infer_shapes(build_backbone(300))
    assert shapes["conv4_3"][1:] == (38, 38)
    assert shapes["fc7"][1:] == (19, 19)
    assert shapes["fc6"][0] == 1024


def test_backbone_toy_input_75():
    # stride arithmetic: 75 -> 38 -> 19 -> 10 after three ceil-mode pools
    assert infer_shapes(build_backbone(75))["conv4_3"][1:] == (10, 10)


def test_backbone_rejects_tiny_input():
    with pytest.raises(ShapeError):
        build_backbone(8)


def test_vgg_conv_count_and_first_layer():
    g = build_backbone(300)
    convs = [l for l in g.layers if l.kind == "conv"]
    assert len(convs) == 15  # 13 VGG convs + fc6 + fc7
    assert count_parameters(NetworkGraph((g["conv1_1"],))).total == 1_792
    assert g["fc6"].params["dilation"] == 6


@pytest.mark.parametrize("variant", VARIANTS)
def test_canonical_tap_sizes(variant):
    assert tap_sizes(assemble_model(variant)) == (38, 19, 10, 5, 3, 1)


@pytest.mark.parametrize("variant", VARIANTS)
def test_toy_tap_sizes(variant):
    assert tap_sizes(assemble_model(variant, ModelConfig.toy())) == (19, 10, 5, 3, 1)


def test_inception_placement():
    assert assemble_model("SSD-300").inception_units() == []
    assert assemble_model("MDCN-I1").inception_units() == ["conv6", "conv7"]
    assert assemble_model("MDCN-I2").inception_units() == ["conv6", "conv7", "conv8"]


def test_variant_aliases():
    assert normalize_variant("mdcn-i2") == "MDCN-I2"
    assert normalize_variant("ssd") == "SSD-300"
    assert normalize_variant(" SSD-300 ") == "SSD-300"
    with pytest.raises(GraphError):
        normalize_variant("mdcn-i3")


# ---- inception unit --------------------------------------------------------


def test_inception_unit_layout():
    spec = InceptionUnitSpec("u", 16, 8, 4, INPUT_ID, 12, 2, 1)
    layers = build_inception_unit(spec)
    g = NetworkGraph(tuple(layers), input_size=9, input_channels=16)
    cat = g["u_concat"]
    assert cat.inputs == ("u_b1_relu", "u_b3_relu", "u_b3_relu", "u_b5_relu")
    assert g["u_b5"].inputs == ("u_b3_relu",)
    shapes = infer_shapes(g)
    assert shapes["u_concat"] == (16, 5, 5)  # 4c channels, stride-2 entrance


def test_inception_unit_parameter_oracle():
    # canonical Conv_6 unit: 1024 -> 1x1 256 -> 3x3 512 -> branches of c = 128
    spec = InceptionUnitSpec("conv6", 1024, 256, 128, INPUT_ID, 512, 2, 1)
    g = NetworkGraph(tuple(build_inception_unit(spec)), input_size=19, input_channels=1024)
    expected = (
        conv_params(1024, 256, 1)
        + conv_params(256, 512, 3)
        + conv_params(512, 128, 1)
        + conv_params(512, 128, 3)
        + conv_params(128, 128, 3)
    )
    assert count_parameters(g).total == expected == 2_245_760


def test_inception_unit_without_entrance_cannot_downsample():
    with pytest.raises(GraphError):
        build_inception_unit(InceptionUnitSpec("u", 4, 4, 2, INPUT_ID, None, 2))


def _unit_network(seed):
    layers = build_inception_unit(InceptionUnitSpec("u", 3, 6, 4, INPUT_ID, 8, 1, 1))
    layers.append(LayerSpec("u_mbox", "predict-tap", {"cin": 16, "k": 4, "classes": 4, "tap": "u"}, ("u_concat",)))
    graph = NetworkGraph(tuple(layers), ("u_concat",), None, 6)
    return Network(graph, seed=seed)


def test_information_square_blocks_identical():
    net = _unit_network(0)
    x = np.random.default_rng(1).standard_normal((2, 3, 6, 6))
    _, _, state = net.forward(x)
    out = state["acts"]["u_concat"]
    c = 4
    assert out.shape[1] == 4 * c
    assert out[:, c : 2 * c].tobytes() == out[:, 2 * c : 3 * c].tobytes()
    assert np.any(out[:, c : 2 * c] != 0)


def test_zeroing_shared_weights_zeroes_both_blocks():
    net = _unit_network(0)
    params = dict(net.params)
    params["u_b3.weight"] = np.zeros_like(params["u_b3.weight"])
    params["u_b5.bias"] = np.array([0.5, -0.25, 0.0, 1.0])
    net = Network(net.graph, params)
    x = np.random.default_rng(2).standard_normal((1, 3, 6, 6))
    _, _, state = net.forward(x)
    out = state["acts"]["u_concat"]
    c = 4
    assert not out[:, c : 3 * c].any()
    # stacked branch sees only zeros: bias-only response after ReLU
    expected = np.maximum(params["u_b5.bias"], 0)[None, :, None, None] * np.ones((1, 1, 6, 6))
    np.testing.assert_array_equal(out[:, 3 * c :], expected)


def test_concat_gradient_accumulates_into_shared_branch():
    net = _unit_network(3)
    x = np.random.default_rng(4).standard_normal((1, 3, 6, 6))
    loc, conf, state = net.forward(x)
    grads = net.backward(state, np.ones_like(loc), np.zeros_like(conf))
    # the shared weights receive gradient from both its own blocks and the stacked branch
    assert np.any(grads["u_b3.weight"] != 0)


# ---- parameter counts ---------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_canonical_parameter_totals(variant):
    assert count_parameters(assemble_model(variant)).total == CANONICAL_TOTALS[variant]


@pytest.mark.parametrize("variant", VARIANTS)
def test_toy_parameter_totals(variant):
    assert count_parameters(assemble_model(variant, ModelConfig.toy())).total == TOY_TOTALS[variant]


def test_parameter_ordering():
    t = [count_parameters(assemble_model(v)).total for v in VARIANTS]
    assert t[0] < t[1] < t[2]


def test_mdcn_minus_ssd_equals_branch_tensors():
    # I1 adds exactly the three branch convs of Conv_6 and Conv_7
    ssd = count_parameters(assemble_model("SSD-300")).total
    i1 = count_parameters(assemble_model("MDCN-I1")).total
    branches = (
        conv_params(512, 128, 1) + conv_params(512, 128, 3) + conv_params(128, 128, 3)
        + conv_params(256, 64, 1) + conv_params(256, 64, 3) + conv_params(64, 64, 3)
    )
    # Conv_6 output stays 512 channels; Conv_7 goes 256 -> 256, so heads are unchanged
    assert i1 - ssd == branches


def test_stacked_vs_direct_ratio():
    assert abs(stacked_vs_direct_ratio(512) - 0.72) < 1e-3
    c = 512
    assert stacked_vs_direct_ratio(c) == (2 * 9 * c * c + 2 * c) / (25 * c * c + c)


def test_calibration_grid_keeps_defaults_feasible():
    feasible, best = calibrate_widths()
    widths = [w for w, _, _ in feasible]
    assert (128, 64, 64) in widths
    assert len(feasible) == 7
    assert best[0] == (128, 128, 64)
    assert best[1] < 0.03


def test_count_rows_cover_every_parameter_layer():
    g = assemble_model("MDCN-I2")
    rep = count_parameters(g)
    assert sum(n for _, n in rep.rows) == rep.total
    assert dict(rep.rows)["conv4_3_norm"] == 512


# ---- receptive field ------------------------------------------------------------


def empirical_rf(chain, size):
    """Support width of one centre output's input gradient through all-ones kernels."""
    x = np.ones((1, 1, size, size))
    acts, ps = [x], []
    for kernel, stride, pad, dil in chain:
        p = K.ConvParams(np.ones((1, 1, kernel, kernel)), np.zeros(1), stride, pad, dil)
        ps.append(p)
        acts.append(K.conv2d_forward(acts[-1], p))
    g = np.zeros_like(acts[-1])
    h = g.shape[2] // 2
    g[0, 0, h, h] = 1.0
    for a, p in zip(reversed(acts[:-1]), reversed(ps)):
        g = K.conv2d_backward(a, p, g)[0]
    rows = np.nonzero(g[0, 0].any(axis=1))[0]
    return int(rows.max() - rows.min() + 1)


def rf_of_chain(chain, size):
    layers, src = [], INPUT_ID
    for i, (kernel, stride, pad, dil) in enumerate(chain):
        layers.append(conv(f"c{i}", src, 1, 1, kernel, stride, pad, dil))
        src = f"c{i}"
    return receptive_field(NetworkGraph(tuple(layers), input_size=size, input_channels=1))[src]


def test_rf_stacked_pair_is_five():
    row = rf_of_chain([(3, 1, 1, 1), (3, 1, 1, 1)], 21)
    assert (row.rf, row.stride) == (5, 1)
    assert empirical_rf([(3, 1, 1, 1), (3, 1, 1, 1)], 21) == 5


def test_rf_conv_then_pool():
    g = NetworkGraph((conv("c", INPUT_ID, 1, 1, 3, 1, 1), pool("p", "c", 2, 2)), input_size=16, input_channels=1)
    row = receptive_field(g)["p"]
    assert (row.rf, row.stride) == (4, 2)


def test_rf_pool_then_conv():
    g = NetworkGraph((pool("p", INPUT_ID, 2, 2), conv("c", "p", 1, 1, 3, 1, 1)), input_size=16, input_channels=1)
    row = receptive_field(g)["c"]
    assert (row.rf, row.stride) == (6, 2)
    # pooling shares the window geometry of a ones kernel
    assert empirical_rf([(2, 2, 0, 1), (3, 1, 1, 1)], 32) == 6


def test_rf_toy_backbone_matches_empirical_support():
    cfg = ModelConfig.toy()
    g = build_backbone(150, cfg)
    rf = receptive_field(g, 300)
    chain = []
    for layer in g.layers:
        p = layer.params
        if layer.kind == "conv":
            chain.append((p["kernel"], p["stride"], p["pad"], p["dilation"]))
        elif layer.kind == "pool":
            chain.append((p["kernel"], p["stride"], p["pad"], 1))
        else:
            continue
        if layer.id in ("conv2_1", "conv3_2", "conv4_2", "fc6"):
            assert empirical_rf(chain, 300) == rf[layer.id].rf, layer.id


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([1, 2, 3]), st.integers(1, 2), st.integers(1, 2)), min_size=1, max_size=4))
def test_rf_recurrence_property(spec):
    chain = [(k, s, k // 2 * d, d) for k, s, d in spec]
    row = rf_of_chain(chain, 64)
    expected_stride = int(np.prod([s for _, s, _ in spec]))
    assert row.stride == expected_stride
    assert empirical_rf(chain, 96) == row.rf


@pytest.mark.parametrize("variant", VARIANTS)
def test_rf_monotone_and_coverage(variant):
    g = assemble_model(variant)
    rf = receptive_field(g)
    by_id = {r.id: r for r in rf.rows}
    for layer in g.layers:
        for src in layer.inputs:
            if src != INPUT_ID:
                assert by_id[layer.id].rf >= by_id[src].rf
                assert by_id[layer.id].stride >= by_id[src].stride
        assert 0 < by_id[layer.id].coverage <= 1
    conv8_out = g.source_taps[4]
    assert conv8_out.startswith("conv8")
    assert by_id[conv8_out].coverage > by_id["conv4_3_norm"].coverage


# ---- graph validation and serialization ----------------------------------------


def test_graph_rejects_duplicates_and_forward_references():
    a = conv("a", INPUT_ID, 3, 4, 3)
    with pytest.raises(GraphError):
        NetworkGraph((a, a))
    with pytest.raises(GraphError):
        NetworkGraph((conv("b", "a", 4, 4, 3), a))
    with pytest.raises(GraphError):
        NetworkGraph((a,), source_taps=("zzz",))
    with pytest.raises(GraphError):
        LayerSpec("x", "dense")


def test_concat_spatial_mismatch_rejected():
    layers = (
        conv("a", INPUT_ID, 3, 2, 3, 1, 1),
        conv("b", INPUT_ID, 3, 2, 3, 2, 1),
        LayerSpec("cat", "concat", {}, ("a", "b")),
    )
    with pytest.raises(ShapeError):
        infer_shapes(NetworkGraph(layers, input_size=8))


def test_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="channels"):
        infer_shapes(NetworkGraph((conv("a", INPUT_ID, 4, 2, 3),), input_size=8))


@pytest.mark.parametrize("variant", VARIANTS)
def test_graph_text_round_trip(variant):
    g = assemble_model(variant)
    text = dump_graph(g)
    back = parse_graph(text)
    assert back == g
    assert dump_graph(back) == text


def test_graph_text_rejects_garbage():
    with pytest.raises(GraphError):
        parse_graph("variant -\nbogus line\n")


# ---- summary -----------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_summary_matches_counts_and_taps(variant):
    g = assemble_model(variant)
    s = summarize(g)
    assert s.total == count_parameters(g).total
    assert tuple(t.size for t in s.taps) == (38, 19, 10, 5, 3, 1)
    text = format_summary(s)
    assert sum(1 for line in text.splitlines() if line.startswith("tap ")) == 6
    assert text.splitlines()[-1] == f"total params {s.total:,}"


@pytest.mark.parametrize("variant", VARIANTS)
def test_summary_records_round_trip(variant):
    s = summarize(assemble_model(variant, ModelConfig.toy()))
    text = summary_records(s)
    back = parse_summary_records(text)
    assert back == s
    assert summary_records(back) == text


def test_tiny_detector_graph_is_small():
    g = tiny_detector_graph()
    assert count_parameters(g).total <= 10_000
    assert g.inception_units() == ["unit"]
    assert tap_sizes(g) == (8, 2)


def test_lean_forward_records_tap_shapes():
    g = assemble_model("MDCN-I1", ModelConfig.toy())
    net = Network(g, seed=0)
    x = np.zeros((2, 3, 150, 150))
    loc, _, lean = net.forward(x, keep=False)
    _, _, full = net.forward(x)
    assert set(lean) == {"taps"} and lean["taps"] == full["taps"]
    assert [lean["taps"][t][2] for t in g.source_taps] == [19, 10, 5, 3, 1]
    assert all(full["acts"][t].shape == lean["taps"][t] for t in g.source_taps)
