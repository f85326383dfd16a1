"""Executes a :class:`NetworkGraph` with the tensorcore kernels."""

import hashlib

import numpy as np

from . import kernels as K
from .netbuilder import INPUT_ID, count_parameters, infer_shapes, layer_param_shapes
from .tensor import ShapeError


def init_params(graph, seed=0):
    """He-normal convs, zero biases, configured scale for l2norm layers.

    Parameters are drawn in graph order from one generator, so the result
    depends only on ``graph`` and ``seed``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for layer in graph.layers:
        for name, shape in layer_param_shapes(layer).items():
            key = f"{layer.id}.{name}"
            if name == "scale":
                params[key] = np.full(shape, float(layer.params.get("scale", 20.0)))
            elif name.endswith("bias"):
                params[key] = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                params[key] = rng.standard_normal(shape) * K.he_std(fan_in)
    return params


def _conv_params(layer, params, prefix="", stride=None, pad=None):
    p = layer.params
    return K.ConvParams(
        params[f"{layer.id}.{prefix}weight"],
        params[f"{layer.id}.{prefix}bias"],
        p.get("stride", 1) if stride is None else stride,
        p.get("pad", 1) if pad is None else pad,
        p.get("dilation", 1),
    )


class Network:
    """A graph plus its parameters.

    ``forward`` returns localization predictions [N, A, 4] and class logits
    [N, A, classes], anchors ordered (tap, row, col, box).
    """

    def __init__(self, graph, params=None, seed=0):
        self.graph = graph
        self.params = params if params is not None else init_params(graph, seed)
        expected = {f"{l.id}.{n}": s for l in graph.layers for n, s in layer_param_shapes(l).items()}
        if set(expected) != set(self.params):
            missing = sorted(set(expected) ^ set(self.params))
            raise ShapeError(f"parameter set does not match graph: {missing[:5]}")
        for key, shape in expected.items():
            if self.params[key].shape != shape:
                raise ShapeError(f"{key}: shape {self.params[key].shape}, expected {shape}")

    @property
    def num_classes(self):
        return self.graph.predict_layers()[0].params["classes"]

    def num_parameters(self):
        return count_parameters(self.graph).total

    def tap_shapes(self, input_size=None):
        shapes = infer_shapes(self.graph, input_size)
        return [(l.params["k"], shapes[l.inputs[0]][1], shapes[l.inputs[0]][2]) for l in self.graph.predict_layers()]

    def forward(self, x, keep=True):
        """Run the graph on ``x`` [N, 3, H, W].

        With ``keep`` the returned cache supports :meth:`backward`; without
        it intermediate activations are dropped as soon as possible and the
        state only records the shape of each prediction tap.
        """
        if x.ndim != 4 or x.shape[1] != self.graph.input_channels:
            raise ShapeError(f"input must be [N,{self.graph.input_channels},H,W], got {x.shape}")
        acts = {INPUT_ID: x}
        cache = {}
        last_use = {}
        for i, layer in enumerate(self.graph.layers):
            for src in layer.inputs:
                last_use[src] = i
        locs, confs, taps = [], [], {}
        for i, layer in enumerate(self.graph.layers):
            ins = [acts[s] for s in layer.inputs]
            kind = layer.kind
            if kind == "conv":
                p = _conv_params(layer, self.params)
                cols = K.im2col(ins[0], p)
                out = K.conv2d_forward(ins[0], p, cols)
                if keep:
                    cache[layer.id] = cols
            elif kind == "relu":
                out = K.relu(ins[0])
            elif kind == "pool":
                lp = layer.params
                out, argmax = K.maxpool2d(ins[0], lp["kernel"], lp["stride"], lp["pad"], bool(lp["ceil"]))
                if keep:
                    cache[layer.id] = argmax
            elif kind == "l2norm":
                out = K.l2_normalize_scale(ins[0], self.params[f"{layer.id}.scale"])
            elif kind == "concat":
                out = np.concatenate(ins, axis=1)
            else:
                out = None
                n = ins[0].shape[0]
                taps[layer.inputs[0]] = ins[0].shape
                lp = _conv_params(layer, self.params, "loc_", 1, 1)
                cp = _conv_params(layer, self.params, "conf_", 1, 1)
                cols = K.im2col(ins[0], lp)
                loc = K.conv2d_forward(ins[0], lp, cols)
                conf = K.conv2d_forward(ins[0], cp, cols)
                if keep:
                    cache[layer.id] = cols
                locs.append(loc.transpose(0, 2, 3, 1).reshape(n, -1, 4))
                confs.append(conf.transpose(0, 2, 3, 1).reshape(n, -1, layer.params["classes"]))
            if out is not None:
                acts[layer.id] = out
            if not keep:
                for src in layer.inputs:
                    if last_use.get(src) == i and src != INPUT_ID:
                        acts.pop(src, None)
        loc = np.concatenate(locs, axis=1)
        conf = np.concatenate(confs, axis=1)
        state = {"acts": acts, "cache": cache, "taps": taps} if keep else {"taps": taps}
        return loc, conf, state

    def backward(self, state, grad_loc, grad_conf):
        """Parameter gradients given gradients w.r.t. the forward outputs."""
        acts, cache = state["acts"], state["cache"]
        grads = {key: None for key in self.params}
        upstream = {}

        def add(layer_id, g):
            if layer_id == INPUT_ID:
                return
            if layer_id in upstream:
                upstream[layer_id] = upstream[layer_id] + g
            else:
                upstream[layer_id] = g

        # split head gradients back to taps
        offset = 0
        head_grads = {}
        for layer in self.graph.predict_layers():
            x = acts[layer.inputs[0]]
            n, _, h, w = x.shape
            a = h * w * layer.params["k"]
            gl = grad_loc[:, offset : offset + a].reshape(n, h, w, -1).transpose(0, 3, 1, 2)
            gc = grad_conf[:, offset : offset + a].reshape(n, h, w, -1).transpose(0, 3, 1, 2)
            head_grads[layer.id] = (np.ascontiguousarray(gl), np.ascontiguousarray(gc))
            offset += a

        for layer in reversed(self.graph.layers):
            lid = layer.id
            if layer.kind == "predict-tap":
                x = acts[layer.inputs[0]]
                gl, gc = head_grads[lid]
                lp = _conv_params(layer, self.params, "loc_", 1, 1)
                cp = _conv_params(layer, self.params, "conf_", 1, 1)
                dxl, grads[f"{lid}.loc_weight"], grads[f"{lid}.loc_bias"] = K.conv2d_backward(x, lp, gl, cache[lid])
                dxc, grads[f"{lid}.conf_weight"], grads[f"{lid}.conf_bias"] = K.conv2d_backward(x, cp, gc, cache[lid])
                add(layer.inputs[0], dxl + dxc)
                continue
            g = upstream.pop(lid, None)
            if g is None:
                if layer.kind == "conv":
                    p = layer_param_shapes(layer)
                    grads[f"{lid}.weight"] = np.zeros(p["weight"])
                    grads[f"{lid}.bias"] = np.zeros(p["bias"])
                elif layer.kind == "l2norm":
                    grads[f"{lid}.scale"] = np.zeros(layer.params["channels"])
                continue
            src = layer.inputs
            if layer.kind == "conv":
                p = _conv_params(layer, self.params)
                need = src[0] != INPUT_ID
                dx, grads[f"{lid}.weight"], grads[f"{lid}.bias"] = K.conv2d_backward(
                    acts[src[0]], p, g, cache[lid], need_input_grad=need
                )
                if need:
                    add(src[0], dx)
            elif layer.kind == "relu":
                add(src[0], K.relu_backward(acts[lid], g))
            elif layer.kind == "pool":
                add(src[0], K.maxpool2d_backward(g, cache[lid], acts[src[0]].shape))
            elif layer.kind == "l2norm":
                dx, grads[f"{lid}.scale"] = K.l2_normalize_scale_backward(
                    acts[src[0]], self.params[f"{lid}.scale"], g
                )
                add(src[0], dx)
            elif layer.kind == "concat":
                start = 0
                for s in src:
                    c = acts[s].shape[1]
                    add(s, g[:, start : start + c])
                    start += c
        return grads

    def kink_signature(self, state):
        """Digest of every piecewise-linear switch (ReLU masks, pool argmax)."""
        h = hashlib.sha256()
        for layer in self.graph.layers:
            if layer.kind == "relu":
                h.update(np.packbits(state["acts"][layer.id] > 0).tobytes())
            elif layer.kind == "pool":
                h.update(state["cache"][layer.id].tobytes())
        return h.hexdigest()
