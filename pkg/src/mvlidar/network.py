"""The two network graphs: layer tables, builders, shape traces, inference.

Stage 1 segments the perspective range image into 7 classes; stage 2 takes
the reprojected semantics plus BEV height channels and emits 3-class scores
and 6 box-regression channels on the downsampled grid. Both are
encoder-decoder stacks with skip connections at half and quarter
resolution.

Layer tables are data; the same table drives shape inference, parameter
validation, random initialization and execution, so the dry-run trace and
the executed graph can't drift apart. Parameter names are
"<layer>.<array>" (or "<block>.mod<i>.<branch>.<array>" inside inception
blocks); arrays live in a flat dict, serialized via the tensor blob.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .nn.ops import (ConvParams, InceptionModuleParams, concat_depth,
                     conv_bn_relu, deconv_bn_relu, inception_block,
                     softmax_channels)
from .projection import BevGrid, RangeImage

BN_ARRAYS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class ConvSpec:
    name: str
    out_ch: int
    ksize: int
    stride: int = 1
    head: bool = False       # bias + no batchnorm/activation (task heads)
    source: str | None = None  # defaults to the previous layer


@dataclass(frozen=True)
class DeconvSpec:
    name: str
    out_ch: int
    source: str | None = None


@dataclass(frozen=True)
class ConcatSpec:
    name: str
    sources: tuple[str, str]


@dataclass(frozen=True)
class InceptionSpec:
    name: str
    out_ch: int
    n_modules: int
    pool_first: bool  # 2x2 max pool before the first module


STAGE1_INPUT = "scan"
STAGE1_INPUT_SHAPE = (3, 64, 2048)
STAGE1_ARCH = (
    ConvSpec("trunk1", 64, 3),
    ConvSpec("trunk2", 64, 3),
    ConvSpec("trunk3", 128, 3, stride=2),
    InceptionSpec("block1", 64, 2, pool_first=False),
    InceptionSpec("block2", 64, 2, pool_first=True),
    InceptionSpec("block3", 128, 3, pool_first=True),
    DeconvSpec("up1a", 256),
    ConcatSpec("up1b", ("up1a", "block2")),
    ConvSpec("up1c", 256, 1),
    ConvSpec("up1d", 256, 3),
    DeconvSpec("up2a", 128),
    ConcatSpec("up2b", ("up2a", "block1")),
    ConvSpec("up2c", 128, 1),
    ConvSpec("up2d", 128, 3),
    DeconvSpec("up3a", 64),
    ConvSpec("up3b", 64, 1),
    ConvSpec("up3c", 64, 3),
    ConvSpec("classhead1", 64, 3),
    ConvSpec("classhead2", 7, 1, head=True),
)
STAGE1_OUTPUTS = ("classhead2",)

STAGE2_INPUTS = ("semantics", "height")
STAGE2_INPUT_SHAPES = {"semantics": (7, 1024, 1024), "height": (3, 1024, 1024)}
STAGE2_ARCH = (
    ConvSpec("sem1", 16, 3, source="semantics"),
    ConvSpec("sem2", 16, 3),
    ConvSpec("sem3", 32, 3, stride=2),
    ConvSpec("sem4", 32, 3),
    ConvSpec("height1", 16, 3, source="height"),
    ConvSpec("height2", 16, 3),
    ConvSpec("height3", 32, 3, stride=2),
    ConvSpec("height4", 32, 3),
    ConcatSpec("block0", ("sem4", "height4")),
    ConvSpec("block1a", 64, 3),
    ConvSpec("block1b", 64, 3, stride=2),
    ConvSpec("block2a", 128, 3),
    ConvSpec("block2b", 128, 3, stride=2),
    ConvSpec("block3a", 256, 3),
    ConvSpec("block3b", 256, 3, stride=2),
    DeconvSpec("up1a", 128),
    ConcatSpec("up1b", ("up1a", "block2b")),
    ConvSpec("up1c", 128, 3),
    DeconvSpec("up2a", 64),
    ConcatSpec("up2b", ("up2a", "block1b")),
    ConvSpec("up2c", 64, 3),
    ConvSpec("classhead1", 64, 3, source="up2c"),
    ConvSpec("classhead2", 32, 3),
    ConvSpec("classhead3", 3, 3, head=True),
    ConvSpec("bboxhead1", 64, 3, source="up2c"),
    ConvSpec("bboxhead2", 32, 3),
    ConvSpec("bboxhead3", 6, 3, head=True),
)
STAGE2_OUTPUTS = ("classhead3", "bboxhead3")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def infer_shapes(arch, input_shapes: dict[str, tuple[int, int, int]]):
    """Dry-run shape propagation. Returns {node: (c, h, w)} in trace order."""
    shapes = dict(input_shapes)
    prev = list(input_shapes)[-1]
    for spec in arch:
        src = getattr(spec, "source", None) or prev
        if isinstance(spec, ConvSpec):
            c, h, w = shapes[src]
            shapes[spec.name] = (spec.out_ch, _ceil_div(h, spec.stride),
                                 _ceil_div(w, spec.stride))
        elif isinstance(spec, DeconvSpec):
            c, h, w = shapes[src]
            shapes[spec.name] = (spec.out_ch, 2 * h, 2 * w)
        elif isinstance(spec, ConcatSpec):
            a, b = (shapes[s] for s in spec.sources)
            if a[1:] != b[1:]:
                raise ShapeMismatch(
                    f"layer {spec.name}: concat spatial dims {a[1:]} vs {b[1:]}")
            shapes[spec.name] = (a[0] + b[0], a[1], a[2])
        elif isinstance(spec, InceptionSpec):
            c, h, w = shapes[src]
            if spec.pool_first:
                if h % 2 or w % 2:
                    raise ShapeMismatch(
                        f"layer {spec.name}: pooling needs even dims, got {h}x{w}")
                h, w = h // 2, w // 2
            shapes[spec.name] = (spec.out_ch, h, w)
        else:
            raise TypeError(f"unknown spec {spec!r}")
        prev = spec.name
    return shapes


def _inception_sublayers(spec: InceptionSpec, in_ch: int):
    """(qualified_name, out_ch, in_ch, ksize) for each conv in the block."""
    if spec.out_ch % 8:
        raise ValueError(f"{spec.name}: inception depth must divide by 8")
    q, r = spec.out_ch // 4, spec.out_ch // 8
    subs = []
    d = in_ch
    for i in range(1, spec.n_modules + 1):
        pre = f"{spec.name}.mod{i}"
        subs += [
            (f"{pre}.b1", q, d, 1),
            (f"{pre}.b2r", r, d, 1),
            (f"{pre}.b2", q, r, 3),
            (f"{pre}.b3r", r, d, 1),
            (f"{pre}.b3a", q, r, 3),
            (f"{pre}.b3b", q, q, 3),
            (f"{pre}.b4", q, d, 1),
        ]
        d = spec.out_ch
    return subs


def expected_params(arch, input_shapes) -> dict[str, tuple[int, ...]]:
    """Flat parameter name -> shape map implied by a layer table."""
    shapes = infer_shapes(arch, input_shapes)
    prev = list(input_shapes)[-1]
    out: dict[str, tuple[int, ...]] = {}

    def bn(prefix, n):
        for arr in BN_ARRAYS:
            out[f"{prefix}.{arr}"] = (n,)

    for spec in arch:
        src = getattr(spec, "source", None) or prev
        in_ch = shapes[src][0]
        if isinstance(spec, ConvSpec):
            out[f"{spec.name}.weight"] = (spec.out_ch, in_ch, spec.ksize, spec.ksize)
            if spec.head:
                out[f"{spec.name}.bias"] = (spec.out_ch,)
            else:
                bn(spec.name, spec.out_ch)
        elif isinstance(spec, DeconvSpec):
            out[f"{spec.name}.weight"] = (in_ch, spec.out_ch, 2, 2)
            bn(spec.name, spec.out_ch)
        elif isinstance(spec, InceptionSpec):
            for name, oc, ic, k in _inception_sublayers(spec, in_ch):
                out[f"{name}.weight"] = (oc, ic, k, k)
                bn(name, oc)
        prev = spec.name
    return out


def _bind_conv(store, prefix, expected, layer_name, head=False) -> ConvParams:
    def fetch(key):
        full = f"{prefix}.{key}"
        if full not in store:
            raise ShapeMismatch(f"layer {layer_name}: missing parameter {full}")
        arr = np.ascontiguousarray(store[full], dtype=np.float32)
        want = expected[full]
        if arr.shape != want:
            raise ShapeMismatch(
                f"layer {layer_name}: parameter {full} has shape {arr.shape}, "
                f"expected {want}")
        return arr

    weight = fetch("weight")
    if head:
        return ConvParams(weight=weight, bias=fetch("bias"))
    g, b, m, v = (fetch(a) for a in BN_ARRAYS)
    return ConvParams(weight=weight, gamma=g, beta=b, mean=m, var=v)


@dataclass
class Graph:
    """A validated, executable network with a fixed input geometry."""

    arch: tuple
    input_shapes: dict[str, tuple[int, int, int]]
    outputs: tuple[str, ...]
    bound: dict[str, object]
    trace: dict[str, tuple[int, int, int]]

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(self.input_shapes)

    def shape_trace(self) -> list[tuple[str, tuple[int, int, int]]]:
        """(node, (depth, height, width)) for inputs and every layer."""
        return list(self.trace.items())

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in
                   expected_params(self.arch, self.input_shapes).values())

    def infer(self, inputs, keep: tuple[str, ...] = ()):
        """Run the graph. Returns {output_name: tensor} plus kept nodes."""
        if isinstance(inputs, np.ndarray):
            inputs = {list(self.input_shapes)[0]: inputs}
        acts: dict[str, np.ndarray] = {}
        for name, shape in self.input_shapes.items():
            x = np.ascontiguousarray(inputs[name], dtype=np.float32)
            if x.shape != shape:
                raise ShapeMismatch(
                    f"input {name} has shape {x.shape}, expected {shape}")
            acts[name] = x

        last_use: dict[str, int] = {}
        prev = list(self.input_shapes)[-1]
        for i, spec in enumerate(self.arch):
            srcs = (spec.sources if isinstance(spec, ConcatSpec)
                    else ((getattr(spec, "source", None) or prev),))
            for s in srcs:
                last_use[s] = i
            prev = spec.name

        retain = set(keep) | set(self.outputs)
        prev = list(self.input_shapes)[-1]
        for i, spec in enumerate(self.arch):
            if isinstance(spec, ConcatSpec):
                acts[spec.name] = concat_depth(acts[spec.sources[0]],
                                               acts[spec.sources[1]])
            else:
                src = getattr(spec, "source", None) or prev
                x = acts[src]
                if isinstance(spec, ConvSpec):
                    acts[spec.name] = conv_bn_relu(x, self.bound[spec.name],
                                                   spec.stride)
                elif isinstance(spec, DeconvSpec):
                    acts[spec.name] = deconv_bn_relu(x, self.bound[spec.name])
                else:
                    acts[spec.name] = inception_block(x, self.bound[spec.name],
                                                      spec.pool_first)
            prev = spec.name
            for node, last in list(last_use.items()):
                if last == i and node in acts and node not in retain:
                    del acts[node]
                    del last_use[node]
        return {n: acts[n] for n in (*self.outputs, *keep)}


def build_graph(arch, input_shapes, outputs, store) -> Graph:
    """Bind a parameter store to a layer table; validates every shape.

    Raises ShapeMismatch naming the first offending layer (table order) on
    a missing or mis-shaped parameter.
    """
    expected = expected_params(arch, input_shapes)
    trace = infer_shapes(arch, input_shapes)
    bound: dict[str, object] = {}
    prev = list(input_shapes)[-1]
    for spec in arch:
        if isinstance(spec, ConvSpec):
            bound[spec.name] = _bind_conv(store, spec.name, expected,
                                          spec.name, head=spec.head)
        elif isinstance(spec, DeconvSpec):
            bound[spec.name] = _bind_conv(store, spec.name, expected, spec.name)
        elif isinstance(spec, InceptionSpec):
            src = getattr(spec, "source", None) or prev
            modules: list[InceptionModuleParams] = []
            subs = _inception_sublayers(spec, trace[src][0])
            for i in range(spec.n_modules):
                names = [subs[7 * i + j][0] for j in range(7)]
                parts = [_bind_conv(store, n, expected, spec.name) for n in names]
                modules.append(InceptionModuleParams(*parts))
            bound[spec.name] = modules
        prev = spec.name
    return Graph(arch=arch, input_shapes=dict(input_shapes), outputs=outputs,
                 bound=bound, trace=trace)


def random_store(arch, input_shapes, seed: int = 0) -> dict[str, np.ndarray]:
    """He-scaled random conv weights, identity batchnorm, zero head biases."""
    rng = np.random.default_rng(seed)
    store: dict[str, np.ndarray] = {}
    for name, shape in expected_params(arch, input_shapes).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            if shape[2:] == (2, 2):
                fan_in = shape[0]  # deconv layout (C, F, 2, 2), one tap per output
            else:
                fan_in = int(np.prod(shape[1:]))
            store[name] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
        elif kind in ("gamma", "var"):
            store[name] = np.ones(shape, np.float32)
        else:  # beta, mean, bias
            store[name] = np.zeros(shape, np.float32)
    return store


def scaled_input_shape(base: tuple[int, int, int], scale: int) -> tuple[int, int, int]:
    c, h, w = base
    return (c, h // scale, w // scale)


def build_stage1(store, input_shape=STAGE1_INPUT_SHAPE) -> Graph:
    return build_graph(STAGE1_ARCH, {STAGE1_INPUT: tuple(input_shape)},
                       STAGE1_OUTPUTS, store)


def build_stage2(store, input_shapes=None) -> Graph:
    if input_shapes is None:
        input_shapes = STAGE2_INPUT_SHAPES
    return build_graph(STAGE2_ARCH, dict(input_shapes), STAGE2_OUTPUTS, store)


def random_stage1_store(seed: int = 0, input_shape=STAGE1_INPUT_SHAPE):
    return random_store(STAGE1_ARCH, {STAGE1_INPUT: tuple(input_shape)}, seed)


def random_stage2_store(seed: int = 0, input_shapes=None):
    if input_shapes is None:
        input_shapes = STAGE2_INPUT_SHAPES
    return random_store(STAGE2_ARCH, dict(input_shapes), seed)


def infer_stage1(graph: Graph, scan) -> np.ndarray:
    """Range scan (RangeImage or (3, H, W) tensor) -> class probabilities.

    Output is softmaxed per pixel: (7, H, W) summing to 1 along depth.
    """
    x = scan.channels if isinstance(scan, RangeImage) else scan
    out = graph.infer({STAGE1_INPUT: x})
    return softmax_channels(out[STAGE1_OUTPUTS[0]])


def infer_stage2(graph: Graph, bev) -> tuple[np.ndarray, np.ndarray]:
    """BEV grids -> (class probabilities (3, h, w), box parameters (6, h, w)).

    Class scores are softmaxed; box regression channels are raw.
    """
    if isinstance(bev, BevGrid):
        inputs = {"semantics": bev.semantic, "height": bev.height}
    else:
        inputs = {"semantics": bev[0], "height": bev[1]}
    out = graph.infer(inputs)
    return softmax_channels(out["classhead3"]), out["bboxhead3"]
