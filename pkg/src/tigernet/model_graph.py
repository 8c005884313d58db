"""Static description of the detector network.

A :class:`ModelGraph` is an ordered DAG of :class:`LayerSpec` nodes.  Shapes are
``(channels, height, width)``.  Convolution output sizes follow

    out = floor((in + 2 * padding - kernel) / stride) + 1

Cost convention (stamped into every :class:`CostReport`):

* convolution FLOPs = ``mac_flops * weight_params * H_out * W_out``, plus one
  FLOP per output element for the bias add when the layer has a bias;
* ``Add``: ``(n_inputs - 1)`` FLOPs per output element;
* ``Upsample2x`` (nearest): 1 FLOP per output element;
* ``MaxPool``: ``kh * kw - 1`` comparisons per output element;
* ``GlobalPool``: ``H_in * W_in`` FLOPs per output element;
* batch-norm and activations cost nothing; batch-norm affine parameters
  (2 per channel) are counted toward params unless ``include_bn=False``.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Shape = tuple[int, int, int]
WeightSet = dict[str, dict[str, np.ndarray]]


class LayerKind(str, enum.Enum):
    INPUT = "Input"
    CONV = "Conv2d"
    DEPTHWISE = "DepthwiseConv2d"
    POINTWISE = "PointwiseConv2d"
    SEPARABLE = "SeparableConv2d"
    UPSAMPLE = "Upsample2x"
    ADD = "Add"
    MAXPOOL = "MaxPool"
    GLOBALPOOL = "GlobalPool"


_CONV_KINDS = {LayerKind.CONV, LayerKind.DEPTHWISE, LayerKind.POINTWISE, LayerKind.SEPARABLE}


class GraphError(ValueError):
    """Structurally invalid graph or layer."""


class ShapeError(GraphError):
    """Shape inference failed; ``node_ids`` names the offending nodes."""

    def __init__(self, message: str, node_ids: Sequence[str]):
        super().__init__(message)
        self.node_ids = tuple(node_ids)


def _pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    h, w = value
    return int(h), int(w)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = False
    inputs: tuple[str, ...] = ()
    batch_norm: bool = False
    activation: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise GraphError(f"{self.kind.value}: channel counts must be positive")
        if min(self.kernel) <= 0 or min(self.stride) <= 0 or min(self.padding) < 0:
            raise GraphError(f"{self.kind.value}: invalid kernel/stride/padding")
        if self.kind is LayerKind.DEPTHWISE and self.in_channels != self.out_channels:
            raise GraphError("DepthwiseConv2d requires in_channels == out_channels")
        if self.kind is LayerKind.POINTWISE and self.kernel != (1, 1):
            raise GraphError("PointwiseConv2d must use a 1x1 kernel")
        if self.kind in (LayerKind.UPSAMPLE, LayerKind.ADD, LayerKind.MAXPOOL, LayerKind.GLOBALPOOL):
            if self.in_channels != self.out_channels:
                raise GraphError(f"{self.kind.value} cannot change the channel count")
        if self.activation not in (None, "relu"):
            raise GraphError(f"unsupported activation {self.activation!r}")
        if self.kind is LayerKind.INPUT and self.inputs:
            raise GraphError("Input nodes take no inputs")
        if self.kind is LayerKind.ADD and len(self.inputs) < 2:
            raise GraphError("Add needs at least two inputs")
        if self.kind not in (LayerKind.INPUT, LayerKind.ADD) and len(self.inputs) != 1:
            raise GraphError(f"{self.kind.value} takes exactly one input")

    def expand(self) -> tuple["LayerSpec", ...]:
        """Accounting decomposition; a separable conv becomes depthwise + 1x1 pointwise."""
        if self.kind is not LayerKind.SEPARABLE:
            return (self,)
        dw = LayerSpec(
            LayerKind.DEPTHWISE, self.in_channels, self.in_channels, self.kernel, self.stride,
            self.padding, self.has_bias, self.inputs, self.batch_norm, None,
        )
        pw = LayerSpec(
            LayerKind.POINTWISE, self.in_channels, self.out_channels, (1, 1), (1, 1), (0, 0),
            self.has_bias, ("<depthwise>",), self.batch_norm, self.activation,
        )
        return dw, pw


@dataclass(frozen=True)
class ModelGraph:
    """Ordered DAG of named layers.

    ``outputs`` are the pyramid feature maps; ``heads`` pairs each level's
    class-logit and box-offset node (empty for generic graphs).
    """

    nodes: tuple[tuple[str, LayerSpec], ...]
    outputs: tuple[str, ...]
    input_resolution: tuple[int, int]
    heads: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple((str(n), s) for n, s in self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "heads", tuple(tuple(h) for h in self.heads))
        object.__setattr__(self, "input_resolution", _pair(self.input_resolution))
        seen: set[str] = set()
        for node_id, spec in self.nodes:
            if node_id in seen:
                raise GraphError(f"duplicate node id {node_id!r}")
            for src in spec.inputs:
                if src not in seen:
                    raise GraphError(f"node {node_id!r} consumes {src!r} before it is defined")
            seen.add(node_id)
        for node_id in self.outputs + tuple(n for pair in self.heads for n in pair):
            if node_id not in seen:
                raise GraphError(f"unknown output node {node_id!r}")
        if min(self.input_resolution) <= 0:
            raise GraphError("input resolution must be positive")

    @property
    def spec(self) -> dict[str, LayerSpec]:
        return dict(self.nodes)

    def with_resolution(self, resolution) -> "ModelGraph":
        return ModelGraph(self.nodes, self.outputs, _pair(resolution), self.heads)


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _node_shape(node_id: str, spec: LayerSpec, shapes: Mapping[str, Shape], resolution) -> Shape:
    if spec.kind is LayerKind.INPUT:
        return (spec.out_channels, resolution[0], resolution[1])
    in_shapes = [shapes[s] for s in spec.inputs]
    c, h, w = in_shapes[0]
    if spec.kind is LayerKind.ADD:
        for src, shp in zip(spec.inputs[1:], in_shapes[1:]):
            if shp != in_shapes[0]:
                raise ShapeError(
                    f"Add {node_id!r}: {spec.inputs[0]!r} has shape {in_shapes[0]} "
                    f"but {src!r} has shape {shp}",
                    (spec.inputs[0], src),
                )
    if c != spec.in_channels:
        raise ShapeError(
            f"{node_id!r} expects {spec.in_channels} channels, {spec.inputs[0]!r} gives {c}",
            (node_id, spec.inputs[0]),
        )
    if spec.kind is LayerKind.ADD:
        return (c, h, w)
    if spec.kind is LayerKind.UPSAMPLE:
        return (c, 2 * h, 2 * w)
    if spec.kind is LayerKind.GLOBALPOOL:
        return (c, 1, 1)
    ho = _conv_out(h, spec.kernel[0], spec.stride[0], spec.padding[0])
    wo = _conv_out(w, spec.kernel[1], spec.stride[1], spec.padding[1])
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"{node_id!r}: empty output from input {h}x{w}", (node_id,))
    return (spec.out_channels, ho, wo)


def infer_shapes(graph: ModelGraph) -> dict[str, Shape]:
    """Output shape ``(C, H, W)`` of every node, in graph order."""
    shapes: dict[str, Shape] = {}
    for node_id, spec in graph.nodes:
        shapes[node_id] = _node_shape(node_id, spec, shapes, graph.input_resolution)
    return shapes


def downsampling_factors(graph: ModelGraph) -> tuple[float, ...]:
    shapes = infer_shapes(graph)
    h = graph.input_resolution[0]
    return tuple(h / shapes[n][1] for n in graph.outputs)


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class NodeCost:
    node_id: str
    kind: str
    params: int
    flops: int
    output_shape: Shape


@dataclass(frozen=True)
class CostReport:
    total_params: int
    total_flops: int
    per_node: tuple[NodeCost, ...]
    mac_flops: int = 2
    include_bn: bool = True
    input_resolution: tuple[int, int] = (0, 0)

    @property
    def convention(self) -> str:
        return (
            f"1 MAC = {self.mac_flops} FLOPs; bias adds counted; "
            f"BN params {'counted' if self.include_bn else 'excluded'}; BN/activation FLOPs not counted"
        )

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def conv_flops(self) -> int:
        return sum(n.flops for n in self.per_node if LayerKind(n.kind) in _CONV_KINDS)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["node_id", "kind", "params", "flops", "out_h", "out_w", "out_c"])
        for n in self.per_node:
            c, h, w = n.output_shape
            writer.writerow([n.node_id, n.kind, n.params, n.flops, h, w, c])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([len(n.node_id) for n in self.per_node] + [7])
        lines = [f"{'node_id':<{width}}  {'kind':<16} {'params':>10} {'flops':>14}  out(c,h,w)"]
        for n in self.per_node:
            lines.append(
                f"{n.node_id:<{width}}  {n.kind:<16} {n.params:>10,} {n.flops:>14,}  {n.output_shape}"
            )
        lines.append(f"{'TOTAL':<{width}}  {'':<16} {self.total_params:>10,} {self.total_flops:>14,}")
        lines.append(f"input {self.input_resolution[0]}x{self.input_resolution[1]}; {self.convention}")
        return "\n".join(lines)


def _primitive_cost(spec: LayerSpec, out_shape: Shape, in_shapes: Sequence[Shape], mac_flops: int,
                    include_bn: bool) -> tuple[int, int]:
    c_out, h, w = out_shape
    area = h * w
    kh, kw = spec.kernel
    kind = spec.kind
    if kind in (LayerKind.CONV, LayerKind.POINTWISE, LayerKind.DEPTHWISE):
        if kind is LayerKind.DEPTHWISE:
            weights = kh * kw * spec.in_channels
        else:
            weights = kh * kw * spec.in_channels * spec.out_channels
        params = weights + (c_out if spec.has_bias else 0)
        flops = mac_flops * weights * area + (area * c_out if spec.has_bias else 0)
        if spec.batch_norm and include_bn:
            params += 2 * c_out
        return params, flops
    elements = c_out * area
    if kind is LayerKind.ADD:
        return 0, (len(spec.inputs) - 1) * elements
    if kind is LayerKind.UPSAMPLE:
        return 0, elements
    if kind is LayerKind.MAXPOOL:
        return 0, (kh * kw - 1) * elements
    if kind is LayerKind.GLOBALPOOL:
        _, hi, wi = in_shapes[0]
        return 0, hi * wi * elements
    return 0, 0


def node_cost(spec: LayerSpec, out_shape: Shape, in_shapes: Sequence[Shape], mac_flops: int = 2,
              include_bn: bool = True) -> tuple[int, int]:
    """(params, flops) of one node; separable convs are costed via :meth:`LayerSpec.expand`."""
    if spec.kind is not LayerKind.SEPARABLE:
        return _primitive_cost(spec, out_shape, in_shapes, mac_flops, include_bn)
    dw, pw = spec.expand()
    dw_shape = _node_shape("<depthwise>", dw, {s: shp for s, shp in zip(spec.inputs, in_shapes)}, None)
    p1, f1 = _primitive_cost(dw, dw_shape, in_shapes, mac_flops, include_bn)
    p2, f2 = _primitive_cost(pw, out_shape, [dw_shape], mac_flops, include_bn)
    return p1 + p2, f1 + f2


def count_cost(graph: ModelGraph, mac_flops: int = 2, include_bn: bool = True) -> CostReport:
    if mac_flops not in (1, 2):
        raise ValueError("mac_flops must be 1 or 2")
    shapes = infer_shapes(graph)
    entries = []
    for node_id, spec in graph.nodes:
        in_shapes = [shapes[s] for s in spec.inputs]
        params, flops = node_cost(spec, shapes[node_id], in_shapes, mac_flops, include_bn)
        entries.append(NodeCost(node_id, spec.kind.value, params, flops, shapes[node_id]))
    return CostReport(
        total_params=sum(e.params for e in entries),
        total_flops=sum(e.flops for e in entries),
        per_node=tuple(entries),
        mac_flops=mac_flops,
        include_bn=include_bn,
        input_resolution=graph.input_resolution,
    )


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[tuple[int, int, int], ...]  # (size, flops, params)
    best_size: int
    target_flops: float
    mac_flops: int

    def to_csv(self) -> str:
        lines = ["size,flops,params"]
        lines += [f"{s},{f},{p}" for s, f, p in self.rows]
        return "\n".join(lines) + "\n"


def sweep_input_size(graph_builder: Callable[[int], ModelGraph], flops_target: float,
                     candidate_sizes: Iterable[int], mac_flops: int = 2,
                     include_bn: bool = True) -> SweepResult:
    """Cost the model at each square input size and pick the one closest to ``flops_target``."""
    sizes = list(candidate_sizes)
    if not sizes:
        raise ValueError("candidate_sizes is empty")
    rows = []
    for size in sizes:
        report = count_cost(graph_builder(size), mac_flops=mac_flops, include_bn=include_bn)
        rows.append((int(size), report.total_flops, report.total_params))
    best = min(rows, key=lambda r: abs(r[1] - flops_target))
    return SweepResult(tuple(rows), best[0], float(flops_target), mac_flops)


# ---------------------------------------------------------------------------
# reference forward pass


def _weight_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    kh, kw = spec.kernel
    cin, cout = spec.in_channels, spec.out_channels
    if spec.kind is LayerKind.CONV:
        shapes = {"weight": (cout, cin, kh, kw)}
    elif spec.kind is LayerKind.POINTWISE:
        shapes = {"weight": (cout, cin, 1, 1)}
    elif spec.kind is LayerKind.DEPTHWISE:
        shapes = {"weight": (cin, 1, kh, kw)}
    elif spec.kind is LayerKind.SEPARABLE:
        shapes = {"depthwise": (cin, 1, kh, kw), "pointwise": (cout, cin, 1, 1)}
        if spec.has_bias:
            shapes["depthwise_bias"] = (cin,)
            shapes["pointwise_bias"] = (cout,)
        return shapes
    else:
        return {}
    if spec.has_bias:
        shapes["bias"] = (cout,)
    return shapes


def init_weights(graph: ModelGraph, seed: int = 0, zero: bool = False) -> WeightSet:
    """He-scaled normal weights (or all zeros); biases start at zero."""
    rng = np.random.default_rng(seed)
    weights: WeightSet = {}
    for node_id, spec in graph.nodes:
        entry = {}
        for name, shape in _weight_shapes(spec).items():
            if zero or "bias" in name:
                entry[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                entry[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if entry:
            weights[node_id] = entry
    return weights


def _pad(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, ky: int, kx: int, stride, out_hw):
    sh, sw = stride
    ho, wo = out_hw
    return xp[:, ky: ky + sh * (ho - 1) + 1: sh, kx: kx + sw * (wo - 1) + 1: sw]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride=(1, 1),
           padding=(0, 0)) -> np.ndarray:
    """Dense cross-correlation; ``x`` is (C, H, W), ``weight`` is (O, C, kh, kw)."""
    stride, padding = _pair(stride), _pair(padding)
    _, kh, kw = weight.shape[1:]
    xp = _pad(x, padding)
    ho = _conv_out(x.shape[1], kh, stride[0], padding[0])
    wo = _conv_out(x.shape[2], kw, stride[1], padding[1])
    out = np.zeros((weight.shape[0], ho, wo))
    for ky in range(kh):
        for kx in range(kw):
            out += np.einsum("oc,chw->ohw", weight[:, :, ky, kx], _windows(xp, ky, kx, stride, (ho, wo)))
    if bias is not None:
        out += bias[:, None, None]
    return out


def depthwise_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                     stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    """Per-channel cross-correlation; ``weight`` is (C, 1, kh, kw)."""
    stride, padding = _pair(stride), _pair(padding)
    kh, kw = weight.shape[2:]
    xp = _pad(x, padding)
    ho = _conv_out(x.shape[1], kh, stride[0], padding[0])
    wo = _conv_out(x.shape[2], kw, stride[1], padding[1])
    out = np.zeros((x.shape[0], ho, wo))
    for ky in range(kh):
        for kx in range(kw):
            out += weight[:, 0, ky, kx, None, None] * _windows(xp, ky, kx, stride, (ho, wo))
    if bias is not None:
        out += bias[:, None, None]
    return out


def _check_weights(node_id: str, spec: LayerSpec, entry: Mapping[str, np.ndarray]) -> None:
    expected = _weight_shapes(spec)
    if set(entry) != set(expected):
        raise GraphError(f"{node_id!r}: expected weights {sorted(expected)}, got {sorted(entry)}")
    for name, shape in expected.items():
        if tuple(entry[name].shape) != shape:
            raise GraphError(f"{node_id!r}.{name}: expected shape {shape}, got {tuple(entry[name].shape)}")


def _apply(node_id: str, spec: LayerSpec, inputs: list[np.ndarray], weights: WeightSet) -> np.ndarray:
    kind = spec.kind
    x = inputs[0]
    if kind in _CONV_KINDS:
        entry = weights.get(node_id, {})
        _check_weights(node_id, spec, entry)
    if kind in (LayerKind.CONV, LayerKind.POINTWISE):
        y = conv2d(x, entry["weight"], entry.get("bias"), spec.stride, spec.padding)
    elif kind is LayerKind.DEPTHWISE:
        y = depthwise_conv2d(x, entry["weight"], entry.get("bias"), spec.stride, spec.padding)
    elif kind is LayerKind.SEPARABLE:
        y = depthwise_conv2d(x, entry["depthwise"], entry.get("depthwise_bias"), spec.stride, spec.padding)
        y = conv2d(y, entry["pointwise"], entry.get("pointwise_bias"))
    elif kind is LayerKind.ADD:
        y = np.sum(inputs, axis=0)
    elif kind is LayerKind.UPSAMPLE:
        y = x.repeat(2, axis=1).repeat(2, axis=2)
    elif kind is LayerKind.MAXPOOL:
        xp = np.pad(x, ((0, 0), (spec.padding[0],) * 2, (spec.padding[1],) * 2), constant_values=-np.inf)
        ho = _conv_out(x.shape[1], spec.kernel[0], spec.stride[0], spec.padding[0])
        wo = _conv_out(x.shape[2], spec.kernel[1], spec.stride[1], spec.padding[1])
        y = np.full((x.shape[0], ho, wo), -np.inf)
        for ky in range(spec.kernel[0]):
            for kx in range(spec.kernel[1]):
                y = np.maximum(y, _windows(xp, ky, kx, spec.stride, (ho, wo)))
    elif kind is LayerKind.GLOBALPOOL:
        y = x.mean(axis=(1, 2), keepdims=True)
    else:
        raise GraphError(f"cannot apply {kind.value}")
    if spec.activation == "relu":
        y = np.maximum(y, 0.0)
    return y


def run_graph(graph: ModelGraph, weights: WeightSet, image: np.ndarray,
              keep: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Evaluate every node; returns the tensors named in ``keep`` (default: ``graph.outputs``).

    Batch-norm is treated as folded into the preceding convolution.
    """
    image = np.asarray(image, dtype=np.float64)
    keep = set(graph.outputs if keep is None else keep)
    inputs = [(n, s) for n, s in graph.nodes if s.kind is LayerKind.INPUT]
    for node_id, spec in inputs:
        expected = (spec.out_channels, *graph.input_resolution)
        if image.shape != expected:
            raise GraphError(f"image shape {image.shape} does not match input {expected}")
    consumers: dict[str, int] = {}
    for _, spec in graph.nodes:
        for src in spec.inputs:
            consumers[src] = consumers.get(src, 0) + 1
    values: dict[str, np.ndarray] = {}
    result: dict[str, np.ndarray] = {}
    for node_id, spec in graph.nodes:
        if spec.kind is LayerKind.INPUT:
            y = image
        else:
            y = _apply(node_id, spec, [values[s] for s in spec.inputs], weights)
            for src in spec.inputs:
                consumers[src] -= 1
                if consumers[src] == 0:
                    values.pop(src, None)
        if node_id in keep:
            result[node_id] = y
        if consumers.get(node_id, 0):
            values[node_id] = y
    return result


def forward(graph: ModelGraph, weights: WeightSet, image: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-level ``(class_logits, box_offsets)`` tensors for a graph with heads."""
    if not graph.heads:
        raise GraphError("graph has no prediction heads")
    names = [n for pair in graph.heads for n in pair]
    values = run_graph(graph, weights, image, keep=names)
    return [(values[c], values[b]) for c, b in graph.heads]
