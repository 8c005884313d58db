"""Architecture profile parsing and the TigerNet graph builder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .model_graph import GraphError, LayerKind, LayerSpec, ModelGraph, infer_shapes

LEVEL_STRIDES = (8, 16, 32, 32, 32, 32)


@dataclass(frozen=True)
class BackboneStage:
    kind: str  # "conv" | "sep"
    channels: int
    stride: int
    repeat: int = 1


@dataclass(frozen=True)
class ArchConfig:
    backbone: tuple[BackboneStage, ...]
    input_size: tuple[int, int] = (256, 256)
    in_channels: int = 3
    width_multiplier: float = 0.5
    min_channels: int = 8
    fpn_channels: int = 64
    num_classes: int = 2
    batch_norm: bool = True
    head_kernel: int = 1
    anchor_sizes: tuple[float, ...] = (32, 64, 96, 128, 192, 256)
    anchor_scales: tuple[float, ...] = (1.0, 2 ** 0.5)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def replace(self, **changes) -> "ArchConfig":
        return dataclasses.replace(self, **changes)


_SCALAR_KEYS = {
    "in_channels": int,
    "width_multiplier": float,
    "min_channels": int,
    "fpn_channels": int,
    "num_classes": int,
    "head_kernel": int,
}
_TUPLE_KEYS = {"anchor_sizes": float, "anchor_scales": float, "anchor_ratios": float}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_arch_config(text: str) -> ArchConfig:
    values: dict = {}
    stages = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section != "backbone":
                raise ValueError(f"line {lineno}: unknown section [{section}]")
            continue
        try:
            if section == "backbone":
                fields = line.split()
                if len(fields) not in (3, 4):
                    raise ValueError("expected: kind channels stride [repeat]")
                kind = fields[0]
                if kind not in ("conv", "sep"):
                    raise ValueError(f"unknown backbone layer kind {kind!r}")
                repeat = int(fields[3]) if len(fields) == 4 else 1
                stages.append(BackboneStage(kind, int(fields[1]), int(fields[2]), repeat))
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ValueError("expected key = value")
            if key == "input_size":
                parts = [int(v) for v in value.split()]
                values[key] = (parts[0], parts[-1])
            elif key == "batch_norm":
                values[key] = _parse_bool(value)
            elif key in _SCALAR_KEYS:
                values[key] = _SCALAR_KEYS[key](value)
            elif key in _TUPLE_KEYS:
                values[key] = tuple(_TUPLE_KEYS[key](v) for v in value.split())
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if not stages:
        raise ValueError("profile has no [backbone] table")
    return ArchConfig(backbone=tuple(stages), **values)


def dump_arch_config(config: ArchConfig) -> str:
    def nums(values):
        return " ".join(repr(float(v)) for v in values)

    lines = [
        f"input_size = {config.input_size[0]} {config.input_size[1]}",
        f"in_channels = {config.in_channels}",
        f"width_multiplier = {config.width_multiplier!r}",
        f"min_channels = {config.min_channels}",
        f"fpn_channels = {config.fpn_channels}",
        f"num_classes = {config.num_classes}",
        f"batch_norm = {'true' if config.batch_norm else 'false'}",
        f"head_kernel = {config.head_kernel}",
        f"anchor_sizes = {nums(config.anchor_sizes)}",
        f"anchor_scales = {nums(config.anchor_scales)}",
        f"anchor_ratios = {nums(config.anchor_ratios)}",
        "",
        "[backbone]",
    ]
    lines += [f"{s.kind} {s.channels} {s.stride} {s.repeat}" for s in config.backbone]
    return "\n".join(lines) + "\n"


def load_arch_config(path: str | Path | None = None) -> ArchConfig:
    """Read a profile file, or the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("tigernet").joinpath("profiles/tigernet.arch").read_text()
    else:
        text = Path(path).read_text()
    return parse_arch_config(text)


def default_config(**overrides) -> ArchConfig:
    return load_arch_config().replace(**overrides)


def _scaled(channels: int, config: ArchConfig) -> int:
    return max(config.min_channels, int(channels * config.width_multiplier))


def _validate(config: ArchConfig) -> None:
    if config.fpn_channels <= 0:
        raise GraphError("fpn_channels must be positive")
    if config.num_classes < 2:
        raise GraphError("num_classes counts background and must be at least 2")
    if config.anchors_per_cell <= 0:
        raise GraphError("anchors per cell must be positive")
    if config.in_channels <= 0 or config.min_channels <= 0 or config.width_multiplier <= 0:
        raise GraphError("channel counts must be positive")
    if config.head_kernel <= 0 or config.head_kernel % 2 == 0:
        raise GraphError("head_kernel must be a positive odd number")
    if len(config.anchor_sizes) != len(LEVEL_STRIDES):
        raise GraphError(f"need {len(LEVEL_STRIDES)} anchor sizes, got {len(config.anchor_sizes)}")
    for stage in config.backbone:
        if stage.channels <= 0 or stage.repeat <= 0:
            raise GraphError(f"invalid backbone stage {stage}")
        if stage.stride not in (1, 2):
            raise GraphError(f"backbone strides must be 1 or 2, got {stage.stride}")


def build_tigernet(config: ArchConfig | None = None) -> ModelGraph:
    """FD-MobileNet-style backbone, separable FPN and six non-shared one-layer heads.

    Levels P3, P4, P5 sit at strides 8, 16, 32; P6-P8 are further stride-1
    separable layers on top of P5, so no pooling follows the last feature maps.
    """
    config = config or default_config()
    _validate(config)
    nodes: list[tuple[str, LayerSpec]] = []
    bn = config.batch_norm

    def add(node_id, kind, cin, cout, src, **kw):
        nodes.append((node_id, LayerSpec(kind, cin, cout, inputs=src, **kw)))
        return node_id

    def sep3(node_id, cin, cout, src, stride=1, act="relu"):
        return add(node_id, LayerKind.SEPARABLE, cin, cout, (src,), kernel=3, stride=stride,
                   padding=1, batch_norm=bn, activation=act)

    prev = add("input", LayerKind.INPUT, config.in_channels, config.in_channels, ())
    channels = config.in_channels
    total_stride = 1
    taps: dict[int, tuple[str, int]] = {}
    index = 0
    for stage in config.backbone:
        cout = _scaled(stage.channels, config)
        for r in range(stage.repeat):
            stride = stage.stride if r == 0 else 1
            node_id = f"backbone.{index}"
            if stage.kind == "conv":
                prev = add(node_id, LayerKind.CONV, channels, cout, (prev,), kernel=3, stride=stride,
                           padding=1, batch_norm=bn, activation="relu")
            else:
                prev = sep3(node_id, channels, cout, prev, stride=stride)
            channels = cout
            total_stride *= stride
            taps[total_stride] = (prev, channels)
            index += 1
    if total_stride != 32 or 8 not in taps or 16 not in taps:
        raise GraphError(
            f"backbone strides reach {sorted(taps)}; the pyramid needs taps at 8, 16 and end at 32"
        )

    f = config.fpn_channels
    lateral = {}
    for level, stride in (("c3", 8), ("c4", 16), ("c5", 32)):
        src, cin = taps[stride]
        lateral[level] = add(f"fpn.lateral.{level}", LayerKind.POINTWISE, cin, f, (src,), has_bias=True)
    up5 = add("fpn.up.p5", LayerKind.UPSAMPLE, f, f, (lateral["c5"],))
    merge4 = add("fpn.merge.p4", LayerKind.ADD, f, f, (lateral["c4"], up5))
    up4 = add("fpn.up.p4", LayerKind.UPSAMPLE, f, f, (merge4,))
    merge3 = add("fpn.merge.p3", LayerKind.ADD, f, f, (lateral["c3"], up4))
    levels = [
        sep3("fpn.p3", f, f, merge3),
        sep3("fpn.p4", f, f, merge4),
        sep3("fpn.p5", f, f, lateral["c5"]),
    ]
    for name in ("p6", "p7", "p8"):
        levels.append(sep3(f"fpn.{name}", f, f, levels[-1]))

    a = config.anchors_per_cell
    k = config.head_kernel
    heads = []
    for i, level in enumerate(levels):
        pair = []
        for branch, cout in (("cls", config.num_classes * a), ("box", 4 * a)):
            hidden = sep3(f"head{i}.{branch}.sep", f, f, level)
            pair.append(add(f"head{i}.{branch}.pred", LayerKind.CONV if k > 1 else LayerKind.POINTWISE,
                            f, cout, (hidden,), kernel=k, padding=k // 2, has_bias=True))
        heads.append(tuple(pair))

    graph = ModelGraph(tuple(nodes), tuple(levels), config.input_size, tuple(heads))
    shapes = infer_shapes(graph)
    h, w = config.input_size
    for node_id, stride in zip(levels, LEVEL_STRIDES):
        _, lh, lw = shapes[node_id]
        if lh * stride != h or lw * stride != w:
            raise GraphError(
                f"input {h}x{w} does not give level {node_id} an exact 1/{stride} map ({lh}x{lw})"
            )
    return graph


def level_shapes(graph: ModelGraph) -> list[tuple[int, int]]:
    shapes = infer_shapes(graph)
    return [shapes[n][1:] for n in graph.outputs]
