"""Plain-text network definitions: parsing, validation, rendering, builtins.

The dialect is INI-like: ``[section]`` headers, ``key=value`` lines, ``#`` or
``;`` full-line comments, comma-separated integer lists for multi-valued keys
(``layers=-1,-3,-5,-6``). The first section must be ``[net]``; the recognized
layer kinds are convolutional, maxpool, upsample, route, shortcut and yolo.
Anything else is an error, never silently skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CfgParseError, GraphValidationError

# Detection-scale anchor priors in input pixels: three (w, h) pairs per head,
# finest first. Nine-anchor set for the full models, six for the tiny one.
COCO_ANCHORS = (10, 13, 16, 30, 33, 23, 30, 61, 62, 45, 59, 119, 116, 90, 156, 198, 373, 326)
TINY_ANCHORS = (10, 14, 23, 27, 37, 58, 81, 82, 135, 169, 344, 319)

MAX_BACKBONE_STRIDE = 32
HEAD_STRIDES = (8, 16, 32)

# key -> (value type, required). Types: int, float, ilist (comma ints), word.
_SCHEMAS = {
    "net": {"width": ("int", True), "height": ("int", True), "channels": ("int", True)},
    "convolutional": {
        "filters": ("int", True),
        "size": ("int", True),
        "stride": ("int", False),
        "pad": ("int", False),
        "batch_normalize": ("int", False),
        "activation": ("word", False),
    },
    "maxpool": {"size": ("int", True), "stride": ("int", False), "padding": ("int", False)},
    "upsample": {"stride": ("int", False)},
    "route": {"layers": ("ilist", True)},
    "shortcut": {"from": ("int", True), "activation": ("word", False)},
    "yolo": {
        "classes": ("int", True),
        "num": ("int", False),
        "mask": ("ilist", True),
        "anchors": ("ilist", True),
        "ignore_thresh": ("float", False),
    },
}


@dataclass
class LayerSpec:
    """One parsed section: its kind, normalized attributes, and source line."""

    kind: str
    attrs: dict = field(default_factory=dict)
    source_line: int = 0

    def get(self, key, default=None):
        return self.attrs.get(key, default)


@dataclass
class ModelGraph:
    """Validated layer list plus the net-level input geometry.

    The layer DAG is acyclic by construction: route and shortcut references
    are resolved to earlier absolute indices during parsing.
    """

    net: dict
    layers: list[LayerSpec] = field(default_factory=list)

    @property
    def input_width(self) -> int:
        return self.net["width"]

    @property
    def input_height(self) -> int:
        return self.net["height"]

    @property
    def input_channels(self) -> int:
        return self.net["channels"]

    @property
    def num_classes(self) -> int | None:
        for layer in self.layers:
            if layer.kind == "yolo":
                return layer.attrs["classes"]
        return None


def resolve_ref(layer_index: int, ref: int) -> int:
    """Map a (possibly negative, relative) layer reference to an absolute index."""
    return layer_index + ref if ref < 0 else ref


def _parse_value(kind, key, raw, line):
    vtype = _SCHEMAS[kind][key][0]
    try:
        if vtype == "int":
            return int(raw)
        if vtype == "float":
            return float(raw)
        if vtype == "ilist":
            return [int(tok.strip()) for tok in raw.split(",") if tok.strip() != ""]
        return raw
    except ValueError:
        raise CfgParseError(f"key {key!r} expects {vtype} value, got {raw!r}", line) from None


def _finalize(kind, attrs, line):
    """Fill defaults and run per-kind semantic checks."""
    schema = _SCHEMAS[kind]
    for key, (_, required) in schema.items():
        if required and key not in attrs:
            raise CfgParseError(f"[{kind}] section missing required key {key!r}", line)
    if kind == "net":
        for key in ("width", "height", "channels"):
            if attrs[key] < 1:
                raise CfgParseError(f"net {key} must be >= 1", line)
    elif kind == "convolutional":
        attrs.setdefault("stride", 1)
        attrs.setdefault("pad", 1)
        attrs.setdefault("batch_normalize", 0)
        attrs.setdefault("activation", "linear")
        if attrs["filters"] < 1:
            raise CfgParseError("filters must be >= 1", line)
        if attrs["size"] < 1 or attrs["size"] % 2 == 0:
            raise CfgParseError(f"conv size must be odd, got {attrs['size']}", line)
        if attrs["stride"] not in (1, 2):
            raise CfgParseError(f"conv stride must be 1 or 2, got {attrs['stride']}", line)
        if attrs["pad"] not in (0, 1):
            raise CfgParseError("pad is a 0/1 flag", line)
        if attrs["pad"] == 0 and attrs["size"] > 1:
            raise CfgParseError("pad=0 with size>1 breaks the same-padding convention", line)
        if attrs["batch_normalize"] not in (0, 1):
            raise CfgParseError("batch_normalize is a 0/1 flag", line)
        if attrs["activation"] not in ("linear", "leaky", "sigmoid"):
            raise CfgParseError(f"unknown activation {attrs['activation']!r}", line)
    elif kind == "maxpool":
        attrs.setdefault("stride", 1)
        attrs.setdefault("padding", (attrs["size"] - 1) // 2)
        if attrs["size"] < 1 or attrs["stride"] < 1:
            raise CfgParseError("maxpool size and stride must be >= 1", line)
        if not 0 <= attrs["padding"] <= attrs["size"] - 1:
            raise CfgParseError("maxpool padding must be in [0, size-1]", line)
    elif kind == "upsample":
        attrs.setdefault("stride", 2)
        if attrs["stride"] != 2:
            raise CfgParseError("only stride-2 upsampling is supported", line)
    elif kind == "route":
        if not attrs["layers"]:
            raise CfgParseError("route needs at least one layer reference", line)
    elif kind == "shortcut":
        attrs.setdefault("activation", "linear")
        if attrs["activation"] != "linear":
            raise CfgParseError("shortcut supports only linear activation", line)
    elif kind == "yolo":
        attrs.setdefault("ignore_thresh", 0.5)
        anchors, mask = attrs["anchors"], attrs["mask"]
        if len(anchors) % 2 != 0 or not anchors:
            raise CfgParseError("anchors must be a flat, even-length w,h list", line)
        attrs.setdefault("num", len(anchors) // 2)
        if attrs["num"] != len(anchors) // 2:
            raise CfgParseError("num must equal the number of anchor pairs", line)
        if len(mask) != 3:
            raise CfgParseError("yolo mask must select exactly 3 anchors", line)
        if any(m < 0 or m >= len(anchors) // 2 for m in mask):
            raise CfgParseError("yolo mask index out of anchor range", line)
        if attrs["classes"] < 1:
            raise CfgParseError("classes must be >= 1", line)


def _validate_structure(graph: ModelGraph) -> None:
    classes_seen = set()
    for i, layer in enumerate(graph.layers):
        if layer.kind == "route":
            for ref in layer.attrs["layers"]:
                abs_ref = resolve_ref(i, ref)
                if not 0 <= abs_ref < i:
                    raise CfgParseError(
                        f"route reference {ref} does not resolve to an earlier layer",
                        layer.source_line,
                    )
        elif layer.kind == "shortcut":
            abs_ref = resolve_ref(i, layer.attrs["from"])
            if not 0 <= abs_ref < i:
                raise CfgParseError(
                    f"shortcut reference {layer.attrs['from']} does not resolve to an earlier layer",
                    layer.source_line,
                )
        elif layer.kind == "yolo":
            classes_seen.add(layer.attrs["classes"])
    if len(classes_seen) > 1:
        raise CfgParseError(f"yolo layers disagree on class count: {sorted(classes_seen)}")


def parse_cfg(text: str) -> ModelGraph:
    """Parse network-definition text into a validated :class:`ModelGraph`."""
    sections: list[tuple[str, dict, int]] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CfgParseError(f"malformed section header {line!r}", lineno)
            name = line[1:-1].strip()
            if name not in _SCHEMAS:
                raise CfgParseError(f"unknown section [{name}]", lineno)
            if not sections and name != "net":
                raise CfgParseError("first section must be [net]", lineno)
            if sections and name == "net":
                raise CfgParseError("duplicate [net] section", lineno)
            current = (name, {}, lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise CfgParseError(f"expected key=value, got {line!r}", lineno)
        if current is None:
            raise CfgParseError("key=value before any section header", lineno)
        key, _, raw_value = line.partition("=")
        key, raw_value = key.strip(), raw_value.strip()
        kind = current[0]
        if key not in _SCHEMAS[kind]:
            raise CfgParseError(f"key {key!r} is not valid in [{kind}]", lineno)
        if key in current[1]:
            raise CfgParseError(f"duplicate key {key!r}", lineno)
        current[1][key] = _parse_value(kind, key, raw_value, lineno)

    if not sections:
        raise CfgParseError("empty definition: missing [net] section")
    for name, attrs, lineno in sections:
        _finalize(name, attrs, lineno)
    net = sections[0][1]
    layers = [LayerSpec(name, attrs, lineno) for name, attrs, lineno in sections[1:]]
    graph = ModelGraph(net=net, layers=layers)
    _validate_structure(graph)
    return graph


def render_cfg(graph: ModelGraph) -> str:
    """Serialize a graph back to definition text. parse(render(g)) == g."""
    out = ["[net]"]
    for key in _SCHEMAS["net"]:
        out.append(f"{key}={graph.net[key]}")
    for layer in graph.layers:
        out.append("")
        out.append(f"[{layer.kind}]")
        for key in _SCHEMAS[layer.kind]:
            if key not in layer.attrs:
                continue
            value = layer.attrs[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            out.append(f"{key}={value}")
    return "\n".join(out) + "\n"


def graph_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Structural equality: net attributes and per-layer kind/attrs (not lines)."""
    if a.net != b.net or len(a.layers) != len(b.layers):
        return False
    return all(
        la.kind == lb.kind and la.attrs == lb.attrs for la, lb in zip(a.layers, b.layers)
    )


def shape_check(graph: ModelGraph, width: int, height: int) -> list[tuple[int, int, int]]:
    """Propagate (channels, H, W) through every layer for the given input size.

    Raises GraphValidationError on indivisible input sizes, shortcut shape
    mismatches, route spatial mismatches, or yolo channel-count violations.
    """
    if width % MAX_BACKBONE_STRIDE or height % MAX_BACKBONE_STRIDE:
        raise GraphValidationError(
            f"input {width}x{height} must be divisible by {MAX_BACKBONE_STRIDE}"
        )
    shapes: list[tuple[int, int, int]] = []
    prev = (graph.input_channels, height, width)
    for i, layer in enumerate(graph.layers):
        a = layer.attrs
        if layer.kind == "convolutional":
            k, s = a["size"], a["stride"]
            pad = (k - 1) // 2 if a["pad"] else 0
            c, h, w = prev
            shape = (a["filters"], (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1)
        elif layer.kind == "maxpool":
            k, s, pad = a["size"], a["stride"], a["padding"]
            c, h, w = prev
            if h + 2 * pad < k or w + 2 * pad < k:
                raise GraphValidationError(
                    f"layer {i}: pool window {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
                )
            shape = (c, (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1)
        elif layer.kind == "upsample":
            c, h, w = prev
            shape = (c, 2 * h, 2 * w)
        elif layer.kind == "route":
            refs = [resolve_ref(i, r) for r in a["layers"]]
            spatial = shapes[refs[0]][1:]
            for r in refs[1:]:
                if shapes[r][1:] != spatial:
                    raise GraphValidationError(
                        f"layer {i}: route inputs disagree spatially: "
                        f"{shapes[r][1:]} vs {spatial}"
                    )
            shape = (sum(shapes[r][0] for r in refs), *spatial)
        elif layer.kind == "shortcut":
            ref = resolve_ref(i, a["from"])
            if shapes[ref] != prev:
                raise GraphValidationError(
                    f"layer {i}: shortcut shapes differ: {shapes[ref]} vs {prev}"
                )
            shape = prev
        elif layer.kind == "yolo":
            c, h, w = prev
            wanted = 3 * (5 + a["classes"])
            if c != wanted:
                raise GraphValidationError(
                    f"layer {i}: yolo expects {wanted} input channels "
                    f"(3*(5+{a['classes']})), got {c}"
                )
            if height % h or width % w or height // h != width // w:
                raise GraphValidationError(
                    f"layer {i}: yolo grid {h}x{w} is not an integer stride of "
                    f"{height}x{width}"
                )
            if height // h not in HEAD_STRIDES:
                raise GraphValidationError(
                    f"layer {i}: head stride {height // h} not in {HEAD_STRIDES}"
                )
            shape = prev
        else:  # pragma: no cover - parser rejects unknown kinds
            raise GraphValidationError(f"layer {i}: unknown kind {layer.kind!r}")
        shapes.append(shape)
        prev = shape
    return shapes


# ---------------------------------------------------------------------------
# Builtin model graphs
# ---------------------------------------------------------------------------

def _conv(filters, size, stride=1, activation="leaky", batch_normalize=1):
    return LayerSpec(
        "convolutional",
        {
            "filters": filters,
            "size": size,
            "stride": stride,
            "pad": 1,
            "batch_normalize": batch_normalize,
            "activation": activation,
        },
    )


def _maxpool(size, stride):
    return LayerSpec(
        "maxpool", {"size": size, "stride": stride, "padding": (size - 1) // 2}
    )


def _route(*refs):
    return LayerSpec("route", {"layers": list(refs)})


def _shortcut(from_ref):
    return LayerSpec("shortcut", {"from": from_ref, "activation": "linear"})


def _yolo(mask, num_classes, anchors):
    return LayerSpec(
        "yolo",
        {
            "classes": num_classes,
            "num": len(anchors) // 2,
            "mask": list(mask),
            "anchors": list(anchors),
            "ignore_thresh": 0.5,
        },
    )


def _backbone_53() -> tuple[list[LayerSpec], int, int]:
    """52-conv residual trunk. Returns (layers, stride8_tap, stride16_tap)."""
    layers = [_conv(32, 3)]
    taps = {}
    for out_ch, repeats in ((64, 1), (128, 2), (256, 8), (512, 8), (1024, 4)):
        layers.append(_conv(out_ch, 3, stride=2))
        for _ in range(repeats):
            layers.append(_conv(out_ch // 2, 1))
            layers.append(_conv(out_ch, 3))
            layers.append(_shortcut(-3))
        taps[out_ch] = len(layers) - 1
    return layers, taps[256], taps[512]


def _detection_head(filters, num_classes, mask, spp=False):
    """Neck + detection convolution + yolo layer at one scale."""
    head_ch = 3 * (5 + num_classes)
    layers = [_conv(filters, 1), _conv(filters * 2, 3), _conv(filters, 1)]
    if spp:
        layers += [
            _maxpool(5, 1),
            _route(-2),
            _maxpool(9, 1),
            _route(-4),
            _maxpool(13, 1),
            _route(-1, -3, -5, -6),
            _conv(filters, 1),
        ]
    layers += [
        _conv(filters * 2, 3),
        _conv(filters, 1),
        _conv(filters * 2, 3),
        _conv(head_ch, 1, activation="linear", batch_normalize=0),
        _yolo(mask, num_classes, COCO_ANCHORS),
    ]
    return layers


def builtin_graph(variant: str, num_classes: int) -> ModelGraph:
    """Construct a builtin detection graph: yolov3, yolov3_spp, or yolov3_tiny."""
    if num_classes < 1:
        raise GraphValidationError(f"num_classes must be >= 1, got {num_classes}")
    variant = variant.replace("-", "_")
    net = {"width": 640, "height": 640, "channels": 3}
    if variant == "yolov3_tiny":
        return ModelGraph(net=net, layers=_tiny_layers(num_classes))
    if variant not in ("yolov3", "yolov3_spp"):
        raise GraphValidationError(f"unknown model variant {variant!r}")

    layers, tap8, tap16 = _backbone_53()
    layers += _detection_head(512, num_classes, (6, 7, 8), spp=(variant == "yolov3_spp"))
    layers += [_route(-4), _conv(256, 1), LayerSpec("upsample", {"stride": 2}), _route(-1, tap16)]
    layers += _detection_head(256, num_classes, (3, 4, 5))
    layers += [_route(-4), _conv(128, 1), LayerSpec("upsample", {"stride": 2}), _route(-1, tap8)]
    layers += _detection_head(128, num_classes, (0, 1, 2))
    graph = ModelGraph(net=net, layers=layers)
    _validate_structure(graph)
    shape_check(graph, net["width"], net["height"])
    return graph


def _tiny_layers(num_classes: int) -> list[LayerSpec]:
    head_ch = 3 * (5 + num_classes)
    layers = []
    for filters in (16, 32, 64, 128, 256):
        layers.append(_conv(filters, 3))
        layers.append(_maxpool(2, 2))
    layers.append(_conv(512, 3))
    layers.append(_maxpool(3, 1))  # same-size pool keeps the deepest map at stride 32
    layers.append(_conv(1024, 3))
    layers.append(_conv(256, 1))
    layers.append(_conv(512, 3))
    layers.append(_conv(head_ch, 1, activation="linear", batch_normalize=0))
    layers.append(_yolo((3, 4, 5), num_classes, TINY_ANCHORS))
    tap16 = 8  # 256-channel map at stride 16
    layers.append(_route(-4))
    layers.append(_conv(128, 1))
    layers.append(LayerSpec("upsample", {"stride": 2}))
    layers.append(_route(-1, tap16))
    layers.append(_conv(256, 3))
    layers.append(_conv(head_ch, 1, activation="linear", batch_normalize=0))
    layers.append(_yolo((0, 1, 2), num_classes, TINY_ANCHORS))
    return layers
