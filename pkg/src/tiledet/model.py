"""Network description files: ``.cfg`` text plus a ``.weights`` binary.

The cfg format is the Darknet dialect: ``[section]`` headers, ``key=value``
lines, ``#`` comments. The weights file is a 16-byte header (four
little-endian uint32: major, minor, revision, images-seen) followed by every
layer's parameters as little-endian IEEE754 float32, in layer order, each
layer laid out as biases, then batch-norm scale/mean/variance when present,
then kernel weights. Parsing and binding cross-check each other so that a
cfg/weights pair that loads is guaranteed mutually consistent.
"""

from dataclasses import dataclass, field

import numpy as np

CONVOLUTIONAL = "convolutional"
DEPTHWISE_SEPARABLE = "depthwise_separable"
MAXPOOL = "maxpool"
UPSAMPLE = "upsample"
ROUTE = "route"
YOLO = "yolo"

LAYER_KINDS = (CONVOLUTIONAL, DEPTHWISE_SEPARABLE, MAXPOOL, UPSAMPLE, ROUTE, YOLO)

WEIGHTS_HEADER_BYTES = 16

_SECTION_ALIASES = {
    "convolutional": CONVOLUTIONAL,
    "conv": CONVOLUTIONAL,
    "depthwise_separable": DEPTHWISE_SEPARABLE,
    "depthwise-separable": DEPTHWISE_SEPARABLE,
    "maxpool": MAXPOOL,
    "upsample": UPSAMPLE,
    "route": ROUTE,
    "yolo": YOLO,
}

_ALLOWED_KEYS = {
    "net": {"height", "width", "channels", "h", "w", "c"},
    CONVOLUTIONAL: {"filters", "size", "stride", "pad", "padding", "activation",
                    "batch_normalize", "groups"},
    DEPTHWISE_SEPARABLE: {"filters", "size", "stride", "pad", "padding",
                          "activation", "batch_normalize"},
    MAXPOOL: {"size", "stride", "padding"},
    UPSAMPLE: {"stride"},
    ROUTE: {"layers"},
    YOLO: {"anchors", "mask", "classes", "num"},
}

_ACTIVATIONS = {"linear", "leaky"}


class CfgError(ValueError):
    """Cfg text that cannot be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConsistencyError(ValueError):
    """cfg/weights pair that disagrees about parameter layout or count."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    size: int = 1
    stride: int = 1
    padding: int = 0
    activation: str = "linear"
    batch_normalize: bool = False
    sources: tuple = ()          # route: resolved absolute layer indices
    anchors: tuple = ()          # yolo: ((w, h), ...)
    mask: tuple = ()             # yolo: indices into anchors
    classes: int = 0


@dataclass(frozen=True)
class ModelGraph:
    input_shape: tuple            # (H, W, C) of the network input
    layers: tuple                 # LayerSpec per layer
    shapes: tuple                 # output (H, W, C) per layer
    params: tuple | None = None   # per-layer dict of ndarrays once bound

    @property
    def bound(self) -> bool:
        return self.params is not None

    def param_count(self) -> int:
        return sum(
            layer_param_count(spec, self._input_channels(i))
            for i, spec in enumerate(self.layers)
        )

    def _input_channels(self, i: int) -> int:
        shape = self.input_shape if i == 0 else self.shapes[i - 1]
        return shape[2]

    def layer_input_shape(self, i: int) -> tuple:
        return self.input_shape if i == 0 else self.shapes[i - 1]


def _conv_output(shape, size, stride, padding, filters, line=None):
    h, w, _ = shape
    num_h = h + 2 * padding - size
    num_w = w + 2 * padding - size
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise CfgError(
            f"kernel {size}x{size} stride {stride} pad {padding} does not tile "
            f"a {h}x{w} input evenly", line)
    return (num_h // stride + 1, num_w // stride + 1, filters)


def _output_shape(spec: LayerSpec, input_shape, prior_shapes, line=None):
    if spec.kind in (CONVOLUTIONAL, DEPTHWISE_SEPARABLE):
        return _conv_output(input_shape, spec.size, spec.stride, spec.padding,
                            spec.filters, line)
    if spec.kind == MAXPOOL:
        return _conv_output(input_shape, spec.size, spec.stride, spec.padding,
                            input_shape[2], line)
    if spec.kind == UPSAMPLE:
        h, w, c = input_shape
        return (h * spec.stride, w * spec.stride, c)
    if spec.kind == ROUTE:
        shapes = [prior_shapes[i] for i in spec.sources]
        h, w = shapes[0][0], shapes[0][1]
        for s in shapes[1:]:
            if (s[0], s[1]) != (h, w):
                raise CfgError(
                    f"route inputs disagree on spatial size: {shapes}", line)
        return (h, w, sum(s[2] for s in shapes))
    if spec.kind == YOLO:
        h, w, c = input_shape
        expected = len(spec.mask) * (5 + spec.classes)
        if c != expected:
            raise CfgError(
                f"yolo head expects {expected} channels"
                f" ({len(spec.mask)} anchors x (5+{spec.classes})), got {c}", line)
        return input_shape
    raise CfgError(f"unhandled layer kind {spec.kind}", line)


def layer_param_count(spec: LayerSpec, in_channels: int) -> int:
    """Number of float32 parameters the weights file must carry for a layer."""
    if spec.kind == CONVOLUTIONAL:
        n = spec.size ** 2 * in_channels * spec.filters + spec.filters
        if spec.batch_normalize:
            n += 3 * spec.filters
        return n
    if spec.kind == DEPTHWISE_SEPARABLE:
        n = spec.size ** 2 * in_channels + in_channels * spec.filters + spec.filters
        if spec.batch_normalize:
            n += 3 * spec.filters
        return n
    return 0


# --- parsing -----------------------------------------------------------------

def _parse_int(raw, key, line, minimum=None):
    try:
        value = int(raw)
    except ValueError:
        raise CfgError(f"{key} must be an integer, got {raw!r}", line) from None
    if minimum is not None and value < minimum:
        raise CfgError(f"{key} must be >= {minimum}, got {value}", line)
    return value


def _parse_int_list(raw, key, line):
    try:
        return [int(p) for p in raw.replace(" ", "").split(",") if p != ""]
    except ValueError:
        raise CfgError(f"{key} must be a comma-separated integer list", line) from None


def _sections(text: str):
    """Split cfg text into (name, line, {key: (value, line)}) triples."""
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CfgError("unterminated section header", lineno)
            name = line[1:-1].strip().lower()
            current = (name, lineno, {})
            sections.append(current)
            continue
        if "=" not in line:
            raise CfgError(f"expected key=value, got {line!r}", lineno)
        if current is None:
            raise CfgError("key=value before any [section]", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise CfgError("empty key", lineno)
        current[2][key.lower()] = (value, lineno)
    return sections


def _check_keys(name, attrs, line):
    allowed = _ALLOWED_KEYS[name]
    for key, (_, key_line) in attrs.items():
        if key not in allowed:
            raise CfgError(f"unknown key {key!r} in [{name}]", key_line)


def _get(attrs, key, default=None):
    if key in attrs:
        return attrs[key][0]
    return default


def _conv_like(name, attrs, line, allow_groups):
    filters = _parse_int(_get(attrs, "filters", "1"), "filters", line, minimum=1)
    size = _parse_int(_get(attrs, "size", "1"), "size", line, minimum=1)
    stride = _parse_int(_get(attrs, "stride", "1"), "stride", line, minimum=1)
    if "padding" in attrs:
        padding = _parse_int(attrs["padding"][0], "padding", line, minimum=0)
    elif _parse_int(_get(attrs, "pad", "0"), "pad", line) != 0:
        padding = size // 2
    else:
        padding = 0
    activation = _get(attrs, "activation", "linear").lower()
    if activation not in _ACTIVATIONS:
        raise CfgError(f"unsupported activation {activation!r}", line)
    bn = _parse_int(_get(attrs, "batch_normalize", "0"), "batch_normalize", line) != 0
    groups = _parse_int(_get(attrs, "groups", "1"), "groups", line, minimum=1)
    if groups != 1 and not allow_groups:
        raise CfgError("groups is only valid on [convolutional]", line)
    return filters, size, stride, padding, activation, bn, groups


def parse_cfg(text: str) -> ModelGraph:
    """Parse cfg text into an unbound ModelGraph with resolved output shapes."""
    if not text.strip():
        raise CfgError("empty cfg text")
    sections = _sections(text)
    if not sections or sections[0][0] != "net":
        raise CfgError("cfg must start with a [net] section",
                       sections[0][1] if sections else None)

    name, line, attrs = sections[0]
    _check_keys("net", attrs, line)
    height = _parse_int(_get(attrs, "height", _get(attrs, "h", "0")), "height", line, 1)
    width = _parse_int(_get(attrs, "width", _get(attrs, "w", "0")), "width", line, 1)
    channels = _parse_int(_get(attrs, "channels", _get(attrs, "c", "0")), "channels",
                          line, 1)
    input_shape = (height, width, channels)

    # first pass: raw per-section specs
    raw_layers = []
    for name, line, attrs in sections[1:]:
        if name not in _SECTION_ALIASES:
            raise CfgError(f"unknown section [{name}]", line)
        kind = _SECTION_ALIASES[name]
        _check_keys(kind, attrs, line)

        if kind == CONVOLUTIONAL:
            filters, size, stride, padding, act, bn, groups = _conv_like(
                kind, attrs, line, allow_groups=True)
            raw_layers.append(("conv", line, dict(
                filters=filters, size=size, stride=stride, padding=padding,
                activation=act, batch_normalize=bn, groups=groups)))
        elif kind == DEPTHWISE_SEPARABLE:
            filters, size, stride, padding, act, bn, _ = _conv_like(
                kind, attrs, line, allow_groups=False)
            raw_layers.append(("dsc", line, dict(
                filters=filters, size=size, stride=stride, padding=padding,
                activation=act, batch_normalize=bn)))
        elif kind == MAXPOOL:
            size = _parse_int(_get(attrs, "size", "2"), "size", line, minimum=1)
            stride = _parse_int(_get(attrs, "stride", str(size)), "stride", line, 1)
            padding = _parse_int(_get(attrs, "padding", "0"), "padding", line, 0)
            raw_layers.append(("maxpool", line, dict(size=size, stride=stride,
                                                     padding=padding)))
        elif kind == UPSAMPLE:
            stride = _parse_int(_get(attrs, "stride", "2"), "stride", line, minimum=1)
            raw_layers.append(("upsample", line, dict(stride=stride)))
        elif kind == ROUTE:
            if "layers" not in attrs:
                raise CfgError("route needs a layers= list", line)
            refs = _parse_int_list(attrs["layers"][0], "layers", line)
            if not refs:
                raise CfgError("route layers= list is empty", line)
            raw_layers.append(("route", line, dict(refs=refs)))
        else:  # yolo
            if "anchors" not in attrs or "mask" not in attrs:
                raise CfgError("yolo needs anchors= and mask=", line)
            flat = _parse_int_list(attrs["anchors"][0], "anchors", line)
            if len(flat) % 2:
                raise CfgError("anchors must be w,h pairs", line)
            anchors = tuple(zip(flat[::2], flat[1::2]))
            mask = tuple(_parse_int_list(attrs["mask"][0], "mask", line))
            classes = _parse_int(_get(attrs, "classes", "1"), "classes", line, 1)
            num = _parse_int(_get(attrs, "num", str(len(anchors))), "num", line, 1)
            if num != len(anchors):
                raise CfgError(f"num={num} but {len(anchors)} anchors given", line)
            if any(m < 0 or m >= len(anchors) for m in mask):
                raise CfgError("mask indexes outside the anchor list", line)
            raw_layers.append(("yolo", line, dict(anchors=anchors, mask=mask,
                                                  classes=classes)))

    # second pass: normalise the depthwise(+groups) / pointwise pair into the
    # dedicated depthwise-separable kind, resolve shapes and route sources
    layers = []
    shapes = []
    lines = []
    i = 0
    while i < len(raw_layers):
        tag, line, a = raw_layers[i]
        in_shape = input_shape if not shapes else shapes[-1]

        if tag == "conv" and a["groups"] != 1:
            cin = in_shape[2]
            nxt = raw_layers[i + 1] if i + 1 < len(raw_layers) else None
            ok = (
                a["groups"] == cin and a["filters"] == cin
                and a["activation"] == "linear" and not a["batch_normalize"]
                and nxt is not None and nxt[0] == "conv"
                and nxt[2]["size"] == 1 and nxt[2]["groups"] == 1
                and nxt[2]["stride"] == 1 and nxt[2]["padding"] == 0
            )
            if not ok:
                raise CfgError(
                    "grouped convolution is only supported as a depthwise stage"
                    " (groups == filters == input channels, linear, no batch"
                    " norm) immediately followed by a 1x1 convolution", line)
            spec = LayerSpec(
                kind=DEPTHWISE_SEPARABLE, filters=nxt[2]["filters"], size=a["size"],
                stride=a["stride"], padding=a["padding"],
                activation=nxt[2]["activation"],
                batch_normalize=nxt[2]["batch_normalize"])
            i += 2
        elif tag == "conv":
            a.pop("groups")
            spec = LayerSpec(kind=CONVOLUTIONAL, **a)
            i += 1
        elif tag == "dsc":
            spec = LayerSpec(kind=DEPTHWISE_SEPARABLE, **a)
            i += 1
        elif tag == "maxpool":
            spec = LayerSpec(kind=MAXPOOL, **a)
            i += 1
        elif tag == "upsample":
            spec = LayerSpec(kind=UPSAMPLE, **a)
            i += 1
        elif tag == "route":
            index = len(layers)
            sources = []
            for ref in a["refs"]:
                absolute = index + ref if ref < 0 else ref
                if absolute < 0 or absolute >= index:
                    raise CfgError(
                        f"route reference {ref} does not point at an earlier"
                        f" layer (resolved to {absolute}, current index {index})",
                        line)
                sources.append(absolute)
            spec = LayerSpec(kind=ROUTE, sources=tuple(sources))
            i += 1
        else:
            spec = LayerSpec(kind=YOLO, **a)
            i += 1

        shapes.append(_output_shape(spec, in_shape, shapes, line))
        layers.append(spec)
        lines.append(line)

    return ModelGraph(input_shape, tuple(layers), tuple(shapes))


def serialize_cfg(g: ModelGraph) -> str:
    """Canonical cfg text; parse(serialize(parse(t))) is a fixed point."""
    out = ["[net]",
           f"height={g.input_shape[0]}",
           f"width={g.input_shape[1]}",
           f"channels={g.input_shape[2]}"]
    for spec in g.layers:
        out.append("")
        if spec.kind in (CONVOLUTIONAL, DEPTHWISE_SEPARABLE):
            out.append(f"[{spec.kind}]")
            if spec.batch_normalize:
                out.append("batch_normalize=1")
            out.append(f"filters={spec.filters}")
            out.append(f"size={spec.size}")
            out.append(f"stride={spec.stride}")
            out.append(f"padding={spec.padding}")
            out.append(f"activation={spec.activation}")
        elif spec.kind == MAXPOOL:
            out.append("[maxpool]")
            out.append(f"size={spec.size}")
            out.append(f"stride={spec.stride}")
            out.append(f"padding={spec.padding}")
        elif spec.kind == UPSAMPLE:
            out.append("[upsample]")
            out.append(f"stride={spec.stride}")
        elif spec.kind == ROUTE:
            out.append("[route]")
            out.append("layers=" + ",".join(str(s) for s in spec.sources))
        else:
            out.append("[yolo]")
            out.append("anchors=" + ",".join(f"{w},{h}" for w, h in spec.anchors))
            out.append("mask=" + ",".join(str(m) for m in spec.mask))
            out.append(f"classes={spec.classes}")
            out.append(f"num={len(spec.anchors)}")
    return "\n".join(out) + "\n"


# --- weights binding ---------------------------------------------------------

def _layer_slices(spec: LayerSpec, cin: int):
    """(name, shape) pairs in file order for one layer."""
    f = spec.filters
    if spec.kind == CONVOLUTIONAL:
        slices = [("bias", (f,))]
        if spec.batch_normalize:
            slices += [("bn_scale", (f,)), ("bn_mean", (f,)), ("bn_var", (f,))]
        slices.append(("weights", (f, cin, spec.size, spec.size)))
        return slices
    if spec.kind == DEPTHWISE_SEPARABLE:
        slices = [("bias", (f,))]
        if spec.batch_normalize:
            slices += [("bn_scale", (f,)), ("bn_mean", (f,)), ("bn_var", (f,))]
        slices += [("dw_weights", (cin, spec.size, spec.size)),
                   ("pw_weights", (f, cin))]
        return slices
    return []


def bind_weights(g: ModelGraph, blob: bytes) -> ModelGraph:
    """Attach a raw weights file to a parsed graph, checking consistency."""
    if len(blob) < WEIGHTS_HEADER_BYTES:
        raise ConsistencyError(
            f"weights file is {len(blob)} bytes, shorter than the"
            f" {WEIGHTS_HEADER_BYTES}-byte header")
    body = blob[WEIGHTS_HEADER_BYTES:]
    if len(body) % 4:
        raise ConsistencyError("weights payload is not a whole number of float32")
    stream = np.frombuffer(body, dtype="<f4")

    params = []
    cursor = 0
    for i, spec in enumerate(g.layers):
        cin = g._input_channels(i)
        layer = {}
        for pname, shape in _layer_slices(spec, cin):
            n = int(np.prod(shape))
            if cursor + n > stream.size:
                raise ConsistencyError(
                    f"weights file ends inside layer {i} ({spec.kind}.{pname}):"
                    f" needs {n} more values, {stream.size - cursor} left")
            layer[pname] = stream[cursor:cursor + n].reshape(shape).astype(np.float32)
            cursor += n
        params.append(layer)
    if cursor != stream.size:
        raise ConsistencyError(
            f"{stream.size - cursor} unconsumed parameters after the last layer")
    return ModelGraph(g.input_shape, g.layers, g.shapes, tuple(params))


def serialize_weights(g: ModelGraph, header=(0, 2, 0, 0)) -> bytes:
    """Bound graph -> weights file bytes, inverse of bind_weights."""
    if not g.bound:
        raise ValueError("graph has no bound parameters to serialize")
    if len(header) != 4:
        raise ValueError("weights header needs exactly 4 integers")
    chunks = [np.array(header, dtype="<u4").tobytes()]
    for i, spec in enumerate(g.layers):
        cin = g._input_channels(i)
        for pname, shape in _layer_slices(spec, cin):
            arr = g.params[i][pname]
            if tuple(arr.shape) != tuple(shape):
                raise ConsistencyError(
                    f"layer {i} {pname} has shape {arr.shape}, expected {shape}")
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def init_params(g: ModelGraph, rng=None) -> ModelGraph:
    """Bind freshly initialised parameters (testing and demos)."""
    rng = rng or np.random.default_rng(0)
    params = []
    for i, spec in enumerate(g.layers):
        cin = g._input_channels(i)
        layer = {}
        for pname, shape in _layer_slices(spec, cin):
            if pname == "bn_var":
                layer[pname] = np.ones(shape, dtype=np.float32)
            elif pname in ("bias", "bn_mean"):
                layer[pname] = np.zeros(shape, dtype=np.float32)
            elif pname == "bn_scale":
                layer[pname] = np.ones(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:])) or 1
                layer[pname] = rng.normal(
                    0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(np.float32)
        params.append(layer)
    return ModelGraph(g.input_shape, g.layers, g.shapes, tuple(params))


def load_model(cfg_path, weights_path=None) -> ModelGraph:
    with open(cfg_path, "r", encoding="utf-8") as fh:
        graph = parse_cfg(fh.read())
    if weights_path is None:
        return graph
    with open(weights_path, "rb") as fh:
        return bind_weights(graph, fh.read())
