"""Network graphs: declaration, the twelve presets, text form, forward/backward.

A network is a :class:`GraphSpec`, an immutable list of :class:`LayerNode`
records wired by node id.  The reserved id ``"input"`` names the image fed
to :func:`forward`.  Parameters live outside the graph in a
:class:`~lesionseg.checkpoint.Checkpoint` keyed ``"<node id>.<slot>"``.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import layers as L
from .checkpoint import Checkpoint
from .errors import ConfigurationError, ContractError, InvalidArgumentError, ShapeError

INPUT = "input"

KINDS = (
    "conv", "batchnorm", "relu", "maxpool", "transposed_conv", "upsample",
    "concat", "add", "dropout", "softmax_loss",
)

PARAM_SLOTS = {
    "conv": ("weight", "bias"),
    "transposed_conv": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
}
TRAINABLE_SLOTS = ("weight", "bias", "gamma", "beta")

PRESETS = (
    "sgn1", "sgn2", "sgn3", "sgn4", "sgn5", "sgn6",
    "fcn8", "fcn16", "fcn32", "vgg16", "vgg19", "sgnvgg16",
)

VGG_WIDTHS = (64, 128, 256, 512, 512)
VGG_CONVS = {"vgg16": (2, 2, 3, 3, 3), "sgnvgg16": (2, 2, 3, 3, 3), "vgg19": (2, 2, 4, 4, 4)}
# FCN encoders reuse the first seven VGG16 convolutions so VGG16 weights can seed them.
FCN_ENCODER_WIDTHS = (64, 64, 128, 128, 256, 256, 256)
FCN_SECTIONS = {1: (7,), 2: (4, 3), 3: (2, 2, 3)}
FCN_NAMES = {1: "FCN32", 2: "FCN16", 3: "FCN8"}
MAX_WIDTH = 512


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple = ()
    group: str = ""

    def param_names(self):
        return [f"{self.id}.{s}" for s in PARAM_SLOTS.get(self.kind, ())]

    def param_shapes(self):
        p = self.params
        if self.kind == "conv":
            return {f"{self.id}.weight": (p["out"], p["in"], p["k"], p["k"]),
                    f"{self.id}.bias": (p["out"],)}
        if self.kind == "transposed_conv":
            # adjoint-of-conv layout: (in, out, k, k)
            return {f"{self.id}.weight": (p["in"], p["out"], p["k"], p["k"]),
                    f"{self.id}.bias": (p["out"],)}
        if self.kind == "batchnorm":
            c = (p["channels"],)
            return {f"{self.id}.{s}": c for s in PARAM_SLOTS["batchnorm"]}
        return {}


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple
    encoder_depth: int
    convs_per_section: tuple = ()
    channel_widths: tuple = ()
    skip_style: str = "SGN"
    preset_name: str = ""
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "convs_per_section", tuple(self.convs_per_section))
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))
        validate(self)

    @cached_property
    def by_id(self):
        return {n.id: n for n in self.nodes}

    @cached_property
    def order(self):
        return _topological_order(self.nodes)

    @cached_property
    def loss_node(self):
        return next(n for n in self.nodes if n.kind == "softmax_loss")

    @property
    def logits_id(self):
        return self.loss_node.inputs[0]

    def param_shapes(self):
        out = {}
        for nid in self.order:
            out.update(self.by_id[nid].param_shapes())
        return out

    def trainable_names(self):
        return [n for n in self.param_shapes() if n.rsplit(".", 1)[1] in TRAINABLE_SLOTS]

    def param_count(self):
        return int(sum(np.prod(s) for n, s in self.param_shapes().items()
                       if n.rsplit(".", 1)[1] in TRAINABLE_SLOTS))

    def count(self, kind):
        return sum(1 for n in self.nodes if n.kind == kind)

    def encoder_nodes(self):
        return [n for n in self.nodes if n.group.startswith("enc")]

    def encoder_param_names(self):
        out = []
        for nid in self.order:
            node = self.by_id[nid]
            if node.group.startswith("enc"):
                out.extend(node.param_names())
        return out

    def to_text(self):
        return graph_to_text(self)


# ---------------------------------------------------------------- validation


def _topological_order(nodes):
    ids = [n.id for n in nodes]
    indeg = {n.id: 0 for n in nodes}
    users = {n.id: [] for n in nodes}
    for n in nodes:
        for src in n.inputs:
            if src == INPUT:
                continue
            indeg[n.id] += 1
            users[src].append(n.id)
    ready = [i for i in ids if indeg[i] == 0]
    order = []
    pos = {i: k for k, i in enumerate(ids)}
    while ready:
        ready.sort(key=pos.__getitem__)
        nid = ready.pop(0)
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    if len(order) != len(ids):
        stuck = next(i for i in ids if indeg[i] > 0)
        raise ConfigurationError(f"graph has a cycle through node {stuck!r}")
    return tuple(order)


def validate(spec):
    seen = set()
    for n in spec.nodes:
        if n.id == INPUT or n.id in seen:
            raise ConfigurationError(f"duplicate or reserved node id {n.id!r}")
        if n.kind not in KINDS:
            raise ConfigurationError(f"node {n.id!r} has unknown kind {n.kind!r}")
        seen.add(n.id)
    for n in spec.nodes:
        for src in n.inputs:
            if src != INPUT and src not in seen:
                raise ConfigurationError(f"node {n.id!r} reads undefined input {src!r}")
        want = 2 if n.kind in ("concat", "add") else 1
        if len(n.inputs) != want:
            raise ConfigurationError(f"node {n.id!r} ({n.kind}) needs {want} inputs, has {len(n.inputs)}")
    _topological_order(spec.nodes)
    sinks = [n for n in spec.nodes if n.kind == "softmax_loss"]
    if len(sinks) != 1:
        raise ConfigurationError(f"graph needs exactly one softmax_loss node, found {len(sinks)}")
    consumed = {src for n in spec.nodes for src in n.inputs}
    if sinks[0].id in consumed:
        raise ConfigurationError(f"softmax_loss node {sinks[0].id!r} must be a sink")
    pools = spec.count("maxpool")
    if pools != spec.encoder_depth:
        raise ConfigurationError(
            f"encoder_depth {spec.encoder_depth} does not match {pools} maxpool nodes")


# ---------------------------------------------------------------- builders


class _Builder:
    def __init__(self):
        self.nodes = []

    def add(self, nid, kind, inputs, group, **params):
        self.nodes.append(LayerNode(nid, kind, params, tuple(inputs), group))
        return nid

    def conv(self, nid, src, cin, cout, group, k=3):
        return self.add(nid, "conv", [src], group, **{"in": cin, "out": cout, "k": k,
                                                      "stride": 1, "pad": k // 2})

    def section(self, prefix, src, cin, widths, group):
        """conv3x3 -> batchnorm -> relu, once per entry of ``widths``."""
        for i, w in enumerate(widths, start=1):
            src = self.conv(f"{prefix}_conv{i}", src, cin, w, group)
            src = self.add(f"{prefix}_bn{i}", "batchnorm", [src], group, channels=w)
            src = self.add(f"{prefix}_relu{i}", "relu", [src], group)
            cin = w
        return src, cin

    def upsampler(self, prefix, src, cin, cout, group, upsampling):
        if upsampling == "transposed":
            src = self.add(f"{prefix}_up", "transposed_conv", [src], group,
                           **{"in": cin, "out": cout, "k": 2, "stride": 2, "pad": 0})
            return src, cout
        if upsampling in ("bilinear", "nearest"):
            return self.add(f"{prefix}_up", "upsample", [src], group, factor=2, algo=upsampling), cin
        raise InvalidArgumentError(f"unknown upsampling {upsampling!r}")

    def head(self, src, cin):
        src = self.conv("head", src, cin, 2, "head", k=1)
        self.add("loss", "softmax_loss", [src], "head")


def _unet(name, convs, widths, bridge_convs, decoder_convs, in_channels, upsampling, dropout):
    b = _Builder()
    src, ch = INPUT, in_channels
    skips = []
    for d, (n, w) in enumerate(zip(convs, widths), start=1):
        src, ch = b.section(f"enc{d}", src, ch, [w] * n, f"enc{d}")
        skips.append((src, ch))
        src = b.add(f"enc{d}_pool", "maxpool", [src], f"enc{d}", window=2, stride=2)
    if bridge_convs:
        bw = min(2 * widths[-1], MAX_WIDTH)
        src, ch = b.section("bridge", src, ch, [bw] * bridge_convs, "bridge")
    if dropout:
        src = b.add("bridge_dropout", "dropout", [src], "bridge", rate=float(dropout))
    for d in range(len(convs), 0, -1):
        skip, skip_ch = skips[d - 1]
        g = f"dec{d}"
        src, ch = b.upsampler(g, src, ch, widths[d - 1], g, upsampling)
        if upsampling == "transposed":
            src = b.add(f"{g}_uprelu", "relu", [src], g)
        src = b.add(f"{g}_concat", "concat", [src, skip], g)
        ch += skip_ch
        n = decoder_convs if decoder_convs else convs[d - 1]
        src, ch = b.section(g, src, ch, [widths[d - 1]] * n, g)
    b.head(src, ch)
    return GraphSpec(tuple(b.nodes), len(convs), tuple(convs), tuple(widths), "SGN", name, in_channels)


def build_sgn(depth, base_width=64, *, in_channels=3, upsampling="transposed", dropout=0.0):
    """U-net with ``depth`` encoder sections of two conv/BN/ReLU blocks each.

    Decoder stage d concatenates the upsampled tensor from below with the
    pre-pool output of encoder section d.  Widths double per depth from
    ``base_width`` and are capped at 512.
    """
    if not 1 <= int(depth) <= 6:
        raise InvalidArgumentError(f"SGN depth must be in 1..6, got {depth}")
    widths = [min(base_width * 2 ** i, MAX_WIDTH) for i in range(depth)]
    return _unet(f"SGN{depth}", [2] * depth, widths, 2, 2, in_channels, upsampling, dropout)


def build_fcn(depth, *, in_channels=3, upsampling="transposed"):
    """FCN32/16/8 (depth 1/2/3) with early 1x1-projected skip fusion.

    Decoder stage d adds the upsampled tensor from below to a 1x1 projection
    of the *input* of encoder section d.  The encoder is always the first
    seven VGG16 convolutions, split into ``depth`` sections; the bottom
    section gets ``4 - depth`` convolutions so every preset has twelve.
    """
    if depth not in FCN_SECTIONS:
        raise InvalidArgumentError(f"FCN depth must be 1, 2 or 3, got {depth}")
    b = _Builder()
    src, ch = INPUT, in_channels
    section_inputs = []
    widths = []
    k = 0
    for s, n in enumerate(FCN_SECTIONS[depth], start=1):
        section_inputs.append((src, ch))
        src, ch = b.section(f"enc{s}", src, ch, FCN_ENCODER_WIDTHS[k:k + n], f"enc{s}")
        k += n
        widths.append(ch)
        src = b.add(f"enc{s}_pool", "maxpool", [src], f"enc{s}", window=2, stride=2)
    src, ch = b.section("bridge", src, ch, [MAX_WIDTH] * (4 - depth), "bridge")
    for s in range(depth, 0, -1):
        g = f"dec{s}"
        skip, skip_ch = section_inputs[s - 1]
        src, ch = b.upsampler(g, src, ch, widths[s - 1], g, upsampling)
        proj = b.conv(f"{g}_proj", skip, skip_ch, ch, g, k=1)
        src = b.add(f"{g}_fuse", "add", [src, proj], g)
    b.head(src, ch)
    return GraphSpec(tuple(b.nodes), depth, FCN_SECTIONS[depth], tuple(widths), "FCN",
                     FCN_NAMES[depth], in_channels)


def build_vgg_unet(variant, *, in_channels=3, upsampling="transposed"):
    """VGG16/VGG19-shaped encoder (depth 5) with a mirrored SGN-style decoder."""
    variant = variant.lower()
    if variant not in VGG_CONVS:
        raise InvalidArgumentError(f"unknown VGG variant {variant!r}")
    spec = _unet(variant.upper(), VGG_CONVS[variant], VGG_WIDTHS, 0, 0, in_channels, upsampling, 0.0)
    return spec


def build_preset(name, **kw):
    name = name.lower()
    if name.startswith("sgnvgg") or name.startswith("vgg"):
        return build_vgg_unet(name, **kw)
    if name.startswith("sgn") and name[3:].isdigit():
        return build_sgn(int(name[3:]), **kw)
    fcn = {"fcn32": 1, "fcn16": 2, "fcn8": 3}
    if name in fcn:
        return build_fcn(fcn[name], **kw)
    raise InvalidArgumentError(f"unknown architecture {name!r}; choose from {', '.join(PRESETS)}")


# ---------------------------------------------------------------- text form


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def graph_to_text(spec):
    lines = [
        "# lesionseg graph v1",
        f"preset {spec.preset_name or '-'}",
        f"in_channels {spec.in_channels}",
        f"encoder_depth {spec.encoder_depth}",
        f"convs_per_section {' '.join(map(str, spec.convs_per_section)) or '-'}",
        f"channel_widths {' '.join(map(str, spec.channel_widths)) or '-'}",
        f"skip_style {spec.skip_style}",
    ]
    for n in spec.nodes:
        kv = " ".join(f"{k}={_fmt(v)}" for k, v in n.params.items())
        parts = ["node", n.id, n.kind, f"group={n.group or '-'}"] + ([kv] if kv else [])
        lines.append(" ".join(parts) + " <- " + ",".join(n.inputs))
    return "\n".join(lines) + "\n"


def graph_from_text(text):
    header = {}
    nodes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("node "):
            body, _, ins = line.partition(" <- ")
            toks = body.split()
            if len(toks) < 4:
                raise ConfigurationError(f"line {lineno}: malformed node line")
            nid, kind = toks[1], toks[2]
            params = {}
            group = ""
            for tok in toks[3:]:
                k, _, v = tok.partition("=")
                if k == "group":
                    group = "" if v == "-" else v
                else:
                    params[k] = _parse_value(v)
            inputs = tuple(i for i in ins.strip().split(",") if i)
            nodes.append(LayerNode(nid, kind, params, inputs, group))
        else:
            key, _, val = line.partition(" ")
            header[key] = val.strip()

    def ints(key):
        v = header.get(key, "-")
        return () if v == "-" else tuple(int(t) for t in v.split())

    return GraphSpec(
        tuple(nodes),
        int(header.get("encoder_depth", 0)),
        ints("convs_per_section"),
        ints("channel_widths"),
        header.get("skip_style", "SGN"),
        "" if header.get("preset", "-") == "-" else header["preset"],
        int(header.get("in_channels", 3)),
    )


# ---------------------------------------------------------------- evaluation


class Activations(dict):
    """Node id -> activation, plus what backward needs from the forward pass."""

    def __init__(self, token, mode):
        super().__init__()
        self.token = token
        self.mode = mode
        self.pool_maps = {}
        self.dropout_masks = {}
        self.running_updates = {}


def _token(spec, params):
    return (id(spec), id(params), params.version)


def check_params(spec, params):
    for nid in spec.order:
        node = spec.by_id[nid]
        for name, shape in node.param_shapes().items():
            if name not in params:
                raise ConfigurationError(f"node {nid!r}: missing parameter {name!r}")
            if tuple(params[name].shape) != tuple(shape):
                raise ConfigurationError(
                    f"node {nid!r}: parameter {name!r} has shape {params[name].shape}, expected {shape}")


def _conv_params(node, params):
    p = node.params
    return L.ConvParams(params[f"{node.id}.weight"], params[f"{node.id}.bias"], p["stride"], p["pad"])


def _bn_params(node, params):
    i = node.id
    return L.BatchNormParams(params[f"{i}.gamma"], params[f"{i}.beta"],
                             params[f"{i}.running_mean"], params[f"{i}.running_var"])


def _merge_inputs(a, b):
    # the upsampled branch may be one row/column larger after ceil pooling
    return L.crop_to(a, b.shape[1], b.shape[2]), b


def forward(spec, params, x, mode="infer", rng=None, keep="all"):
    """Evaluate every node in topological order.

    ``keep="all"`` retains every activation (required for backward);
    ``keep="output"`` frees intermediates as soon as their consumers ran and
    returns only the logits and softmax output, which keeps full-resolution
    inference within memory.
    """
    if mode not in ("train", "infer"):
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    check_params(spec, params)
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"input must be ({spec.in_channels},H,W), got {x.shape}")
    acts = Activations(_token(spec, params), mode)
    acts[INPUT] = x
    remaining = {}
    if keep == "output":
        for n in spec.nodes:
            for src in n.inputs:
                remaining[src] = remaining.get(src, 0) + 1
    for nid in spec.order:
        node = spec.by_id[nid]
        ins = [acts[s] for s in node.inputs]
        k = node.kind
        if k == "conv":
            y = L.conv2d_forward(ins[0], _conv_params(node, params))
        elif k == "transposed_conv":
            y = L.transposed_conv2d_forward(ins[0], _conv_params(node, params))
        elif k == "batchnorm":
            bp = _bn_params(node, params)
            y = L.batchnorm_forward(ins[0], bp, mode)
            if mode == "train":
                m, v = L.updated_running_stats(bp, ins[0])
                acts.running_updates[f"{nid}.running_mean"] = m
                acts.running_updates[f"{nid}.running_var"] = v
        elif k == "relu":
            y = L.relu(ins[0])
        elif k == "maxpool":
            y, idx = L.maxpool2d(ins[0], node.params.get("window", 2), node.params.get("stride", 2))
            if keep == "all":
                acts.pool_maps[nid] = idx
        elif k == "upsample":
            y = L.upsample(ins[0], node.params.get("factor", 2), node.params.get("algo", "nearest"))
        elif k == "concat":
            y = L.concat_channels(*_merge_inputs(*ins))
        elif k == "add":
            a, b = _merge_inputs(*ins)
            if a.shape != b.shape:
                raise ShapeError(f"node {nid!r}: cannot add {a.shape} and {b.shape}")
            y = a + b
        elif k == "dropout":
            if mode == "train" and node.params.get("rate", 0) > 0 and rng is None:
                raise InvalidArgumentError(f"node {nid!r}: train-mode dropout needs an rng")
            y, mask = L.dropout(ins[0], node.params.get("rate", 0.0), rng, mode)
            acts.dropout_masks[nid] = mask
        elif k == "softmax_loss":
            y = L.softmax_channels(ins[0])
        acts[nid] = y
        if keep == "output":
            for s in node.inputs:
                remaining[s] -= 1
                if remaining[s] == 0 and s != spec.logits_id:
                    acts.pop(s, None)
    return acts


def logits(spec, params, x):
    """Inference-mode logits, freeing intermediates along the way."""
    return forward(spec, params, x, "infer", keep="output")[spec.logits_id]


def predict_labels(spec, params, x):
    """Argmax label map with values 1 (Skin) and 2 (Lesion)."""
    return (logits(spec, params, x).argmax(axis=0) + 1).astype(np.uint8)


def apply_running_stats(params, acts):
    for name, value in acts.running_updates.items():
        params[name][...] = value


class BackwardResult(NamedTuple):
    loss: float
    grads: Checkpoint
    empty: bool


def backward(spec, params, acts, labels, class_weights):
    """Gradients of the weighted pixel cross-entropy w.r.t. trainable parameters."""
    if not isinstance(acts, Activations) or acts.token != _token(spec, params):
        raise ContractError("activations are stale: they do not come from forward() on these parameters")
    if acts.mode != "train":
        raise ContractError("backward needs activations from a train-mode forward pass")
    loss = L.weighted_pixel_cross_entropy(acts[spec.logits_id], labels, class_weights)
    grads = Checkpoint({n: np.zeros(s, dtype=params[n].dtype)
                        for n, s in spec.param_shapes().items()
                        if n.rsplit(".", 1)[1] in TRAINABLE_SLOTS})
    if loss.empty:
        return BackwardResult(loss.loss, grads, True)

    pending = {spec.logits_id: loss.grad}

    def send(src, g):
        if src == INPUT:
            return
        if src in pending:
            pending[src] = pending[src] + g
        else:
            pending[src] = g

    for nid in reversed(spec.order):
        node = spec.by_id[nid]
        g = pending.pop(nid, None)
        if g is None or node.kind == "softmax_loss":
            continue
        ins = node.inputs
        x = acts[ins[0]]
        k = node.kind
        if k in ("conv", "transposed_conv"):
            p = _conv_params(node, params)
            fn = L.conv2d_backward if k == "conv" else L.transposed_conv2d_backward
            gx, gk, gb = fn(x, p, g)
            grads[f"{nid}.weight"] += gk
            grads[f"{nid}.bias"] += gb
            send(ins[0], gx)
        elif k == "batchnorm":
            gx, gg, gb = L.batchnorm_backward(x, _bn_params(node, params), g)
            grads[f"{nid}.gamma"] += gg
            grads[f"{nid}.beta"] += gb
            send(ins[0], gx)
        elif k == "relu":
            send(ins[0], L.relu_backward(x, g))
        elif k == "maxpool":
            send(ins[0], L.maxpool2d_backward(x.shape, acts.pool_maps[nid], g))
        elif k == "upsample":
            send(ins[0], L.upsample_backward(x.shape, g, node.params.get("factor", 2),
                                             node.params.get("algo", "nearest")))
        elif k == "concat":
            b = acts[ins[1]]
            ga, gb = L.split_channels(g, g.shape[0] - b.shape[0])
            send(ins[0], L.crop_backward(x.shape, ga))
            send(ins[1], gb)
        elif k == "add":
            send(ins[0], L.crop_backward(x.shape, g))
            send(ins[1], g)
        elif k == "dropout":
            send(ins[0], L.dropout_backward(acts.dropout_masks.get(nid), g))
    return BackwardResult(loss.loss, grads, False)
