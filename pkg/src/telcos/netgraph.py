"""The TeLCoS network: ShuffleNet-style backbone feeding two U-Net branches.

The network is stored as an ordered DAG of primitive nodes (convolutions,
depthwise convolutions, channel slices, concatenations, permutations,
upsampling).  Keeping the primitives explicit, including slice bounds and the
shuffle permutation, lets channel pruning edit any layer exactly.

Resolution plan for an h x w input::

    conv1 (5x5, s2)        h/2
    shuffle1 (s1)          h/2
    shuffle2 (s2)          h/4    -> skip into upconv3
    shuffle3 (s2)          h/8    -> skip into upconv2
    shuffle4 (s2)          h/16   -> skip into upconv1
    conv2 (3x3)            h/16
    upconv1..3 + upsample  h/8, h/4, h/2
    conv3..conv6 heads     h/2
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nx
from .numerics import Tensor

__all__ = [
    "Widths",
    "WIDTH_TABLE",
    "Node",
    "LayerSpec",
    "NetworkSpec",
    "ScoreMaps",
    "CheckpointError",
    "build_network",
    "forward",
    "param_count",
    "preprocess",
    "save_checkpoint",
    "load_checkpoint",
    "write_container",
    "read_container",
    "PRUNABLE_TAPS",
    "BRANCHES",
    "INPUT_MULTIPLE",
]

BRANCHES = ("loc", "script")
INPUT_MULTIPLE = 32
SCRIPT_PRIOR = (0.1 / 3, 0.1 / 3, 0.1 / 3, 0.9)  # latin, cjk, other, none
CHECKPOINT_VERSION = 1
_MAGIC = b"TLCS"


@dataclass(frozen=True)
class Widths:
    """Channel widths, one field per width-table row."""

    conv1: int
    stages: tuple[tuple[int, int], ...]
    conv2: int
    upconv: tuple[tuple[int, int], ...]
    head: tuple[int, int, int]
    loc_out: int = 2
    script_out: int = 4

    @classmethod
    def uniform(cls, w: int) -> "Widths":
        return cls(w, ((w, w),) * 4, w, ((w, w),) * 3, (w, w, w))

    def validate(self) -> None:
        vals = [self.conv1, self.conv2, *self.head]
        vals += [v for pair in self.stages + self.upconv for v in pair]
        if any(int(v) <= 0 for v in vals):
            raise ValueError(f"widths must be positive: {self}")
        if len(self.stages) != 4 or len(self.upconv) != 3:
            raise ValueError("need exactly 4 shuffle stages and 3 upconv blocks")
        prev = self.conv1
        for k, (cin, cout) in enumerate(self.stages, 1):
            if cin != prev:
                raise ValueError(f"shuffle{k} input {cin} does not match previous output {prev}")
            if cout % 2:
                raise ValueError(f"shuffle{k} output width {cout} is odd; a channel split occurs there")
            prev = cout
        prev = self.conv2
        for k, (cin, cout) in enumerate(self.upconv, 1):
            if cin != prev:
                raise ValueError(f"upconv{k} input {cin} does not match previous output {prev}")
            prev = cout


WIDTH_TABLE: dict[str, Widths] = {
    "telcos_plus": Widths(
        64, ((64, 128), (128, 224), (224, 384), (384, 512)), 512,
        ((512, 256), (256, 128), (128, 64)), (48, 32, 16),
    ),
    "telcos_stud": Widths(
        48, ((48, 96), (96, 172), (172, 264), (264, 344)), 344,
        ((344, 172), (172, 96), (96, 48)), (40, 32, 16),
    ),
    "telcos": Widths(
        40, ((40, 80), (80, 144), (144, 224), (224, 320)), 320,
        ((320, 160), (160, 80), (80, 40)), (32, 32, 16),
    ),
}

PRUNABLE_TAPS = (
    "conv1", "shuffle1", "shuffle2", "shuffle3", "shuffle4", "conv2",
    *(f"{b}.upconv{k}" for b in BRANCHES for k in (1, 2, 3)),
)

_STAGE_STRIDES = (1, 2, 2, 2)
_SKIPS = ("shuffle4", "shuffle3", "shuffle2")


@dataclass
class Node:
    name: str
    op: str  # input | conv | dwconv | slice | concat | permute | upsample
    inputs: tuple[str, ...] = ()
    kernel: int = 1
    stride: int = 1
    relu: bool = False
    start: int = 0
    stop: int = 0
    perm: np.ndarray | None = None

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    taps: str | None = None


@dataclass
class ScoreMaps:
    """Raw network outputs in NCHW layout at half input resolution."""

    script: Tensor
    loc: Tensor | None = None
    taps: dict[str, np.ndarray] = field(default_factory=dict)

    def script_probs(self) -> np.ndarray:
        return nx._softmax(self.script.data)


class NetworkSpec:
    """Topology + parameters.  Treat as immutable while forward passes run."""

    def __init__(self, config: str, nodes: list[Node]):
        self.config = config
        self.nodes: dict[str, Node] = {n.name: n for n in nodes}
        self.params: dict[str, dict[str, Tensor]] = {}
        self.outputs = {"loc": "loc.conv6", "script": "script.conv6"}

    def copy(self) -> "NetworkSpec":
        other = NetworkSpec(self.config, [copy.deepcopy(n) for n in self.nodes.values()])
        for name, p in self.params.items():
            other.params[name] = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name) for k, t in p.items()}
        return other

    def parameters(self) -> list[Tensor]:
        return [t for p in self.params.values() for t in p.values()]

    @property
    def dtype(self):
        return next(iter(self.params.values()))["weight"].dtype

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for node in self.nodes.values():
            for i in node.inputs:
                out[i].append(node.name)
        return out

    def channels(self) -> dict[str, int]:
        ch: dict[str, int] = {}
        for node in self.nodes.values():
            if node.op == "input":
                ch[node.name] = 3
            elif node.op == "conv":
                ch[node.name] = self.params[node.name]["weight"].shape[0]
            elif node.op == "slice":
                ch[node.name] = node.stop - node.start
            elif node.op == "concat":
                ch[node.name] = sum(ch[i] for i in node.inputs)
            elif node.op == "permute":
                ch[node.name] = len(node.perm)
            else:
                ch[node.name] = ch[node.inputs[0]]
        return ch

    def ancestors(self, names: Iterable[str]) -> set[str]:
        seen: set[str] = set()
        stack = list(names)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.nodes[n].inputs)
        return seen

    def widths(self, branch: str = "script") -> dict[str, object]:
        """Width table read off the current weights."""
        ch = self.channels()
        table: dict[str, object] = {"conv1": ch["conv1"]}
        prev = "conv1"
        for k in range(1, 5):
            table[f"shuffle{k}"] = (ch[prev], ch[f"shuffle{k}"])
            prev = f"shuffle{k}"
        table["conv2"] = ch["conv2"]
        main = "conv2"
        for k in (1, 2, 3):
            table[f"upconv{k}"] = (ch[main], ch[f"{branch}.upconv{k}"])
            main = f"{branch}.up{k}"
        for k in (3, 4, 5, 6):
            table[f"conv{k}"] = ch[f"{branch}.conv{k}"]
        return table

    def layer_specs(self) -> list[LayerSpec]:
        ch = self.channels()
        specs = [LayerSpec("conv1", "conv", 3, ch["conv1"], 5, 2, "conv1")]
        prev = "conv1"
        for k in range(1, 5):
            stride = _STAGE_STRIDES[k - 1]
            specs.append(LayerSpec(f"s{k}.0", "shuffle_block_down", ch[prev], ch[f"s{k}.0"], 3, stride))
            specs.append(LayerSpec(f"shuffle{k}", "shuffle_block", ch[f"s{k}.0"], ch[f"shuffle{k}"], 3, 1, f"shuffle{k}"))
            prev = f"shuffle{k}"
        specs.append(LayerSpec("conv2", "conv", ch[prev], ch["conv2"], 3, 1, "conv2"))
        for b in BRANCHES:
            for k in (1, 2, 3):
                cat = f"{b}.upconv{k}.cat"
                specs.append(LayerSpec(f"{b}.upconv{k}", "upconv", ch[cat], ch[f"{b}.upconv{k}"], 3, 1, f"{b}.upconv{k}"))
                specs.append(LayerSpec(f"{b}.up{k}", "upsample", ch[f"{b}.up{k}"], ch[f"{b}.up{k}"], 0, 1))
            prev = f"{b}.up3"
            for k in (3, 4, 5, 6):
                node = self.nodes[f"{b}.conv{k}"]
                specs.append(LayerSpec(node.name, "head" if k == 6 else "conv", ch[prev], ch[node.name], node.kernel, 1))
                prev = node.name
        return specs


# ---------------------------------------------------------------------------
# topology


def _topology() -> list[Node]:
    nodes = [Node("image", "input"), Node("conv1", "conv", ("image",), kernel=5, stride=2, relu=True)]
    prev = "conv1"
    for k in range(1, 5):
        s = _STAGE_STRIDES[k - 1]
        d = f"s{k}.0"
        nodes += [
            Node(f"{d}.a_dw", "dwconv", (prev,), kernel=3, stride=s),
            Node(f"{d}.a_pw", "conv", (f"{d}.a_dw",), relu=True),
            Node(f"{d}.b_pw1", "conv", (prev,), relu=True),
            Node(f"{d}.b_dw", "dwconv", (f"{d}.b_pw1",), kernel=3, stride=s),
            Node(f"{d}.b_pw2", "conv", (f"{d}.b_dw",), relu=True),
            Node(f"{d}.cat", "concat", (f"{d}.a_pw", f"{d}.b_pw2")),
            Node(d, "permute", (f"{d}.cat",)),
        ]
        r = f"s{k}.1"
        nodes += [
            Node(f"{r}.x1", "slice", (d,)),
            Node(f"{r}.x2", "slice", (d,)),
            Node(f"{r}.pw1", "conv", (f"{r}.x2",), relu=True),
            Node(f"{r}.dw", "dwconv", (f"{r}.pw1",), kernel=3),
            Node(f"{r}.pw2", "conv", (f"{r}.dw",), relu=True),
            Node(f"{r}.cat", "concat", (f"{r}.x1", f"{r}.pw2")),
            Node(f"shuffle{k}", "permute", (f"{r}.cat",)),
        ]
        prev = f"shuffle{k}"
    nodes.append(Node("conv2", "conv", (prev,), kernel=3, relu=True))
    for b in BRANCHES:
        main = "conv2"
        for k, skip in zip((1, 2, 3), _SKIPS):
            u = f"{b}.upconv{k}"
            nodes += [
                Node(f"{u}.cat", "concat", (main, skip)),
                Node(f"{u}.pw", "conv", (f"{u}.cat",), relu=True),
                Node(u, "conv", (f"{u}.pw",), kernel=3, relu=True),
                Node(f"{b}.up{k}", "upsample", (u,)),
            ]
            main = f"{b}.up{k}"
        nodes += [
            Node(f"{b}.conv3", "conv", (main,), kernel=3, relu=True),
            Node(f"{b}.conv4", "conv", (f"{b}.conv3",), kernel=3, relu=True),
            Node(f"{b}.conv5", "conv", (f"{b}.conv4",), relu=True),
            Node(f"{b}.conv6", "conv", (f"{b}.conv5",)),
        ]
    return nodes


def _conv_widths(widths: Widths) -> dict[str, tuple[int, int]]:
    """(in, out) channels for every conv node, and C for every dwconv node."""
    w: dict[str, tuple[int, int]] = {"conv1": (3, widths.conv1)}
    for k, (cin, cout) in enumerate(widths.stages, 1):
        h = cout // 2
        d, r = f"s{k}.0", f"s{k}.1"
        w[f"{d}.a_dw"] = (cin, cin)
        w[f"{d}.a_pw"] = (cin, h)
        w[f"{d}.b_pw1"] = (cin, h)
        w[f"{d}.b_dw"] = (h, h)
        w[f"{d}.b_pw2"] = (h, h)
        w[f"{r}.pw1"] = (h, h)
        w[f"{r}.dw"] = (h, h)
        w[f"{r}.pw2"] = (h, h)
    w["conv2"] = (widths.stages[-1][1], widths.conv2)
    skips = [widths.stages[3][1], widths.stages[2][1], widths.stages[1][1]]
    for b in BRANCHES:
        for k, ((cin, cout), s) in enumerate(zip(widths.upconv, skips), 1):
            w[f"{b}.upconv{k}.pw"] = (cin + s, cout)
            w[f"{b}.upconv{k}"] = (cout, cout)
        c3, c4, c5 = widths.head
        w[f"{b}.conv3"] = (widths.upconv[-1][1], c3)
        w[f"{b}.conv4"] = (c3, c4)
        w[f"{b}.conv5"] = (c4, c5)
        w[f"{b}.conv6"] = (c5, widths.loc_out if b == "loc" else widths.script_out)
    return w


def build_network(config: str | Widths = "telcos", seed: int = 0, dtype=np.float32) -> NetworkSpec:
    """Instantiate a named width-table configuration or custom :class:`Widths`."""
    if isinstance(config, Widths):
        widths, name = config, "custom"
    elif config in WIDTH_TABLE:
        widths, name = WIDTH_TABLE[config], config
    else:
        raise ValueError(f"unknown configuration {config!r}; expected one of {sorted(WIDTH_TABLE)} or Widths")
    widths.validate()
    net = NetworkSpec(name, _topology())
    cw = _conv_widths(widths)
    rng = np.random.default_rng(seed)
    for node in net.nodes.values():
        if node.op == "conv":
            cin, cout = cw[node.name]
            fan_in = cin * node.kernel**2
            gain = 2.0 if node.relu else 1.0
            wgt = rng.normal(0.0, np.sqrt(gain / fan_in), (cout, cin, node.kernel, node.kernel))
            net.params[node.name] = {
                "weight": Tensor(wgt.astype(dtype), requires_grad=True, name=f"{node.name}.weight"),
                "bias": Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{node.name}.bias"),
            }
        elif node.op == "dwconv":
            c = cw[node.name][0]
            wgt = rng.normal(0.0, np.sqrt(1.0 / node.kernel**2), (c, 1, node.kernel, node.kernel))
            net.params[node.name] = {"weight": Tensor(wgt.astype(dtype), requires_grad=True, name=f"{node.name}.weight")}
    # start the class head at a background-heavy prior instead of uniform
    net.params["script.conv6"]["bias"].data[...] = np.log(SCRIPT_PRIOR).astype(dtype)
    _fill_structure(net)
    return net


def _fill_structure(net: NetworkSpec, perms: dict[str, np.ndarray] | None = None) -> None:
    """Derive slice bounds and default shuffle permutations from the weights."""
    perms = perms or {}
    ch: dict[str, int] = {}
    for node in net.nodes.values():
        if node.op == "input":
            ch[node.name] = 3
        elif node.op == "conv":
            ch[node.name] = net.params[node.name]["weight"].shape[0]
        elif node.op == "concat":
            ch[node.name] = sum(ch[i] for i in node.inputs)
        elif node.op == "permute":
            if node.name in perms:
                node.perm = np.asarray(perms[node.name], dtype=np.int64)
            elif node.perm is None:
                node.perm = nx.shuffle_permutation(ch[node.inputs[0]], 2)
            ch[node.name] = len(node.perm)
        elif node.op == "slice":
            src = node.inputs[0]
            block = node.name.rsplit(".", 1)[0]
            x2_width = net.params[f"{block}.pw1"]["weight"].shape[1]
            split = ch[src] - x2_width
            if node.name.endswith(".x1"):
                node.start, node.stop = 0, split
            else:
                node.start, node.stop = split, ch[src]
            ch[node.name] = node.stop - node.start
        else:
            ch[node.name] = ch[node.inputs[0]]


# ---------------------------------------------------------------------------
# forward


def preprocess(images) -> Tensor:
    """uint8 HxWx3 image (or list of them) -> normalized float NCHW tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    arr = (arr / 255.0 - 0.5) / 0.25
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _eval_node(net: NetworkSpec, node: Node, vals: dict[str, Tensor]) -> Tensor:
    xs = [vals[i] for i in node.inputs]
    if node.op == "conv":
        p = net.params[node.name]
        y = nx.add_bias(nx.conv2d(xs[0], p["weight"], node.stride, node.padding), p["bias"])
        return nx.relu(y) if node.relu else y
    if node.op == "dwconv":
        return nx.depthwise_conv2d(xs[0], net.params[node.name]["weight"], node.stride, node.padding)
    if node.op == "slice":
        return nx.channel_slice(xs[0], node.start, node.stop)
    if node.op == "concat":
        return nx.channel_concat(*xs)
    if node.op == "permute":
        return nx.channel_permute(xs[0], node.perm)
    if node.op == "upsample":
        return nx.bilinear_upsample2(xs[0])
    raise ValueError(f"unknown op {node.op!r} at {node.name}")


def forward(net: NetworkSpec, image: Tensor, mode: str = "train", capture: Iterable[str] = ()) -> ScoreMaps:
    """Run the network on an (N, 3, h, w) tensor.

    ``mode="infer"`` evaluates only the script branch; the localization
    branch is an auxiliary training head.  Node names in ``capture`` are
    returned as numpy arrays in ``ScoreMaps.taps``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected an (N, 3, h, w) image tensor, got {image.shape}")
    h, w = image.shape[2:]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ValueError(
            f"input {h}x{w} must be resized: both extents need to be multiples of {INPUT_MULTIPLE}"
        )
    capture = set(capture)
    unknown = capture - set(net.nodes)
    if unknown:
        raise KeyError(f"unknown tap(s): {sorted(unknown)}")
    wanted = [net.outputs["script"]] + ([net.outputs["loc"]] if mode == "train" else [])
    needed = net.ancestors(wanted + sorted(capture))
    if image.dtype != net.dtype:
        image = Tensor(image.data.astype(net.dtype))
    vals: dict[str, Tensor] = {"image": image}
    for node in net.nodes.values():
        if node.op == "input" or node.name not in needed:
            continue
        vals[node.name] = _eval_node(net, node, vals)
    return ScoreMaps(
        script=vals[net.outputs["script"]],
        loc=vals[net.outputs["loc"]] if mode == "train" else None,
        taps={name: vals[name].data for name in capture},
    )


# ---------------------------------------------------------------------------
# size


def param_count(net: NetworkSpec, scope: str = "all") -> int:
    """Number of stored weights including biases.

    ``scope`` is ``"all"`` (every stored weight), ``"backbone"`` (conv1
    through conv2) or ``"infer"`` (backbone plus the script branch).
    """
    if scope == "all":
        keep = set(net.params)
    elif scope == "backbone":
        keep = {n for n in net.params if not n.startswith(BRANCHES)}
    elif scope == "infer":
        keep = {n for n in net.params if not n.startswith("loc.")}
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return int(sum(t.data.size for n in keep for t in net.params[n].values()))


# ---------------------------------------------------------------------------
# checkpoint container:
#   b"TLCS" | u16 version | u16 len + utf-8 config | u32 n_records |
#   records: u16 len + utf-8 name | u8 rank | u32 extents | float32 LE data


class CheckpointError(ValueError):
    pass


def write_container(path, config: str, records: list[tuple[str, np.ndarray]]) -> None:
    name = config.encode("utf-8")
    parts = [_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(name)), name, struct.pack("<I", len(records))]
    for rname, arr in records:
        a = np.ascontiguousarray(arr, dtype="<f4")
        b = rname.encode("utf-8")
        parts += [struct.pack("<H", len(b)), b, struct.pack("<B", a.ndim), struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> tuple[str, list[tuple[str, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, not a checkpoint")
    try:
        version, nlen = struct.unpack_from("<HH", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
        off = 8
        config = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        records = []
        for _ in range(count):
            (rlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            rname = raw[off : off + rlen].decode("utf-8")
            off += rlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated blob in record {rname!r}")
            records.append((rname, np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()))
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after the last record")
    return config, records


def save_checkpoint(net: NetworkSpec, path) -> None:
    records: list[tuple[str, np.ndarray]] = []
    for node in net.nodes.values():
        if node.name in net.params:
            for key, t in net.params[node.name].items():
                records.append((f"{node.name}.{key}", t.data))
        if node.op == "permute":
            records.append((f"{node.name}.perm", node.perm.astype(np.float32)))
    write_container(path, net.config, records)


def load_checkpoint(path, dtype=np.float32) -> NetworkSpec:
    config, records = read_container(path)
    net = NetworkSpec(config, _topology())
    perms: dict[str, np.ndarray] = {}
    for rname, arr in records:
        node_name, _, key = rname.rpartition(".")
        node = net.nodes.get(node_name)
        if node is None or (key == "perm") != (node.op == "permute"):
            raise CheckpointError(f"{path}: unknown layer record {rname!r}")
        if key == "perm":
            perms[node_name] = arr.astype(np.int64)
        elif key in ("weight", "bias") and node.op in ("conv", "dwconv"):
            net.params.setdefault(node_name, {})[key] = Tensor(arr.astype(dtype), requires_grad=True, name=rname)
        else:
            raise CheckpointError(f"{path}: unknown layer record {rname!r}")
    missing = [n.name for n in net.nodes.values() if n.op in ("conv", "dwconv") and n.name not in net.params]
    if missing:
        raise CheckpointError(f"{path}: missing weights for {missing[:3]}")
    _fill_structure(net, perms)
    return net
