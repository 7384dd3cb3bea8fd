"""Multi-exit networks with nested parameter sharing.

An :class:`ArchSpec` is a backbone (list of :class:`Layer`) plus side branches
attached after chosen backbone layers. :func:`build_network` turns it into a
single :class:`~rdinet.tensor.Graph` whose exits ``exit1 .. exit{K+1}`` are
ordered shallowest to deepest; the final backbone layer is the main exit.

Exit ``k`` is reached by computing the backbone prefix up to its attach point
plus the heads of exits ``1..k`` (earlier heads are evaluated on the way, since
routing has to look at them). Both the per-exit parameter sets and the FLOPs
model follow that cumulative convention, which makes them nested/monotone.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
import numpy as np

from . import tensor as T
from .container import (
    CorruptFileError,
    canonical_json,
    read_container,
    sha256_hex,
    write_container,
)

CHECKPOINT_MAGIC = b"RDINET1"
LAYER_KINDS = ("conv", "dense", "max_pool", "flatten", "gap", "resblock")


class ArchError(ValueError):
    pass


class FingerprintMismatchError(Exception):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    size: int = 2
    relu: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense", "resblock") and self.out <= 0:
            raise ArchError(f"{self.kind} layer needs a positive width")


def conv(out, kernel=3, stride=1, pad=0, relu=True) -> Layer:
    return Layer("conv", out=out, kernel=kernel, stride=stride, pad=pad, relu=relu)


def dense(out, relu=True) -> Layer:
    return Layer("dense", out=out, relu=relu)


def max_pool(size) -> Layer:
    return Layer("max_pool", size=size)


def flatten() -> Layer:
    return Layer("flatten")


def gap() -> Layer:
    return Layer("gap")


def resblock(out, stride=1) -> Layer:
    return Layer("resblock", out=out, stride=stride)


@dataclass(frozen=True)
class Branch:
    attach: int
    layers: tuple[Layer, ...]


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, ...]
    backbone: tuple[Layer, ...]
    branches: tuple[Branch, ...] = ()
    num_classes: int = 10

    def __post_init__(self):
        if self.num_classes <= 0:
            raise ArchError("num_classes must be positive")
        if not self.backbone:
            raise ArchError("empty backbone")
        attach = [b.attach for b in self.branches]
        if any(a < 0 or a >= len(self.backbone) for a in attach):
            raise ArchError(f"attach points {attach} out of range for {len(self.backbone)} layers")
        if any(b <= a for a, b in zip(attach, attach[1:])):
            raise ArchError(f"attach points {attach} must be strictly increasing")

    @property
    def num_exits(self) -> int:
        return len(self.branches) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            backbone=tuple(Layer(**l) for l in d["backbone"]),
            branches=tuple(
                Branch(b["attach"], tuple(Layer(**l) for l in b["layers"])) for b in d.get("branches", ())
            ),
            num_classes=d.get("num_classes", 10),
        )

    def fingerprint(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()))


# ---------------------------------------------------------------------------
# reference specs

SMALLCNN = ArchSpec(
    name="smallcnn",
    input_shape=(28, 28, 1),
    backbone=(
        conv(32),  # 0 -> 26x26x32, branch 1 attaches here
        conv(32),  # 1 -> 24x24x32
        max_pool(2),  # 2 -> 12x12x32
        conv(64),  # 3 -> 10x10x64, branch 2 attaches here
        conv(64),  # 4 -> 8x8x64
        max_pool(2),  # 5 -> 4x4x64
        flatten(),
        dense(200),
        dense(200),
        dense(10, relu=False),
    ),
    branches=(
        Branch(0, (max_pool(4), conv(16), flatten(), dense(10, relu=False))),
        Branch(3, (max_pool(2), conv(16), flatten(), dense(10, relu=False))),
    ),
)


def _res_head(pool, width=16):
    return (max_pool(pool), conv(width), flatten(), dense(10, relu=False))


MINI_RESNET = ArchSpec(
    name="mini_resnet",
    input_shape=(32, 32, 3),
    backbone=(
        conv(16, pad=1),
        resblock(16),
        resblock(16),  # 2: branch 1
        resblock(32, stride=2),
        resblock(32),  # 4: branch 2
        resblock(64, stride=2),
        resblock(64),
        gap(),
        dense(10, relu=False),
    ),
    branches=(Branch(2, _res_head(4)), Branch(4, _res_head(2))),
)


def _resnet38() -> ArchSpec:
    layers = [conv(16, pad=1)]
    branches = []
    for stage, (width, pool) in enumerate(((16, 4), (32, 2), (64, 1))):
        for blk in range(6):
            layers.append(resblock(width, stride=2 if stage > 0 and blk == 0 else 1))
            if blk in (0, 3):
                branches.append(Branch(len(layers) - 1, _res_head(pool) if pool > 1 else (conv(16), flatten(), dense(10, relu=False))))
    layers += [gap(), dense(10, relu=False)]
    return ArchSpec("resnet38", (32, 32, 3), tuple(layers), tuple(branches))


RESNET38 = _resnet38()

PRESETS = {s.name: s for s in (SMALLCNN, MINI_RESNET, RESNET38)}
PRESET_VERSIONS = {"smallcnn": 1, "mini_resnet": 1, "resnet38": 1}


def plain_backbone(spec: ArchSpec) -> ArchSpec:
    """The same spec with every side branch removed."""
    return ArchSpec(spec.name + "_plain", spec.input_shape, spec.backbone, (), spec.num_classes)


# ---------------------------------------------------------------------------
# construction


class _Builder:
    def __init__(self, seed: int):
        self.gb = T.GraphBuilder()
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.flops: dict[str, int] = {}

    def _param(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = self.rng.uniform(-bound, bound, size=shape)
        return self.gb.parameter(name)

    def conv(self, prefix, h, shape, out, kernel, stride, pad, relu, out_name=None):
        hh, ww, c = shape
        fan_in = kernel * kernel * c
        w = self._param(prefix + ".w", (kernel, kernel, c, out), fan_in)
        b = self._param(prefix + ".b", (out,), fan_in)
        ho = (hh + 2 * pad - kernel) // stride + 1
        wo = (ww + 2 * pad - kernel) // stride + 1
        if ho <= 0 or wo <= 0:
            raise ArchError(f"{prefix}: kernel {kernel} does not fit input {shape}")
        name = prefix if not relu else prefix + ".pre"
        z = self.gb.op(out_name if (out_name and not relu) else name, "conv2d", h, w, b, stride=stride, pad=pad)
        self.flops[prefix] = ho * wo * out * c * kernel * kernel
        if relu:
            z = self.gb.op(out_name or prefix, "relu", z)
        return z, (ho, wo, out)

    def dense(self, prefix, h, shape, out, relu, out_name=None):
        if len(shape) != 1:
            raise ArchError(f"{prefix}: dense layer needs a flat input, got {shape}")
        w = self._param(prefix + ".w", (shape[0], out), shape[0])
        b = self._param(prefix + ".b", (out,), shape[0])
        self.flops[prefix] = shape[0] * out
        if relu:
            z = self.gb.op(prefix + ".pre", "dense", h, w, b)
            return self.gb.op(out_name or prefix, "relu", z), (out,)
        return self.gb.op(out_name or prefix, "dense", h, w, b), (out,)

    def layer(self, prefix, layer: Layer, h, shape, out_name=None):
        k = layer.kind
        if k in ("conv", "max_pool", "gap", "resblock") and len(shape) != 3:
            raise ArchError(f"{prefix}: {k} needs an image input, got {shape}")
        if k == "conv":
            return self.conv(prefix, h, shape, layer.out, layer.kernel, layer.stride, layer.pad, layer.relu, out_name)
        if k == "dense":
            return self.dense(prefix, h, shape, layer.out, layer.relu, out_name)
        if k == "max_pool":
            s = layer.size
            if shape[0] < s or shape[1] < s:
                raise ArchError(f"{prefix}: pool {s} larger than {shape}")
            return self.gb.op(out_name or prefix, "max_pool", h, size=s), (shape[0] // s, shape[1] // s, shape[2])
        if k == "flatten":
            return self.gb.op(out_name or prefix, "flatten", h), (int(np.prod(shape)),)
        if k == "gap":
            return self.gb.op(out_name or prefix, "global_avg_pool", h), (shape[2],)
        # basic residual block: relu(conv(relu(conv(x))) + shortcut(x))
        a, s1 = self.conv(prefix + ".c1", h, shape, layer.out, 3, layer.stride, 1, True)
        z, s2 = self.conv(prefix + ".c2", a, s1, layer.out, 3, 1, 1, False)
        if layer.stride != 1 or shape[2] != layer.out:
            sc, _ = self.conv(prefix + ".sc", h, shape, layer.out, 1, layer.stride, 0, False)
        else:
            sc = h
        s = self.gb.op(prefix + ".sum", "add", z, sc)
        return self.gb.op(out_name or prefix, "relu", s), s2


@dataclass
class MultiExitNet:
    spec: ArchSpec
    graph: T.Graph
    exits: tuple[str, ...]
    params: dict[str, np.ndarray]
    params_per_exit: tuple[frozenset, ...]
    exit_dependencies: tuple[frozenset, ...]
    flops_per_exit: tuple[int, ...]
    layer_flops: dict[str, int]
    metadata: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_exits(self) -> int:
        return len(self.exits)

    @property
    def input_name(self) -> str:
        return "x"

    def bindings(self, x: np.ndarray, **extra) -> dict:
        return {**self.params, "x": x, **extra}

    def copy(self) -> "MultiExitNet":
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.metadata = dict(self.metadata)
        other._cache = self._cache  # graphs are immutable and safe to share
        return other

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != len(self.spec.input_shape) + 1 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise T.ShapeError("x", f"expected [batch, {', '.join(map(str, self.spec.input_shape))}], got {list(x.shape)}")


def build_network(spec: ArchSpec, init_seed: int = 0) -> MultiExitNet:
    """Build the graph and draw fan-in uniform initial weights from ``init_seed``."""
    b = _Builder(init_seed)
    h = b.gb.input("x")
    shape = tuple(spec.input_shape)
    K = len(spec.branches)
    attach = {br.attach: i for i, br in enumerate(spec.branches)}
    backbone_out: list[tuple[str, tuple]] = []
    n = len(spec.backbone)
    for i, layer in enumerate(spec.backbone):
        h, shape = b.layer(f"bb{i}", layer, h, shape, out_name=f"exit{K + 1}" if i == n - 1 else None)
        backbone_out.append((h, shape))
        if i in attach:
            k = attach[i]
            bh, bshape = h, shape
            br = spec.branches[k]
            if not br.layers:
                raise ArchError(f"branch {k + 1} has no layers")
            for j, bl in enumerate(br.layers):
                last = j == len(br.layers) - 1
                bh, bshape = b.layer(f"br{k + 1}.{j}", bl, bh, bshape, out_name=f"exit{k + 1}" if last else None)
            if bshape != (spec.num_classes,):
                raise ArchError(f"branch {k + 1} outputs {bshape}, expected ({spec.num_classes},)")
    if shape != (spec.num_classes,):
        raise ArchError(f"backbone outputs {shape}, expected ({spec.num_classes},)")
    graph = b.gb.build()
    exits = tuple(f"exit{k}" for k in range(1, K + 2))
    pset = set(graph.parameters)
    deps = tuple(frozenset(graph.ancestors([e]) & pset) for e in exits)
    cumulative = []
    acc: frozenset = frozenset()
    for d in deps:
        acc = acc | d
        cumulative.append(acc)

    def cost(names):
        return sum(f for layer, f in b.flops.items() if any(p.startswith(layer + ".") for p in names))

    flops = tuple(cost(c) for c in cumulative)
    return MultiExitNet(
        spec=spec,
        graph=graph,
        exits=exits,
        params=b.params,
        params_per_exit=tuple(cumulative),
        exit_dependencies=deps,
        flops_per_exit=flops,
        layer_flops=dict(b.flops),
    )


def forward_all_exits(net: MultiExitNet, batch: np.ndarray) -> list[np.ndarray]:
    """Logits of every exit, shallowest first, from one shared forward pass."""
    batch = T.as_tensor(batch)
    net.check_input(batch)
    out = T.evaluate(net.graph, net.bindings(batch), list(net.exits))
    return [out[e] for e in net.exits]


def flops_to_exit(net: MultiExitNet, k: int) -> float:
    """Multiplications (in millions) per input needed to answer at exit ``k`` (1-based)."""
    if not 1 <= k <= net.num_exits:
        raise IndexError(f"exit {k} outside 1..{net.num_exits}")
    return net.flops_per_exit[k - 1] / 1e6


def branch_overhead(net: MultiExitNet) -> float:
    """Multiplications in branch heads as a fraction of the full-depth cost."""
    head = sum(f for name, f in net.layer_flops.items() if name.startswith("br"))
    return head / net.flops_per_exit[-1]


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(net: MultiExitNet, path, metadata: dict | None = None) -> None:
    meta = {**net.metadata, **(metadata or {})}
    header = {
        "format": 1,
        "arch": net.spec.to_dict(),
        "arch_fingerprint": net.spec.fingerprint(),
        "metadata": meta,
    }
    write_container(path, CHECKPOINT_MAGIC, header, {k: net.params[k] for k in net.graph.parameters})


def load_checkpoint(path, expected: ArchSpec | None = None) -> MultiExitNet:
    header, blobs = read_container(path, CHECKPOINT_MAGIC)
    try:
        spec = ArchSpec.from_dict(header["arch"])
        stored = header["arch_fingerprint"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: bad architecture record ({exc})") from None
    if spec.fingerprint() != stored:
        raise FingerprintMismatchError(f"{path}: stored fingerprint {stored[:12]} does not match its architecture")
    if expected is not None and expected.fingerprint() != stored:
        raise FingerprintMismatchError(
            f"{path}: checkpoint is for {spec.name} ({stored[:12]}), expected {expected.name} ({expected.fingerprint()[:12]})"
        )
    net = build_network(spec, 0)
    if set(blobs) != set(net.params):
        raise CorruptFileError(f"{path}: parameter names do not match the architecture")
    for k, v in blobs.items():
        if v.shape != net.params[k].shape:
            raise CorruptFileError(f"{path}: {k} has shape {list(v.shape)}, expected {list(net.params[k].shape)}")
        net.params[k] = v
    net.metadata = dict(header.get("metadata", {}))
    return net


def params_equal(a: MultiExitNet, b: MultiExitNet) -> bool:
    return a.params.keys() == b.params.keys() and all(
        np.array_equal(a.params[k], b.params[k]) for k in a.params
    )


def resolve_spec(arch: str | dict | ArchSpec) -> ArchSpec:
    if isinstance(arch, ArchSpec):
        return arch
    if isinstance(arch, str):
        if arch not in PRESETS:
            raise ArchError(f"unknown architecture preset {arch!r} (have {sorted(PRESETS)})")
        return PRESETS[arch]
    return ArchSpec.from_dict(arch)


def exit_label(k: int, num_exits: int) -> str:
    return "Main Branch" if k == num_exits else f"Branch{k}"

