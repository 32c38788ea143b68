"""Declarative RoR architecture specs and the block graph they compile to.

A graph is a topologically ordered list of coarse nodes: the stem, one
residual branch per block, the shortcuts (final level inside each block,
middle level around each block group, one root level around the whole
body), a junction per block that sums its incoming terms, and the head.
The numeric model in :mod:`rorkit.network` and the symbolic unroller below
both interpret this same node list.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

BLOCK_TYPES = ("basic", "bottleneck")
POLICIES = ("all-B", "A+B")
ORDERS = ("pre", "post")
WIDTH_FACTORS = (1, 2, 4)
LEVELS = (2, 3)
MIN_INPUT = 8  # three stride-2 group transitions

# named configurations: block type, per-group block counts, nominal depth
STANDARD_CONFIGS = {
    "basic-34": ("basic", (3, 4, 6, 3), 34),
    "basic-58": ("basic", (5, 6, 12, 5), 58),
    "basic-82": ("basic", (7, 8, 14, 7), 82),
    "bottleneck-50": ("bottleneck", (3, 4, 6, 3), 50),
    "bottleneck-101": ("bottleneck", (3, 4, 23, 3), 101),
}


class ArchSpecError(ValueError):
    """Invalid architecture description; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DepthMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ArchSpec:
    block_type: str = "basic"
    group_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    levels: int = 3
    width_factor: int = 4
    base_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    shortcut_policy: str = "A+B"
    activation_order: str = "pre"
    num_classes: int = 8
    input_shape: tuple[int, int, int] = (3, 32, 32)
    depth_label: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "group_blocks", tuple(int(v) for v in self.group_blocks))
        object.__setattr__(self, "base_widths", tuple(int(v) for v in self.base_widths))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def validate(self) -> "ArchSpec":
        if self.block_type not in BLOCK_TYPES:
            raise ArchSpecError("block_type", f"expected one of {BLOCK_TYPES}, got {self.block_type!r}")
        if len(self.group_blocks) != 4 or any(n < 1 for n in self.group_blocks):
            raise ArchSpecError("groups", f"need four positive block counts, got {self.group_blocks}")
        if self.levels not in LEVELS:
            raise ArchSpecError("m", f"unsupported level count {self.levels}; supported: {LEVELS}")
        if self.block_type == "bottleneck" and self.width_factor not in WIDTH_FACTORS:
            raise ArchSpecError("k", f"width factor must be one of {WIDTH_FACTORS}, got {self.width_factor}")
        if len(self.base_widths) != 4 or any(w < 1 for w in self.base_widths):
            raise ArchSpecError("widths", f"need four positive widths, got {self.base_widths}")
        if any(b < a for a, b in zip(self.base_widths, self.base_widths[1:])):
            raise ArchSpecError("widths", f"widths must be nondecreasing, got {self.base_widths}")
        if self.shortcut_policy not in POLICIES:
            raise ArchSpecError("policy", f"expected one of {POLICIES}, got {self.shortcut_policy!r}")
        if self.activation_order not in ORDERS:
            raise ArchSpecError("order", f"expected one of {ORDERS}, got {self.activation_order!r}")
        if self.num_classes < 1:
            raise ArchSpecError("classes", f"need at least one class, got {self.num_classes}")
        if len(self.input_shape) != 3 or self.input_shape[0] < 1:
            raise ArchSpecError("input", f"need channels,height,width, got {self.input_shape}")
        if min(self.input_shape[1:]) < MIN_INPUT:
            raise ArchSpecError(
                "input", f"spatial size {self.input_shape[1:]} too small for the three "
                f"stride-2 group transitions (need >= {MIN_INPUT})")
        return self

    @property
    def num_blocks(self) -> int:
        return sum(self.group_blocks)

    def group_out_width(self, g: int) -> int:
        if self.block_type == "bottleneck":
            return self.width_factor * self.base_widths[g]
        return self.base_widths[g]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def with_classes(self, n: int) -> "ArchSpec":
        return replace(self, num_classes=n)


def count_depth(spec: ArchSpec) -> int:
    """Weighted-layer count: convs inside blocks plus stem conv and head.

    Shortcut projections are not counted, so the shortcut policy never
    changes the result. If ``spec.depth_label`` disagrees with the computed
    count a :class:`DepthMismatchWarning` is issued; the computed value is
    returned either way.
    """
    per_block = 2 if spec.block_type == "basic" else 3
    depth = per_block * sum(spec.group_blocks) + 2
    if spec.depth_label is not None and spec.depth_label != depth:
        warnings.warn(
            f"spec labelled {spec.depth_label} layers but {spec.block_type} blocks "
            f"{list(spec.group_blocks)} give {depth}", DepthMismatchWarning, stacklevel=2)
    return depth


def bottleneck_widths(spec: ArchSpec) -> list[tuple[int, int]]:
    """(inner, outer) channel widths per group for bottleneck blocks."""
    if spec.block_type != "bottleneck":
        raise ArchSpecError("block_type", "bottleneck_widths needs a bottleneck spec")
    if spec.width_factor not in WIDTH_FACTORS:
        raise ArchSpecError("k", f"width factor must be one of {WIDTH_FACTORS}, got {spec.width_factor}")
    return [(w, spec.width_factor * w) for w in spec.base_widths]


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

Shape = tuple[int, int, int]


@dataclass
class GraphNode:
    id: int
    op: str  # input | stem | residual | shortcut | junction | head_act | pool | head
    inputs: tuple[int, ...]
    in_shape: Shape
    out_shape: Shape
    block: int | None = None
    group: int | None = None
    stride: int = 1
    level: str | None = None  # shortcuts only: root | middle | final
    kind: str | None = None  # shortcuts only: A | B | identity
    value: str | None = None  # x_l name for block boundary values

    @property
    def name(self) -> str:
        if self.op == "residual":
            return f"block{self.block}.residual"
        if self.op == "junction":
            return f"block{self.block}.junction"
        if self.op == "shortcut":
            if self.level == "final":
                return f"block{self.block}.shortcut"
            if self.level == "middle":
                return f"group{self.group}.shortcut"
            return "root.shortcut"
        return self.op

    @property
    def dimension_changing(self) -> bool:
        return self.in_shape != self.out_shape


@dataclass
class Graph:
    spec: ArchSpec
    nodes: list[GraphNode] = field(default_factory=list)
    input_id: int = 0
    logits_id: int = -1

    def _add(self, **kw) -> GraphNode:
        node = GraphNode(id=len(self.nodes), **kw)
        self.nodes.append(node)
        return node

    def shortcuts(self, level: str | None = None) -> list[GraphNode]:
        return [n for n in self.nodes
                if n.op == "shortcut" and (level is None or n.level == level)]

    def census(self) -> dict[str, dict[str, int]]:
        """Shortcut counts keyed by level, then by type, plus totals by type."""
        out: dict[str, dict[str, int]] = {}
        for lvl in ("root", "middle", "final"):
            out[lvl] = dict(sorted(Counter(n.kind for n in self.shortcuts(lvl)).items()))
        out["total"] = dict(sorted(Counter(n.kind for n in self.shortcuts()).items()))
        return out

    def to_json(self) -> dict:
        nodes = []
        for n in self.nodes:
            d = {"id": n.id, "name": n.name, "op": n.op, "inputs": list(n.inputs),
                 "in_shape": list(n.in_shape), "out_shape": list(n.out_shape)}
            for key in ("block", "group", "level", "kind", "value"):
                if getattr(n, key) is not None:
                    d[key] = getattr(n, key)
            if n.stride != 1:
                d["stride"] = n.stride
            nodes.append(d)
        edges = [{"from": i, "to": n.id} for n in self.nodes for i in n.inputs]
        return {"spec": self.spec.to_dict(), "nodes": nodes, "edges": edges,
                "input": self.input_id, "logits": self.logits_id, "census": self.census()}

    def to_dot(self) -> str:
        colors = {"root": "darkgreen", "middle": "orange", "final": "blue"}
        lines = ["digraph ror {", "  rankdir=TB;", "  node [shape=box, fontsize=10];"]
        for n in self.nodes:
            label = n.name
            if n.op == "shortcut":
                label += f"\\n{n.level}/{n.kind}"
            label += f"\\n{'x'.join(map(str, n.out_shape))}"
            lines.append(f'  n{n.id} [label="{label}"];')
        for n in self.nodes:
            for i in n.inputs:
                attr = ""
                if n.op == "shortcut":
                    attr = f' [color={colors[n.level]}, style=dashed]'
                lines.append(f"  n{i} -> n{n.id}{attr};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _down(shape: Shape, stride: int, channels: int) -> Shape:
    _, h, w = shape
    return (channels, -(-h // stride), -(-w // stride))


def build(spec: ArchSpec) -> Graph:
    """Compile ``spec`` into a block graph with all shortcut levels wired.

    Block ``l`` maps ``x_l`` to ``x_{l+1}``. The last block of each group
    additionally sums the group's middle-level shortcut from the group input;
    the last block of the network also sums the root-level shortcut from the
    stem output ``x_1``. With two levels only root and final shortcuts exist.
    """
    spec.validate()
    g = Graph(spec)
    c_in, h, w = spec.input_shape
    inp = g._add(op="input", inputs=(), in_shape=spec.input_shape, out_shape=spec.input_shape)
    g.input_id = inp.id
    stem_shape = (spec.base_widths[0], h, w)
    stem = g._add(op="stem", inputs=(inp.id,), in_shape=spec.input_shape, out_shape=stem_shape,
                  value="x_1")
    x1 = cur = stem
    l = 0
    for gi, nblocks in enumerate(spec.group_blocks):
        group_in = cur
        out_c = spec.group_out_width(gi)
        group_stride = 1 if gi == 0 else 2
        for bi in range(nblocks):
            l += 1
            stride = group_stride if bi == 0 else 1
            out_shape = _down(cur.out_shape, stride, out_c)
            res = g._add(op="residual", inputs=(cur.id,), in_shape=cur.out_shape, out_shape=out_shape,
                         block=l, group=gi + 1, stride=stride)
            terms = []
            last_in_group = bi == nblocks - 1
            if last_in_group and gi == 3:
                root = g._add(op="shortcut", inputs=(x1.id,), in_shape=x1.out_shape,
                              out_shape=out_shape, block=l, group=gi + 1, level="root",
                              stride=8, kind="B")
                terms.append(root.id)
            if last_in_group and spec.levels == 3:
                mid = g._add(op="shortcut", inputs=(group_in.id,), in_shape=group_in.out_shape,
                             out_shape=out_shape, block=l, group=gi + 1, level="middle",
                             stride=group_stride, kind="B")
                terms.append(mid.id)
            fin = g._add(op="shortcut", inputs=(cur.id,), in_shape=cur.out_shape, out_shape=out_shape,
                         block=l, group=gi + 1, level="final", stride=stride)
            terms += [fin.id, res.id]
            cur = g._add(op="junction", inputs=tuple(terms), in_shape=out_shape, out_shape=out_shape,
                         block=l, group=gi + 1, value=f"x_{l + 1}")
    feat_shape = cur.out_shape
    if spec.activation_order == "pre":
        cur = g._add(op="head_act", inputs=(cur.id,), in_shape=feat_shape, out_shape=feat_shape)
    pool = g._add(op="pool", inputs=(cur.id,), in_shape=feat_shape, out_shape=(feat_shape[0], 1, 1))
    head = g._add(op="head", inputs=(pool.id,), in_shape=pool.out_shape,
                  out_shape=(spec.num_classes, 1, 1))
    g.logits_id = head.id
    return apply_policy(g, spec.shortcut_policy)


def apply_policy(graph: Graph, policy: str) -> Graph:
    """Assign shortcut types in place (and return the graph).

    Root and middle shortcuts are always projections (Type B). Final-level
    shortcuts that keep the shape are identities; those that change it are
    Type A under ``A+B`` and Type B under ``all-B``.
    """
    if policy not in POLICIES:
        raise ArchSpecError("policy", f"expected one of {POLICIES}, got {policy!r}")
    for n in graph.shortcuts():
        if n.level != "final":
            n.kind = "B"
        elif not n.dimension_changing:
            n.kind = "identity"
        else:
            n.kind = "A" if policy == "A+B" else "B"
    if graph.spec.shortcut_policy != policy:
        graph.spec = replace(graph.spec, shortcut_policy=policy)
    return graph


def symbolic_junctions(graph: Graph) -> dict[str, Counter]:
    """Unroll the graph with tags in place of tensors.

    Returns, for each junction output ``x_{l+1}``, the multiset of summand
    tags such as ``g(x_1)``, ``h(x_4)`` and ``F(x_4)``. This walks the same
    node list the numeric model executes.
    """
    tags: dict[int, str] = {}
    out: dict[str, Counter] = {}
    for n in graph.nodes:
        if n.op in ("input", "stem", "junction", "head_act", "pool", "head"):
            if n.op == "junction":
                out[n.value] = Counter(tags[i] for i in n.inputs)
            tags[n.id] = n.value or n.op
        elif n.op == "residual":
            tags[n.id] = f"F({tags[n.inputs[0]]})"
        elif n.op == "shortcut":
            fn = "h" if n.level == "final" else "g"
            tags[n.id] = f"{fn}({tags[n.inputs[0]]})"
    return out


# ---------------------------------------------------------------------------
# stochastic depth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropSchedule:
    """Linear decay of residual-branch survival from ``p0`` to ``pL``."""

    num_blocks: int
    p0: float = 1.0
    pL: float = 0.5

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be positive")
        if not (0.0 < self.pL <= self.p0 <= 1.0):
            raise ValueError(f"need 0 < pL <= p0 <= 1, got p0={self.p0}, pL={self.pL}")

    def survival(self, l: int) -> float:
        if not 0 <= l <= self.num_blocks:
            raise IndexError(f"block index {l} outside 0..{self.num_blocks}")
        return self.p0 - (l / self.num_blocks) * (self.p0 - self.pL)

    @property
    def probs(self) -> np.ndarray:
        """Survival probabilities for blocks 1..L."""
        return np.array([self.survival(l) for l in range(1, self.num_blocks + 1)])


def sample_drop_mask(schedule: DropSchedule, rng: np.random.Generator) -> np.ndarray:
    """Boolean survival flags for blocks 1..L, drawn independently."""
    return rng.random(schedule.num_blocks) < schedule.probs
