"""Parameterized RoR model executing an :class:`~rorkit.arch.Graph`."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .arch import ArchSpec, DropSchedule, Graph, GraphNode, build, bottleneck_widths
from .tensor import RunningStats, Tensor


def he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def head_uniform(rng: np.random.Generator, fan_in: int, n_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, n_out))


@dataclass
class Shortcut:
    """One shortcut edge: identity, zero-padding (A) or 1x1 projection (B)."""

    kind: str
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    stride: int
    weight: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "identity":
            return x
        if self.kind == "A":
            return T.pad_channels(T.subsample(x, self.stride), self.out_shape[0])
        return T.conv2d(x, self.weight, stride=self.stride, pad=0)


def make_shortcut(kind: str, in_shape, out_shape, stride: int,
                  rng: np.random.Generator | None = None) -> Shortcut:
    in_shape, out_shape = tuple(in_shape), tuple(out_shape)
    if kind == "identity":
        if in_shape != out_shape or stride != 1:
            raise T.ShapeError(f"identity shortcut needs equal shapes, got {in_shape} -> {out_shape}")
        return Shortcut(kind, in_shape, out_shape, 1)
    if kind == "A":
        if out_shape[0] < in_shape[0]:
            raise T.ShapeError(
                f"Type A shortcut cannot reduce channels ({in_shape[0]} -> {out_shape[0]})")
        return Shortcut(kind, in_shape, out_shape, stride)
    if kind == "B":
        rng = rng or np.random.default_rng(0)
        w = Tensor(he_normal(rng, (out_shape[0], in_shape[0], 1, 1)), requires_grad=True)
        return Shortcut(kind, in_shape, out_shape, stride, w)
    raise ValueError(f"unknown shortcut kind {kind!r}")


class RoRNet:
    """A RoR / Pre-RoR classifier.

    Parameters live in ``params`` (ordered name -> Tensor) and batch-norm
    running statistics in ``stats``. Names starting with ``head.`` belong to
    the classification head; everything else is the body.
    """

    def __init__(self, spec: ArchSpec, seed: int = 0, drop_schedule: DropSchedule | None = None):
        self.graph: Graph = build(spec)
        self.drop_schedule = drop_schedule
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}
        self.shortcuts: dict[int, Shortcut] = {}
        self._convs: dict[int, list[tuple[str, int, int]]] = {}
        self.preprocess_stats = None  # ChannelStats of the latest training split
        rng = np.random.default_rng(seed)
        self._init_body(rng)
        self._init_head(rng)

    @property
    def spec(self) -> ArchSpec:
        return self.graph.spec

    # -- construction -----------------------------------------------------

    def _conv(self, name: str, rng, c_out: int, c_in: int, k: int) -> None:
        self.params[name] = Tensor(he_normal(rng, (c_out, c_in, k, k)), requires_grad=True, name=name)

    def _bn(self, name: str, c: int) -> None:
        self.params[name + ".gamma"] = Tensor(np.ones(c), requires_grad=True, name=name + ".gamma")
        self.params[name + ".beta"] = Tensor(np.zeros(c), requires_grad=True, name=name + ".beta")
        self.stats[name] = RunningStats.fresh(c)

    def _init_body(self, rng: np.random.Generator) -> None:
        spec = self.spec
        post = spec.activation_order == "post"
        for node in self.graph.nodes:
            if node.op == "stem":
                self._conv("stem.conv", rng, node.out_shape[0], node.in_shape[0], 3)
                if post:
                    self._bn("stem.bn", node.out_shape[0])
            elif node.op == "residual":
                self._init_residual(node, rng)
            elif node.op == "shortcut":
                sc = make_shortcut(node.kind, node.in_shape, node.out_shape, node.stride, rng)
                if sc.weight is not None:
                    sc.weight.name = node.name + ".weight"
                    self.params[sc.weight.name] = sc.weight
                self.shortcuts[node.id] = sc
            elif node.op == "head_act":
                self._bn("head_act.bn", node.in_shape[0])

    def _init_residual(self, node: GraphNode, rng) -> None:
        spec = self.spec
        prefix = f"block{node.block}"
        c_in, c_out = node.in_shape[0], node.out_shape[0]
        if spec.block_type == "basic":
            layers = [(c_in, c_out, 3, node.stride), (c_out, c_out, 3, 1)]
        else:
            inner = bottleneck_widths(spec)[node.group - 1][0]
            layers = [(c_in, inner, 1, 1), (inner, inner, 3, node.stride), (inner, c_out, 1, 1)]
        convs = []
        for i, (ci, co, k, s) in enumerate(layers, start=1):
            self._conv(f"{prefix}.conv{i}", rng, co, ci, k)
            # pre order normalizes the conv input, post order its output
            self._bn(f"{prefix}.bn{i}", ci if spec.activation_order == "pre" else co)
            convs.append((f"{prefix}.conv{i}", s, k // 2))
        self._convs[node.id] = convs

    def _init_head(self, rng: np.random.Generator) -> None:
        fan_in = self.graph.nodes[self.graph.logits_id].in_shape[0]
        n = self.spec.num_classes
        self.params["head.weight"] = Tensor(head_uniform(rng, fan_in, n), requires_grad=True,
                                            name="head.weight")
        self.params["head.bias"] = Tensor(np.zeros(n), requires_grad=True, name="head.bias")

    # -- forward ----------------------------------------------------------

    def _bn_apply(self, name: str, x: Tensor, mode: str, update: bool) -> Tensor:
        running = self.stats[name] if (mode == "eval" or update) else None
        return T.batch_norm(x, self.params[name + ".gamma"], self.params[name + ".beta"],
                            mode=mode, running=running)

    def _residual(self, node: GraphNode, x: Tensor, mode: str, update: bool) -> Tensor:
        prefix = f"block{node.block}"
        convs = self._convs[node.id]
        if self.spec.activation_order == "pre":
            for i, (cname, stride, pad) in enumerate(convs, start=1):
                x = T.relu(self._bn_apply(f"{prefix}.bn{i}", x, mode, update))
                x = T.conv2d(x, self.params[cname], stride=stride, pad=pad)
            return x
        for i, (cname, stride, pad) in enumerate(convs, start=1):
            x = T.conv2d(x, self.params[cname], stride=stride, pad=pad)
            x = self._bn_apply(f"{prefix}.bn{i}", x, mode, update)
            if i < len(convs):
                x = T.relu(x)
        return x

    def run(self, x: Tensor, mode: str = "train", drop_mask=None,
            update_stats: bool = True) -> dict[int, Tensor]:
        """Execute the graph; returns every node's output keyed by node id.

        ``drop_mask`` (train mode) is a boolean per block, False meaning the
        residual branch is skipped and only shortcut terms reach the
        junction. In eval mode with a drop schedule, each residual branch is
        scaled by its survival probability instead.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise T.ShapeError(f"input {x.shape} does not match spec input {self.spec.input_shape}")
        post = self.spec.activation_order == "post"
        vals: dict[int, Tensor | None] = {self.graph.input_id: x}
        for node in self.graph.nodes[1:]:
            args = [vals[i] for i in node.inputs]
            if node.op == "stem":
                out = T.conv2d(args[0], self.params["stem.conv"], stride=1, pad=1)
                if post:
                    out = T.relu(self._bn_apply("stem.bn", out, mode, update_stats))
            elif node.op == "residual":
                if mode == "train" and drop_mask is not None and not drop_mask[node.block - 1]:
                    out = None
                else:
                    out = self._residual(node, args[0], mode, update_stats)
                    if mode == "eval" and self.drop_schedule is not None:
                        out = T.scale(out, self.drop_schedule.survival(node.block))
            elif node.op == "shortcut":
                out = self.shortcuts[node.id](args[0])
            elif node.op == "junction":
                out = T.add_n([a for a in args if a is not None])
                if post:
                    out = T.relu(out)
            elif node.op == "head_act":
                out = T.relu(self._bn_apply("head_act.bn", args[0], mode, update_stats))
            elif node.op == "pool":
                out = T.global_avg_pool(args[0])
            elif node.op == "head":
                out = T.linear(args[0], self.params["head.weight"], self.params["head.bias"])
            else:
                raise ValueError(f"unknown node op {node.op!r}")
            vals[node.id] = out
        return vals

    def forward(self, x: Tensor, mode: str = "train", drop_mask=None,
                update_stats: bool = True) -> Tensor:
        return self.run(x, mode, drop_mask, update_stats)[self.graph.logits_id]

    __call__ = forward

    def features(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Pooled penultimate features (the head's input)."""
        head = self.graph.nodes[self.graph.logits_id]
        return self.run(x, mode, update_stats=False)[head.inputs[0]]

    # -- parameters -------------------------------------------------------

    def body_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def body_checksum(self) -> str:
        """SHA-256 over body parameters and running statistics."""
        h = hashlib.sha256()
        for name in self.body_names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name, st in self.stats.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(st.mean).tobytes())
            h.update(np.ascontiguousarray(st.var).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def replace_head(self, new_classes: int, rng: np.random.Generator) -> "RoRNet":
        """Swap in a freshly initialized head with ``new_classes`` outputs."""
        head = self.graph.nodes[self.graph.logits_id]
        self.graph.spec = replace(self.spec, num_classes=int(new_classes))
        head.out_shape = (int(new_classes), 1, 1)
        fan_in = head.in_shape[0]
        self.params["head.weight"] = Tensor(head_uniform(rng, fan_in, new_classes),
                                            requires_grad=True, name="head.weight")
        self.params["head.bias"] = Tensor(np.zeros(new_classes), requires_grad=True, name="head.bias")
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array map of parameters and running statistics."""
        out = {f"param:{k}": v.data for k, v in self.params.items()}
        for k, st in self.stats.items():
            out[f"stat:{k}.mean"] = st.mean
            out[f"stat:{k}.var"] = st.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        dtype = T.get_default_dtype()
        for key, arr in arrays.items():
            kind, name = key.split(":", 1)
            if kind == "param":
                if name not in self.params or self.params[name].shape != arr.shape:
                    raise T.ShapeError(f"checkpoint tensor {name} {arr.shape} does not fit the model")
                self.params[name].data = np.ascontiguousarray(arr, dtype=dtype)
            else:
                bn, which = name.rsplit(".", 1)
                setattr(self.stats[bn], which, np.ascontiguousarray(arr, dtype=dtype))

    # -- test helpers -----------------------------------------------------

    def residual_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("block")]

    def branch_output_convs(self) -> list[str]:
        """Name of the last conv of every residual branch."""
        return [convs[-1][0] for convs in self._convs.values()]


def zero_residual_outputs(model: RoRNet) -> None:
    """Zero the last conv of every residual branch, making each F vanish."""
    for name in model.branch_output_convs():
        model.params[name].data[...] = 0.0


def identity_projections(model: RoRNet) -> None:
    """Set every Type-B kernel to the (channel-truncated) identity."""
    for sc in model.shortcuts.values():
        if sc.weight is not None:
            w = sc.weight.data
            w[...] = 0.0
            for c in range(min(w.shape[0], w.shape[1])):
                w[c, c, 0, 0] = 1.0
