"""Minimal numpy tensor engine with a reverse-mode tape.

Only the operations a RoR graph needs are provided: 2-d convolution
(cross-correlation), batch normalization, ReLU, global average pooling,
affine maps, elementwise addition and a few shape helpers used by the
parameter-free shortcuts.

Usage::

    with Tape() as tape:
        y = relu(conv2d(x, w, stride=1, pad=1))
        loss = total(y)
    backward(loss)

Operations executed outside an active tape are not recorded, which is how
evaluation runs avoid building a graph.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_default_dtype: type = np.float32
_local = threading.local()  # active tapes and ReLU probes are per thread


def _tape_stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _relu_probes() -> list[list[np.ndarray]]:
    if not hasattr(_local, "probes"):
        _local.probes = []
    return _local.probes


class ShapeError(ValueError):
    pass


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch between single (float32) and double (float64) precision."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """Dense array plus gradient bookkeeping.

    ``data`` is always a numpy array of the default float dtype at creation
    time. ``grad`` is filled by :func:`backward` and has the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape | None" = None


@dataclass(eq=False)
class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so every node's operands were
    produced by earlier nodes (or are leaves). ``visits`` counts how many
    nodes the last backward pass processed.
    """

    nodes: list[Node] = field(default_factory=list)
    visits: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        node.output._node = node

    def backward(self, output: Tensor) -> None:
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        if output._node is None or output._node.tape is not self:
            raise ValueError("output was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        self.visits = 0
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            self.visits += 1
            _accumulate_grad(node.output, g)
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate_grad(inp, gi)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def _accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Temporarily suspend recording (all active tapes)."""
    saved = list(_tape_stack())
    _tape_stack().clear()
    try:
        yield
    finally:
        _tape_stack().extend(saved)


def backward(output: Tensor) -> None:
    """Propagate d(output)/d(t) into ``t.grad`` for every reachable tensor."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output._node is None or output._node.tape is None:
        raise ValueError("output was not produced on a tape")
    output._node.tape.backward(output)


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it on the active tape.

    ``backward_fn`` maps the upstream gradient to one gradient per input
    (``None`` for inputs that need none). Recording happens only when a tape
    is active and at least one input requires a gradient.
    """
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        tape.record(Node(op, tuple(inputs), out, backward_fn, tape))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate an (N, C, H, W) input with an (O, C, kH, kW) kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if conv_output_size(h, kh, stride, pad) < 1 or conv_output_size(w, kw, stride, pad) < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = kernel.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
        return gx, gk

    return apply_op("conv2d", (x, kernel), np.ascontiguousarray(out), grad)


@dataclass
class RunningStats:
    """Exponential moving averages of per-channel batch statistics."""

    mean: np.ndarray | None
    var: np.ndarray | None
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "RunningStats":
        dtype = dtype or _default_dtype
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def populated(self) -> bool:
        return self.mean is not None and self.var is not None


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
               running: RunningStats | None = None, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization.

    In ``train`` mode batch statistics are used and ``running`` (if given) is
    updated in place; ``eval`` mode reads ``running`` and never writes it.
    """
    axes, bshape = _bn_axes(x.data)
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(f"gamma {gamma.shape} / beta {beta.shape} do not match {ch} channels")
    gb, bb = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    if mode == "eval":
        if running is None or not running.populated:
            raise ValueError("eval-mode batch_norm needs populated running statistics")
        inv = 1.0 / np.sqrt(running.var.reshape(bshape) + eps)
        xhat = (x.data - running.mean.reshape(bshape)) * inv
        out = gb * xhat + bb

        def grad_eval(g: np.ndarray):
            return (g * gb * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return apply_op("batch_norm", (x, gamma, beta), out.astype(x.data.dtype), grad_eval)

    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    m = x.data.size // ch
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gb * xhat + bb
    if running is not None:
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = running.momentum
        if not running.populated:
            running.mean, running.var = mean.copy(), unbiased.copy()
        else:
            running.mean = ((1 - mom) * running.mean + mom * mean).astype(running.mean.dtype)
            running.var = ((1 - mom) * running.var + mom * unbiased).astype(running.var.dtype)

    def grad_train(g: np.ndarray):
        gsum = g.sum(axis=axes)
        gxhat_sum = (g * xhat).sum(axis=axes)
        gx = (gb * inv.reshape(bshape) / m) * (
            m * g - gsum.reshape(bshape) - xhat * gxhat_sum.reshape(bshape))
        return gx, gxhat_sum, gsum

    return apply_op("batch_norm", (x, gamma, beta), out.astype(x.data.dtype), grad_train)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    for probe in _relu_probes():
        probe.append(mask)
    return apply_op("relu", (x,), x.data * mask, lambda g: (g * mask,))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d activation, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return apply_op("global_avg_pool", (x,), out, grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] \
            or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"linear shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data + bias.data

    def grad(g: np.ndarray):
        return (g @ weight.data.T if x.requires_grad else None,
                x.data.T @ g if weight.requires_grad else None,
                g.sum(axis=0))

    return apply_op("linear", (x, weight, bias), out, grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return apply_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of several same-shape tensors, accumulated left to right."""
    if not terms:
        raise ValueError("add_n needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return apply_op("scale", (x,), x.data * c, lambda g: (g * c,))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    return apply_op("total", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype),
                    lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))


def subsample(x: Tensor, stride: int) -> Tensor:
    """Keep the top-left sample of each ``stride`` x ``stride`` window."""
    if stride == 1:
        return x
    out = np.ascontiguousarray(x.data[:, :, ::stride, ::stride])

    def grad(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::stride, ::stride] = g
        return (gx,)

    return apply_op("subsample", (x,), out, grad)


def pad_channels(x: Tensor, channels: int) -> Tensor:
    """Append zero channels so the result has ``channels`` channels."""
    c = x.shape[1]
    if channels < c:
        raise ShapeError(f"cannot pad {c} channels down to {channels}")
    if channels == c:
        return x
    widths = [(0, 0)] * x.ndim
    widths[1] = (0, channels - c)
    out = np.pad(x.data, widths)
    return apply_op("pad_channels", (x,), out, lambda g: (g[:, :c],))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    """Rank and extents as little-endian u64, then float32 data (row-major)."""
    arr = np.asarray(arr)
    f.write(struct.pack("<Q", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(8)
    if len(head) != 8:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<Q", head)
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    buf = f.read(4 * count)
    if len(buf) != 4 * count:
        raise EOFError("truncated tensor data")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    skipped_kinks: int
    nonfinite: list[tuple[int, tuple[int, ...]]]
    worst: tuple[int, tuple[int, ...]] | None = None

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error < self.tolerance


def _relu_signature(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    probe: list[np.ndarray] = []
    _relu_probes().append(probe)
    try:
        with no_tape():
            val = float(fn().data.sum())
    finally:
        _relu_probes().remove(probe)
    return val, probe


def finite_diff_check(build: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float,
                      step: float | None = None, floor: float = 1e-4,
                      max_coords: int | None = None, seed: int = 0,
                      oracle_dtype=np.float64) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``build(*inputs)`` must return a scalar. Analytic gradients are taken in
    the inputs' own precision; the central differences are evaluated with
    the inputs promoted to ``oracle_dtype`` so that float32 rounding noise in
    ``f(x+h) - f(x-h)`` does not swamp small gradient entries.

    Each checked coordinate is perturbed by ``h = step * max(1, |x|)``
    (``step`` defaults to 1e-3 for float32 inputs, 1e-5 for float64).
    Coordinates whose perturbation flips any ReLU mask straddle a kink and
    are skipped. Relative error is ``|a - n| / max(|a|, |n|)`` over
    coordinates where that denominator exceeds ``floor``. ``max_coords``
    samples that many coordinates per input instead of all of them.
    """
    for t in inputs:
        t.zero_grad()
    with Tape():
        out = build(*inputs)
        if out.size != 1:
            raise ShapeError(f"graph output must be scalar, got {out.shape}")
    backward(out)
    analytic = [None if t.grad is None else t.grad.astype(np.float64) for t in inputs]
    if step is None:
        single = any(t.data.dtype == np.float32 for t in inputs)
        step = 1e-3 if single else 1e-5

    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, None
    checked = skipped = 0
    nonfinite: list[tuple[int, tuple[int, ...]]] = []
    saved = [t.data for t in inputs]
    try:
        for t in inputs:
            t.data = t.data.astype(oracle_dtype)
        with precision(oracle_dtype):
            for ti, t in enumerate(inputs):
                if not t.requires_grad:
                    continue
                a_grad = analytic[ti] if analytic[ti] is not None else np.zeros(t.shape)
                coords = list(np.ndindex(*t.shape))
                if max_coords is not None and len(coords) > max_coords:
                    pick = rng.choice(len(coords), size=max_coords, replace=False)
                    coords = [coords[i] for i in sorted(pick)]
                for idx in coords:
                    orig = float(t.data[idx])
                    h = step * max(1.0, abs(orig))
                    t.data[idx] = orig + h
                    fp, mp = _relu_signature(lambda: build(*inputs))
                    t.data[idx] = orig - h
                    fm, mm = _relu_signature(lambda: build(*inputs))
                    t.data[idx] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(a_grad[idx])):
                        nonfinite.append((ti, idx))
                        continue
                    if len(mp) != len(mm) or any(not np.array_equal(p, q) for p, q in zip(mp, mm)):
                        skipped += 1
                        continue
                    numeric = (fp - fm) / (2 * h)
                    a = float(a_grad[idx])
                    denom = max(abs(a), abs(numeric))
                    if denom <= floor:
                        continue
                    checked += 1
                    err = abs(a - numeric) / denom
                    if err > worst_err:
                        worst_err, worst = err, (ti, idx)
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
    return GradCheckReport(worst_err, tolerance, checked, skipped, nonfinite, worst)
