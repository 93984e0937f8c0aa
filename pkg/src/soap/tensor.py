"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a plain function returning a new :class:`Tensor`.  When a
:class:`Tape` is active and at least one input is tracked, the op appends a
node to the tape holding the inputs and whatever activations its backward
rule needs.  Backward rules live in :data:`BACKWARD_RULES`, keyed by op name,
so they can be inspected (or deliberately broken in tests).
"""
from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "soap_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """A dense row-major float64 array plus differentiation bookkeeping.

    ``requires_grad`` marks leaves (parameters) whose gradients the tape
    should report.  ``node_id`` is set when the tensor was produced by a
    recorded op on the currently active tape.
    """

    __slots__ = ("data", "requires_grad", "node_id", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all routed through the recorded ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    saved: dict
    out_shape: tuple[int, ...]


@dataclass
class Tape:
    """Ordered record of executed ops.

    Use as a context manager; nodes are appended in execution order, which
    is a valid topological order by construction.
    """

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def release(self) -> None:
        """Drop recorded nodes so saved activations are freed without waiting for gc."""
        self.nodes.clear()
        self.gradients = {}

    def record(self, op: str, inputs: Sequence[Tensor], result: Tensor, saved: dict) -> None:
        self.nodes.append(Node(op, tuple(inputs), saved, result.shape))
        result.node_id = len(self.nodes) - 1
        result._tape = self

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(x) for every tracked tensor reachable from ``loss``.

        Gradients for the leaves in ``params`` are also written to ``.grad``
        (zeros when a leaf does not influence the loss).  Returns a map from
        ``id(leaf)`` to its gradient array.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss._tape is not self:
            raise ValueError("loss is not connected to this tape")

        node_grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}

        for idx in range(loss.node_id, -1, -1):
            g = node_grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = BACKWARD_RULES[node.op](g, node)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.tracked:
                    continue
                if inp.node_id is not None and inp._tape is self:
                    prev = node_grads.get(inp.node_id)
                    node_grads[inp.node_id] = ig if prev is None else prev + ig
                elif inp.requires_grad:
                    key = id(inp)
                    leaves[key] = inp
                    prev = leaf_grads.get(key)
                    leaf_grads[key] = ig if prev is None else prev + ig

        for key, leaf in leaves.items():
            leaf.grad = leaf_grads[key]
        for p in params:
            if id(p) not in leaf_grads:
                p.grad = np.zeros_like(p.data)
                leaf_grads[id(p)] = p.grad
        self.gradients = leaf_grads
        return leaf_grads


def active_tape() -> Tape | None:
    return _active_tape.get()


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Run reverse mode on the tape that produced ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss is not connected to a tape")
    return loss._tape.backward(loss, params)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], **saved) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node_id = None
    out.grad = None
    out.name = None
    out._tape = None
    tape = _active_tape.get()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(op, inputs, out, saved)
    return out


BACKWARD_RULES: dict[str, Callable[[np.ndarray, Node], tuple]] = {}


def _rule(name: str):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out != a.shape:
        raise ShapeError(f"{op}: {b.shape} does not broadcast onto {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _result("add", a.data + b.data, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _result("sub", a.data - b.data, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _result("mul", a.data * b.data, (a, b))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result("sigmoid", out, (a,), out=out)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), out=out)


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` (binary) or ``sigmoid``/``tanh``."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"sigmoid": sigmoid, "tanh": tanh}
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


@_rule("add")
def _add_bw(g, node):
    a, b = node.inputs
    return g, _unbroadcast(g, b.shape)


@_rule("sub")
def _sub_bw(g, node):
    a, b = node.inputs
    return g, -_unbroadcast(g, b.shape)


@_rule("mul")
def _mul_bw(g, node):
    a, b = node.inputs
    ga = g * b.data if a.tracked else None
    gb = _unbroadcast(g * a.data, b.shape) if b.tracked else None
    return ga, gb


@_rule("sigmoid")
def _sigmoid_bw(g, node):
    s = node.saved["out"]
    return (g * s * (1.0 - s),)


@_rule("tanh")
def _tanh_bw(g, node):
    t = node.saved["out"]
    return (g * (1.0 - t * t),)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int, op: str) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    if not axes:
        raise ValueError(f"{op}: empty axis list")
    norm = tuple(ax % ndim if -ndim <= ax < ndim else None for ax in axes)
    if None in norm:
        raise ValueError(f"{op}: axis out of range for ndim {ndim}: {axes}")
    if len(set(norm)) != len(norm):
        raise ValueError(f"{op}: repeated axes {axes}")
    return tuple(sorted(norm))


def reduce_sum(a: Tensor, axes, keep_dims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim, "sum")
    out = a.data.sum(axis=axes, keepdims=keep_dims)
    return _result("sum", np.asarray(out), (a,), axes=axes, keep_dims=keep_dims)


def reduce_mean(a: Tensor, axes, keep_dims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim, "mean")
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.sum(axis=axes, keepdims=keep_dims) / count
    return _result("mean", np.asarray(out), (a,), axes=axes, keep_dims=keep_dims, count=count)


def reduce(op_kind: str, a: Tensor, axes, keep_dims: bool = False) -> Tensor:
    if op_kind == "sum":
        return reduce_sum(a, axes, keep_dims)
    if op_kind == "mean":
        return reduce_mean(a, axes, keep_dims)
    raise ValueError(f"unknown reduction {op_kind!r}")


def _expand_reduced(g, node):
    a = node.inputs[0]
    if not node.saved["keep_dims"]:
        g = np.expand_dims(g, node.saved["axes"])
    return np.broadcast_to(g, a.shape)


@_rule("sum")
def _sum_bw(g, node):
    return (np.array(_expand_reduced(g, node)),)


@_rule("mean")
def _mean_bw(g, node):
    return (_expand_reduced(g, node) / node.saved["count"],)


def frobenius_norm(a: Tensor, axes) -> Tensor:
    """sqrt of the sum of squares over ``axes``; gradient taken as 0 at the origin."""
    axes = _norm_axes(axes, a.ndim, "norm")
    out = np.sqrt((a.data * a.data).sum(axis=axes))
    return _result("norm", out, (a,), axes=axes, out=out)


@_rule("norm")
def _norm_bw(g, node):
    a = node.inputs[0]
    axes = node.saved["axes"]
    out = node.saved["out"]
    safe = np.where(out > 0, out, 1.0)
    scale = np.where(out > 0, g / safe, 0.0)
    return (np.expand_dims(scale, axes) * a.data,)


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) > 1 or known == 0 or a.size % known:
            raise ShapeError(f"reshape: cannot infer {shape} from {a.shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} has {a.size} elements, target {shape} does not")
    return _result("reshape", a.data.reshape(shape), (a,))


@_rule("reshape")
def _reshape_bw(g, node):
    return (g.reshape(node.inputs[0].shape),)


def flatten(a: Tensor, start: int = 1) -> Tensor:
    """Collapse axes ``start..`` into one, e.g. F×C×H×W -> F×(C·H·W)."""
    lead = a.shape[:start]
    return reshape(a, lead + (-1,) if a.size else lead + (0,))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), axes=axes)


@_rule("transpose")
def _transpose_bw(g, node):
    return (g.transpose(np.argsort(node.saved["axes"])),)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: nothing to concatenate")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result("concat", data, tuple(tensors), axis=axis, sizes=sizes)


@_rule("concat")
def _concat_bw(g, node):
    splits = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=node.saved["axis"]))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Take ``a[..., start:stop, ...]`` along ``axis``."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: bounds [{start}, {stop}) invalid for extent {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return _result("slice", a.data[tuple(index)], (a,), index=tuple(index))


@_rule("slice")
def _slice_bw(g, node):
    full = np.zeros(node.inputs[0].shape)
    full[node.saved["index"]] = g
    return (full,)


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather along ``axis`` (repeats allowed)."""
    axis = axis % a.ndim
    idx = np.asarray(indices, dtype=np.intp)
    return _result("take", np.take(a.data, idx, axis=axis), (a,), idx=idx, axis=axis)


@_rule("take")
def _take_bw(g, node):
    axis = node.saved["axis"]
    full = np.zeros(node.inputs[0].shape)
    moved = np.moveaxis(full, axis, 0)
    np.add.at(moved, node.saved["idx"], np.moveaxis(g, axis, 0))
    return (full,)


def reshape_ops(kind: str, *args, **kwargs) -> Tensor:
    table = {"reshape": reshape, "flatten": flatten, "concat": concat, "slice": slice_axis}
    if kind not in table:
        raise ValueError(f"unknown layout op {kind!r}")
    return table[kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast numpy-style."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} disagree") from None
    return _result("matmul", np.matmul(a.data, b.data), (a, b))


@_rule("matmul")
def _matmul_bw(g, node):
    a, b = node.inputs
    ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.tracked else None
    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.tracked else None
    return ga, gb


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the trailing axis: ``x @ weight + bias`` with weight (in, out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    data = x.data @ weight.data
    inputs = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} must be ({weight.shape[1]},)")
        data = data + bias.data
        inputs = (x, weight, bias)
    return _result("linear", data, inputs)


@_rule("linear")
def _linear_bw(g, node):
    x, w = node.inputs[:2]
    gx = g @ w.data.T if x.tracked else None
    gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]) if w.tracked else None
    if len(node.inputs) == 3:
        return gx, gw, g.reshape(-1, w.shape[1]).sum(axis=0)
    return gx, gw


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", out, (a,), out=out, axis=axis)


@_rule("softmax")
def _softmax_bw(g, node):
    s, axis = node.saved["out"], node.saved["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"log_softmax: axis {axis} invalid for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _result("log_softmax", out, (a,), out=out, axis=axis)


@_rule("log_softmax")
def _log_softmax_bw(g, node):
    out, axis = node.saved["out"], node.saved["axis"]
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def layer_norm(a: Tensor, axis: int = -1, epsilon: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean, unit variance. No affine."""
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"layer_norm: axis {axis} invalid for ndim {a.ndim}")
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    out = xc * inv
    return _result("layer_norm", out, (a,), out=out, inv=inv, axis=axis)


@_rule("layer_norm")
def _layer_norm_bw(g, node):
    xhat, inv, axis = node.saved["out"], node.saved["inv"], node.saved["axis"]
    gm = g.mean(axis=axis, keepdims=True)
    gxm = (g * xhat).mean(axis=axis, keepdims=True)
    return (inv * (g - gm - xhat * gxm),)


# ---------------------------------------------------------------------------
# Convolution ("same" zero padding, stride 1, cross-correlation)
# ---------------------------------------------------------------------------


def _conv_check(x: Tensor, k: Tensor, rank: int, bias: Tensor | None) -> tuple[int, ...]:
    if rank not in (1, 2, 3):
        raise ValueError(f"convolve: rank must be 1, 2 or 3, got {rank}")
    if x.ndim != rank + 2:
        raise ShapeError(f"convolve: rank-{rank} input needs {rank + 2} axes, got {x.shape}")
    if k.ndim != rank + 2:
        raise ShapeError(f"convolve: rank-{rank} kernel needs {rank + 2} axes, got {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(
            f"convolve: input has {x.shape[1]} channels, kernel expects {k.shape[1]}"
        )
    extents = k.shape[2:]
    if any(e % 2 == 0 for e in extents):
        raise ShapeError(f"convolve: kernel extents must be odd, got {extents}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise ShapeError(f"convolve: bias {bias.shape} must be ({k.shape[0]},)")
    return extents


def _shift_slices(offset: Sequence[int], spatial: Sequence[int]) -> tuple[slice, ...]:
    return (slice(None), slice(None)) + tuple(
        slice(o, o + n) for o, n in zip(offset, spatial)
    )


def _pad_same(x: np.ndarray, extents: Sequence[int]) -> np.ndarray:
    return np.pad(x, [(0, 0), (0, 0)] + [(e // 2, e // 2) for e in extents])


class _FlatGeometry:
    """Index bookkeeping for convolving on the flattened padded volume.

    With the padded spatial axes flattened, moving the kernel by an offset is
    a constant shift of the flat index, so every kernel tap reads one
    contiguous span of the padded input.  Output position ``p`` (in padded
    row-major strides) is valid when its trailing coordinates stay inside the
    unpadded extents; the remaining "gap" positions are discarded.
    """

    def __init__(self, spatial: Sequence[int], extents: Sequence[int]):
        self.spatial = tuple(spatial)
        self.padded = tuple(s + e - 1 for s, e in zip(spatial, extents))
        strides = [1] * len(self.padded)
        for d in range(len(self.padded) - 2, -1, -1):
            strides[d] = strides[d + 1] * self.padded[d + 1]
        self.total = int(np.prod(self.padded))
        self.span = sum((s - 1) * st for s, st in zip(spatial, strides)) + 1
        self.shifts = [
            sum(o * st for o, st in zip(offset, strides))
            for offset in itertools.product(*(range(e) for e in extents))
        ]
        self.taps = list(itertools.product(*(range(e) for e in extents)))

    def crop(self, spanned: np.ndarray) -> np.ndarray:
        """(..., span) -> (..., *spatial) keeping only valid positions."""
        lead = spanned.shape[:-1]
        full = np.zeros(lead + (self.total,))
        full[..., : self.span] = spanned
        full = full.reshape(lead + self.padded)
        return full[(Ellipsis,) + tuple(slice(0, s) for s in self.spatial)]

    def embed(self, dense: np.ndarray) -> np.ndarray:
        """(..., *spatial) -> (..., span) with zeros at gap positions."""
        lead = dense.shape[: -len(self.spatial)]
        full = np.zeros(lead + self.padded)
        full[(Ellipsis,) + tuple(slice(0, s) for s in self.spatial)] = dense
        return full.reshape(lead + (self.total,))[..., : self.span]


def convolve(x: Tensor, kernel: Tensor, rank: int, bias: Tensor | None = None) -> Tensor:
    """Rank-1/2/3 convolution (cross-correlation) with 'same' zero padding.

    Layouts: input ``(batch, in_ch, *spatial)``, kernel ``(out_ch, in_ch, *k)``.
    """
    extents = _conv_check(x, kernel, rank, bias)
    n, c_in = x.shape[:2]
    geo = _FlatGeometry(x.shape[2:], extents)
    xp = _pad_same(x.data, extents).reshape(n, c_in, geo.total)
    # one (taps*in, span) patch block per sample; reused by the kernel gradient
    cols = np.empty((n, len(geo.taps) * c_in, geo.span))
    for i, shift in enumerate(geo.shifts):
        cols[:, i * c_in : (i + 1) * c_in] = xp[:, :, shift : shift + geo.span]
    w_mat = _kernel_matrix(kernel.data)
    out = np.ascontiguousarray(geo.crop(np.matmul(w_mat, cols)))
    inputs = (x, kernel)
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * rank)
        inputs = (x, kernel, bias)
    return _result("conv", out, inputs, cols=cols)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(out, in, *k) -> (out, taps*in), tap-major to match the patch layout."""
    rank = w.ndim - 2
    order = (0,) + tuple(range(2, 2 + rank)) + (1,)
    return np.ascontiguousarray(w.transpose(order).reshape(w.shape[0], -1))


@_rule("conv")
def _conv_bw(g, node):
    x, kernel = node.inputs[:2]
    w = kernel.data
    n, c_in = x.shape[:2]
    spatial = x.shape[2:]
    extents = w.shape[2:]
    geo = _FlatGeometry(spatial, extents)
    g_span = np.ascontiguousarray(geo.embed(g))  # (n, out, span), zero at gaps
    gx = gw = None
    if x.tracked:
        gxp = np.zeros((n, c_in, geo.total))
        for tap, shift in zip(geo.taps, geo.shifts):
            wk_t = np.ascontiguousarray(w[(slice(None), slice(None)) + tap].T)
            gxp[:, :, shift : shift + geo.span] += np.matmul(wk_t, g_span)
        gxp = gxp.reshape((n, c_in) + geo.padded)
        crop = (slice(None), slice(None)) + tuple(
            slice(e // 2, e // 2 + s) for e, s in zip(extents, spatial)
        )
        gx = np.ascontiguousarray(gxp[crop])
    if kernel.tracked:
        cols = node.saved["cols"]
        g_mat = np.matmul(g_span, cols.transpose(0, 2, 1)).sum(axis=0)  # (out, taps*in)
        gw = g_mat.reshape((w.shape[0],) + tuple(extents) + (c_in,))
        gw = np.ascontiguousarray(np.moveaxis(gw, -1, 1))
    if len(node.inputs) == 3:
        return gx, gw, g.sum(axis=tuple([0] + list(range(2, g.ndim))))
    return gx, gw


# ---------------------------------------------------------------------------
# Misc
# ---------------------------------------------------------------------------


def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select ``a[i, index[i]]`` from a 2-D tensor, giving a 1-D tensor."""
    if a.ndim != 2 or len(index) != a.shape[0]:
        raise ShapeError(f"pick: need 2-D input with {len(index)} rows, got {a.shape}")
    idx = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])
    return _result("pick", a.data[rows, idx], (a,), rows=rows, idx=idx)


@_rule("pick")
def _pick_bw(g, node):
    full = np.zeros(node.inputs[0].shape)
    full[node.saved["rows"], node.saved["idx"]] = g
    return (full,)


def scale(a: Tensor, factor: float) -> Tensor:
    return _result("scale", a.data * factor, (a,), factor=factor)


@_rule("scale")
def _scale_bw(g, node):
    return (g * node.saved["factor"],)
