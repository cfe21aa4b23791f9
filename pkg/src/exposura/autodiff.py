"""Dense float tensors on a reverse-mode gradient tape.

The operator set is deliberately small: the convolutions, activations,
reductions, pads, and pooling the two networks need.  A Tensor is a numpy
array plus an optional node id on a Tape; operations whose inputs carry nodes
append a node with a vector-Jacobian-product closure.  ``Tape.backward`` walks
the node list in reverse, so accumulation order is fixed and two backward
passes over the same graph give bitwise-identical gradients.

Layout is NCHW throughout.  float32 is the training dtype; gradient-check
builds run the same graph in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels as K

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Array value, optionally tracked as a tape node."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, dtype=None, node: int | None = None,
                 tape: "Tape | None" = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} tensor not supported (max 4)")
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class _Node:
    __slots__ = ("op", "input_ids", "vjp")

    def __init__(self, op: str, input_ids: tuple[int, ...],
                 vjp: Callable | None):
        self.op = op
        self.input_ids = input_ids
        self.vjp = vjp


class Gradients:
    """Result of a backward pass: node id -> gradient array."""

    def __init__(self, by_node: dict[int, np.ndarray]):
        self._by_node = by_node

    def __contains__(self, t: Tensor) -> bool:
        return t.node is not None and t.node in self._by_node

    def get(self, t: Tensor) -> Tensor | None:
        if t.node is None:
            return None
        g = self._by_node.get(t.node)
        return None if g is None else Tensor(g)

    def __getitem__(self, t: Tensor) -> Tensor:
        g = self.get(t)
        if g is None:
            raise KeyError(f"no gradient recorded for {t!r}")
        return g


class Tape:
    """Append-only operation record; single-threaded by contract."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, data) -> Tensor:
        """Register a leaf (parameter or input wanting gradients)."""
        t = data if isinstance(data, Tensor) else Tensor(data)
        if t.node is not None:
            return t
        nid = self._append("leaf", (), None)
        return Tensor(t.data, node=nid, tape=self)

    def _append(self, op: str, input_ids: tuple[int, ...],
                vjp: Callable | None) -> int:
        self._nodes.append(_Node(op, input_ids, vjp))
        return len(self._nodes) - 1

    def backward(self, loss: Tensor) -> Gradients:
        if loss.node is None or loss.tape is not self:
            raise ValueError("loss is not a node of this tape")
        if loss.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            loss.node: np.ones_like(loss.data)}
        for nid in range(loss.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.vjp is None:
                continue
            for iid, gi in zip(node.input_ids, node.vjp(g)):
                if iid < 0 or gi is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = gi if acc is None else acc + gi
        return Gradients(grads)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(tensors: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             vjp: Callable | None) -> Tensor:
    """Record a custom operation (used by the layer library).

    ``vjp(g)`` must return one gradient (or None) per input, in order.
    """
    tape = _find_tape(inputs)
    if tape is None:
        return Tensor(out_data)
    ids = tuple(t.node if t.node is not None else -1 for t in inputs)
    nid = tape._append(op, ids, vjp)
    return Tensor(out_data, node=nid, tape=tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# convolutions

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Strided 2-D cross-correlation, NCHW x (out_c, in_c, k, k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4, got shape {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d weight must be (out_c, in_c, k, k), got {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} pad={pad}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels "
            f"(shape {x.shape}) but weight expects {w.shape[1]} (shape {w.shape})")
    _, _, H, W = x.shape
    O, C, k, _ = w.shape
    if K.conv_out_extent(H, k, stride, pad) < 1 or K.conv_out_extent(W, k, stride, pad) < 1:
        raise ValueError(
            f"conv2d output would be empty: input {H}x{W}, k={k}, "
            f"stride={stride}, pad={pad}")
    y = K.conv2d_forward(x.data, w.data, stride, pad)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (O,):
            raise ValueError(f"bias must have shape ({O},), got {b.shape}")
        y = y + b.data.reshape(1, O, 1, 1)
    xd, wd = x.data, w.data
    nx, nw = x.node is not None, w.node is not None
    nb = b is not None and b.node is not None

    def vjp(g):
        gx = K.conv2d_grad_input(g, wd, stride, pad, H, W) if nx else None
        gw = K.conv2d_grad_weight(xd, g, stride, pad, k) if nw else None
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)) if nb else None)

    inputs = [x, w] if b is None else [x, w, b]
    return apply_op("conv2d", inputs, y, vjp)


def conv2d_transposed(x: Tensor, w: Tensor, b: Tensor | None = None, *,
                      stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; weight layout (in_c, out_c, k, k).

    Forward is the adjoint of conv2d with the same geometry: output extent is
    (H - 1) * stride - 2 * pad + k.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d_transposed input must be rank 4, got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(
            f"conv2d_transposed weight must be (in_c, out_c, k, k), got {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"conv2d_transposed channel mismatch: input has {x.shape[1]} "
            f"channels (shape {x.shape}) but weight expects {w.shape[0]} "
            f"(shape {w.shape})")
    _, _, H, W = x.shape
    Ci, O, k, _ = w.shape
    Ho = (H - 1) * stride - 2 * pad + k
    Wo = (W - 1) * stride - 2 * pad + k
    if Ho < 1 or Wo < 1:
        raise ValueError(
            f"conv2d_transposed output would be empty: input {H}x{W}, k={k}, "
            f"stride={stride}, pad={pad}")
    y = K.conv2d_grad_input(x.data, w.data, stride, pad, Ho, Wo)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (O,):
            raise ValueError(f"bias must have shape ({O},), got {b.shape}")
        y = y + b.data.reshape(1, O, 1, 1)
    xd, wd = x.data, w.data
    nx, nw = x.node is not None, w.node is not None
    nb = b is not None and b.node is not None

    def vjp(g):
        gx = K.conv2d_forward(g, wd, stride, pad) if nx else None
        gw = K.conv2d_grad_weight(g, xd, stride, pad, k) if nw else None
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)) if nb else None)

    inputs = [x, w] if b is None else [x, w, b]
    return apply_op("conv2d_transposed", inputs, y, vjp)


# ---------------------------------------------------------------------------
# pointwise

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)
    mask = x.data > 0
    return apply_op("relu", [x], y, lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    y = np.where(x.data >= 0, x.data, x.data * x.dtype.type(alpha))
    slope = np.where(x.data >= 0, x.dtype.type(1), x.dtype.type(alpha))
    return apply_op("leaky_relu", [x], y, lambda g: (g * slope,))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return apply_op("tanh", [x], y, lambda g: (g * (1 - y * y),))


def _binary(op: str, a: Tensor, b: Tensor, fwd, vjp_ab):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        y = fwd(a.data, b.data)
    except ValueError as e:
        raise ValueError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}") from e
    ash, bsh = a.shape, b.shape

    def vjp(g):
        ga, gb = vjp_ab(g)
        return (_unbroadcast(ga, ash) if ga is not None else None,
                _unbroadcast(gb, bsh) if gb is not None else None)

    return apply_op(op, [a, b], y, vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _binary("mul", a, b, np.multiply, lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    c = x.dtype.type(s)
    return apply_op("scale", [x], x.data * c, lambda g: (g * c,))


def shift(x: Tensor, s: float) -> Tensor:
    """Add a scalar constant, keeping the input dtype."""
    x = _as_tensor(x)
    return apply_op("shift", [x], x.data + x.dtype.type(s), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions

_REDUCE_KINDS = ("mean", "sum", "abs_mean", "sq_mean")


def reduce(x: Tensor, kind: str) -> Tensor:
    """Full reduction to a scalar: mean, sum, mean |x|, or mean x^2."""
    x = _as_tensor(x)
    if kind not in _REDUCE_KINDS:
        raise ValueError(f"unknown reduction {kind!r}, expected one of {_REDUCE_KINDS}")
    if x.size == 0:
        raise ValueError("cannot reduce an empty tensor")
    xd = x.data
    n = x.dtype.type(x.size)
    if kind == "mean":
        y, vjp = xd.mean(), lambda g: (np.full_like(xd, g / n),)
    elif kind == "sum":
        y, vjp = xd.sum(), lambda g: (np.full_like(xd, g),)
    elif kind == "abs_mean":
        y, vjp = np.abs(xd).mean(), lambda g: (g * np.sign(xd) / n,)
    else:
        y, vjp = (xd * xd).mean(), lambda g: (g * 2 * xd / n,)
    return apply_op(kind, [x], np.asarray(y, dtype=x.dtype), vjp)


def mean(x) -> Tensor:
    return reduce(x, "mean")


def abs_mean(x) -> Tensor:
    return reduce(x, "abs_mean")


def sq_mean(x) -> Tensor:
    return reduce(x, "sq_mean")


# ---------------------------------------------------------------------------
# spatial

def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor box average over the spatial axes."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"downsample_avg input must be rank 4, got {x.shape}")
    B, C, H, W = x.shape
    if factor < 1 or H % factor or W % factor:
        raise ValueError(
            f"spatial extents {H}x{W} not divisible by factor {factor}")
    if factor == 1:
        return apply_op("downsample_avg", [x], x.data.copy(), lambda g: (g,))
    y = x.data.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (factor * factor))

    def vjp(g):
        up = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (up * inv,)

    return apply_op("downsample_avg", [x], y, vjp)


def pad_zero(x: Tensor, left: int, right: int, top: int, bottom: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"pad_zero input must be rank 4, got {x.shape}")
    y = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    _, _, H, W = x.shape

    def vjp(g):
        return (np.ascontiguousarray(g[:, :, top:top + H, left:left + W]),)

    return apply_op("pad_zero", [x], y, vjp)


def pad_reflect(x: Tensor, p: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"pad_reflect input must be rank 4, got {x.shape}")
    _, _, H, W = x.shape
    if H < 1 or W < 1 or p < 0:
        raise ValueError(f"cannot reflect-pad {H}x{W} input by {p}")
    y = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    idx_h = np.pad(np.arange(H), p, mode="reflect")
    idx_w = np.pad(np.arange(W), p, mode="reflect")

    def vjp(g):
        tmp = np.zeros((g.shape[0], g.shape[1], H, g.shape[3]), dtype=g.dtype)
        np.add.at(tmp, (slice(None), slice(None), idx_h), g)
        gx = np.zeros((g.shape[0], g.shape[1], H, W), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), idx_w), tmp)
        return (gx,)

    return apply_op("pad_reflect", [x], y, vjp)
