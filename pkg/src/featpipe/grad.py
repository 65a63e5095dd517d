"""Tape-based differentiable numerics over dense float64 grids.

Provides a deliberately small operation vocabulary (convolution, tanh,
l2 pooling, subtractive normalization, a smooth maximum, elementwise
arithmetic and a few reductions) with reverse-mode gradients, a named
parameter store with momentum SGD, binary checkpoints and a central
finite-difference gradient checker.

Grids are C-order ``float64`` ndarrays.  Network inputs carry an
explicit leading batch axis, i.e. shape (batch, channels, height,
width); single samples are batch 1.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "ShapeError",
    "NumericsError",
    "Tensor",
    "ParamStore",
    "conv2d",
    "tanh_act",
    "l2_pool",
    "subtractive_norm",
    "soft_max_lme",
    "soft_max_lme_batched",
    "gaussian_kernel_2d",
    "relu",
    "absolute",
    "select",
    "gather_rows",
    "vec_norm",
    "sgd_step",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]


class ShapeError(ValueError):
    """Raised when input data or shapes violate an operation contract."""


class NumericsError(RuntimeError):
    """Raised on non-finite values where finiteness is required."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array plus an optional gradient and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: "TapeNode | None" = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node = node

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode pass from this tensor to every reachable leaf.

        Visits each tape node exactly once in reverse topological order
        and accumulates gradients additively at fan-out points.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed needs a scalar output, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.data.shape)
        for t in reversed(topo):
            node = t.node
            if node is None or t.grad is None:
                continue
            grads = node.op.backward(node, t.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar ------------------------------------------------------

    # keep numpy from consuming Tensor operands elementwise; with this
    # set, ndarray <op> Tensor defers to the reflected methods below
    __array_ufunc__ = None

    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p):
        return Pow.apply(self, p=float(p))

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


def wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode:
    """One recorded operation: identity, parents and saved intermediates."""

    __slots__ = ("op", "parents", "saved", "meta")

    def __init__(self, op: type, parents: tuple[Tensor, ...], meta: dict):
        self.op = op
        self.parents = parents
        self.saved: tuple = ()
        self.meta = meta


class Op:
    """Base class for differentiable operations.

    Subclasses implement ``forward(node, *arrays, **meta)`` returning an
    ndarray, and ``backward(node, grad)`` returning one gradient (or
    None) per parent, in order.
    """

    @classmethod
    def apply(cls, *args, **meta) -> Tensor:
        parents = tuple(wrap(a) for a in args)
        node = TapeNode(cls, parents, meta)
        out = cls.forward(node, *(p.data for p in parents), **meta)
        needs = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=needs, node=node if needs else None)

    @staticmethod
    def forward(node: TapeNode, *arrays: np.ndarray, **meta) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(node: TapeNode, grad: np.ndarray) -> tuple:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


class Add(Op):
    @staticmethod
    def forward(node, a, b):
        return a + b

    @staticmethod
    def backward(node, grad):
        a, b = node.parents
        return _unbroadcast(grad, a.data.shape), _unbroadcast(grad, b.data.shape)


class Sub(Op):
    @staticmethod
    def forward(node, a, b):
        return a - b

    @staticmethod
    def backward(node, grad):
        a, b = node.parents
        return _unbroadcast(grad, a.data.shape), _unbroadcast(-grad, b.data.shape)


class Mul(Op):
    @staticmethod
    def forward(node, a, b):
        node.saved = (a, b)
        return a * b

    @staticmethod
    def backward(node, grad):
        a, b = node.saved
        pa, pb = node.parents
        return _unbroadcast(grad * b, pa.data.shape), _unbroadcast(grad * a, pb.data.shape)


class Div(Op):
    @staticmethod
    def forward(node, a, b):
        node.saved = (a, b)
        return a / b

    @staticmethod
    def backward(node, grad):
        a, b = node.saved
        pa, pb = node.parents
        ga = _unbroadcast(grad / b, pa.data.shape)
        gb = _unbroadcast(-grad * a / (b * b), pb.data.shape)
        return ga, gb


class Neg(Op):
    @staticmethod
    def forward(node, a):
        return -a

    @staticmethod
    def backward(node, grad):
        return (-grad,)


class Pow(Op):
    @staticmethod
    def forward(node, a, p):
        node.saved = (a,)
        return a ** p

    @staticmethod
    def backward(node, grad):
        (a,) = node.saved
        p = node.meta["p"]
        return (grad * p * a ** (p - 1.0),)


class Abs(Op):
    """|x| with subgradient 0 at the kink."""

    @staticmethod
    def forward(node, a):
        node.saved = (np.sign(a),)
        return np.abs(a)

    @staticmethod
    def backward(node, grad):
        (s,) = node.saved
        return (grad * s,)


class Relu(Op):
    """max(0, x) with subgradient 0 at the kink."""

    @staticmethod
    def forward(node, a):
        mask = a > 0.0
        node.saved = (mask,)
        return np.where(mask, a, 0.0)

    @staticmethod
    def backward(node, grad):
        (mask,) = node.saved
        return (grad * mask,)


def absolute(x) -> Tensor:
    return Abs.apply(x)


def relu(x) -> Tensor:
    return Relu.apply(x)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------


class Sum(Op):
    @staticmethod
    def forward(node, a, axis=None, keepdims=False):
        node.meta["in_shape"] = a.shape
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(node, grad):
        shape = node.meta["in_shape"]
        axis = node.meta.get("axis")
        keepdims = node.meta.get("keepdims", False)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            grad = np.expand_dims(grad, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Op):
    @staticmethod
    def forward(node, a, axis=None, keepdims=False):
        node.meta["in_shape"] = a.shape
        out = np.mean(a, axis=axis, keepdims=keepdims)
        node.meta["count"] = a.size / max(out.size, 1)
        return out

    @staticmethod
    def backward(node, grad):
        shape = node.meta["in_shape"]
        axis = node.meta.get("axis")
        keepdims = node.meta.get("keepdims", False)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            grad = np.expand_dims(grad, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(grad, shape) / node.meta["count"],)


class MaxReduce(Op):
    """Max along one axis; gradient routes to the first maximal entry."""

    @staticmethod
    def forward(node, a, axis):
        out = np.max(a, axis=axis)
        expanded = np.expand_dims(out, axis)
        hit = a == expanded
        first = np.cumsum(hit, axis=axis) == 1
        node.saved = (hit & first,)
        return out

    @staticmethod
    def backward(node, grad):
        (mask,) = node.saved
        axis = node.meta["axis"]
        return (np.expand_dims(grad, axis) * mask,)


class Reshape(Op):
    @staticmethod
    def forward(node, a, shape):
        node.meta["in_shape"] = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(node, grad):
        return (grad.reshape(node.meta["in_shape"]),)


class Select(Op):
    """Take a single index along an axis (rank drops by one)."""

    @staticmethod
    def forward(node, a, axis, index):
        node.meta["in_shape"] = a.shape
        return np.take(a, index, axis=axis)

    @staticmethod
    def backward(node, grad):
        axis = node.meta["axis"]
        index = node.meta["index"]
        out = np.zeros(node.meta["in_shape"])
        sl = [slice(None)] * out.ndim
        sl[axis] = index
        out[tuple(sl)] = grad
        return (out,)


class Gather(Op):
    """Select rows along axis 0 by an integer index array."""

    @staticmethod
    def forward(node, a, indices):
        node.meta["in_shape"] = a.shape
        return a[np.asarray(indices, dtype=np.intp)]

    @staticmethod
    def backward(node, grad):
        out = np.zeros(node.meta["in_shape"])
        np.add.at(out, np.asarray(node.meta["indices"], dtype=np.intp), grad)
        return (out,)


def select(x, axis: int, index: int) -> Tensor:
    return Select.apply(x, axis=axis, index=index)


def gather_rows(x, indices) -> Tensor:
    return Gather.apply(x, indices=np.asarray(indices, dtype=np.intp))


class VecNorm(Op):
    """Euclidean norm along one axis; subgradient 0 at the origin."""

    @staticmethod
    def forward(node, a, axis):
        out = np.sqrt(np.sum(a * a, axis=axis))
        node.saved = (a, out)
        return out

    @staticmethod
    def backward(node, grad):
        a, out = node.saved
        axis = node.meta["axis"]
        safe = np.where(out > 0.0, out, 1.0)
        g = np.expand_dims(grad / safe, axis) * a
        g = np.where(np.expand_dims(out > 0.0, axis), g, 0.0)
        return (g,)


def vec_norm(x, axis: int = -1) -> Tensor:
    return VecNorm.apply(x, axis=axis)


# ---------------------------------------------------------------------------
# convolution and friends
# ---------------------------------------------------------------------------


def _windows(a: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding (kh, kw) windows of a (B, C, H, W) array, strided."""
    v = np.lib.stride_tricks.sliding_window_view(a, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


class Conv2d(Op):
    """2-D cross-correlation with bias.

    x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,).
    Output spatial extent is floor((H + 2*pad - kh)/stride) + 1 per axis.
    """

    @staticmethod
    def forward(node, x, w, b, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}"
            )
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {w.shape[0]} filters")
        kh, kw = w.shape[2], w.shape[3]
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(
                f"conv2d kernel {w.shape[2:]} larger than padded input {x.shape[2:]}"
            )
        node.saved = (x,)  # padded input
        win = _windows(x, kh, kw, stride)
        out = np.einsum("bchwij,ocij->bohw", win, w, optimize=True)
        return out + b[None, :, None, None]

    @staticmethod
    def backward(node, grad):
        (xp,) = node.saved
        px, pw, pb = node.parents
        w = pw.data
        stride = node.meta.get("stride", 1)
        pad = node.meta.get("pad", 0)
        kh, kw = w.shape[2], w.shape[3]
        gx = gw = gb = None
        if pb.requires_grad:
            gb = grad.sum(axis=(0, 2, 3))
        if pw.requires_grad:
            win = _windows(xp, kh, kw, stride)
            gw = np.einsum("bchwij,bohw->ocij", win, grad, optimize=True)
        if px.requires_grad:
            # scatter grad onto the stride lattice, then full-correlate with
            # the spatially flipped kernel
            b_, o_, oh, ow = grad.shape
            gd = np.zeros((b_, o_, (oh - 1) * stride + 1, (ow - 1) * stride + 1))
            gd[:, :, ::stride, ::stride] = grad
            gd = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wf = w[:, :, ::-1, ::-1]
            gwin = np.lib.stride_tricks.sliding_window_view(gd, (kh, kw), axis=(2, 3))
            gxp = np.einsum("bohwij,ocij->bchw", gwin, wf, optimize=True)
            # windows truncated by the stride leave a zero tail on the right
            full = np.zeros(xp.shape)
            full[:, :, : gxp.shape[2], : gxp.shape[3]] = gxp
            gx = full[:, :, pad: xp.shape[2] - pad, pad: xp.shape[3] - pad] if pad else full
        return gx, gw, gb


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


class TanhAct(Op):
    @staticmethod
    def forward(node, a):
        out = np.tanh(a)
        node.saved = (out,)
        return out

    @staticmethod
    def backward(node, grad):
        (out,) = node.saved
        return (grad * (1.0 - out * out),)


def tanh_act(x) -> Tensor:
    return TanhAct.apply(x)


class L2Pool(Op):
    """Root-mean-square pooling over square windows.

    out = sqrt(mean(x^2)) per window; all-zero windows get gradient 0.
    Trailing rows/columns that do not fill a window are dropped.
    """

    @staticmethod
    def forward(node, a, window, stride):
        if a.ndim != 4:
            raise ShapeError(f"l2_pool expects a 4-d input, got {a.shape}")
        if a.shape[2] < window or a.shape[3] < window:
            raise ShapeError(f"l2_pool window {window} exceeds spatial extent {a.shape[2:]}")
        win = _windows(a * a, window, window, stride)
        out = np.sqrt(win.mean(axis=(-2, -1)))
        node.saved = (a, out)
        return out

    @staticmethod
    def backward(node, grad):
        a, out = node.saved
        window = node.meta["window"]
        stride = node.meta["stride"]
        n = float(window * window)
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, grad / (n * safe), 0.0)
        gx = np.zeros_like(a)
        oh, ow = out.shape[2], out.shape[3]
        # each (di, dj) offset hits disjoint positions, so += accumulates
        # correctly even when windows overlap
        for di in range(window):
            for dj in range(window):
                src = a[:, :, di: di + oh * stride: stride, dj: dj + ow * stride: stride]
                gx[:, :, di: di + oh * stride: stride, dj: dj + ow * stride: stride] += scale * src
        return (gx,)


def l2_pool(x, window: int, stride: int | None = None) -> Tensor:
    return L2Pool.apply(x, window=window, stride=stride if stride is not None else window)


class ReflectPad2d(Op):
    @staticmethod
    def forward(node, a, pad):
        if a.shape[2] <= pad or a.shape[3] <= pad:
            raise ShapeError(f"reflect pad {pad} needs spatial extent > {pad}, got {a.shape[2:]}")
        return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")

    @staticmethod
    def backward(node, grad):
        pad = node.meta["pad"]
        (p,) = node.parents
        h, w = p.data.shape[2], p.data.shape[3]
        idx_h = np.pad(np.arange(h), (pad, pad), mode="reflect")
        idx_w = np.pad(np.arange(w), (pad, pad), mode="reflect")
        fold_h = np.zeros(grad.shape[:2] + (h, grad.shape[3]))
        np.add.at(fold_h, (slice(None), slice(None), idx_h), grad)
        out = np.zeros(p.data.shape)
        np.add.at(out, (slice(None), slice(None), slice(None), idx_w), fold_h)
        return (out,)


class DepthwiseBlur(Op):
    """Valid-mode per-channel correlation with a fixed (non-learned) kernel."""

    @staticmethod
    def forward(node, a, kernel):
        kh, kw = kernel.shape
        node.saved = (kernel,)
        win = _windows(a, kh, kw, 1)
        return np.einsum("bchwij,ij->bchw", win, kernel, optimize=True)

    @staticmethod
    def backward(node, grad):
        (kernel,) = node.saved
        kh, kw = kernel.shape
        gd = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        win = np.lib.stride_tricks.sliding_window_view(gd, (kh, kw), axis=(2, 3))
        return (np.einsum("bchwij,ij->bchw", win, kernel[::-1, ::-1], optimize=True), None)


def gaussian_kernel_2d(radius: int, sigma: float = 1.0) -> np.ndarray:
    """Normalized (2r+1)^2 Gaussian window."""
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def subtractive_norm(x, radius: int = 2, sigma: float = 1.0) -> Tensor:
    """Subtract a reflected-border Gaussian local mean from each channel."""
    padded = ReflectPad2d.apply(x, pad=radius)
    blurred = DepthwiseBlur.apply(padded, gaussian_kernel_2d(radius, sigma))
    return Sub.apply(x, blurred)


class SoftMaxLME(Op):
    """log-mean-exp smooth maximum over all non-batch axes.

    Computed with max subtraction; a sharpness of 1 is the plain
    log-mean-exp.  Input (B, ...) reduces to (B,), other ranks reduce
    to a scalar.
    """

    @staticmethod
    def forward(node, a, sharpness=1.0, batched=True):
        if batched and a.ndim > 1:
            axes = tuple(range(1, a.ndim))
        else:
            axes = tuple(range(a.ndim))
        s = sharpness
        m = np.max(a, axis=axes, keepdims=True)
        e = np.exp(s * (a - m))
        mean = e.mean(axis=axes, keepdims=True)
        out = (m + np.log(mean) / s).reshape(a.shape[: a.ndim - len(axes)])
        node.saved = (e / e.sum(axis=axes, keepdims=True), axes)
        return out

    @staticmethod
    def backward(node, grad):
        weights, axes = node.saved
        g = np.asarray(grad).reshape(grad.shape + (1,) * len(axes))
        return (g * weights,)


def soft_max_lme(x, sharpness: float = 1.0) -> Tensor:
    """Smooth maximum of a whole score map (scalar output)."""
    return SoftMaxLME.apply(x, sharpness=sharpness, batched=False)


def soft_max_lme_batched(x, sharpness: float = 1.0) -> Tensor:
    """Smooth maximum per sample: (B, ...) reduces to (B,)."""
    return SoftMaxLME.apply(x, sharpness=sharpness, batched=True)


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameter grids with gradients and momentum state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        arr = _as_array(value)
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"parameter {name!r} contains non-finite entries")
        t = Tensor(arr.copy(), requires_grad=trainable)
        self._params[name] = t
        return t

    def put(self, name: str, t: Tensor) -> Tensor:
        """Insert an existing tensor by reference.

        Unlike `add` this shares the object, so gradients accumulated
        through the store land on the caller's tensor; useful when a
        parameter slot should be driven by an external graph leaf."""
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        if not isinstance(t, Tensor):
            raise ShapeError(f"put expects a Tensor for {name!r}, got {type(t).__name__}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def freeze(self, prefix: str = "") -> None:
        for name, t in self._params.items():
            if name.startswith(prefix):
                t.requires_grad = False

    def unfreeze(self, prefix: str = "") -> None:
        for name, t in self._params.items():
            if name.startswith(prefix):
                t.requires_grad = True

    def namespace_bytes(self, prefix: str = "") -> bytes:
        """Serialized value bytes of all parameters under a prefix."""
        chunks = []
        for name in self.names():
            if name.startswith(prefix):
                chunks.append(name.encode("utf-8"))
                chunks.append(self._params[name].data.astype("<f8").tobytes())
        return b"".join(chunks)

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self.items():
            other.add(name, t.data.copy(), trainable=t.requires_grad)
        for name, v in self._velocity.items():
            other._velocity[name] = v.copy()
        return other

    def update(self, other: "ParamStore") -> None:
        for name, t in other.items():
            if name in self._params:
                raise ShapeError(f"duplicate parameter name {name!r} on merge")
            self._params[name] = t


def sgd_step(store: ParamStore, lr: float = 0.01, momentum: float = 0.9) -> ParamStore:
    """One momentum SGD step over every trainable parameter with a gradient.

    Velocity update v = momentum * v + g, parameter update p -= lr * v.
    A non-finite gradient rejects the whole step.  All gradient buffers
    are zeroed afterwards.
    """
    updates: list[tuple[str, Tensor, np.ndarray]] = []
    for name, t in store.items():
        if not t.requires_grad or t.grad is None:
            continue
        if not np.all(np.isfinite(t.grad)):
            store.zero_grads()
            raise NumericsError(f"non-finite gradient for parameter {name!r}; step rejected")
        updates.append((name, t, t.grad))
    for name, t, g in updates:
        v = store._velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + g
        store._velocity[name] = v
        t.data -= lr * v
    store.zero_grads()
    return store


CHECKPOINT_MAGIC = b"LIFTCKPT"
_CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore) -> None:
    """Write all parameters, sorted by name, in the binary checkpoint format.

    Layout: 8 magic bytes, u32 version, then per parameter: u32 name
    length, UTF-8 name, u32 rank, u64 extents, little-endian f64 data.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", _CHECKPOINT_VERSION))
        for name, t in store.items():
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", t.data.ndim))
            for ext in t.data.shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamStore:
    """Read a checkpoint; every loaded value must be finite."""
    store = ParamStore()
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ShapeError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ShapeError(f"truncated checkpoint data for parameter {name!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            store.add(name, arr)
    return store


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    eps: float = 1e-4,
    entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative discrepancy between analytic and central differences.

    `fn` maps a grid tensor to a scalar tensor.  Every entry is checked
    unless `entries` caps the count, in which case a random subset is
    drawn from `rng`.  Relative error for one entry is
    |analytic - numeric| / max(|numeric|, 1e-5), all in double
    precision.  The floor keeps truncation noise on near-zero entries
    from dominating the report.
    """
    point = _as_array(point)
    leaf = Tensor(point.copy(), requires_grad=True)
    out = fn(leaf)
    if out.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar-valued function, got {out.shape}")
    out.backward()
    analytic = np.zeros_like(point) if leaf.grad is None else leaf.grad
    flat_idx = np.arange(point.size)
    if entries is not None and entries < point.size:
        if rng is None:
            rng = np.random.default_rng(0)
        flat_idx = rng.choice(point.size, size=entries, replace=False)
    worst = 0.0
    flat = point.reshape(-1)
    for idx in flat_idx:
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = fn(Tensor(point.copy())).item()
        flat[idx] = orig - eps
        lo = fn(Tensor(point.copy())).item()
        flat[idx] = orig
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[idx]
        rel = abs(a - numeric) / max(abs(numeric), 1e-5)
        worst = max(worst, rel)
    return worst
