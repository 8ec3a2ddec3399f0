"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Provides exactly the primitives the fusion model needs: elementwise
arithmetic, matmul, 2-D valid convolution, 2x2 max pooling, global average
pooling, dense layers, activations, channel stacking, concatenation, and
inverted dropout. Every op validates shapes, raises on non-finite outputs,
and records a backward closure; `backward` walks the graph in reverse
topological order, accumulating into `.grad` until `zero_grad` is called.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"FUSN"
CHECKPOINT_VERSION = 1

# Test-only fault hook: set to an op name to corrupt that op's backward
# rule (gradcheck must then fail naming the op).
_FAULT_OP = None


def _fault_gain(op: str) -> float:
    return 1.01 if _FAULT_OP == op else 1.0


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.data.copy()

    # operator sugar; scalars are wrapped as constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Wrap an op result, checking finiteness and wiring the graph."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward, "square")


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    size = a.data.size

    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g) / size))

    return _make(np.asarray(a.data.mean()), (a,), backward, "mean")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(np.maximum(a.data, 0.0), (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        g = g * _fault_gain("matmul")
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")

    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), backward, "transpose")


def concat(parts: list) -> Tensor:
    """Concatenate scalars and 1-D tensors into one vector."""
    for p in parts:
        if p.data.ndim > 1:
            raise ValueError(f"concat expects scalars or vectors, got shape {p.shape}")
    sizes = [p.data.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi].reshape(p.shape))

    flat = np.concatenate([p.data.reshape(-1) for p in parts])
    return _make(flat, tuple(parts), backward, "concat")


def stack_channels(maps: list) -> Tensor:
    """Stack [H, W] maps into a [C, H, W] tensor."""
    shape = maps[0].shape
    for m in maps:
        if m.data.ndim != 2 or m.shape != shape:
            raise ValueError(
                f"stack_channels expects equal 2-D maps, got {[m.shape for m in maps]}"
            )

    def backward(g):
        for c, m in enumerate(maps):
            _accumulate(m, g[c])

    return _make(np.stack([m.data for m in maps]), tuple(maps), backward, "stack_channels")


def conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1: [C_in,H,W] * [C_out,C_in,kH,kW]."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ValueError(
            f"conv2d expects input [C,H,W] and kernels [O,C,kH,kW], "
            f"got {x.shape} and {kernels.shape}"
        )
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in or kh > h or kw > w:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} vs kernels {kernels.shape}"
        )
    windows = sliding_window_view(x.data, (kh, kw), axis=(1, 2))  # [C,H',W',kh,kw]
    out = np.tensordot(windows, kernels.data, axes=([0, 3, 4], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(2, 0, 1))  # [C_out,H',W']

    def backward(g):
        g = g * _fault_gain("conv2d")
        gk = np.tensordot(g, windows, axes=([1, 2], [1, 2]))  # [C_out,C,kh,kw]
        _accumulate(kernels, gk)
        padded = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # [C_out,H,W,kh,kw]
        flipped = kernels.data[:, :, ::-1, ::-1]
        gx = np.tensordot(gwin, flipped, axes=([0, 3, 4], [0, 2, 3]))  # [H,W,C]
        _accumulate(x, np.ascontiguousarray(gx.transpose(2, 0, 1)))

    return _make(out, (x, kernels), backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd row/column is dropped.

    Gradient routes to the first (row-major) maximum of each window.
    """
    if x.data.ndim != 3:
        raise ValueError(f"max_pool2d expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"max_pool2d needs H,W >= 2, got {x.shape}")
    h2, w2 = h // 2, w // 2
    trimmed = x.data[:, : h2 * 2, : w2 * 2]
    windows = trimmed.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(g):
        g = g * _fault_gain("max_pool2d")
        gx = np.zeros_like(x.data)
        ci, hi, wi = np.indices((c, h2, w2))
        gx[ci, 2 * hi + argmax // 2, 2 * wi + argmax % 2] = g
        _accumulate(x, gx)

    return _make(out, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [C,H,W] -> [C]."""
    if x.data.ndim != 3:
        raise ValueError(f"global_avg_pool expects [C,H,W], got {x.shape}")
    c, h, w = x.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, None, None] / (h * w), x.shape).copy())

    return _make(x.data.mean(axis=(1, 2)), (x,), backward, "global_avg_pool")


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis: [C,H,W] -> [H,W]."""
    if x.data.ndim != 3:
        raise ValueError(f"channel_mean expects [C,H,W], got {x.shape}")
    c = x.shape[0]

    def backward(g):
        _accumulate(x, np.broadcast_to(g / c, x.shape).copy())

    return _make(x.data.mean(axis=0), (x,), backward, "channel_mean")


def expand_channel(x: Tensor) -> Tensor:
    """Add a leading singleton channel axis: [H,W] -> [1,H,W]."""
    if x.data.ndim != 2:
        raise ValueError(f"expand_channel expects [H,W], got {x.shape}")

    def backward(g):
        _accumulate(x, g[0])

    return _make(x.data[None, :, :], (x,), backward, "expand_channel")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map: weights [m,n] @ x [n] + bias [m]."""
    if x.data.ndim != 1 or weights.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError(
            f"dense expects x [n], weights [m,n], bias [m], got "
            f"{x.shape}, {weights.shape}, {bias.shape}"
        )
    m, n = weights.shape
    if x.shape[0] != n or bias.shape[0] != m:
        raise ValueError(
            f"dense shape mismatch: x {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )

    def backward(g):
        g = g * _fault_gain("dense")
        _accumulate(weights, np.outer(g, x.data))
        _accumulate(x, weights.data.T @ g)
        _accumulate(bias, g)

    return _make(weights.data @ x.data + bias.data, (x, weights, bias), backward, "dense")


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None = None,
            train: bool = True) -> Tensor:
    """Inverted dropout: keeps units with probability keep_prob and scales
    them by 1/keep_prob; identity in eval mode. The mask is a constant of
    the graph."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0,1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an RNG")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob

    def backward(g):
        _accumulate(x, g * mask)

    return _make(x.data * mask, (x,), backward, "dropout")


def backward(loss: Tensor) -> None:
    """Populate .grad with d(loss)/d(tensor) for every reachable tensor.

    Gradients accumulate across calls; zero them explicitly between steps.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def parameter(shape, rng: np.random.Generator, fan_in: int, fan_out: int,
              name: str = "") -> Tensor:
    """Scaled-uniform initialized trainable tensor: U(-a, a) with
    a = sqrt(6/(fan_in+fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
    return t


def zeros_parameter(shape, name: str = "") -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def save_checkpoint(path, named_tensors: list) -> None:
    """Write (name, array) pairs as a single binary checkpoint."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(named_tensors)))
        for name, array in named_tensors:
            encoded = name.encode("utf-8")
            arr = np.asarray(array, dtype="<f8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> list:
    """Read back the ordered (name, array) pairs of a checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack("<HI", blob[4:10])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset) if ndim else ()
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        entries.append((name, data.reshape(shape).copy()))
    return entries


def finite_difference_gradients(build_loss, params: dict, h: float = 1e-5) -> dict:
    """Max relative gradient error per named parameter.

    `build_loss()` must rebuild the scalar loss from the live tensors in
    `params`. Error metric: |analytic - central difference| / max(1, |analytic|),
    maximized over elements.
    """
    for t in params.values():
        t.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = {name: t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for name, t in params.items()}
    errors = {}
    for name, t in params.items():
        worst = 0.0
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            up = float(build_loss().data)
            flat[i] = original - h
            down = float(build_loss().data)
            flat[i] = original
            fd = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
        errors[name] = worst
    return errors
