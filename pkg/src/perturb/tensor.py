"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: just enough primitives for compact convolutional
classifiers on 48x48 grayscale inputs (convolution, pooling, dense
layers, sigmoid gating, fused softmax cross-entropy).

Gradient semantics:

* ``backward(loss)`` walks the graph once in reverse topological order
  and *adds* into ``Tensor.grad`` of every tensor with
  ``requires_grad=True``.  Gradients accumulate across backward calls;
  call ``zero_grad`` between optimizer steps.
* A tape is single-use.  Calling ``backward`` a second time on the same
  loss (or on a loss whose graph was already consumed) raises
  ``TapeError`` rather than silently double-counting.
* Graphs are only recorded while gradients are enabled and at least one
  input requires them; wrap pure inference in ``no_grad()`` to skip the
  bookkeeping entirely.

Non-finite values are checked at op boundaries only when the debug flag
is on (``set_debug_finite(True)``); the hot path stays branch-free.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradTape",
    "TensorError",
    "ShapeError",
    "NumericError",
    "TapeError",
    "no_grad",
    "grad_enabled",
    "set_debug_finite",
    "backward",
    "zero_grad",
    "elementwise",
    "relu",
    "sigmoid",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "flatten",
    "dense",
    "channel_max",
    "channel_mean",
    "concat_channels",
    "softmax_cross_entropy",
    "softmax_probs",
    "finite_difference_check",
]


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operands have incompatible or invalid shapes."""


class NumericError(TensorError):
    """Non-finite values detected (debug mode only)."""


class TapeError(TensorError):
    """Backward misuse: non-scalar loss or a tape consumed twice."""


_GRAD_ENABLED = True
_DEBUG_FINITE = False


def set_debug_finite(enabled: bool) -> None:
    """Toggle NaN/Inf checking at op boundaries (off by default)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Context manager: skip graph recording for pure forward passes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    """A float64 ndarray plus an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor constructor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "GradTape":
        return backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar (broadcast-aware) ------------------------------
    def __add__(self, other):
        return _add(self, _as_tensor(other))

    def __radd__(self, other):
        return _add(_as_tensor(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_as_tensor(other)))

    def __rsub__(self, other):
        return _add(_as_tensor(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return _mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TensorError("division is only supported by python scalars")
        return _mul(self, _as_tensor(1.0 / float(other)))

    def sum(self) -> "Tensor":
        return _sum(self)

    def mean(self) -> "Tensor":
        return _mul(_sum(self), _as_tensor(1.0 / self.data.size))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def _raise_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    _check_finite(data, f"output of {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


class GradTape:
    """Reverse-topological record of every op between the params and a loss.

    Built on demand by ``backward``; exposed mostly so tests can assert
    ordering and single-use behaviour.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # topological order, loss last

    @staticmethod
    def build(root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._grad_fn is not None and node._consumed:
                raise TapeError("graph already consumed by a previous backward; rebuild the forward pass")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return GradTape(order)


def backward(loss: Tensor) -> GradTape:
    """Run reverse-mode accumulation from a scalar loss. Returns the tape."""
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward already ran on this loss; rebuild the forward pass")
    tape = GradTape.build(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._grad_fn is not None:
            node._grad_fn(node.grad)
            node._consumed = True
    loss._consumed = True
    return tape


def zero_grad(params) -> None:
    """Clear gradients on an iterable (or dict) of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for t in values:
        t.zero_grad()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _make(data, (a, b), grad_fn, "add")


def _neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        _accum(a, -g)

    return _make(-a.data, (a,), grad_fn, "neg")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(data, (a, b), grad_fn, "mul")


def _sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def grad_fn(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), grad_fn, "sum")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def grad_fn(g):
        _accum(x, g * (x.data > 0.0))

    return _make(data, (x,), grad_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), grad_fn, "sigmoid")


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, x: Tensor) -> Tensor:
    """Dispatch an elementwise nonlinearity by name ('relu' or 'sigmoid')."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise TensorError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(x)


def _check_4d(t: Tensor, name: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (batch, channels, h, w), got shape {t.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation via im2col and one GEMM.

    x: (B, C, H, W); kernel: (O, C, kh, kw); bias: (O,) or None.
    """
    _check_4d(x, "conv2d input")
    _check_4d(kernel, "conv2d kernel")
    if stride < 1 or int(stride) != stride:
        raise ShapeError(f"stride must be a positive integer, got {stride}")
    if padding < 0 or int(padding) != padding:
        raise ShapeError(f"padding must be a non-negative integer, got {padding}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"kernel expects {Ck} input channels, input has {C}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"bias must have shape ({O},), got {bias.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}"
        )
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, kh, kw) -> (C*kh*kw, B*Ho*Wo) so the kernel matmul is one dgemm
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)
    wmat = kernel.data.reshape(O, C * kh * kw)
    out = (wmat @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        if kernel.requires_grad:
            _accum(kernel, (gmat @ cols.T).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(C, kh, kw, B, Ho, Wo)
            dxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, i, j
                    ].transpose(1, 0, 2, 3)
            _accum(x, dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, grad_fn, "conv2d")


def _pool_prep(x: Tensor, kernel: int, stride: int | None, op: str):
    _check_4d(x, f"{op} input")
    if kernel < 1:
        raise ShapeError(f"{op} kernel must be >= 1, got {kernel}")
    stride = kernel if stride is None else stride
    if stride < 1:
        raise ShapeError(f"{op} stride must be >= 1, got {stride}")
    B, C, H, W = x.shape
    if kernel > H or kernel > W:
        raise ShapeError(f"{op} window {kernel}x{kernel} larger than input {H}x{W}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return stride, B, C, H, W, Ho, Wo, win


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient routes to the first maximum in each window."""
    stride, B, C, H, W, Ho, Wo, win = _pool_prep(x, kernel, stride, "maxpool2d")
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = (np.arange(Ho) * stride)[None, None, :, None] + arg // kernel
    cols = (np.arange(Wo) * stride)[None, None, None, :] + arg % kernel
    bidx = np.arange(B)[:, None, None, None]
    cidx = np.arange(C)[None, :, None, None]

    def grad_fn(g):
        dx = np.zeros((B, C, H, W))
        np.add.at(dx, (bidx, cidx, rows, cols), g)
        _accum(x, dx)

    return _make(np.ascontiguousarray(out), (x,), grad_fn, "maxpool2d")


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride, B, C, H, W, Ho, Wo, win = _pool_prep(x, kernel, stride, "avgpool2d")
    out = win.mean(axis=(-2, -1))
    inv = 1.0 / (kernel * kernel)

    def grad_fn(g):
        dx = np.zeros((B, C, H, W))
        gs = g * inv
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gs
        _accum(x, dx)

    return _make(np.ascontiguousarray(out), (x,), grad_fn, "avgpool2d")


def flatten(x: Tensor) -> Tensor:
    """(B, ...) -> (B, features)."""
    if x.ndim < 2:
        raise ShapeError(f"flatten needs a batch dimension, got shape {x.shape}")
    B = x.shape[0]
    shape = x.shape

    def grad_fn(g):
        _accum(x, g.reshape(shape))

    return _make(x.data.reshape(B, -1), (x,), grad_fn, "flatten")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: (B, F) @ (F, O) + (O,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense mismatch: input features {x.shape[1]} vs weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
        out = out + bias.data

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, g @ weight.data.T)
        if weight.requires_grad:
            _accum(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "dense")


def channel_max(x: Tensor) -> Tensor:
    """Max over the channel axis, keepdims: (B, C, H, W) -> (B, 1, H, W)."""
    _check_4d(x, "channel_max input")
    arg = x.data.argmax(axis=1)
    out = np.take_along_axis(x.data, arg[:, None], axis=1)
    B, C, H, W = x.shape
    bidx = np.arange(B)[:, None, None]
    hidx = np.arange(H)[None, :, None]
    widx = np.arange(W)[None, None, :]

    def grad_fn(g):
        dx = np.zeros((B, C, H, W))
        np.add.at(dx, (bidx, arg, hidx, widx), g[:, 0])
        _accum(x, dx)

    return _make(out, (x,), grad_fn, "channel_max")


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis, keepdims: (B, C, H, W) -> (B, 1, H, W)."""
    _check_4d(x, "channel_mean input")
    C = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def grad_fn(g):
        _accum(x, np.broadcast_to(g / C, x.shape).copy())

    return _make(out, (x,), grad_fn, "channel_mean")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat operand")
    _check_4d(b, "concat operand")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat operands must match outside channels: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def grad_fn(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), grad_fn, "concat_channels")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis of a plain array; rows sum to 1."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch, fused with softmax.

    Stabilized by max subtraction; the gradient is (softmax - onehot) / B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels must be ({logits.shape[0]},), got {y.shape}")
    K = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise IndexError(f"label out of range [0, {K}): {int(y[(y < 0) | (y >= K)][0])}")
    B = logits.shape[0]
    logp = _log_softmax(logits.data)
    loss = np.asarray(-logp[np.arange(B), y].mean())

    def grad_fn(g):
        probs = np.exp(logp)
        probs[np.arange(B), y] -= 1.0
        _accum(logits, float(g) * probs / B)

    return _make(loss, (logits,), grad_fn, "softmax_cross_entropy")


def finite_difference_check(f, x: Tensor, h: float = 1e-5, coords=None) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be re-runnable.
    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.  ``coords`` limits the
    check to a subset of flat indices (the default checks every one).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise TapeError(f"finite_difference_check needs a scalar-valued f, got shape {out.shape}")
    backward(out)
    analytic = np.zeros(x.data.size) if probe.grad is None else probe.grad.reshape(-1).copy()

    flat = x.data.reshape(-1).copy()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for idx in coords:
        bumped = flat.copy()
        bumped[idx] += h
        with no_grad():
            fp = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[idx] -= 2 * h
        with no_grad():
            fm = f(Tensor(bumped.reshape(x.shape))).item()
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        if err > worst:
            worst = err
    return worst
