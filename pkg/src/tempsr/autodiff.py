"""Minimal reverse-mode automatic differentiation on numpy arrays.

Provides exactly the differentiable operations the super-resolution model
needs (matmul, same-padded conv2d, row softmax, a small elementwise suite)
plus a finite-difference gradient checker. Values are float32 by default;
tests select float64 by passing float64 arrays in.

Concurrency contract: tensor values are immutable once created; gradient
accumulation belongs to a single training context. Inference over a frozen
parameter set is safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value was produced while debug checks are enabled."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every op (off by default, it costs a pass)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A node in the computation graph: dense array + optional gradient.

    ``requires_grad`` marks trainable leaves; interior nodes inherit it from
    their parents. ``backward()`` may only be called on scalar outputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        if _DEBUG_CHECKS and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor constructed with non-finite values")

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> None:
        """Reverse-mode pass from this scalar; accumulates into leaf ``grad``s."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build a graph node. If no parent needs gradients the node is a leaf."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # first contribution is kept by reference (every consumer's backward has
    # already run before this tensor's own backward reads it); later
    # contributions add out of place so shared buffers are never mutated
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a_shape, b_shape) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"shapes {a_shape} and {b_shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return make_op(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return make_op(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return make_op(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make_op(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return make_op(-a.data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient at 0 is 0 (np.sign convention)."""
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def backward(g):
        _accumulate(a, g * sign)

    return make_op(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return make_op(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return make_op(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return make_op(data, (a,), backward)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    mask = a.data >= 0
    data = np.where(mask, a.data, a.data * alpha).astype(a.dtype, copy=False)

    def backward(g):
        _accumulate(a, np.where(mask, g, g * alpha))

    return make_op(data, (a,), backward)


def mean_over_axes(a: Tensor, axes, keepdims: bool = False) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % a.ndim for ax in axes)
    data = a.data.mean(axis=axes, keepdims=keepdims)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape) / count)

    return make_op(data, (a,), backward)


def sum_over_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % a.ndim for ax in axes)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return make_op(data, (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check_broadcast(a.shape, shape)
    data = np.broadcast_to(a.data, shape)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return make_op(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return make_op(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return make_op(data, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only; gradients scatter back into place."""
    data = a.data[idx]

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
            a.grad[idx] += g
        else:
            scattered = np.zeros_like(a.data)
            scattered[idx] = g
            a.grad = a.grad + scattered

    return make_op(data, (a,), backward)


# ---------------------------------------------------------------------------
# matmul / softmax / conv2d


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return make_op(data, (a, b), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax_rows requires last axis length >= 1")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, data * (g - inner))

    return make_op(data, (a,), backward)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-pad for 'same' output and unfold into [C*k*k, B*H*W] columns.

    Channel-major layout so the convolution is one large GEMM.
    """
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    b, c, hp, wp = xp.shape
    h, w = hp - 2 * p, wp - 2 * p
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, b, h, w), strides=(s1, s2, s3, s0, s2, s3)
    )
    return view.reshape(c * k * k, b * h * w)


def conv2d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-D cross-correlation: [B,C,H,W] ⊛ [O,C,k,k] -> [B,O,H,W].

    Stride 1 only; the kernel must be odd so padding k//2 preserves H and W.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, c_in, h, width = x.shape
    c_out, c_k, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if c_k != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in} channels, kernel expects {c_k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    k = kh
    cols = _im2col(x.data, k)                       # [C·k², B·H·W]
    w_mat = w.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w_mat, cols)                    # [O, B·H·W]
    out = out.reshape(c_out, bsz, h, width).transpose(1, 0, 2, 3)
    out = out + bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, bsz * h * width)
        if w.requires_grad:
            gw = np.matmul(g2, cols.T)
            _accumulate(w, gw.reshape(c_out, c_in, k, k))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, g2)          # [C·k², B·H·W]
            dcols = dcols.reshape(c_in, k, k, bsz, h, width)
            p = k // 2
            dxp = np.zeros((bsz, c_in, h + 2 * p, width + 2 * p), dtype=g.dtype)
            for di in range(k):
                for dj in range(k):
                    dxp[:, :, di : di + h, dj : dj + width] += dcols[:, di, dj].transpose(1, 0, 2, 3)
            _accumulate(x, dxp[:, :, p : p + h, p : p + width])

    return make_op(out, (x, w, bias), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients against central differences."""

    per_input: list[float] = field(default_factory=list)
    max_rel_err: float = 0.0
    tolerance: float = 0.0
    passed: bool = False

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.1e})"


_MAX_GRADCHECK_ELEMENTS = 10_000


def check_gradients(f, inputs: list[Tensor], step: float | None = None, tolerance: float | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` to central differences.

    Uses a per-element step ``step * max(1, |v|)``. Defaults: step 1e-3 and
    tolerance 1e-3 for float32 inputs; step 1e-5 (the roundoff/truncation
    sweet spot) and tolerance 1e-6 for float64. Raises if ``f`` is not scalar
    or the inputs exceed the element budget.
    """
    total = sum(t.size for t in inputs)
    if total > _MAX_GRADCHECK_ELEMENTS:
        raise ValueError(f"check_gradients limited to {_MAX_GRADCHECK_ELEMENTS} elements, got {total}")
    is64 = all(t.dtype == np.float64 for t in inputs)
    if step is None:
        step = 1e-5 if is64 else 1e-3
    if tolerance is None:
        tolerance = 1e-6 if is64 else 1e-3
    floor = 1e-6 if is64 else 1e-3

    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ShapeError("check_gradients requires a scalar-valued function")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    report = GradCheckReport(tolerance=tolerance)
    for t, a_grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        numeric = np.zeros_like(a_flat)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            f_plus = float(f(*inputs).data)
            flat[i] = orig - h
            f_minus = float(f(*inputs).data)
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * h)
        # deviations are normalized by the input's gradient scale; a pure
        # per-element ratio would turn finite-difference roundoff noise on
        # zero-gradient entries into spurious disagreement
        scale = max(np.abs(a_flat).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        rel = np.abs(a_flat - numeric) / scale
        report.per_input.append(float(rel.max(initial=0.0)))
    report.max_rel_err = max(report.per_input) if report.per_input else 0.0
    report.passed = report.max_rel_err <= tolerance
    return report


def parameter(data, dtype=None) -> Tensor:
    """Convenience constructor for a trainable leaf."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def uniform_fan_in(shape, fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialized trainable tensor."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
