"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable value in the package is a :class:`Tensor`.  Operations
record their operands and a closure that pushes the output gradient back to
them; :meth:`Tensor.backward` walks that graph in reverse topological order.

Gradients accumulate (``+=``) so a tensor used in several places, or a
parameter shared by several masked clones, receives the sum of all
contributions.  Call :func:`zero_grad` between optimizer steps.

Broadcasting is deliberately narrow: the only implicit expansion is adding a
``(n,)`` or ``(1, n)`` bias to every row of a 2-D tensor.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-5

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_non_scalar(self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every upstream leaf.

        Without ``grad`` the tensor must hold a single value and is seeded
        with 1.  Intermediate gradients are accumulated on every node.
        """
        if grad is None:
            if self.data.size != 1:
                _raise_non_scalar(self.shape)
            grad = np.ones_like(self.data)
        order = topological_order(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node.requires_grad and node._backward is not None and node.grad is not None:
                node._backward()

    # operator sugar; all real work lives in the module-level functions
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __getitem__(self, key):
        return slice_(self, key)


def _raise_non_scalar(shape):
    raise ShapeError(f"expected a single-element tensor, got shape {shape}")


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    track = _needs_grad(*parents)
    return Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), op=op)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, operands before results, each once."""
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
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = _result(a.data.T.copy(), (a,), "transpose")

    def backward():
        a._accumulate(out.grad.T)

    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row bias of width ``a.shape[-1]``."""
    bias = False
    if a.shape != b.shape:
        if a.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])):
            bias = True
        else:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")
    out = _result(a.data + b.data, (a, b), "add")

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad.sum(axis=0).reshape(b.shape) if bias else out.grad)

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = _result(a.data - b.data, (a, b), "sub")

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(-out.grad)

    out._backward = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _result(a.data * c, (a,), "scale")

    def backward():
        a._accumulate(out.grad * c)

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = _result(a.data * b.data, (a, b), "mul")

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * b.data)
        if b.requires_grad:
            b._accumulate(out.grad * a.data)

    out._backward = backward
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    if a.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (a,), "softmax")

    def backward():
        g = out.grad
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = backward
    return out


def log_softmax(a: Tensor) -> Tensor:
    if a.shape[-1] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = _result(y, (a,), "log_softmax")

    def backward():
        g = out.grad
        a._accumulate(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


def layer_norm(
    a: Tensor,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    """Normalize each row over the last axis, optionally followed by an affine map."""
    width = a.shape[-1]
    if gain is not None and gain.shape != (width,):
        raise ShapeError(f"layer_norm gain must have shape ({width},), got {gain.shape}")
    if bias is not None and bias.shape != (width,):
        raise ShapeError(f"layer_norm bias must have shape ({width},), got {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = tuple(t for t in (a, gain, bias) if t is not None)
    out = _result(y, parents, "layer_norm")

    def backward():
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        if gain is not None and gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if a.requires_grad:
            gx = g * gain.data if gain is not None else g
            a._accumulate(
                inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )

    out._backward = backward
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = _result(x * cdf, (a,), "gelu")

    def backward():
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate(out.grad * (cdf + x * pdf))

    out._backward = backward
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of one channel-first image ``(C, H, W)``.

    ``weight`` is ``(C_out, C_in // groups, kh, kw)``; zero padding is applied
    symmetrically on both spatial axes.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W) and weight (O,I,kh,kw), got {x.shape}, {weight.shape}")
    c_in, h, w = x.shape
    c_out, c_per, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_per != c_in // groups:
        raise ShapeError(f"weight expects {c_per} input channels per group, input gives {c_in // groups}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    o_per = c_out // groups

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    # windows: (C, ho, wo, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win_g = win.reshape(groups, c_per, ho, wo, kh, kw)
    w_g = weight.data.reshape(groups, o_per, c_per, kh, kw)
    y = np.einsum("gcyxij,gocij->goyx", win_g, w_g, optimize=True).reshape(c_out, ho, wo)
    if bias is not None:
        y = y + bias.data[:, None, None]
    parents = tuple(t for t in (x, weight, bias) if t is not None)
    out = _result(y, parents, "conv2d")

    def backward():
        g = out.grad.reshape(groups, o_per, ho, wo)
        if bias is not None and bias.requires_grad:
            bias._accumulate(out.grad.sum(axis=(1, 2)))
        if weight.requires_grad:
            gw = np.einsum("goyx,gcyxij->gocij", g, win_g, optimize=True)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gwin = np.einsum("goyx,gocij->gcyxij", g, w_g, optimize=True).reshape(c_in, ho, wo, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gwin[..., i, j]
            x._accumulate(gxp[:, padding : padding + h, padding : padding + w])

    out._backward = backward
    return out


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    y = a.data.sum() if axis is None else a.data.sum(axis=axis)
    out = _result(np.asarray(y, dtype=np.float64), (a,), "sum")

    def backward():
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    out._backward = backward
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum_(a, axis), 1.0 / n)


def l2sq(a: Tensor) -> Tensor:
    """Sum of squared entries."""
    out = _result(np.asarray((a.data * a.data).sum()), (a,), "l2sq")

    def backward():
        a._accumulate(2.0 * a.data * out.grad)

    out._backward = backward
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    y = a.data.reshape(shape)
    out = _result(y, (a,), "reshape")

    def backward():
        a._accumulate(out.grad.reshape(a.shape))

    out._backward = backward
    return out


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    y = a.data[key]
    if not isinstance(y, np.ndarray):
        y = np.asarray(y)
    out = _result(y.copy(), (a,), "slice")

    def backward():
        g = np.zeros_like(a.data)
        g[key] += out.grad
        a._accumulate(g)

    out._backward = backward
    return out


def take_rows(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by integer index; repeats are allowed."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range for {a.shape[0]} rows")
    out = _result(a.data[idx], (a,), "take_rows")

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accumulate(g)

    out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    out = _result(y, tuple(tensors), "concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(sl)])

    out._backward = backward
    return out


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``(N, C)`` logits against integer labels."""
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or lab.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= logits.shape[1]):
        raise ShapeError(f"label out of range for {logits.shape[1]} classes")
    logp = log_softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(lab.size), lab] = 1.0
    return scale(sum_(mul(logp, Tensor(onehot))), -1.0 / lab.size)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-class sigmoid cross-entropy; ``targets`` is a 0/1 array of the logits' shape."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    # log(1 + e^-|x|) + max(x, 0) - x*t
    loss = np.logaddexp(0.0, x) - x * t
    out = _result(np.asarray(loss.mean()), (logits,), "bce_logits")

    def backward():
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        logits._accumulate(out.grad * (sig - t) / x.size)

    out._backward = backward
    return out


# ---------------------------------------------------------------- checking


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop gradients of ``f(*inputs)`` against central differences.

    Returns max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.  With ``max_coords`` only a
    random subset of each input's coordinates is perturbed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        _raise_non_scalar(out.shape)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(*inputs).data)
            flat[i] = orig - step
            fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for t in inputs:
        t.grad = None
    return float(worst)
