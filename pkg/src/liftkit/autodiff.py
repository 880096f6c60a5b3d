"""Reverse-mode automatic differentiation over dense numpy arrays.

Values are dense ``numpy.ndarray`` buffers (float64 by default; a float32
mode is available via :func:`set_default_dtype`); a :class:`Tensor` wraps one
value together with its gradient and the backward rule of the op that
produced it. Graphs are built eagerly by the op functions below and walked
once, in reverse topological order, by :func:`backward`.

Broadcasting follows numpy rules everywhere; gradients of broadcast
operands are summed back over the broadcast axes. All ops are
deterministic: identical graphs produce bit-identical gradients.

Set ``strict_mode(True)`` to make every op raise ``FloatingPointError``
the moment it produces a non-finite value.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True
_STRICT = False
_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """float64 (default) or float32; new tensors adopt it.

    float32 roughly halves CPU training time; finite-difference testing
    and the reference oracles assume the float64 default.
    """
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. a float32 training run)."""
    global _DTYPE
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward values)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def strict_mode(on: bool) -> None:
    """Toggle raising on non-finite op outputs."""
    global _STRICT
    _STRICT = bool(on)


def _check_finite(data: np.ndarray, op: str) -> None:
    if _STRICT and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output in op '{op}'")


class Tensor:
    """A value in the autodiff graph.

    ``data`` is the forward value, ``grad`` is filled by :func:`backward`,
    ``_parents``/``_backward`` record how to push gradients upstream.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: producers may hand us views or reuse buffers
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar used by the model code.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return add(self, scalar_scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` back down to ``shape`` after numpy broadcasting."""
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
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(out):
        g = out.grad
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), back, "mul")


def scalar_scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * s

    def back(out):
        if a.requires_grad:
            a.accumulate(out.grad * s)

    return _make(data, (a,), back, "scalar_scale")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.data.shape} to {shape}") from e

    def back(out):
        if a.requires_grad:
            a.accumulate(_unbroadcast(out.grad, a.data.shape))

    return _make(data, (a,), back, "broadcast")


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def back(out):
        if a.requires_grad:
            a.accumulate(np.transpose(out.grad, inv))

    return _make(data, (a,), back, "transpose")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)

    def back(out):
        if a.requires_grad:
            a.accumulate(out.grad.reshape(a.data.shape))

    return _make(data, (a,), back, "reshape")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(out):
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), back, "sum")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.data.shape} @ {b.data.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # single GEMM instead of numpy's strided batch loop
        data = (a.data.reshape(-1, a.data.shape[-1]) @ b.data).reshape(
            (*a.data.shape[:-1], b.data.shape[-1])
        )
    else:
        data = a.data @ b.data

    def back(out):
        g = out.grad
        if b.data.ndim == 2 and a.data.shape[:-1] == g.shape[:-1]:
            # common projection case: collapse leading dims into one GEMM
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a.accumulate((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b.accumulate(a.data.reshape(-1, a.data.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# lookup / indexing ops
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` at integer ``ids``; grads scatter-add back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding id out of range for table {table.data.shape}")
    data = table.data[ids]

    def back(out):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table.accumulate(g)

    return _make(data, (table,), back, "embedding_lookup")


def gather(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[...] = a[..., indices[...]]."""
    indices = np.asarray(indices)
    if indices.shape != a.data.shape[:-1]:
        raise ShapeError(f"gather index shape {indices.shape} != leading dims of {a.data.shape}")
    data = np.take_along_axis(a.data, indices[..., None], axis=-1)[..., 0]

    def back(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.put_along_axis(g, indices[..., None], out.grad[..., None], axis=-1)
            a.accumulate(g)

    return _make(data, (a,), back, "gather")


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def back(out):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a.accumulate(out.grad * (cdf + x * pdf))

    return _make(data, (a,), back, "gelu")


def softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(out):
        if a.requires_grad:
            g = out.grad
            dot = (g * data).sum(axis=-1, keepdims=True)
            a.accumulate(data * (g - dot))

    return _make(data, (a,), back, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def back(out):
        if a.requires_grad:
            g = out.grad
            a.accumulate(g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return _make(data, (a,), back, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def back(out):
        g = out.grad
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, n).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            a.accumulate(dx)

    return _make(data, (a, gamma, beta), back, "layer_norm")


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``a`` over positions where ``mask`` is nonzero."""
    m = np.asarray(mask, dtype=a.data.dtype)
    if m.shape != a.data.shape:
        raise ShapeError(f"masked_mean mask shape {m.shape} != value shape {a.data.shape}")
    total = m.sum()
    if total == 0:
        raise ContractError("masked_mean over an empty mask")
    data = np.asarray((a.data * m).sum() / total)

    def back(out):
        if a.requires_grad:
            a.accumulate(out.grad * m / total)

    return _make(data, (a,), back, "masked_mean")


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    data = a.data * keep

    def back(out):
        if a.requires_grad:
            a.accumulate(out.grad * keep)

    return _make(data, (a,), back, "dropout")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, trainable: dict[str, Tensor] | None = None):
    """Populate ``.grad`` for every node reachable from a scalar ``loss``.

    If ``trainable`` is given, also return ``{name: gradient}`` with zero
    arrays for parameters the loss does not depend on.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)

    if trainable is not None:
        return {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in trainable.items()
        }
    return None


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
