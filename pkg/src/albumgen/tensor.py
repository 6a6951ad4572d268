"""Dense float32 tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays; each differentiable op records its
parents and a vector-Jacobian closure, and ``backward`` replays the graph
once in reverse topological order. Heavy lifting (matmul, conv im2col)
lands in BLAS, so the Python graph overhead is negligible at the tensor
sizes this package uses.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG_CHECKS = False
_GRAD_ENABLED = True


def set_debug_checks(enabled: bool) -> None:
    """Globally enable per-op NaN/Inf detection (raises FloatingPointError)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A float32 ndarray plus optional autograd bookkeeping.

    ``data`` is always a C-contiguous-ish np.float32 array (row-major per
    numpy default). ``grad`` accumulates across backward calls until
    cleared, mirroring the usual training-loop convention.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _vjp: Callable | None = None):
        arr = np.asarray(data, dtype=np.float32)
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents = _parents if self.requires_grad else ()
        self._vjp = _vjp if self.requires_grad else None

    # -- basic introspection ------------------------------------------------
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
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32))


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req,
                 _parents=tuple(parents) if req else (),
                 _vjp=vjp if req else None)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(grad, dtype=np.float32)


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (x,), vjp)


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), vjp)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, (x,), vjp)


def concatenate(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concatenate needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _make(out, parts, vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """out[..., :] = table[ids[...], :]; scatter-add on backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), vjp)


# -- reductions -------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def vjp(g):
        g = np.asarray(g, dtype=np.float32)
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(np.float32),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(np.float32),)

    return _make(out, (x,), vjp)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= x.shape[ax]
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes with numpy batch broadcasting."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data[None, :]
        at = np.swapaxes(a.data, -1, -2) if a.ndim > 1 else a.data[:, None]
        ga = g @ bt if g.ndim > 1 or b.ndim > 1 else np.outer(g, b.data)
        gb = at @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; each slice along `axis` sums to 1."""
    _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp)


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for ndim {x.ndim}")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Normalize over `axis`, then scale/shift. gain/bias broadcast to x."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[axis]

    def vjp(g):
        gxhat = g * gain.data
        # d/dx of (x - mu) * inv with mu, inv functions of x along `axis`
        gx = inv * (gxhat
                    - gxhat.mean(axis=axis, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx.astype(np.float32), ggain, gbias

    return _make(out, (x, gain, bias), vjp)


# -- convolution / resampling ------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW conv. x (B,C,H,W), w (O,C,kh,kw), b (O,) -> (B,O,Ho,Wo).

    Forward is im2col + one GEMM; backward scatters through a small
    kernel-offset loop, exact to the forward arithmetic.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D x and w")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, w wants {w.shape[1]}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                     # B,C,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw).T                 # (C*kh*kw, O)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        gw = (gmat.T @ cols).reshape(O, C, kh, kw)
        gcols = (gmat @ wmat.T).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki:ki + Ho * stride:stride, kj:kj + Wo * stride:stride] += \
                    gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial pixel factor x factor. x (B,C,H,W)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    B, C, H, W = x.shape

    def vjp(g):
        g = g.reshape(B, C, H, factor, W, factor)
        return (np.ascontiguousarray(g.sum(axis=(3, 5))),)

    return _make(out, (x,), vjp)


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select: mask ? a : b. mask is a constant bool array."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(np.where(mask, g, 0.0).astype(np.float32), a.shape),
                _unbroadcast(np.where(mask, 0.0, g).astype(np.float32), b.shape))

    return _make(out, (a, b), vjp)


def gaussian(shape, rng: np.random.Generator) -> Tensor:
    """Standard-normal sample; constant w.r.t. the graph."""
    return Tensor(rng.standard_normal(size=shape, dtype=np.float32))


# -- backward pass ------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into each reachable requires_grad tensor's ``.grad`` and
    returns {leaf_tensor: grad}. Unreached tensors keep grad None (zero).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad (no graph recorded)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_map: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if _DEBUG_CHECKS and not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient encountered")
        if node._vjp is None:
            # leaf
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            leaf_map[node] = node.grad
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float32)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaf_map


# -- parameter containers -----------------------------------------------------

class Module:
    """Minimal parameter container with hierarchical dotted names.

    Attributes that are requires_grad Tensors are parameters; attributes
    that are Modules (or lists of Modules) are children. Names follow
    attribute names, list children get an index suffix.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}{i}."))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays into parameters in place; shapes must match."""
        params = self.named_parameters()
        for name, p in params.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key!r}")
            src = arrays[key]
            if src.shape != p.data.shape:
                raise ValueError(f"{key}: shape {src.shape} != {p.data.shape}")
            p.data = np.array(src, dtype=np.float32)

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.named_parameters().items()}


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape).astype(np.float32))


def init_zeros(shape) -> Tensor:
    return parameter(np.zeros(shape, dtype=np.float32))


def init_ones(shape) -> Tensor:
    return parameter(np.ones(shape, dtype=np.float32))


def kaiming_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> Tensor:
    std = math.sqrt(2.0 / (in_ch * k * k))
    return parameter(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(np.float32))


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return parameter(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(np.float32))
