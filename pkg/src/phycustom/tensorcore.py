"""Reverse-mode differentiation over numpy arrays.

Every backward rule is written in terms of the same recorded primitives, so a
gradient computed with ``create_graph=True`` is itself a differentiable value.
That is what makes Hessian-vector products a second backward pass.

Arrays are float32 by default. Reductions (``sum``, ``mean``, layer-norm
statistics) accumulate in float64 and cast back. The finite-difference oracles
in the tests switch the whole graph to float64 via :func:`precision`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import PhyCustomError

__all__ = [
    "Tensor", "ParamStore", "tensor", "no_grad", "precision", "apply_primitive",
    "backward", "grad", "hvp", "flatten_grads", "cosine_similarity",
    "matmul", "add", "sub", "mul", "scale", "neg", "tanh", "sigmoid", "silu",
    "softmax", "layer_norm", "mean", "sum", "square", "sqrt", "reciprocal", "log",
    "concat", "reshape", "transpose", "slice_", "embedding", "broadcast_to",
]


class TensorError(PhyCustomError):
    code = "E_TENSOR"


class ShapeError(TensorError):
    code = "E_SHAPE"


class NonFiniteError(TensorError):
    code = "E_NONFINITE"


class DegenerateInputError(TensorError):
    code = "E_DEGENERATE"


class UnsupportedPrimitiveError(TensorError):
    code = "E_PRIMITIVE"


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad", True)


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    prev = _grad_enabled()
    _local.grad = enabled
    try:
        yield
    finally:
        _local.grad = prev


def no_grad():
    """Context manager that stops graph recording."""
    return _grad_mode(False)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype used by :func:`tensor` for newly created values."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


BackwardFn = Callable[["Tensor", "Tensor", tuple], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _parents: tuple = (), _backward: BackwardFn | None = None,
                 op: str | None = None):
        self.data = data
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype or default_dtype())
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor created from non-finite data")
    return Tensor(arr, requires_grad=requires_grad)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tensor(x, dtype=like.dtype)


def _record(data: np.ndarray, parents: tuple, backward: BackwardFn, op: str) -> Tensor:
    data = np.asarray(data)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"primitive '{op}' produced non-finite values")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def _check(inputs: Sequence) -> None:
    for x in inputs:
        if not isinstance(x, Tensor):
            raise TypeError(f"expected Tensor, got {type(x).__name__}")


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1)
    return reshape(sum(g, axis=axes, keepdims=True), shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check((a, b))
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g, out, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)
    return _record(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check((a, b))
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g, out, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)
    return _record(out, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    _check((a,))
    c = float(c)

    def bw(g, out, needs):
        return (scale(g, c),)
    return _record(a.data * a.dtype.type(c), (a,), bw, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check((a, b))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} @ {b.shape}") from exc

    def bw(g, out, needs):
        ga = _unbroadcast(matmul(g, _swap(b)), a.shape) if needs[0] else None
        gb = _unbroadcast(matmul(_swap(a), g), b.shape) if needs[1] else None
        return ga, gb
    return _record(out, (a, b), bw, "matmul")


def _swap(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    _check((a,))
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))

    def bw(g, out, needs):
        return (transpose(g, inv),)
    return _record(np.transpose(a.data, axes), (a,), bw, "transpose")


def tanh(a: Tensor) -> Tensor:
    _check((a,))

    def bw(g, out, needs):
        return (mul(g, 1.0 - square(out)),)
    return _record(np.tanh(a.data), (a,), bw, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    _check((a,))
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def bw(g, out, needs):
        return (mul(g, mul(out, 1.0 - out)),)
    return _record(out.astype(a.dtype), (a,), bw, "sigmoid")


def silu(a: Tensor) -> Tensor:
    _check((a,))
    s = (0.5 * (np.tanh(0.5 * a.data) + 1.0)).astype(a.dtype)

    def bw(g, out, needs):
        sg = sigmoid(a)
        # d/dx x*s(x) = s + x*s*(1-s)
        return (mul(g, sg + mul(a, mul(sg, 1.0 - sg))),)
    return _record(a.data * s, (a,), bw, "silu")


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool) zeroes entries."""
    _check((a,))
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = (e / _sum64(e, axis=-1, keepdims=True)).astype(a.dtype)

    def bw(g, out, needs):
        inner = sum(mul(g, out), axis=-1, keepdims=True)
        return (mul(out, g - inner),)
    return _record(out, (a,), bw, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine terms)."""
    _check((a,))
    x64 = a.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = (xc * rstd).astype(a.dtype)

    def bw(g, out, needs):
        centered = a - mean(a, axis=-1, keepdims=True)
        var = mean(square(centered), axis=-1, keepdims=True)
        r = reciprocal(sqrt(var + eps))
        gm = mean(g, axis=-1, keepdims=True)
        gy = mean(mul(g, out), axis=-1, keepdims=True)
        return (mul(r, g - gm - mul(out, gy)),)
    return _record(out, (a,), bw, "layer_norm")


def _axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check((a,))
    axes = _axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g, out, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)
    return _record(_sum64(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check((a,))
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    out = np.mean(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def bw(g, out, needs):
        return (scale(broadcast_to(reshape(g, kept), a.shape), 1.0 / n),)
    return _record(out, (a,), bw, "mean")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    _check((a,))
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc

    def bw(g, out, needs):
        return (_unbroadcast(g, a.shape),)
    return _record(out, (a,), bw, "broadcast_to")


def square(a: Tensor) -> Tensor:
    _check((a,))

    def bw(g, out, needs):
        return (scale(mul(g, a), 2.0),)
    return _record(a.data * a.data, (a,), bw, "square")


def sqrt(a: Tensor) -> Tensor:
    _check((a,))
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of negative input")

    def bw(g, out, needs):
        return (mul(g, scale(reciprocal(out), 0.5)),)
    return _record(np.sqrt(a.data), (a,), bw, "sqrt")


def reciprocal(a: Tensor) -> Tensor:
    _check((a,))
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data

    def bw(g, out, needs):
        return (neg(mul(g, square(out))),)
    return _record(out.astype(a.dtype), (a,), bw, "reciprocal")


def log(a: Tensor) -> Tensor:
    _check((a,))
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive input")

    def bw(g, out, needs):
        return (mul(g, reciprocal(a)),)
    return _record(np.log(a.data), (a,), bw, "log")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g, out, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(slice_(g, tuple(idx)))
        return tuple(grads)
    return _record(out, tensors, bw, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    _check((a,))
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc

    def bw(g, out, needs):
        return (reshape(g, a.shape),)
    return _record(out, (a,), bw, "reshape")


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints and slices only."""
    _check((a,))
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (int, slice, type(Ellipsis))):
            raise UnsupportedPrimitiveError("slice supports ints, slices and ellipsis only")
    try:
        out = a.data[index].copy()
    except IndexError as exc:
        raise ShapeError(f"slice: {index} out of range for {a.shape}") from exc

    def bw(g, out, needs):
        return (_unslice(g, a.shape, index),)
    return _record(out, (a,), bw, "slice")


def _unslice(g: Tensor, shape: tuple, index: tuple) -> Tensor:
    out = np.zeros(shape, dtype=g.dtype)
    out[index] = g.data

    def bw(gg, out, needs):
        return (slice_(gg, index),)
    return _record(out, (g,), bw, "unslice")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is a constant integer array."""
    _check((table,))
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: id out of range")

    def bw(g, out, needs):
        return (_scatter_add(g, ids, table.shape[0]),)
    return _record(table.data[ids], (table,), bw, "embedding")


def _scatter_add(g: Tensor, ids: np.ndarray, rows: int) -> Tensor:
    d = g.shape[-1]
    out = np.zeros((rows, d), dtype=np.float64)
    np.add.at(out, ids.reshape(-1), g.data.reshape(-1, d))
    out = out.astype(g.dtype)

    def bw(gg, out, needs):
        return (embedding(gg, ids),)
    return _record(out, (g,), bw, "scatter_add")


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "mul": mul, "scale": scale, "tanh": tanh,
    "silu": silu, "sigmoid": sigmoid, "softmax": softmax, "layer_norm": layer_norm,
    "mean": mean, "sum": sum, "square": square, "sqrt": sqrt,
    "reciprocal": reciprocal, "log": log, "concat": lambda *xs, **kw: concat(xs, **kw),
    "reshape": reshape, "transpose": transpose, "slice": slice_,
    "embedding": embedding, "broadcast_to": broadcast_to,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a primitive by name; attributes (axis, shape, ...) go in ``attrs``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise UnsupportedPrimitiveError(f"unsupported primitive '{kind}'") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# parameters and differentiation
# ---------------------------------------------------------------------------

class ParamStore(Mapping[str, Tensor]):
    """Named tensors, always iterated in lexicographic name order."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, value in (entries or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value: Tensor) -> None:
        if not isinstance(value, Tensor):
            value = tensor(value)
        self._entries[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __delitem__(self, name: str) -> None:
        del self._entries[name]

    def subset(self, names: Iterable[str]) -> "ParamStore":
        return ParamStore({n: self._entries[n] for n in names})

    def with_prefix(self, prefix: str) -> "ParamStore":
        return ParamStore({n: t for n, t in self._entries.items() if n.startswith(prefix)})

    def numel(self) -> int:
        return int(np.sum([t.size for t in self._entries.values()], dtype=np.int64))

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([self[n].data.reshape(-1) for n in self])

    def assign_flat(self, flat: np.ndarray) -> None:
        """Overwrite values in place from a flat vector in canonical order."""
        flat = np.asarray(flat)
        if flat.size != self.numel():
            raise ShapeError(f"flat vector has {flat.size} entries, store has {self.numel()}")
        offset = 0
        for n in self:
            t = self[n]
            t.data = flat[offset:offset + t.size].reshape(t.shape).astype(t.dtype)
            offset += t.size

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({n: Tensor(t.data.astype(dtype), t.requires_grad)
                           for n, t in self._entries.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({n: Tensor(t.data.copy(), t.requires_grad)
                           for n, t in self._entries.items()})


def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` w.r.t. ``inputs``; unreachable inputs get zeros."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    wanted = {id(x) for x in inputs}
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = Tensor(np.ones_like(output.data))
        with _grad_mode(create_graph):
            for node in reversed(_toposort(output)):
                key = id(node)
                g = grads.get(key) if key in wanted else grads.pop(key, None)
                if g is None or node._backward is None:
                    continue
                needs = tuple(p.requires_grad for p in node._parents)
                for p, gp in zip(node._parents, node._backward(g, node, needs)):
                    if gp is None or not p.requires_grad:
                        continue
                    k = id(p)
                    grads[k] = add(grads[k], gp) if k in grads else gp
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    return out


def backward(output: Tensor, wrt: Mapping[str, Tensor], create_graph: bool = False) -> dict[str, Tensor]:
    """Gradient map name -> Tensor for every entry of ``wrt``."""
    names = list(wrt)
    return dict(zip(names, grad(output, [wrt[n] for n in names], create_graph=create_graph)))


def flatten_grads(grads: Mapping[str, Tensor | np.ndarray], order: Mapping[str, Tensor]) -> np.ndarray:
    names = sorted(order)
    missing = set(names) - set(grads)
    extra = set(grads) - set(names)
    if missing or extra:
        raise ShapeError(f"gradient map mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    if not names:
        return np.zeros(0, dtype=np.float32)
    parts = []
    for n in names:
        g = grads[n]
        parts.append((g.data if isinstance(g, Tensor) else np.asarray(g)).reshape(-1))
    return np.concatenate(parts)


def hvp(loss: Tensor, wrt: Mapping[str, Tensor], vector: np.ndarray) -> np.ndarray:
    """Hessian of ``loss`` w.r.t. flattened ``wrt`` applied to ``vector``."""
    names = sorted(wrt)
    vector = np.asarray(vector)
    total = int(np.sum([wrt[n].size for n in names], dtype=np.int64))
    if vector.ndim != 1 or vector.size != total:
        raise ShapeError(f"hvp: vector length {vector.size} != parameter count {total}")
    g = backward(loss, wrt, create_graph=True)
    dot = None
    offset = 0
    for n in names:
        p = wrt[n]
        v = Tensor(vector[offset:offset + p.size].reshape(p.shape).astype(p.dtype))
        offset += p.size
        if not g[n].requires_grad:
            continue
        term = sum(mul(g[n], v))
        dot = term if dot is None else add(dot, term)
    if dot is None:
        return np.zeros(total, dtype=default_dtype() if not names else wrt[names[0]].dtype)
    return flatten_grads(backward(dot, wrt), wrt)


def cosine_similarity(u: np.ndarray, v: np.ndarray, eps: float = 1e-12) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.size != v.size:
        raise ShapeError(f"cosine: length mismatch {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < eps or nv < eps:
        raise DegenerateInputError(f"cosine undefined: norms {nu:.3e}, {nv:.3e} below {eps:g}")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
