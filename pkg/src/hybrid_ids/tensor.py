"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous (row-major) numpy buffer. Trainable
values are registered on a :class:`GradTape` with :meth:`GradTape.leaf`; every
primitive applied to a taped tensor appends one node to that tape, so the node
list is topologically ordered by construction. :func:`backward` walks it in
reverse.

Broadcasting is deliberately narrow. Two operands must have equal shapes,
or one of them is a scalar (0-d), or one of them is a 1-d row whose length
equals the trailing extent of the other. Anything else raises
:class:`~hybrid_ids.errors.DimensionError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, TapeError, UsageError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "grad_check",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "sum",
    "mean",
    "reshape",
    "concat",
    "flip",
    "record",
]


class Tensor:
    """Row-major n-d array, optionally attached to a :class:`GradTape`."""

    __slots__ = ("data", "tape", "name", "__weakref__")

    def __init__(self, data, tape: "GradTape | None" = None, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data), order="C")
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    # Explicit row-major linearisation, used by the flat-buffer file formats.
    def flat_index(self, index: Sequence[int]) -> int:
        if len(index) != self.ndim:
            raise DimensionError(f"index {tuple(index)} does not match shape {self.shape}")
        flat = 0
        for i, n in zip(index, self.shape):
            if not 0 <= i < n:
                raise IndexError(f"index {tuple(index)} out of range for shape {self.shape}")
            flat = flat * n + i
        return flat

    def get(self, *index: int) -> float:
        return float(self.data.reshape(-1)[self.flat_index(index)])

    def set(self, index: Sequence[int], value: float) -> None:
        """Write one element. Only valid before the tensor enters a computation."""
        self.data.reshape(-1)[self.flat_index(index)] = value

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, data={self.data!r})"

    def __len__(self):
        return self.shape[0] if self.ndim else 1

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


class _Node:
    __slots__ = ("inputs", "outputs", "vjp")

    def __init__(self, inputs, outputs, vjp):
        self.inputs = inputs
        self.outputs = outputs
        self.vjp = vjp


class GradTape:
    """Append-only record of primitive operations.

    A tape belongs to one thread. Leaves are the tensors gradients are
    reported for; everything else on the tape is an intermediate.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._produced: set[int] = set()

    def leaf(self, value, name: str | None = None, dtype=None) -> Tensor:
        if isinstance(value, Tensor):
            value = value.data
        t = Tensor(value, tape=self, name=name, dtype=dtype)
        self.leaves.append(t)
        self._produced.add(id(t))
        return t

    def record(self, inputs: Sequence[Tensor], outputs: Sequence[Tensor], vjp: Callable) -> None:
        for t in outputs:
            t.tape = self
            self._produced.add(id(t))
        self.nodes.append(_Node(tuple(inputs), tuple(outputs), vjp))

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor) -> dict[Tensor, Tensor]:
        return backward(self, root)


def _tape_of(*tensors) -> GradTape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("operands belong to different tapes")
    return tape


def record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], vjp: Callable) -> None:
    """Attach a primitive to its inputs' tape, if any.

    ``vjp`` receives one upstream gradient array per output (zeros for outputs
    that did not reach the root) and returns one array or ``None`` per input.
    """
    tape = _tape_of(*inputs)
    if tape is not None:
        tape.record(inputs, outputs, vjp)


def backward(tape: GradTape, root: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of scalar ``root`` w.r.t. every leaf of ``tape``.

    Leaves the root does not depend on get zero gradients.
    """
    if not isinstance(root, Tensor) or root.tape is not tape or id(root) not in tape._produced:
        raise TapeError("root was not produced on this tape")
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(tape.nodes):
        upstream = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in upstream):
            continue
        upstream = [np.zeros(o.shape, o.dtype) if g is None else g for o, g in zip(node.outputs, upstream)]
        local = node.vjp(upstream)
        for inp, g in zip(node.inputs, local):
            if g is None or inp.tape is None:
                continue
            if g.shape != inp.shape:
                raise TapeError(f"gradient shape {g.shape} does not match input shape {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    return {
        leaf: Tensor(grads[id(leaf)] if id(leaf) in grads else np.zeros(leaf.shape, leaf.dtype), dtype=leaf.dtype)
        for leaf in tape.leaves
    }


# ---------------------------------------------------------------------------
# primitives


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float64), dtype=dtype)


def _broadcast_kind(a: tuple, b: tuple) -> str:
    if a == b:
        return "same"
    if len(b) == 0:
        return "scalar_b"
    if len(a) == 0:
        return "scalar_a"
    if len(b) == 1 and len(a) >= 1 and a[-1] == b[0]:
        return "row_b"
    if len(a) == 1 and len(b) >= 1 and b[-1] == a[0]:
        return "row_a"
    raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible (scalar or trailing row only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[0]).sum(axis=0)


def _binary(a, b, forward, grad_a, grad_b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_kind(a.shape, b.shape)
    out = Tensor(forward(a.data, b.data), dtype=np.result_type(a.dtype, b.dtype))

    def vjp(gs):
        (g,) = gs
        return (
            _unbroadcast(grad_a(g, a.data, b.data), a.shape),
            _unbroadcast(grad_b(g, a.data, b.data), b.shape),
        )

    record((a, b), (out,), vjp)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(x: Tensor, value: np.ndarray, local: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    out = Tensor(value, dtype=x.dtype)
    record((x,), (out,), lambda gs: (local(gs[0]),))
    return out


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, -x.data, lambda g: -g)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, y, lambda g: g * y)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _unary(x, y, lambda g: g * y * (1.0 - y))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda g: g * (1.0 - y * y))


def softmax(x) -> Tensor:
    """Softmax over the trailing axis, shifted by the row max."""
    x = _as_tensor(x)
    y = _softmax(x.data)

    def local(g):
        return y * (g - np.sum(g * y, axis=-1, keepdims=True))

    return _unary(x, y, local)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "exp": exp,
    "log": log,
    "max-with-0": relu,
    "relu": relu,
}


def elementwise(kind: str, *operands) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise UsageError(f"unknown elementwise op {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*operands)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, dtype=np.result_type(a.dtype, b.dtype))

    def vjp(gs):
        (g,) = gs
        return g @ b.data.T, a.data.T @ g

    record((a, b), (out,), vjp)
    return out


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    if axis is None:
        out = Tensor(np.asarray(x.data.sum()), dtype=x.dtype)
        record((x,), (out,), lambda gs: (np.broadcast_to(gs[0], x.shape).copy(),))
        return out
    ax = axis % x.ndim
    out = Tensor(x.data.sum(axis=ax), dtype=x.dtype)
    record((x,), (out,), lambda gs: (np.broadcast_to(np.expand_dims(gs[0], ax), x.shape).copy(),))
    return out


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)
    record((x,), (out,), lambda gs: (gs[0].reshape(x.shape),))
    return out


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax), dtype=tensors[0].dtype)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(gs):
        return [np.ascontiguousarray(p) for p in np.split(gs[0], bounds, axis=ax)]

    record(tensors, (out,), vjp)
    return out


def flip(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.flip(x.data, axis=axis), dtype=x.dtype)
    record((x,), (out,), lambda gs: (np.ascontiguousarray(np.flip(gs[0], axis=axis)),))
    return out


def _getitem(x: Tensor, index) -> Tensor:
    out = Tensor(x.data[index], dtype=x.dtype)

    def vjp(gs):
        g = np.zeros(x.shape, x.dtype)
        np.add.at(g, index, gs[0])
        return (g,)

    record((x,), (out,), vjp)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is a tensor/array or a sequence of them; ``f`` is called with the
    same structure and must return a scalar tensor. The error per coordinate
    is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise UsageError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    single = isinstance(x, (Tensor, np.ndarray)) or np.isscalar(x)
    values = [np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for v in ([x] if single else x)]

    def call(args):
        return f(args[0]) if single else f(*args)

    tape = GradTape()
    leaves = [tape.leaf(v) for v in values]
    out = call(leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise UsageError("grad_check needs f to return a scalar tensor")
    analytic = tape.backward(out)

    worst = 0.0
    for k, v in enumerate(values):
        a_grad = analytic[leaves[k]].data.reshape(-1)
        flat = v.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = call([Tensor(w) for w in values]).item()
            flat[i] = orig - eps
            minus = call([Tensor(w) for w in values]).item()
            flat[i] = orig
            num = (plus - minus) / (2.0 * eps)
            a = a_grad[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
