"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Graphs are built by running ordinary Python code on :class:`Tensor` objects
(define-by-run). Every op records its parents and a closure mapping the
output adjoint to the parent adjoints; :func:`backward` walks the recorded
graph once in reverse topological order.

Only the handful of ops needed by the identification pipeline are provided:
elementwise arithmetic with broadcasting, (batched) matrix products, ``tanh``,
reductions, reshaping, slicing, concatenation and stacking.
"""

from __future__ import annotations

import contextlib
import inspect
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Graph",
    "Mlp",
    "AdamState",
    "Adam",
    "as_tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "bmv",
    "tanh",
    "square",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "getitem",
    "xavier_init",
    "adam_step",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (plain numpy speed)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array that may participate in a computation graph.

    Parameters
    ----------
    value : array_like
        Data; copied to a C-contiguous float64 array.
    requires_grad : bool
        Whether adjoints should flow into this tensor.
    name : str, optional
        Label used in error messages and parameter maps.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name or ''} has non-finite entries")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _result(cls, value: np.ndarray, op: str, parents: tuple, fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.value = value
        out.grad = None
        out.name = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # array-like metadata
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.value.reshape(-1)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def __len__(self) -> int:
        return self.value.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # operators
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(arr: np.ndarray) -> Tensor:
    """Wrap a float64 array as a non-differentiable tensor without copying or checks."""
    return Tensor._result(arr, "data", (), None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.value + b.value, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.value - b.value, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad
    return Tensor._result(
        av * bv,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape) if ra else None,
                   _unbroadcast(g * av, bv.shape) if rb else None),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.value, "neg", (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return Tensor._result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return Tensor._result(av * av, "square", (a,), lambda g: (2.0 * g * av,))


# linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics for operands of ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad

    def back(g):
        return (
            _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if ra else None,
            _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if rb else None,
        )

    return Tensor._result(av @ bv, "matmul", (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``(..., in)``.

    ``weight`` has shape ``(out, in)``; ``bias`` has shape ``(out,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xv, wv = x.value, weight.value
    rx, rw = x.requires_grad, weight.requires_grad
    out = xv @ wv.T
    if bias is None:

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g @ wv if rx else None,
                    g2.T @ xv.reshape(-1, xv.shape[-1]) if rw else None)

        return Tensor._result(out, "linear", (x, weight), back)
    bias = as_tensor(bias)
    if bias.shape != (wv.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({wv.shape[0]},)")
    out = out + bias.value

    def back_b(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ wv if rx else None,
                g2.T @ xv.reshape(-1, xv.shape[-1]) if rw else None,
                g2.sum(axis=0))

    return Tensor._result(out, "linear", (x, weight, bias), back_b)


def bmv(m, v) -> Tensor:
    """Batched matrix-vector product: ``(B, p, q) x (B, q) -> (B, p)``."""
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim != 3 or v.ndim != 2 or m.shape[0] != v.shape[0] or m.shape[2] != v.shape[1]:
        raise ShapeError(f"bmv: matrix {m.shape} incompatible with vector batch {v.shape}")
    mv, vv = m.value, v.value
    rm, rv = m.requires_grad, v.requires_grad

    def back(g):
        return (g[:, :, None] * vv[:, None, :] if rm else None,
                np.einsum("bpq,bp->bq", mv, g) if rv else None)

    return Tensor._result(np.einsum("bpq,bq->bp", mv, vv), "bmv", (m, v), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got {a.shape}")
    return Tensor._result(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


# reductions and shape ops --------------------------------------------------


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._result(np.asarray(a.value.sum(axis=axis)), "sum", (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    try:
        out = np.array(a.value[index], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(f"getitem: {exc} for tensor of shape {shape}") from None

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, "getitem", (a,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._result(out, "concat", ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack: empty input list")
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    n = len(ts)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._result(out, "stack", ts, back)


# backward pass ---------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Adjoints of a scalar ``root`` with respect to every leaf that requires grad.

    Each leaf's ``grad`` attribute is overwritten with its adjoint, and the
    same arrays are returned keyed by leaf tensor.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(root)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = adj.get(key)
            adj[key] = pg if prev is None else prev + pg
    return leaves


class Graph:
    """Define-by-run graph: ``fn(**inputs)`` is traced anew on every forward.

    Examples
    --------
    >>> g = Graph(lambda x: tanh(x))
    >>> g.forward(x=Tensor([0.0])).value
    array([0.])
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self.root: Tensor | None = None
        self._sig = inspect.signature(fn)

    def forward(self, **inputs) -> Tensor:
        try:
            bound = self._sig.bind(**inputs)
        except TypeError as exc:
            raise ValueError(f"graph inputs do not match: {exc}") from None
        args = {k: as_tensor(v) for k, v in bound.arguments.items()}
        root = as_tensor(self.fn(**args))
        self.root = root
        return root

    def backward(self) -> dict[Tensor, np.ndarray]:
        if self.root is None:
            raise RuntimeError("backward called before forward")
        return backward(self.root)


# neural building blocks ------------------------------------------------------


class Mlp:
    """Feedforward network: tanh hidden layers, linear output, optional bypass.

    ``weights[i]`` has shape ``(widths[i+1], widths[i])``. With a bypass the
    output gains a bias-free linear term ``bypass @ x``.
    """

    def __init__(self, widths: Sequence[int], weights: Sequence[Parameter],
                 biases: Sequence[Parameter], bypass: Parameter | None = None):
        widths = [int(w) for w in widths]
        if len(weights) != len(widths) - 1 or len(biases) != len(weights):
            raise ShapeError("mlp: need one weight and bias per layer")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ShapeError(f"mlp: layer {i} has weight {w.shape}, bias {b.shape}"
                                 f" for widths {widths[i]}->{widths[i + 1]}")
        if bypass is not None and bypass.shape != (widths[-1], widths[0]):
            raise ShapeError(f"mlp: bypass shape {bypass.shape} != {(widths[-1], widths[0])}")
        self.widths = widths
        self.weights = list(weights)
        self.biases = list(biases)
        self.bypass = bypass

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"mlp: expected input width {self.n_in}, got {x.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = linear(h, w, b)
            if i < last:
                h = tanh(h)
        if self.bypass is not None:
            h = add(h, linear(x, self.bypass))
        return h

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        if self.bypass is not None:
            out[f"{prefix}bypass"] = self.bypass
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def xavier_init(widths: Sequence[int], seed: int | np.random.Generator = 0,
                bypass: bool = False) -> Mlp:
    """Build an :class:`Mlp` with Xavier-uniform weights and zero biases.

    Parameters
    ----------
    widths : sequence of int
        Layer widths, input first. ``[n_in, n_out]`` gives a single affine layer.
    seed : int or numpy Generator
        Source of randomness; an int gives a fresh deterministic generator.
    bypass : bool
        Add a Xavier-initialized linear input-to-output bypass.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError(f"xavier_init needs at least input and output widths, got {widths}")
    if any(w < 0 for w in widths) or widths[0] == 0:
        raise ValueError(f"xavier_init widths must be positive, got {widths}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for i in range(len(widths) - 1):
        weights.append(Parameter(_xavier(rng, widths[i + 1], widths[i]), name=f"W{i}"))
        biases.append(Parameter(np.zeros(widths[i + 1]), name=f"b{i}"))
    bp = Parameter(_xavier(rng, widths[-1], widths[0]), name="bypass") if bypass else None
    return Mlp(widths, weights, biases, bp)


# optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` is advanced in place (step count and moment accumulators).
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"adam_step: params and grads not aligned on {sorted(missing)}")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ShapeError(f"adam_step: {k} has shape {np.shape(params[k])} "
                             f"but gradient {np.shape(grads[k])}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        out[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


class Adam:
    """Adam over a fixed set of named :class:`Parameter` objects."""

    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        named_grads = {}
        for k, p in self.params.items():
            g = grads.get(p)
            named_grads[k] = np.zeros_like(p.value) if g is None else g
        new = adam_step(self.state, {k: p.value for k, p in self.params.items()}, named_grads)
        for k, p in self.params.items():
            p.value = new[k]


def parameter_count(params: Iterable[Tensor]) -> int:
    return int(np.sum([p.size for p in params], dtype=np.int64))
