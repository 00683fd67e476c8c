"""Small dense-array engine with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to input gradients.
:func:`backward` orders the recorded graph topologically and accumulates
gradients into every tensor created with ``requires_grad=True``.

Arrays are float64 unless the caller hands in float32 data (the benchmark
path does this); operations preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .exceptions import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "bmm",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "leaky_relu",
    "elementwise",
    "reduce",
    "softmax_rows",
    "softmax",
    "log_softmax",
    "gather",
    "scatter_add",
    "weighted_gather",
    "scale_rows",
    "reshape",
    "concat",
    "batchnorm",
    "dropout",
    "BN_EPS",
    "make_node",
    "needs_grad",
    "record_branches",
    "note_branch",
]

BN_EPS = 1e-5

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (leaky signs, max positions) made inside the block.

    Two evaluations that yield equal records took the same piecewise-smooth
    branch, which is what a finite-difference check needs to trust a
    derivative.
    """
    prev = getattr(_state, "branches", None)
    log: list[np.ndarray] = []
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def note_branch(choice: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.array(choice, copy=True))


class Tensor:
    """An n-d array with an optional gradient slot.

    ``grad`` is only populated on tensors created with ``requires_grad=True``
    (leaves). Intermediate results carry the graph links instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getstate__(self):
        return {"data": self.data, "requires_grad": self.requires_grad, "name": self.name}

    def __setstate__(self, state):
        self.__init__(state["data"], state["requires_grad"], state["name"])


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_graph(*ts: Tensor) -> bool:
    if not is_grad_enabled():
        return False
    return any(t.requires_grad or t._backward is not None for t in ts)


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    """Wrap ``data`` as the output of an op whose backward rule is ``fn``."""
    out = Tensor(data)
    if _needs_graph(*parents):
        out._parents = parents
        out._backward = fn
    return out


_make = make_node


def needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


class Tape:
    """Topologically ordered view of the graph that produced ``root``.

    Nodes appear after all of their inputs. Built on demand by
    :func:`backward`; exposed for inspection and for repeated replays.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
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
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape(loss)
    elif tape.root is not loss:
        raise ContractError("tape was not recorded for this loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not (p.requires_grad or p._backward is not None):
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if needs_grad(a) else None), (A.T @ g if needs_grad(b) else None)

    return _make(A @ B, (a, b), back)


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched product over the leading axis: (P,M,K) x (P,K,N) -> (P,M,N)."""
    A, B = a.data, b.data
    Bm = B.transpose(0, 2, 1) if transpose_b else B
    if A.ndim != 3 or B.ndim != 3 or A.shape[0] != Bm.shape[0] or A.shape[2] != Bm.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape} (transpose_b={transpose_b})")

    def back(g):
        ga = g @ Bm.transpose(0, 2, 1)
        gb = A.transpose(0, 2, 1) @ g
        if transpose_b:
            gb = gb.transpose(0, 2, 1)
        return ga, gb

    return _make(A @ Bm, (a, b), back)


# ---------------------------------------------------------------- elementwise


def _broadcast_kind(sa: tuple, sb: tuple) -> str:
    if sa == sb:
        return "same"
    if len(sb) == 0:
        return "b_scalar"
    if len(sa) == 0:
        return "a_scalar"
    if len(sb) in (1, 2) and sb[-1] == sa[-1] and int(np.prod(sb)) == sb[-1] and len(sa) >= 1:
        return "b_row"
    if len(sa) in (1, 2) and sa[-1] == sb[-1] and int(np.prod(sa)) == sa[-1] and len(sb) >= 1:
        return "a_row"
    raise DimensionError(f"incompatible shapes {sa} and {sb}; only a row vector broadcasts")


def _unbroadcast(g: np.ndarray, shape: tuple, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if (kind == "b_scalar" and side == "b") or (kind == "a_scalar" and side == "a"):
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    if (kind == "b_row" and side == "b") or (kind == "a_row" and side == "a"):
        return g.reshape(-1, g.shape[-1]).sum(axis=0).reshape(shape)
    return g


def _binary(a, b, fwd, dfa, dfb) -> Tensor:
    ta = _as_tensor(a, b if isinstance(b, Tensor) else None)
    tb = _as_tensor(b, ta)
    kind = _broadcast_kind(ta.shape, tb.shape)
    A, B = ta.data, tb.data
    out = fwd(A, B)

    def back(g):
        return (
            _unbroadcast(dfa(g, A, B), ta.shape, kind, "a"),
            _unbroadcast(dfb(g, A, B), tb.shape, kind, "b"),
        )

    return _make(out, (ta, tb), back)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, A, B: g, lambda g, A, B: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, A, B: g, lambda g, A, B: -g)


def mul(a, b) -> Tensor:
    """Hadamard product."""
    return _binary(
        a,
        b,
        np.multiply,
        lambda g, A, B: g * B,
        lambda g, A, B: g * A,
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)  # overflow-safe logistic
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    X = x.data
    neg = X <= 0
    note_branch(neg)
    a = X.dtype.type(alpha)
    out = X.copy()
    np.multiply(out, a, out=out, where=neg)

    def back(g):
        gx = g.copy()
        np.multiply(gx, a, out=gx, where=neg)
        return (gx,)

    return _make(out, (x,), back)


def elementwise(kind: str, *inputs, alpha: float = 0.2, c: float = 1.0) -> Tensor:
    """Dispatch by name; mirrors the individual functions."""
    if kind == "add":
        return add(*inputs)
    if kind == "sub":
        return sub(*inputs)
    if kind == "hadamard":
        return mul(*inputs)
    if kind == "sigmoid":
        return sigmoid(*inputs)
    if kind == "leaky_relu":
        return leaky_relu(inputs[0], alpha)
    if kind == "scale_by_scalar":
        return scale(inputs[0], c)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions


def reduce(kind: str, x: Tensor, axis: int, order_invariant: bool = False) -> Tensor:
    """Reduce ``x`` over ``axis`` with ``max``, ``mean`` or ``sum``.

    ``max`` sends the gradient to the first maximal entry. With
    ``order_invariant=True`` sums are accumulated over sorted values, so the
    result is bit-identical under any permutation along ``axis``.
    """
    X = x.data
    if axis < 0:
        axis += X.ndim
    if not 0 <= axis < X.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    n = X.shape[axis]
    if n == 0:
        raise DomainError("cannot reduce over an empty axis")

    if kind == "max":
        arg = np.argmax(X, axis=axis)
        note_branch(arg)
        out = np.take_along_axis(X, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

        def back(g):
            gx = np.zeros_like(X)
            np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return _make(out, (x,), back)

    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    src = np.sort(X, axis=axis) if order_invariant else X
    out = src.sum(axis=axis)
    factor = 1.0 / n if kind == "mean" else 1.0
    if kind == "mean":
        out = out * factor

    def back(g):
        return (np.broadcast_to(np.expand_dims(g * factor, axis), X.shape).copy(),)

    return _make(out, (x,), back)


def _check_finite(X: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(X)):
        raise NumericError(f"{what}: non-finite input")


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    X = x.data
    _check_finite(X, "softmax")
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def log_softmax(x: Tensor) -> Tensor:
    X = x.data
    _check_finite(X, "log_softmax")
    shifted = X - X.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back)


# ---------------------------------------------------------------- indexing


def _check_index(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range [0, {n})")
    return idx.astype(np.intp, copy=False)


def scatter_add(y: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``y`` into an ``n``-row array at positions ``idx`` (duplicates accumulate)."""
    flat = idx.reshape(-1)
    y2 = y.reshape(flat.size, -1)
    m = sp.csr_matrix(
        (np.ones(flat.size, dtype=y.dtype), (flat, np.arange(flat.size))), shape=(n, flat.size)
    )
    return np.asarray(m @ y2).reshape((n,) + y.shape[idx.ndim:])


def gather(x: Tensor, idx) -> Tensor:
    """Row lookup: ``out[...] = x[idx[...]]``; ``out`` has shape ``idx.shape + x.shape[1:]``."""
    X = x.data
    n = X.shape[0]
    idx = _check_index(idx, n)
    out = X[idx]
    return _make(out, (x,), lambda g: (scatter_add(g, idx, n),))


def weighted_gather(x: Tensor, idx, weights) -> Tensor:
    """``out[v] = sum_u weights[v, u] * x[idx[v, u]]`` for a matrix ``x``; weights are constants."""
    X = x.data
    if X.ndim != 2:
        raise DimensionError(f"weighted_gather expects a matrix, got {x.shape}")
    n = X.shape[0]
    idx = _check_index(idx, n)
    w = np.asarray(weights, dtype=X.dtype)
    if idx.ndim != 2 or w.shape != idx.shape:
        raise DimensionError(f"index table {idx.shape} and weights {w.shape} must match")
    rows, r = idx.shape
    flat = idx.reshape(-1)
    m = sp.csr_matrix((w.reshape(-1), (np.repeat(np.arange(rows), r), flat)), shape=(rows, n))
    out = np.einsum("vu,vuc->vc", w, X[idx])
    return _make(out, (x,), lambda g: (np.asarray(m.T @ g),))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x`` by the scalar ``s[i]`` (``s`` of shape (M,) or (M,1))."""
    X, S = x.data, s.data
    if X.ndim != 2 or S.size != X.shape[0]:
        raise DimensionError(f"scale_rows: {x.shape} rows vs {s.shape} scalars")
    col = S.reshape(-1, 1)

    def back(g):
        return g * col, (g * X).sum(axis=1).reshape(S.shape)

    return _make(X * col, (x, s), back)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in xs]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat of {[t.shape for t in xs]}: {exc}") from None
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(xs), back)


# ---------------------------------------------------------------- normalization / noise


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-column normalization of an (N, C) matrix.

    In training mode the running buffers are updated in place:
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """
    X = x.data
    if X.ndim != 2:
        raise DimensionError(f"batchnorm expects (N, C), got {x.shape}")
    n = X.shape[0]
    G, B = gamma.data, beta.data
    if training:
        if n < 2:
            raise DomainError("batchnorm in train mode needs at least 2 rows")
        mu = X.mean(axis=0)
        xhat = X - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (n / (n - 1))
        out = xhat * G
        out += B

        def back(g):
            gsum = g.sum(axis=0)
            gxhat = np.einsum("ij,ij->j", g, xhat)
            # dx = gamma*inv/n * (n*g - sum(g) - xhat*sum(g*xhat))
            dx = xhat * (-gxhat / n)
            dx += g
            dx -= gsum / n
            dx *= G * inv
            return dx, gxhat, gsum

        return _make(out, (x, gamma, beta), back)

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (X - running_mean) * inv
    out = xhat * G + B

    def back_eval(g):
        return g * (G * inv), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out.astype(X.dtype, copy=False), (x, gamma, beta), back_eval)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
