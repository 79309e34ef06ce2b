"""Dense 64-bit tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` of the
calling thread whenever one of their inputs takes part in differentiation.
Outside a tape, operations run as plain numpy math with no bookkeeping, which
is what inference and finite-difference probing use.

Typical use::

    with Tape() as tape:
        loss = tensor_sum(relu(matmul(x, w)))
    tape.backward(loss)
    w.grad  # populated
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "tensor",
    "zeros",
    "parameter",
    "custom_op",
    "matmul",
    "transpose",
    "add",
    "sub",
    "add_broadcast_row",
    "elementwise_mul",
    "scale",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_rows",
    "layer_norm_rows",
    "dropout",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "mean_rows",
    "tensor_sum",
    "embedding_lookup",
    "cross_entropy",
    "backward",
    "check_finite",
    "AdamState",
    "adam_step",
    "make_rng",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf."""


class BackwardError(RuntimeError):
    """Misuse of the backward pass (non-scalar loss, reused tape)."""


class Tensor:
    """Row-major float64 array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` accumulate into ``grad`` on each
    backward pass. Intermediate results never hold a ``grad``; their adjoints
    live only inside :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} unsupported (max 3)")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        # True for leaves that need grads and for recorded op outputs
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; each maps to the named op below.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of executed operations on one thread.

    Nodes are appended in execution order, so every node's inputs precede it.
    A tape can be replayed backward once; :meth:`reset` clears it for reuse.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - mis-nested context managers
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def record(self, out: Tensor, parents, backward_fn, op: str) -> None:
        if self.consumed:
            raise BackwardError("tape already consumed by backward(); call reset()")
        out._tracked = True
        self.nodes.append(_Node(out, tuple(parents), backward_fn, op))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
        if self.consumed:
            raise BackwardError("backward() called twice on the same tape without reset()")
        if loss.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.requires_grad:
            _accumulate_leaf(loss, adjoint[id(loss)])
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent._tracked:
                    continue
                if parent.requires_grad:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + pg
                    else:
                        adjoint[key] = pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


def custom_op(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str = "custom") -> Tensor:
    """Wrap a forward result and its backward rule as a taped operation.

    ``backward_fn`` maps the output adjoint to one adjoint (or ``None``) per
    parent. The rule is recorded only if a tape is active and some parent is
    tracked.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tracked = False
    tape = _active_tape()
    if tape is not None and any(p._tracked for p in parents):
        tape.record(out, parents, backward_fn, op)
    return out


def check_finite(tensors: Iterable[Tensor] | dict[str, Tensor]) -> None:
    """Raise :class:`NonFiniteError` naming the first tensor holding NaN/Inf."""
    items = tensors.items() if isinstance(tensors, dict) else ((t.name, t) for t in tensors)
    for i, (name, t) in enumerate(items):
        if not np.all(np.isfinite(t.data)):
            label = name or t.name or f"#{i}"
            raise NonFiniteError(f"non-finite values in tensor {label!r} shape={t.shape}")
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            label = name or t.name or f"#{i}"
            raise NonFiniteError(f"non-finite gradient in tensor {label!r} shape={t.shape}")


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def _require_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return custom_op(ad @ bd, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D operand, got {a.shape}")
    return custom_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def add_broadcast_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a length-d vector (shape ``(d,)`` or ``(1, d)``) to every row of ``x``."""
    if x.data.ndim != 2 or row.size != x.shape[1] or row.data.ndim > 2 or (
        row.data.ndim == 2 and row.shape[0] != 1
    ):
        raise ShapeError(f"add_broadcast_row: cannot add {row.shape} to rows of {x.shape}")
    rshape = row.shape

    def bw(g):
        return g, g.sum(axis=0).reshape(rshape)

    return custom_op(x.data + row.data.reshape(1, -1), (x, row), bw, "add_broadcast_row")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "elementwise_mul")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid exp overflow
    xd = x.data
    z = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D operand, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax_rows: non-finite input")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return custom_op(y, (x,), bw, "softmax_rows")


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows expects a 2-D operand, got {x.shape}")
    d = x.shape[1]
    if d < 2:
        raise ShapeError("layer_norm_rows needs at least 2 columns")
    if gain.size != d or bias.size != d:
        raise ShapeError(f"layer_norm_rows: gain/bias size must be {d}")
    gshape, bshape = gain.shape, bias.shape
    gd = gain.data.reshape(1, d)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gd + bias.data.reshape(1, d)

    def bw(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
        )
        return (
            gx,
            (g * xhat).sum(axis=0).reshape(gshape),
            g.sum(axis=0).reshape(bshape),
        )

    return custom_op(y, (x, gain, bias), bw, "layer_norm_rows")


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return custom_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw, "concat_cols")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return [g[bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return custom_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw, "concat_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return custom_op(x.data[:, start:stop].copy(), (x,), bw, "slice_cols")


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise average row, returned as shape ``(1, d)``."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows expects a 2-D operand, got {x.shape}")
    m = x.shape[0]
    return custom_op(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / m, x.shape).copy(),),
        "mean_rows",
    )


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return custom_op(
        np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum"
    )


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; returns ``(len(ids), d)``."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return custom_op(table.data[idx], (table,), bw, "embedding_lookup")


def cross_entropy(logits: Tensor, targets: int | Sequence[int]) -> Tensor:
    """Summed softmax cross-entropy of each logits row against its target id."""
    if logits.data.ndim == 1:
        logits_2d = logits.data.reshape(1, -1)
    else:
        logits_2d = logits.data
    tgt = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if tgt.size != logits_2d.shape[0]:
        raise ShapeError(f"cross_entropy: {logits_2d.shape[0]} rows vs {tgt.size} targets")
    shifted = logits_2d - logits_2d.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(tgt.size)
    loss = -logp[rows, tgt].sum()
    shape = logits.shape

    def bw(g):
        d = np.exp(logp)
        d[rows, tgt] -= 1.0
        return ((d * float(g)).reshape(shape),)

    return custom_op(np.array(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# Optimizer and randomness
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``.

    Parameters with a missing gradient are treated as having a zero gradient,
    so their moments still decay.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator with an explicit 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))
