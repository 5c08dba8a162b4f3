"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is deliberately small: exactly what a serialized
point-cloud transformer with sparse expert routing needs. Every op records
a backward closure on the result node; the graph of nodes *is* the tape.
Tensors are immutable values after creation (optimizers build replacement
data in place between steps, never during a taped forward). A graph is
confined to one thread; independent graphs on other threads share nothing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, ShapeError

_tls = threading.local()


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager disabling tape recording (inference fast path)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def kink_watch() -> list | None:
    return getattr(_tls, "kink_watch", None)


class watch_kink_margins:
    """Collect min |input| of every relu evaluated inside the context.

    Finite differences are only valid away from relu kinks; gradient-check
    harnesses use the collected margins as a guard.
    """

    def __enter__(self):
        self.margins: list[float] = []
        _tls.kink_watch = self.margins
        return self

    def __exit__(self, *exc):
        _tls.kink_watch = None
        return False

    @property
    def min_margin(self) -> float:
        return min(self.margins) if self.margins else np.inf


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_own", "_parents",
                 "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._grad_own = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # First contribution borrows the producer's array (never mutated in
    # place while borrowed); later contributions switch to an owned buffer.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_own = False
    elif t._grad_own:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_own = True


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
              name: str | None = None) -> Tensor:
    """Create a taped node with an analytic backward.

    `backward(upstream)` must return one gradient array (or None) per
    parent, in order. Used by higher modules to register composite ops
    (windowed attention, cross-entropy) as single tape nodes.
    """
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, name=name)
    if needs:
        out._parents = tuple(parents)

        def _bw():
            grads = backward(out.grad)
            for p, g in zip(out._parents, grads):
                if g is not None:
                    _accumulate(p, g)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _binary_data(a: Tensor, b) -> tuple[np.ndarray, bool]:
    """Return b's data and whether b is a Tensor; enforce scalar-or-equal shape."""
    if isinstance(b, Tensor):
        if b.data.shape != a.data.shape and b.data.shape != ():
            raise ShapeError(f"operand shapes {a.data.shape} and {b.data.shape} "
                             "differ (only scalar or equal shapes combine)")
        return b.data, True
    return np.float64(b), False


def add(a: Tensor, b) -> Tensor:
    bdata, is_t = _binary_data(a, b)
    parents = (a, b) if is_t else (a,)

    def bw(g):
        if is_t and b.data.shape == ():
            return g, np.sum(g)
        return (g, g) if is_t else (g,)

    return make_node(a.data + bdata, parents, bw)


def sub(a: Tensor, b) -> Tensor:
    bdata, is_t = _binary_data(a, b)
    parents = (a, b) if is_t else (a,)

    def bw(g):
        if is_t and b.data.shape == ():
            return g, -np.sum(g)
        return (g, -g) if is_t else (g,)

    return make_node(a.data - bdata, parents, bw)


def mul(a: Tensor, b) -> Tensor:
    bdata, is_t = _binary_data(a, b)
    parents = (a, b) if is_t else (a,)

    def bw(g):
        if is_t:
            gb = None
            if b.requires_grad:
                gb = g * a.data
                if b.data.shape == ():
                    gb = np.sum(gb)
            return g * bdata if a.requires_grad else None, gb
        return (g * bdata,)

    return make_node(a.data * bdata, parents, bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,))


def recip(x: Tensor) -> Tensor:
    inv = 1.0 / x.data
    return make_node(inv, (x,), lambda g: (-g * inv * inv,))


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    watch = kink_watch()
    if watch is not None and x.data.size:
        watch.append(float(np.min(np.abs(x.data))))
    # gradient at exactly 0 is defined as 0
    return make_node(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return make_node(out, (x,), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "silu":
        return silu(x)
    raise ShapeError(f"unknown activation kind {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return make_node(a.data @ b.data, (a, b), bw)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x[T,D] + b[D] broadcast over rows (the one sanctioned broadcast: bias add)."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"bias shape {b.data.shape} does not match rows of {x.data.shape}")
    return make_node(x.data + b.data[None, :], (x, b), lambda g: (g, g.sum(axis=0)))


def expand_cols(v: Tensor, ncols: int) -> Tensor:
    """Tile a column [P] or [P,1] to [P,ncols]; backward sums the columns."""
    col = v.data.reshape(-1, 1)
    out = np.repeat(col, ncols, axis=1)
    return make_node(out, (v,), lambda g: (g.sum(axis=1).reshape(v.data.shape),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def sum_all(x: Tensor) -> Tensor:
    return make_node(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def row_sum(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"row_sum needs a 2-D operand, got {x.data.shape}")
    return make_node(x.data.sum(axis=1, keepdims=True), (x,),
                     lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def gather_rows(x: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Select rows x[idx]; pass unique=True when no index repeats."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_node(x.data[idx], (x,), bw)


def scatter_add_rows(x: Tensor, idx: np.ndarray, num_rows: int,
                     unique: bool = False, grouped: bool = False) -> Tensor:
    """Sum rows of x into an output of num_rows rows at positions idx.

    unique=True: no index repeats (plain assignment). grouped=True: idx is
    non-decreasing (contiguous groups, summed with reduceat).
    """
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((num_rows,) + x.data.shape[1:])
    if unique:
        out[idx] = x.data
    elif grouped and idx.size:
        boundary = np.ones(idx.size, dtype=bool)
        boundary[1:] = idx[1:] != idx[:-1]
        starts = np.nonzero(boundary)[0]
        out[idx[starts]] = np.add.reduceat(x.data, starts, axis=0)
    else:
        np.add.at(out, idx, x.data)
    return make_node(out, (x,), lambda g: (g[idx],))


def take_flat(x: Tensor, flat_idx: np.ndarray, shape: tuple[int, ...],
              unique: bool = False) -> Tensor:
    flat_idx = np.asarray(flat_idx, dtype=np.intp)

    def bw(g):
        gx = np.zeros(x.data.size)
        if unique:
            gx[flat_idx] = g.ravel()
        else:
            np.add.at(gx, flat_idx, g.ravel())
        return (gx.reshape(x.data.shape),)

    return make_node(x.data.ravel()[flat_idx].reshape(shape), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return make_node(p, (x,), bw)


def unit_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize each row; rows with norm < eps are scaled by 1/eps."""
    r = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    r = np.maximum(r, eps)
    y = x.data / r

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / r,)

    return make_node(y, (x,), bw)


# ---------------------------------------------------------------------------
# normalization


def normalize(x: Tensor, kind: str, gain: Tensor, bias: Tensor,
              running_mean: np.ndarray | None = None,
              running_var: np.ndarray | None = None,
              training: bool = False, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Normalize a [tokens, D] tensor.

    kind="batch" normalizes each channel over the token axis (training mode
    uses batch statistics and updates the running buffers in place with the
    given momentum; eval mode uses the running buffers). kind="layer" and
    "rms" normalize each token over its channels. eps sits inside the
    square root in all cases.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"normalize needs [tokens, D], got {x.data.shape}")
    t, d = x.data.shape
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"gain/bias of shape {gain.data.shape}/{bias.data.shape} "
                         f"do not match channel count {d}")

    if kind == "batch":
        if training:
            if t < 2:
                raise DegenerateBatchError(
                    f"batch normalization needs >= 2 tokens in training mode, got {t}")
            mu = x.data.mean(axis=0)
            var = x.data.var(axis=0)
            if running_mean is not None:
                running_mean *= 1.0 - momentum
                running_mean += momentum * mu
            if running_var is not None:
                running_var *= 1.0 - momentum
                running_var += momentum * var
        else:
            mu = running_mean if running_mean is not None else np.zeros(d)
            var = running_var if running_var is not None else np.ones(d)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gain.data + bias.data

        def bw(g):
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
            gg = g * gain.data
            if training:
                dx = inv * (gg - gg.mean(axis=0) - xhat * (gg * xhat).mean(axis=0))
            else:
                dx = inv * gg
            return dx, dgain, dbias

        return make_node(out, (x, gain, bias), bw)

    if kind == "layer":
        mu = x.data.mean(axis=1, keepdims=True)
        var = x.data.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gain.data + bias.data

        def bw(g):
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
            gg = g * gain.data
            dx = inv * (gg - gg.mean(axis=1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=1, keepdims=True))
            return dx, dgain, dbias

        return make_node(out, (x, gain, bias), bw)

    if kind == "rms":
        inv = 1.0 / np.sqrt((x.data ** 2).mean(axis=1, keepdims=True) + eps)
        xhat = x.data * inv
        out = xhat * gain.data + bias.data

        def bw(g):
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
            gg = g * gain.data
            dx = inv * (gg - xhat * (gg * xhat).mean(axis=1, keepdims=True))
            return dx, dgain, dbias

        return make_node(out, (x, gain, bias), bw)

    raise ShapeError(f"unknown normalization kind {kind!r}")


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Topologically ordered view of the graph below a root node."""

    nodes: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def build_tape(root: Tensor) -> Tape:
    """Iterative post-order DFS; parents always precede their children."""
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
    return Tape(order)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map from requires_grad leaves reached by the sweep to their
    gradients; leaf .grad fields are populated as well. If `params` is
    given, every listed tensor appears in the map, with an exact zero
    gradient when the loss never touched it. The graph is dismantled
    afterwards, so a second sweep from the same loss is impossible.

    Returned gradient arrays may alias each other (e.g. both operands of a
    plain add); callers must treat them as read-only.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = build_tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward()
    grads: dict[Tensor, np.ndarray] = {}
    for node in tape.nodes:
        if node.requires_grad and not node._parents and node.grad is not None:
            grads[node] = node.grad
    # clear the tape: break references and drop interior gradients
    for node in tape.nodes:
        if node._parents:
            node._parents = ()
            node._backward = None
            node.grad = None
            node._grad_own = False
    if params is not None:
        for p in params:
            if p not in grads:
                grads[p] = np.zeros_like(p.data)
    return grads


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self) -> str:
        lines = [f"gradient check (tol={self.tol:g}):"]
        for e in self.entries:
            mark = "ok  " if e.passed else "FAIL"
            lines.append(f"  {mark} {e.name}: max rel err {e.max_rel_err:.3e}")
        return "\n".join(lines)


def check_gradients(f: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                    h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of f() against central finite differences.

    f must be deterministic given the parameter values; every element of
    every parameter is perturbed by +-h. Relative error uses
    |a-b| / max(|a|, |b|, 1e-6).
    """
    for _, p in params:
        p.grad = None
    loss = f()
    grads = backward(loss, params=[p for _, p in params])

    entries = []
    for name, p in params:
        tape_grad = grads[p]
        fd = np.zeros_like(p.data)
        flat = p.data.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fplus = float(f().data)
            flat[i] = orig - h
            fminus = float(f().data)
            flat[i] = orig
            fd_flat[i] = (fplus - fminus) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(tape_grad), np.abs(fd)), 1e-6)
        rel = float(np.max(np.abs(tape_grad - fd) / denom)) if flat.size else 0.0
        entries.append(GradCheckEntry(name, rel, rel < tol))
    return GradCheckReport(entries, tol)
