"""Dense float64 matrices and a define-by-run reverse-mode tape.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  A
:class:`Tape` records every operation applied to :class:`Var` nodes and
replays them in reverse to accumulate gradients for registered parameters.
A new tape is created for every forward pass, so the recorded graph can
change from one video to the next.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate ``x`` as a finite 2-D float64 matrix and return it."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Plain matrix product with a shape check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that were broadcast in the forward op
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """A node on a :class:`Tape` holding a float64 array value."""

    __slots__ = ("value", "tape", "parents", "backward_fn", "grad", "name")
    __array_priority__ = 100

    def __init__(self, value, tape: "Tape", parents=(), backward_fn=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._lift(other)))

    def __rsub__(self, other):
        return add(self._lift(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division only by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul_var(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul_var(self._lift(other), self)

    def __getitem__(self, key):
        return index(self, key)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Records operations on :class:`Var` nodes for one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}
        # branch pattern of every non-smooth op, in recording order
        self.branches: list[np.ndarray] = []

    def record_branch(self, pattern) -> None:
        self.branches.append(np.asarray(pattern))

    def signature(self) -> list[np.ndarray]:
        return self.branches

    def _record(self, value, parents=(), backward_fn=None, name=None) -> Var:
        v = Var(value, self, parents, backward_fn, name)
        self.nodes.append(v)
        return v

    def const(self, value) -> Var:
        return self._record(np.asarray(value, dtype=np.float64))

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        v = self._record(np.array(value, dtype=np.float64), name=name)
        self.params[name] = v
        return v

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in params.items()}

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Reverse pass from a scalar ``loss``; returns one gradient per parameter."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        # nodes are appended in creation order, which is a topological order
        stop = self.nodes.index(loss) if self.nodes[-1] is not loss else len(self.nodes) - 1
        for node in reversed(self.nodes[: stop + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None:
                    continue
                g = _unbroadcast(g, parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.all(np.isfinite(g)):
                raise ContractError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        return grads


# ---------------------------------------------------------------- primitives


def add(a: Var, b: Var) -> Var:
    return a.tape._record(a.value + b.value, (a, b), lambda g: (g, g))


def neg(a: Var) -> Var:
    return a.tape._record(-a.value, (a,), lambda g: (-g,))


def scale(a: Var, c: float) -> Var:
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape._record(av * bv, (a, b), lambda g: (g * bv, g * av))


def matmul_var(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"cannot multiply {av.shape} by {bv.shape}")
    return a.tape._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def sigmoid(a: Var) -> Var:
    # tanh form is stable on both tails; clip keeps outputs strictly inside (0, 1)
    out = np.clip(0.5 * (1.0 + np.tanh(0.5 * a.value)), 1e-15, 1.0 - 1e-15)
    return a.tape._record(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    x = a.value
    pos = x > 0
    a.tape.record_branch(pos)
    d = np.where(pos, 1.0, slope)
    return a.tape._record(x * d, (a,), lambda g: (g * d,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    x = a.value
    if np.any(x <= 0):
        raise ContractError("log of non-positive value")
    return a.tape._record(np.log(x), (a,), lambda g: (g / x,))


def vsum(a: Var, axis=None) -> Var:
    x = a.value
    out = x.sum(axis=axis, keepdims=axis is not None)
    if axis is None:
        out = np.asarray(out).reshape(1, 1)

    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return a.tape._record(out, (a,), back)


def mean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(vsum(a, axis), 1.0 / n)


def index(a: Var, key) -> Var:
    """Fancy or basic indexing; the backward pass scatter-adds."""
    x = a.value
    out = np.array(x[key], dtype=np.float64)

    def back(g):
        full = np.zeros_like(x)
        np.add.at(full, key, g)
        return (full,)

    return a.tape._record(out, (a,), back)


def take_cols(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    return index(a, (slice(None), idx))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    tape = parts[0].tape
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape._record(out, tuple(parts), back)


def log_softmax(a: Var, axis: int = 0) -> Var:
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return a.tape._record(out, (a,), back)


def col_norm(a: Var) -> Var:
    """Euclidean norm of every column, shape (1, n).  Gradient at 0 is 0."""
    x = a.value
    n = np.sqrt((x * x).sum(axis=0, keepdims=True))
    a.tape.record_branch(n > 0)
    safe = np.where(n > 0, n, 1.0)

    def back(g):
        return (g * np.where(n > 0, x / safe, 0.0),)

    return a.tape._record(n, (a,), back)


def temporal_patches(a: Var, k: int) -> Var:
    """Stack ``k`` shifted copies of a (d, T) sequence into (d*k, T).

    Row block ``j`` holds the sequence shifted so that column ``t`` sees
    snippet ``t + j - k//2`` (zero outside the video).  Multiplying the
    result by a (out, d*k) weight is a same-padded temporal convolution.
    """
    if k < 1 or k % 2 == 0:
        raise ContractError("kernel span must be a positive odd number")
    x = a.value
    d, T = x.shape
    half = k // 2
    padded = np.zeros((d, T + 2 * half))
    padded[:, half : half + T] = x
    out = np.concatenate([padded[:, j : j + T] for j in range(k)], axis=0)

    def back(g):
        gp = np.zeros((d, T + 2 * half))
        for j in range(k):
            gp[:, j : j + T] += g[j * d : (j + 1) * d]
        return (gp[:, half : half + T],)

    return a.tape._record(out, (a,), back)


def conv1d(x: Var, weight: Var, bias: Var | None, k: int) -> Var:
    """Same-padded temporal convolution; ``weight`` is (out, d*k)."""
    if weight.value.shape[1] != x.value.shape[0] * k:
        raise ShapeError(
            f"conv weight {weight.value.shape} does not fit input dim {x.value.shape[0]} with span {k}"
        )
    out = weight @ (temporal_patches(x, k) if k > 1 else x)
    return out + bias if bias is not None else out


# ---------------------------------------------------------------- checking


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    loss_fn: Callable[[Tape, dict[str, Var]], Var | Sequence[Var]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    grad_hook: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]] | None = None,
    max_shrink: int = 3,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(tape, vars)`` builds the scalar loss from the watched
    parameters, or a sequence of scalar terms whose sum is the loss.  Terms
    are differenced one at a time so a large term that does not depend on
    a parameter cannot swamp a small one in rounding.

    The error per entry is ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    If the two probes of an entry fall on different pieces of a
    piecewise-smooth op (see :meth:`Tape.record_branch`), the step is cut by
    10x up to ``max_shrink`` times.  Never raises: a failure inside
    ``loss_fn`` is reported as ``inf``.
    """
    def terms_of(out):
        return list(out) if isinstance(out, (list, tuple)) else [out]

    def total_of(tape, terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc

    try:
        tape = Tape()
        terms = terms_of(loss_fn(tape, tape.watch(params)))
        grads = tape.backward(total_of(tape, terms))
        if grad_hook is not None:
            grads = grad_hook(grads)
        base_sig = [b.copy() for b in tape.signature()]

        def probe(p):
            t = Tape()
            vals = [float(v.value.reshape(())) for v in terms_of(loss_fn(t, t.watch(p)))]
            return np.array(vals), t.signature()

        worst = 0.0
        work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for name in params:
            arr = work[name]
            for pos in np.ndindex(arr.shape):
                orig = arr[pos]
                h = eps
                for _ in range(max_shrink + 1):
                    arr[pos] = orig + h
                    up, sig_up = probe(work)
                    arr[pos] = orig - h
                    down, sig_down = probe(work)
                    arr[pos] = orig
                    if _same_branches(sig_up, base_sig) and _same_branches(sig_down, base_sig):
                        break
                    h /= 10
                cd = float(((up - down) / (2 * h)).sum())
                an = float(grads[name][pos])
                err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
                if not np.isfinite(err):
                    return float("inf")
                worst = max(worst, err)
        return worst
    except Exception:
        return float("inf")
