"""Dense 2-D tensors with reverse-mode differentiation.

Every value is a float64 matrix. Operations that involve at least one tensor
with ``requires_grad`` set record their operands and a backward closure; calling
:meth:`Tensor.backward` on a scalar result builds a :class:`Tape` (a reverse
topological ordering of the recorded operations) and replays it.

Reductions use numpy's default ``sum`` over a fixed axis order, so a given
seed and input produce bit-identical results run to run on one thread.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class SingularGradientError(ArithmeticError):
    """A backward pass hit a point where the operation is not differentiable."""


class Tensor:
    """A dense ``rows x cols`` float64 matrix that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> Tape:
        """Propagate gradients from this tensor to every recorded ancestor.

        ``seed`` defaults to ones, which is only allowed for 1x1 results.
        Returns the tape that was replayed.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a 1x1 tensor, got {self.shape}")
            seed = np.ones_like(self.data)
        tape = Tape.from_root(self)
        tape.replay(seed)
        return tape

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other) -> Tensor:
        return add(self, _lift(other))

    def __radd__(self, other) -> Tensor:
        return add(_lift(other), self)

    def __sub__(self, other) -> Tensor:
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other) -> Tensor:
        return add(_lift(other), scale(self, -1.0))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Recorded operations in the order a backward pass must visit them."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        # iterative post-order DFS; reversed post-order is a reverse topological order
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
        order.reverse()
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def operations(self) -> list[Tensor]:
        """Non-leaf nodes, in replay order."""
        return [n for n in self.nodes if n._backward is not None]

    def replay(self, seed: np.ndarray) -> None:
        root = self.nodes[0]
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {root.shape}")
        # intermediate grads are rebuilt from scratch on every replay
        for node in self.nodes:
            if node._backward is not None:
                node.grad = None
        root._accumulate(seed)
        for node in self.nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1xN row (broadcast down rows) or 1x1."""
    if a.shape == b.shape:
        pass
    elif b.shape == (1, a.cols) or b.shape == (1, 1):
        pass
    elif a.shape == (1, b.cols) or a.shape == (1, 1):
        return add(b, a)
    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            if b.shape == g.shape:
                b._accumulate(g)
            elif b.shape == (1, 1):
                b._accumulate(np.array([[g.sum()]]))
            else:
                b._accumulate(g.sum(axis=0, keepdims=True))

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), "scale", backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _result(np.maximum(a.data, 0.0), (a,), "relu", backward)  # NaN propagates


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _result(out, (a,), "exp", backward)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        a._accumulate(g - probs * g.sum(axis=1, keepdims=True))

    return _result(out, (a,), "log_softmax", backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols row mismatch: {a.shape} | {b.shape}")
    p = a.cols

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :p])
        if b.requires_grad:
            b._accumulate(g[:, p:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), "concat_cols", backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {t.cols for t in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows column mismatch: {[t.shape for t in parts]}")
    bounds = np.cumsum([0] + [t.rows for t in parts])

    def backward(g):
        for t, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return _result(np.concatenate([t.data for t in parts], axis=0), tuple(parts),
                   "concat_rows", backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.rows:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    return _result(a.data[start:stop].copy(), (a,), "slice_rows", backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.full_like(a.data, g[0, 0]))

    return _result(np.array([[a.data.sum()]]), (a,), "sum", backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[i, index[i]]`` for every row into a Bx1 column."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != (a.rows,):
        raise ShapeError(f"pick needs one index per row: {index.shape} vs {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.cols):
        raise IndexError(f"pick index out of range [0, {a.cols})")
    rows = np.arange(a.rows)

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g[:, 0]
        a._accumulate(full)

    return _result(a.data[rows, index].reshape(-1, 1), (a,), "pick", backward)


def frobenius_norm_op(a: Tensor) -> Tensor:
    """sqrt of the sum of squared entries, as a 1x1 tensor."""
    norm = float(np.sqrt((a.data * a.data).sum()))

    def backward(g):
        if norm == 0.0:
            raise SingularGradientError("Frobenius norm is not differentiable at the zero matrix")
        a._accumulate(g[0, 0] * a.data / norm)

    return _result(np.array([[norm]]), (a,), "frobenius_norm", backward)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    def __init__(self, max_rel_error: float, tol: float, checked: int, worst: tuple | None):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.checked = checked
        self.worst = worst  # (param index, row, col, analytic, numeric)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({status}, max_rel_error={self.max_rel_error:.3e}, "
                f"tol={self.tol:g}, checked={self.checked})")


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
               tol: float = 1e-6, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``; the
    parameters are perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("objective is not finite at the base point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst_err, worst, checked = 0.0, None, 0
    for k, p in enumerate(params):
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + step
            fp = f().item()
            p.data[idx] = orig - step
            fm = f().item()
            p.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"objective not finite when perturbing param {k} at {idx}")
            numeric = (fp - fm) / (2.0 * step)
            err = relative_error(analytic[k][idx], numeric, floor)
            checked += 1
            if worst is None or err > worst_err:
                worst_err = err
                worst = (k, *idx, float(analytic[k][idx]), numeric)
    for p in params:
        p.zero_grad()
    return GradCheckReport(worst_err, tol, checked, worst)
