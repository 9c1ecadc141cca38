"""Minimal reverse-mode automatic differentiation over numpy arrays.

A single audited mechanism backs every gradient in the package: each op
records its parents and a closure producing parent gradients from the
upstream gradient.  `backward` walks the graph in reverse topological
order.  Ops are deliberately few: matmul, broadcast arithmetic, relu,
sigmoid, exp, log, pow, reductions (sum/mean/max), fused softmax, row
gather, reshape/transpose/concat.  Everything else is composed.

Discrete selections (kNN edges, argmax routing in max) are constants of
the graph: perturbing inputs never re-routes them inside one tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Tensor:
    """A node in the tape: an ndarray plus backward bookkeeping."""

    __slots__ = ("data", "grad", "_parents", "_grad_fn")

    def __init__(self, data, parents=(), grad_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._grad_fn = grad_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._grad_fn is None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        for t in order:
            t.grad = None
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._grad_fn is None or t.grad is None:
                continue
            for parent, g in zip(t._parents, t._grad_fn(t.grad)):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
                else:
                    parent.grad = parent.grad + g

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={self.is_leaf})"


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    # Sum out axes that numpy broadcasting introduced or expanded.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        grad_fn=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        grad_fn=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        grad_fn=lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data / b.data,
        parents=(a, b),
        grad_fn=lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(a.data @ b.data, parents=(a, b), grad_fn=grad_fn)


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    out = a.data ** e
    return Tensor(
        out,
        parents=(a,),
        grad_fn=lambda g: (g * e * a.data ** (e - 1.0),),
    )


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(a.data * mask, parents=(a,), grad_fn=lambda g: (g * mask,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), grad_fn=lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=(a,), grad_fn=lambda g: (g / a.data,))


def sigmoid(a):
    a = as_tensor(a)
    out = np.empty_like(a.data, dtype=np.float64)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    out = out.astype(a.data.dtype, copy=False)
    return Tensor(out, parents=(a,), grad_fn=lambda g: (g * out * (1.0 - out),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor(out, parents=(a,), grad_fn=grad_fn)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis, keepdims=False):
    """Max along one axis; gradient routes to the first argmax (lowest index)."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = a.data.argmax(axis=axis)

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gg, axis=axis)
        return (grad,)

    return Tensor(out, parents=(a,), grad_fn=grad_fn)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return Tensor(s, parents=(a,), grad_fn=grad_fn)


def gather_rows(a, index):
    """out[..., :] = a[index[...], :] for a 2-D tensor and integer index array."""
    a = as_tensor(a)
    index = np.asarray(index)

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index.reshape(-1), g.reshape(-1, a.data.shape[-1]))
        return (grad,)

    return Tensor(a.data[index], parents=(a,), grad_fn=grad_fn)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(
        a.data.reshape(shape),
        parents=(a,),
        grad_fn=lambda g: (g.reshape(a.data.shape),),
    )


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return Tensor(
        a.data.transpose(axes),
        parents=(a,),
        grad_fn=lambda g: (g.transpose(inverse),),
    )


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        grad_fn=grad_fn,
    )


def l2_normalize(a, axis=-1, eps=1e-12):
    """x / sqrt(sum(x^2) + eps), composed from primitives."""
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    inv = power(add(sq, eps), -0.5)
    return mul(a, inv)


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter-block worst relative error from central differences."""

    passed: bool
    tol: float
    max_rel_err: float
    per_block: dict[str, float] = field(default_factory=dict)

    def __str__(self):
        lines = [f"grad_check: {'PASS' if self.passed else 'FAIL'} "
                 f"(max rel err {self.max_rel_err:.3e}, tol {self.tol:.1e})"]
        for name, err in self.per_block.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(f, params, tol=1e-4, step=1e-5, max_coords=64, rng=None):
    """Compare analytic gradients of scalar f() against central differences.

    `f` is a zero-argument callable rebuilding the graph from the current
    `.data` of each Tensor in `params` (a dict name -> Tensor, float64).
    For every block at most `max_coords` coordinates are probed (all of
    them when the block is smaller).  Relative error uses the flooring
    |a - n| / max(|a|, |n|, 1) so near-zero gradients are judged on an
    absolute scale.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params ({name} is {p.data.dtype})")

    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("non-finite loss")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    per_block = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            lp = f().data.item()
            flat[c] = orig - step
            lm = f().data.item()
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
        per_block[name] = worst

    max_err = max(per_block.values()) if per_block else 0.0
    return GradCheckReport(passed=max_err <= tol, tol=tol, max_rel_err=max_err,
                           per_block=per_block)
