"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the patch extractor, attention, the transformer,
training) is composed from the primitives here. Constraints the rest of
the package relies on:

* float64 everywhere — gradient checks against central differences need
  the precision, and at desk scale speed does not matter.
* gradients accumulate (``+=`` semantics); callers zero between steps
  with :func:`zero_grads`. ``.grad`` arrays are never mutated in place.
* forward ops are deterministic and never draw randomness; seeded
  generators are owned by callers.
* single-threaded by contract: one compute graph belongs to one worker.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    Data is immutable after construction by convention; only ``grad``
    changes, and only through :meth:`backward` / :func:`zero_grads`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss.

        Populates ``grad`` of every ``requires_grad`` tensor reachable
        from this node. Gradients accumulate into existing ``grad``.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            return  # constant loss: nothing depends on tracked tensors

        # iterative DFS postorder -> topological order (parents first)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = (
            np.ones_like(self.data)
            if self.grad is None
            else self.grad + np.ones_like(self.data)
        )
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def zero_grads(params) -> None:
    """Clear gradients; accepts any iterable of tensors."""
    for t in params:
        t.grad = None


# primitive ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [.., m, k] @ [.., k, n] -> [.., m, n]."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(
            f"matmul: batch dimensions do not broadcast for shapes "
            f"{a.shape} and {b.shape}"
        ) from e

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _from_op(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0.0))

    return _from_op(data, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max-subtraction."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = (g * data).sum(axis=-1, keepdims=True)
        _accum(x, data * (g - gy))

    return _from_op(data, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        _accum(x, g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return _from_op(data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gg - m1 - xhat * m2))
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        _accum(beta, _unbroadcast(g, beta.data.shape))

    return _from_op(data, (x, gamma, beta), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _from_op(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inverse))

    return _from_op(data, (x,), backward)


def transpose_last_two(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose_last_two needs rank >= 2, got shape {x.shape}")
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _from_op(data, tuple(tensors), backward)


def concat_last_axis(tensors) -> Tensor:
    return concat(tensors, axis=-1)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` [V, d] at integer ``ids`` -> [..., d]."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, gt)

    return _from_op(data, (table,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _from_op(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in np.atleast_1d(axis)]
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int) -> Tensor:
    """2-D convolution, NHWC layout: x [B,H,W,Cin] * w [kh,kw,Cin,Cout].

    Implemented as kh*kw shifted slice products; at desk-scale kernel
    sizes that beats an im2col round-trip and keeps the backward rule
    transparent.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x rank 4 and w rank 4, got {x.shape}, {w.shape}")
    if x.shape[-1] != w.shape[2]:
        raise ShapeError(
            f"conv2d: channel mismatch for shapes {x.shape} and {w.shape}"
        )
    B, H, W, _ = x.shape
    kh, kw, _, cout = w.shape
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    data = np.zeros((B, Ho, Wo, cout))
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u : u + s * Ho : s, v : v + s * Wo : s, :]
            data += xs @ w.data[u, v]
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        data = data + b.data
        parents.append(b)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for u in range(kh):
            for v in range(kw):
                xs = xp[:, u : u + s * Ho : s, v : v + s * Wo : s, :]
                gw[u, v] = np.tensordot(xs, g, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, u : u + s * Ho : s, v : v + s * Wo : s, :] += g @ w.data[u, v].T
        _accum(x, gxp[:, p : p + H, p : p + W, :])
        _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 1, 2)))

    return _from_op(data, tuple(parents), backward)


# gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of an autograd-vs-central-difference comparison.

    Relative error for one coordinate is
    ``|a - n| / max(|a|, |n|, rel_floor)`` where ``a`` is the autograd
    gradient and ``n`` the central difference; the floor keeps
    finite-difference noise on near-zero gradients from dominating.
    """

    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple[str, int] | None = None
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        loc = f" at {self.worst[0]}[{self.worst[1]}]" if self.worst else ""
        return (
            f"grad check {status}: max rel error {self.max_rel_error:.3e}{loc} "
            f"over {self.n_checked} coordinates (tol {self.tol:.1e})"
        )


def check_gradients(
    f,
    params,
    eps: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    dense_limit: int = 64,
    sample_size: int = 16,
    rel_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients of ``f()`` to central differences.

    ``f`` must be a deterministic zero-argument callable returning the
    scalar loss Tensor recomputed from ``params`` (a name -> Tensor
    mapping, or an iterable of tensors). Every coordinate of a parameter
    is checked when its size is at most ``dense_limit``; larger tensors
    get a seeded random subsample of ``sample_size`` coordinates.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", t) for i, t in enumerate(params)]
    rng = rng if rng is not None else np.random.default_rng(0)

    zero_grads(t for _, t in named)
    loss = f()
    loss_0 = float(loss.data)
    if not np.isfinite(loss_0):
        raise ValueError(f"check_gradients: loss is not finite ({loss_0})")
    loss.backward()
    grads = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in named
    }

    with no_grad():
        redo = float(f().data)
    if redo != loss_0:
        raise ValueError(
            f"check_gradients: f is not deterministic ({loss_0} vs {redo})"
        )

    max_rel, worst, n_checked = 0.0, None, 0
    failures = []
    with no_grad():
        for name, t in named:
            flat = t.data.reshape(-1)
            if flat.size <= dense_limit:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(
                    rng.choice(flat.size, size=min(sample_size, flat.size), replace=False)
                )
            gflat = grads[name].reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                f_plus = float(f().data)
                flat[c] = orig - eps
                f_minus = float(f().data)
                flat[c] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError(
                        f"check_gradients: non-finite loss while perturbing {name}[{c}]"
                    )
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = gflat[c]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
                n_checked += 1
                if rel > max_rel:
                    max_rel, worst = rel, (name, int(c))
                if rel >= tol:
                    failures.append((name, int(c), float(a), float(numeric), float(rel)))

    return GradCheckReport(
        max_rel_error=max_rel,
        n_checked=n_checked,
        tol=tol,
        worst=worst,
        failures=failures,
    )
