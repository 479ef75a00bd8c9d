"""Reverse-mode automatic differentiation over float64 numpy arrays.

A deliberately small tape: each op records its parents and a closure that
routes the output gradient back to them.  Every public operation checks
its result for NaN/Inf and raises :class:`NumericError` instead of letting
non-finite values propagate.

Graph recording is skipped entirely when no input requires gradients, so
frozen forward passes cost plain numpy.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DeterminismError, NumericError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (frozen forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        if not np.all(np.isfinite(data)):
            raise NumericError("operation produced a non-finite value")
        out = Tensor(data)
        if _GRAD_ENABLED:
            live = tuple(p for p in parents if p.requires_grad or p._parents)
            if live:
                out.requires_grad = True
                out._parents = live
                out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- backward pass ------------------------------------------------

    def backward(self):
        if self.data.shape != ():
            raise ShapeError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones(())}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf parameter
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if parent is None:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.copy() if pg.base is not None else pg
                else:
                    grads[id(parent)] = acc + pg

    # -- arithmetic ---------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def back(g):
            out = []
            if a.requires_grad:
                out.append((a, _unbroadcast(g, a.data.shape)))
            if b.requires_grad:
                out.append((b, _unbroadcast(g, b.data.shape)))
            return out

        return Tensor._result(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._result(-a.data, (a,), lambda g: ((a, -g),))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def back(g):
            return (
                (a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)),
            )

        return Tensor._result(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def back(g):
            return (
                (a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
            )

        return Tensor._result(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)

        def back(g):
            return ((a, g * e * np.power(a.data, e - 1.0)),)

        return Tensor._result(np.power(a.data, e), (a,), back)

    # -- elementwise functions -----------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: ((a, g * mask),))

    def clamp(self, lo: float, hi: float):
        """Clip values into [lo, hi]; gradient passes through the interior
        and is zero where the clip engages."""
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return Tensor._result(
            np.clip(a.data, lo, hi), (a,), lambda g: ((a, g * mask),)
        )

    def sigmoid(self):
        a = self
        out = np.empty_like(a.data)
        pos = a.data >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ez = np.exp(a.data[~pos])
        out[~pos] = ez / (1.0 + ez)

        def back(g):
            return ((a, g * out * (1.0 - out)),)

        return Tensor._result(out, (a,), back)

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._result(out, (a,), lambda g: ((a, g * out),))

    def log(self):
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return Tensor._result(out, (a,), lambda g: ((a, g / a.data),))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._result(out, (a,), lambda g: ((a, g * 0.5 / out),))

    # -- reductions and reshaping ---------------------------------------

    def sum(self, axis=None):
        a = self
        shape = a.data.shape

        def back(g):
            if axis is None:
                return ((a, np.broadcast_to(g, shape).astype(np.float64)),)
            ge = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(ge, shape).astype(np.float64)),)

        return Tensor._result(a.data.sum(axis=axis), (a,), back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / float(n)

    def reshape(self, *shape):
        a = self
        old = a.data.shape
        return Tensor._result(a.data.reshape(*shape), (a,), lambda g: ((a, g.reshape(old)),))

    # -- indexing -------------------------------------------------------

    def take(self, idx):
        """Gather elements (1-d) or rows (2-d) by integer index array."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)

        def back(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            return ((a, acc),)

        return Tensor._result(a.data[idx], (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product supporting (m,k)@(k,n), (m,k)@(k,), (k,)@(k,n), (k,)@(k,)."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul mismatch: {ad.shape} @ {bd.shape}")

    def back(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return ((a, g @ bd.T), (b, ad.T @ g))
        if ad.ndim == 2 and bd.ndim == 1:
            return ((a, np.outer(g, bd)), (b, ad.T @ g))
        if ad.ndim == 1 and bd.ndim == 2:
            return ((a, bd @ g), (b, np.outer(ad, g)))
        return ((a, g * bd), (b, g * ad))

    return Tensor._result(ad @ bd, (a, b), back)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along axis 1."""
    datas = [p.data for p in parts]
    widths = [d.shape[1] for d in datas]
    offsets = np.cumsum([0] + widths)

    def back(g):
        return tuple((p, g[:, offsets[i]:offsets[i + 1]]) for i, p in enumerate(parts))

    return Tensor._result(np.concatenate(datas, axis=1), tuple(parts), back)


def concat1d(parts: list[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d tensor."""
    data = np.array([p.data for p in parts], dtype=np.float64)

    def back(g):
        return tuple((p, np.asarray(g[i])) for i, p in enumerate(parts))

    return Tensor._result(data, tuple(parts), back)


def tile_row(v: Tensor, n: int) -> Tensor:
    """Broadcast a (d,) tensor to (n, d); gradient sums over rows."""
    return Tensor._result(
        np.broadcast_to(v.data, (n, v.data.shape[0])).copy(),
        (v,),
        lambda g: ((v, g.sum(axis=0)),),
    )


class RowIndexer:
    """Precomputed gather/scatter routing for a fixed index array.

    Gather reads rows ``x[idx]``; scatter sums message rows into their
    target rows.  The sparse incidence matrix makes the scatter (and the
    gather's backward) a single CSR matmul.
    """

    def __init__(self, idx, num_rows: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.num_rows = int(num_rows)
        self._inc = sp.csr_matrix(
            (np.ones(len(self.idx)), (self.idx, np.arange(len(self.idx)))),
            shape=(self.num_rows, len(self.idx)),
        )

    def scatter_np(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(self._inc @ m)

    def gather_np(self, x: np.ndarray) -> np.ndarray:
        return x[self.idx]


def gather_rows(x: Tensor, indexer: RowIndexer) -> Tensor:
    return Tensor._result(
        indexer.gather_np(x.data), (x,), lambda g: ((x, indexer.scatter_np(g)),)
    )


def scatter_add_rows(m: Tensor, indexer: RowIndexer) -> Tensor:
    return Tensor._result(
        indexer.scatter_np(m.data), (m,), lambda g: ((m, indexer.gather_np(g)),)
    )


def quad_form(s: Tensor, mat: sp.spmatrix) -> Tensor:
    """s^T M s for a constant symmetric sparse matrix M."""
    if mat.shape[0] != s.data.shape[0]:
        raise ShapeError(f"quad_form mismatch: {mat.shape} vs {s.data.shape}")
    ms = np.asarray(mat @ s.data)
    return Tensor._result(
        np.asarray(s.data @ ms), (s,), lambda g: ((s, g * 2.0 * ms),)
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum()


def norm(a: Tensor) -> Tensor:
    """L2 norm with a floor inside the sqrt so gradients stay finite at the
    origin and products of two guarded norms cannot underflow to zero;
    invisible (< 1 ulp) for norms above 1e-4."""
    return ((a * a).sum() + 1e-24) ** 0.5


def cosine(a: Tensor, b: Tensor) -> Tensor:
    return dot(a, b) / (norm(a) * norm(b))


def logsumexp(c: Tensor) -> Tensor:
    """Stable log-sum-exp of a 1-d tensor (max handled as a constant shift)."""
    m = float(c.data.max())
    return (c - m).exp().sum().log() + m


def softmax_t(c: Tensor, tau: float) -> Tensor:
    """Differentiable temperature softmax of a 1-d tensor."""
    x = c / float(tau)
    x = x - float(x.data.max())
    e = x.exp()
    return e / e.sum()


def kl_div(p: Tensor, q: Tensor, eps: float = 1e-10) -> Tensor:
    """Differentiable KL(p || q) with the same epsilon smoothing of q as
    :func:`graphret.numerics.kl_divergence`.  Requires p > 0 elementwise."""
    qs = (q + eps) / (q + eps).sum()
    return (p * (p.log() - qs.log())).sum()


class Parameter(Tensor):
    """A trainable leaf tensor with a named slot and accumulated gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def grad_check(loss_fn, params: list[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    loss_fn must be a zero-argument callable returning a scalar Tensor and
    must be deterministic; this is verified by evaluating it twice.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise NumericError(f"grad_check eps must lie in [1e-7, 1e-4], got {eps}")
    v1 = loss_fn().item()
    v2 = loss_fn().item()
    if v1 != v2:
        raise DeterminismError(
            f"loss_fn returned different values on identical inputs: {v1} vs {v2}"
        )
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = loss_fn().item()
            flat[j] = orig - eps
            f_minus = loss_fn().item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[pi].reshape(-1)[j]
            rel = abs(a - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, rel)
    return worst
