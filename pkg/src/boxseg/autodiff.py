"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and records, per producing operation, a
closure that routes the output gradient back to the inputs. ``backward`` on a
scalar walks the graph in reverse topological order and accumulates ``grad``
on every tensor with ``requires_grad``. Tensors that do not require gradients
keep no graph edges, so inference carries no bookkeeping cost.

The op set is intentionally small: broadcasted arithmetic, matmul, a few
pointwise nonlinearities, reductions, and the shape ops needed to express a
transformer. Dtype follows numpy promotion, so the same graph runs in float32
for training and float64 for finite-difference comparison.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)
_INV_SQRT_TAU = 1.0 / np.sqrt(2.0 * np.pi)  # normal pdf coefficient, for gelu'


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy scalars (e.g. from full reductions) keep their precision
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        if not requires_grad:  # plain loop: this runs for every op in a forward pass
            for parent in _prev:
                if parent.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad
        self._backward = None
        # children are only retained when a gradient will flow through them
        self._prev = _prev if requires_grad else ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS, graphs can outgrow the recursion limit
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in seen:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = Tensor(self.data + other.data, _prev=(self, other))
        if out.requires_grad:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(-g)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = Tensor(self.data * other.data, _prev=(self, other))
        if out.requires_grad:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = Tensor(self.data / other.data, _prev=(self, other))
        if out.requires_grad:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            out._backward = backward
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.data ** exponent, _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, p=exponent: a._accumulate(
                g * p * a.data ** (p - 1)
            )
        return out

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dims")
        out = Tensor(np.matmul(self.data, other.data), _prev=(self, other))
        if out.requires_grad:
            def backward(g, a=self, b=other):
                if a.requires_grad:
                    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                    a._accumulate(_unbroadcast(ga, a.data.shape))
                if b.requires_grad:
                    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                    b._accumulate(_unbroadcast(gb, b.data.shape))
            out._backward = backward
        return out

    __matmul__ = matmul

    # -- pointwise ----------------------------------------------------------

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, y=out.data: a._accumulate(g * y)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g / a.data)
        return out

    def tanh(self) -> "Tensor":
        out = Tensor(np.tanh(self.data), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, y=out.data: a._accumulate(g * (1.0 - y * y))
        return out

    def sigmoid(self) -> "Tensor":
        # evaluated piecewise so neither branch exponentiates a large positive
        x = self.data
        e = np.exp(-np.abs(x))
        denom = 1.0 + e
        y = np.where(x >= 0, 1.0 / denom, e / denom)
        y = y.astype(x.dtype, copy=False)
        out = Tensor(y, _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, s=y: a._accumulate(g * s * (1.0 - s))
        return out

    def erf(self) -> "Tensor":
        out = Tensor(_erf(self.data).astype(self.data.dtype), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(
                g * 2.0 * _INV_SQRT_PI * np.exp(-a.data * a.data)
            )
        return out

    def gelu(self) -> "Tensor":
        # exact form: x * Phi(x) with the Gaussian CDF via erf, fused into one
        # node; d/dx [x Phi(x)] = Phi(x) + x phi(x)
        dt = self.data.dtype
        t = self.data * np.asarray(1.0 / np.sqrt(2.0), dtype=dt)
        phi = _erf(t).astype(dt, copy=False)  # fresh array, safe to mutate
        phi += np.asarray(1.0, dtype=dt)
        phi *= np.asarray(0.5, dtype=dt)
        out = Tensor(self.data * phi, _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self, phi=phi, t=t: a._accumulate(
                g * (phi + a.data * np.exp(-t * t) * _INV_SQRT_TAU)
            )
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = Tensor(np.clip(self.data, lo, hi), _prev=(self,))
        if out.requires_grad:
            mask = ((self.data >= lo) & (self.data <= hi)).astype(self.data.dtype)
            out._backward = lambda g, a=self, m=mask: a._accumulate(g * m)
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,))
        if out.requires_grad:
            def backward(g, a=self, axis=axis, keepdims=keepdims):
                if axis is not None and not keepdims:
                    axes = axis if isinstance(axis, tuple) else (axis,)
                    g = np.expand_dims(g, axes)
                a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return total * (1.0 / float(count))

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g.reshape(a.data.shape))
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(self.data.transpose(axes), _prev=(self,))
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            out._backward = lambda g, a=self, inv=inverse: a._accumulate(g.transpose(inv))
        return out

    def __getitem__(self, key) -> "Tensor":
        out = Tensor(self.data[key], _prev=(self,))
        if out.requires_grad:
            def backward(g, a=self, key=key):
                full = np.zeros_like(a.data)
                np.add.at(full, key, g)
                a._accumulate(full)
            out._backward = backward
        return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _prev=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def backward(g, parts=tuple(tensors), offsets=offsets, axis=axis):
            for tensor, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if tensor.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(start, stop)
                    tensor._accumulate(g[tuple(index)])
        out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # shift by the max: softmax is invariant and the exp stays bounded; fused
    # into one node (see layer_norm) with the s * (g - <g, s>) backward
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, _prev=(x,))
    if out.requires_grad:

        def backward(g, x=x, s=s, axis=axis):
            if x.requires_grad:
                x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias fused into one graph node (see layer_norm)."""
    y = np.matmul(x.data, weight.data)
    y += bias.data
    out = Tensor(y, _prev=(x, weight, bias))
    if out.requires_grad:

        def backward(g, x=x, weight=weight, bias=bias):
            if x.requires_grad:
                gx = np.matmul(g, np.swapaxes(weight.data, -1, -2))
                x._accumulate(_unbroadcast(gx, x.data.shape))
            if weight.requires_grad:
                gw = np.matmul(np.swapaxes(x.data, -1, -2), g)
                weight._accumulate(_unbroadcast(gw, weight.data.shape))
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.data.shape))

        out._backward = backward
    return out


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    Fused into one graph node: the op count dominates inference latency at
    this model size, and the closed-form backward below is checked against
    finite differences by the gradient suite.
    """
    # sum/n matches ndarray.mean bit for bit (same pairwise sum, same divide)
    # without its per-call wrapper overhead
    n = x.data.shape[-1]
    mu = x.data.sum(axis=-1, keepdims=True) / n
    centered = x.data - mu
    sq = centered * centered
    var = sq.sum(axis=-1, keepdims=True) / n
    inv = (var + eps) ** -0.5
    normed = centered * inv
    y = normed * weight.data
    y += bias.data
    out = Tensor(y, _prev=(x, weight, bias))
    if out.requires_grad:

        def backward(g, x=x, weight=weight, bias=bias, normed=normed, inv=inv):
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.data.shape))
            if weight.requires_grad:
                weight._accumulate(_unbroadcast(g * normed, weight.data.shape))
            if x.requires_grad:
                gn = g * weight.data  # gradient wrt the normalized values
                x._accumulate(
                    inv
                    * (
                        gn
                        - gn.mean(axis=-1, keepdims=True)
                        - normed * (gn * normed).mean(axis=-1, keepdims=True)
                    )
                )

        out._backward = backward
    return out


def attention(
    q_in: Tensor,
    kv_in: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    num_heads: int,
    scale: float,
) -> Tensor:
    """Full multi-head attention (projections included) as one graph node.

    At small sequence lengths the per-node bookkeeping of the unfused form
    costs more than the arithmetic. Each projection is its own matmul, so the
    float sequence matches composing :func:`linear` with split/softmax/merge.
    Backward reuses the softmax identity from above; for self-attention
    (``q_in is kv_in``) the three projection gradients accumulate onto the
    same tensor, exactly as the unfused graph would.
    """
    batch, n_q, dim = q_in.data.shape
    n_k = kv_in.data.shape[1]
    head = dim // num_heads
    q = np.matmul(q_in.data, wq.data)
    q += bq.data
    k = np.matmul(kv_in.data, wk.data)
    k += bk.data
    v = np.matmul(kv_in.data, wv.data)
    v += bv.data
    qh = q.reshape(batch, n_q, num_heads, head).transpose(0, 2, 1, 3)
    kh = k.reshape(batch, n_k, num_heads, head).transpose(0, 2, 1, 3)
    vh = v.reshape(batch, n_k, num_heads, head).transpose(0, 2, 1, 3)
    weights = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    weights *= scale
    weights -= weights.max(axis=-1, keepdims=True)
    np.exp(weights, out=weights)
    weights /= weights.sum(axis=-1, keepdims=True)
    merged = np.matmul(weights, vh).transpose(0, 2, 1, 3).reshape(batch, n_q, dim)
    y = np.matmul(merged, wo.data)
    y += bo.data
    out = Tensor(y, _prev=(q_in, kv_in, wq, bq, wk, bk, wv, bv, wo, bo))
    if out.requires_grad:

        def backward(g):
            if bo.requires_grad:
                bo._accumulate(_unbroadcast(g, bo.data.shape))
            if wo.requires_grad:
                gwo = np.matmul(np.swapaxes(merged, -1, -2), g)
                wo._accumulate(_unbroadcast(gwo, wo.data.shape))
            gm = np.matmul(g, np.swapaxes(wo.data, -1, -2))
            gm = gm.reshape(batch, n_q, num_heads, head).transpose(0, 2, 1, 3)
            gv = np.matmul(weights.transpose(0, 1, 3, 2), gm)
            gv = gv.transpose(0, 2, 1, 3).reshape(batch, n_k, dim)
            gw = np.matmul(gm, vh.transpose(0, 1, 3, 2))
            gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True)) * scale
            gq = np.matmul(gs, kh).transpose(0, 2, 1, 3).reshape(batch, n_q, dim)
            gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)
            gk = gk.transpose(0, 2, 1, 3).reshape(batch, n_k, dim)
            for grad, w_t, b_t, x_t in (
                (gq, wq, bq, q_in),
                (gk, wk, bk, kv_in),
                (gv, wv, bv, kv_in),
            ):
                if b_t.requires_grad:
                    b_t._accumulate(_unbroadcast(grad, b_t.data.shape))
                if w_t.requires_grad:
                    gw_t = np.matmul(np.swapaxes(x_t.data, -1, -2), grad)
                    w_t._accumulate(_unbroadcast(gw_t, w_t.data.shape))
                if x_t.requires_grad:
                    x_t._accumulate(np.matmul(grad, np.swapaxes(w_t.data, -1, -2)))

        out._backward = backward
    return out


def mlp(x: Tensor, *layers: Tensor) -> Tensor:
    """Chain of linear layers with gelu between them, as one graph node.

    ``layers`` holds (w1, b1, w2, b2, ...); gelu follows every layer except
    the last. Float sequence matches composing :func:`linear` with
    :meth:`Tensor.gelu`.
    """
    pairs = [(layers[i], layers[i + 1]) for i in range(0, len(layers), 2)]
    dt = x.data.dtype
    inv_sqrt2 = np.asarray(1.0 / np.sqrt(2.0), dtype=dt)
    half = np.asarray(0.5, dtype=dt)
    one = np.asarray(1.0, dtype=dt)
    acts = [x.data]  # input of each layer, saved for the weight gradients
    gelu_state = []  # (pre-activation, t, phi) per hidden layer
    h = x.data
    for idx, (w, b) in enumerate(pairs):
        h = np.matmul(h, w.data)
        h += b.data
        if idx < len(pairs) - 1:
            t = h * inv_sqrt2
            phi = _erf(t).astype(dt, copy=False)
            phi += one
            phi *= half
            gelu_state.append((h, t, phi))
            h = h * phi
        acts.append(h)
    out = Tensor(h, _prev=(x,) + tuple(layers))
    if out.requires_grad:

        def backward(g):
            for idx in range(len(pairs) - 1, -1, -1):
                w, b = pairs[idx]
                if idx < len(pairs) - 1:
                    z, t, phi = gelu_state[idx]  # gelu that followed this layer
                    g = g * (phi + z * np.exp(-t * t) * _INV_SQRT_TAU)
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))
                if w.requires_grad:
                    gw = np.matmul(np.swapaxes(acts[idx], -1, -2), g)
                    w._accumulate(_unbroadcast(gw, w.data.shape))
                g = np.matmul(g, np.swapaxes(w.data, -1, -2))
            if x.requires_grad:
                x._accumulate(g)

        out._backward = backward
    return out


def conv_transpose2x(x: Tensor, weight: Tensor, bias: Tensor, gelu: bool = False) -> Tensor:
    """Kernel-2 stride-2 transposed conv on (B, g, g, C_in) with weight
    (C_in, C_out, 2, 2): every output pixel has exactly one source cell, so
    the whole op is a matmul plus a 2x2 interleave, fused into one node.
    ``gelu`` folds the activation used between the upscaling stages."""
    batch, g, _, c_in = x.data.shape
    c_out = weight.data.shape[1]
    flat = np.matmul(x.data.reshape(batch, g * g, c_in), weight.data.reshape(c_in, c_out * 4))
    tiles = flat.reshape(batch, g, g, c_out, 2, 2)
    spread = tiles.transpose(0, 1, 4, 2, 5, 3).reshape(batch, 2 * g, 2 * g, c_out)
    spread += bias.data  # reshape of the transposed view copied, safe to mutate
    if gelu:
        dt = spread.dtype
        t = spread * np.asarray(1.0 / np.sqrt(2.0), dtype=dt)
        phi = _erf(t).astype(dt, copy=False)
        phi += np.asarray(1.0, dtype=dt)
        phi *= np.asarray(0.5, dtype=dt)
        out = Tensor(spread * phi, _prev=(x, weight, bias))
    else:
        out = Tensor(spread, _prev=(x, weight, bias))
    if out.requires_grad:

        def backward(g_out, x=x, weight=weight, bias=bias):
            if gelu:
                g_out = g_out * (phi + spread * np.exp(-t * t) * _INV_SQRT_TAU)
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g_out, bias.data.shape))
            # invert the interleave, then route through the matmul
            gflat = g_out.reshape(batch, g, 2, g, 2, c_out).transpose(0, 1, 3, 5, 2, 4)
            gflat = gflat.reshape(batch, g * g, c_out * 4)
            if x.requires_grad:
                gx = np.matmul(gflat, weight.data.reshape(c_in, c_out * 4).T)
                x._accumulate(gx.reshape(x.data.shape))
            if weight.requires_grad:
                xt = x.data.reshape(batch, g * g, c_in).transpose(0, 2, 1)
                gw = np.matmul(xt, gflat).sum(axis=0)
                weight._accumulate(gw.reshape(weight.data.shape))

        out._backward = backward
    return out


def residual_norm(x: Tensor, delta: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """layer_norm(x + delta): the residual add and the normalization share a
    node. The incoming gradient of the sum routes to both addends unchanged."""
    n = x.data.shape[-1]
    total = x.data + delta.data
    mu = total.sum(axis=-1, keepdims=True) / n
    centered = total - mu
    sq = centered * centered
    var = sq.sum(axis=-1, keepdims=True) / n
    inv = (var + eps) ** -0.5
    normed = centered * inv
    y = normed * weight.data
    y += bias.data
    out = Tensor(y, _prev=(x, delta, weight, bias))
    if out.requires_grad:

        def backward(g):
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.data.shape))
            if weight.requires_grad:
                weight._accumulate(_unbroadcast(g * normed, weight.data.shape))
            gn = g * weight.data
            gsum = inv * (
                gn
                - gn.mean(axis=-1, keepdims=True)
                - normed * (gn * normed).mean(axis=-1, keepdims=True)
            )
            if x.requires_grad:
                x._accumulate(_unbroadcast(gsum, x.data.shape))
            if delta.requires_grad:
                delta._accumulate(_unbroadcast(gsum, delta.data.shape))

        out._backward = backward
    return out


def prepend_token(token: Tensor, rest: Tensor) -> Tensor:
    """Broadcast a single (D,) token across the batch and prepend it to a
    (B, n, D) sequence."""
    batch, _, dim = rest.data.shape
    lead = token.data.reshape(1, 1, dim) + np.zeros((batch, 1, dim), dtype=rest.data.dtype)
    out = Tensor(np.concatenate([lead, rest.data], axis=1), _prev=(token, rest))
    if out.requires_grad:

        def backward(g):
            if token.requires_grad:
                token._accumulate(_unbroadcast(g[:, :1, :], token.data.shape))
            if rest.requires_grad:
                rest._accumulate(g[:, 1:, :])

        out._backward = backward
    return out


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic 1D interpolation matrix with half-pixel-centered
    coordinates and replicated borders; upsampling applies it per axis."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        left = int(np.floor(src))
        frac = src - left
        i0 = min(max(left, 0), n_in - 1)
        i1 = min(max(left + 1, 0), n_in - 1)
        weights[o, i0] += 1.0 - frac
        weights[o, i1] += frac
    return weights.astype(dtype)


@functools.lru_cache(maxsize=None)
def _bilinear_rows(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    return bilinear_matrix(n_in, n_out, np.dtype(dtype_str))


@functools.lru_cache(maxsize=None)
def _bilinear_cols(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    return bilinear_matrix(n_in, n_out, np.dtype(dtype_str)).T.copy()


def mask_readout(up: Tensor, vec: Tensor, n_out: int) -> Tensor:
    """Per-pixel dot with a mask vector, sigmoid, then bilinear resize, fused.

    ``up`` is a (B, s, s, C) feature grid, ``vec`` a (B, C) vector; returns
    (B, n_out, n_out) probabilities. The sigmoid keeps the piecewise-stable
    form of :meth:`Tensor.sigmoid`.
    """
    batch, side, _, ch = up.data.shape
    flat = up.data.reshape(batch, side * side, ch)
    logits = np.matmul(flat, vec.data.reshape(batch, ch, 1)).reshape(batch, side, side)
    e = np.exp(-np.abs(logits))
    denom = 1.0 + e
    probs = np.where(logits >= 0, 1.0 / denom, e / denom)
    probs = probs.astype(logits.dtype, copy=False)
    rows = _bilinear_rows(side, n_out, up.data.dtype.str)
    cols = _bilinear_cols(side, n_out, up.data.dtype.str)
    out = Tensor(np.matmul(np.matmul(rows, probs), cols), _prev=(up, vec))
    if out.requires_grad:

        def backward(g):
            gp = np.matmul(np.matmul(rows.T, g), cols.T)
            gl = (gp * probs * (1.0 - probs)).reshape(batch, side * side, 1)
            if vec.requires_grad:
                gv = np.matmul(np.swapaxes(flat, -1, -2), gl)
                vec._accumulate(gv.reshape(vec.data.shape))
            if up.requires_grad:
                gu = np.matmul(gl, vec.data.reshape(batch, 1, ch))
                up._accumulate(gu.reshape(up.data.shape))

        out._backward = backward
    return out


def upsample_bilinear(x: Tensor, n_out: int) -> Tensor:
    """Resize the trailing two axes of (..., h, w) to (n_out, n_out)."""
    h, w = x.data.shape[-2], x.data.shape[-1]
    # the interpolation matrices depend only on sizes; memoized, never mutated
    rows = Tensor(_bilinear_rows(h, n_out, x.data.dtype.str))
    cols = Tensor(_bilinear_cols(w, n_out, x.data.dtype.str))
    # rows @ x contracts the height axis, then x @ cols.T the width axis;
    # matmul broadcasts the fixed matrices over any leading batch axes
    return rows.matmul(x).matmul(cols)
