"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` that maps the output adjoint to
input adjoints. Calling ``Function.apply`` records the node when an input
requires grad; :func:`backward` replays the recorded nodes in reverse
topological order and accumulates gradients additively.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Context:
    __slots__ = ("saved", "needs", "info")

    def __init__(self, needs):
        self.saved = ()
        self.needs = needs
        self.info = None

    def save(self, *arrays):
        self.saved = arrays


class Function:
    """Base for recorded operations. Subclasses implement ``forward(ctx, *arrays, **kw)``
    and ``backward(ctx, grad)`` returning one adjoint (or None) per input."""

    # False for ops whose output is finite whenever the inputs are
    can_overflow = True

    @staticmethod
    def forward(ctx, *args, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = [as_tensor(x) for x in inputs]
        track = _grad_enabled and any(t.requires_grad for t in tensors)
        ctx = Context(tuple(t.requires_grad for t in tensors))
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        if cls.can_overflow and not np.isfinite(np.add.reduce(out, axis=None)):
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"{cls.__name__} produced a non-finite value")
        result = Tensor(out, requires_grad=track)
        if track:
            result._node = (cls, ctx, tensors)
        return result


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "add")
        ctx.info = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.info
        return (_unbroadcast(g, sa) if ctx.needs[0] else None,
                _unbroadcast(g, sb) if ctx.needs[1] else None)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "sub")
        ctx.info = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.info
        return (_unbroadcast(g, sa) if ctx.needs[0] else None,
                _unbroadcast(-g, sb) if ctx.needs[1] else None)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "mul")
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return (_unbroadcast(g * b, a.shape) if ctx.needs[0] else None,
                _unbroadcast(g * a, b.shape) if ctx.needs[1] else None)


class MatMul(Function):
    """``a @ b`` with numpy broadcasting over leading dimensions."""

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
        ctx.save(a, b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = gb = None
        if ctx.needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if ctx.needs[1]:
            if b.ndim == 2:
                # weight shared across every leading index: one flat GEMM
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


class Linear(Function):
    """``x @ w + b`` for a 2-D weight shared over all leading dimensions of x."""

    @staticmethod
    def forward(ctx, x, w, b):
        if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
        ctx.save(x, w)
        out = x @ w
        out += b
        return out

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ w.T if ctx.needs[0] else None,
                x.reshape(-1, x.shape[-1]).T @ g2 if ctx.needs[1] else None,
                g2.sum(axis=0) if ctx.needs[2] else None)


class GraphConv(Function):
    """One graph-convolution layer, relu(A @ H @ W + b), on H of shape (..., N, C_in).

    A (N, N) is a constant propagation matrix shared by every frame; no
    adjoint is produced for it. With ``pool=True`` the result is averaged over
    the node axis, giving (..., C_out) without materializing the per-node
    activations. Work is done in blocks of about ``CHUNK_ROWS`` node rows so
    intermediates stay cache-resident.
    """

    CHUNK_ROWS = 2400

    @staticmethod
    def forward(ctx, h, a, w, b, pool=False):
        n, c_in = h.shape[-2:]
        if a.shape != (n, n) or w.shape[0] != c_in or b.shape != (w.shape[1],):
            raise ShapeError(f"graph_conv: h {h.shape}, a {a.shape}, w {w.shape}, b {b.shape}")
        lead = h.shape[:-2]
        c_out = w.shape[1]
        h3 = h.reshape(-1, n, c_in)
        m = len(h3)
        mixed = np.empty_like(h3)
        mask = np.empty((m, n, c_out), dtype=bool)
        out = np.empty((m, c_out) if pool else (m, n, c_out))
        step = max(1, GraphConv.CHUNK_ROWS // n)
        for k in range(0, m, step):
            sl = slice(k, k + step)
            np.matmul(a, h3[sl], out=mixed[sl])
            o = mixed[sl] @ w
            o += b
            np.greater(o, 0.0, out=mask[sl])
            np.maximum(o, 0.0, out=o)
            if pool:
                np.mean(o, axis=1, out=out[sl])
            else:
                out[sl] = o
        ctx.save(mixed, a, w, mask)
        ctx.info = (lead, pool)
        return out.reshape(lead + out.shape[1:])

    @staticmethod
    def backward(ctx, g):
        mixed, a, w, mask = ctx.saved
        lead, pool = ctx.info
        m, n, c_out = mask.shape
        g = g.reshape((m, 1, c_out) if pool else (m, n, c_out))
        if pool:
            g = g / n
        gh = np.empty(mixed.shape) if ctx.needs[0] else None
        gw = np.zeros_like(w)
        gb = np.zeros(c_out)
        step = max(1, GraphConv.CHUNK_ROWS // n)
        wt, at = w.T, a.T
        for k in range(0, m, step):
            sl = slice(k, k + step)
            gz = g[sl] * mask[sl]
            gz2 = gz.reshape(-1, c_out)
            gw += mixed[sl].reshape(-1, mixed.shape[-1]).T @ gz2
            gb += gz2.sum(axis=0)
            if gh is not None:
                np.matmul(at, gz @ wt, out=gh[sl])
        if gh is not None:
            gh = gh.reshape(lead + gh.shape[1:])
        return gh, None, gw if ctx.needs[2] else None, gb if ctx.needs[3] else None


class Sigmoid(Function):
    can_overflow = False

    @staticmethod
    def forward(ctx, x):
        y = _sigmoid(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * y * (1.0 - y),)


class Tanh(Function):
    can_overflow = False

    @staticmethod
    def forward(ctx, x):
        y = np.tanh(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * (1.0 - y * y),)


class Relu(Function):
    can_overflow = False

    @staticmethod
    def forward(ctx, x):
        y = np.maximum(x, 0.0)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * (y > 0),)


class Softmax(Function):
    can_overflow = False

    @staticmethod
    def forward(ctx, x):
        y = _softmax(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


class Concat(Function):
    can_overflow = False

    @staticmethod
    def forward(ctx, *xs):
        ctx.info = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return np.concatenate(xs, axis=-1)

    @staticmethod
    def backward(ctx, g):
        parts = np.split(g, ctx.info, axis=-1)
        return tuple(p if need else None for p, need in zip(parts, ctx.needs))


class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.info = (x.shape, axis, keepdims)
        return np.sum(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx.info
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)


class Mean(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        out = np.mean(x, axis=axis, keepdims=keepdims)
        ctx.info = (x.shape, axis, keepdims, x.size // max(np.size(out), 1))
        return out

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims, n = ctx.info
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)


class Take(Function):
    """Basic indexing / slicing."""

    can_overflow = False

    @staticmethod
    def forward(ctx, x, index=None):
        ctx.info = (x.shape, index)
        return np.array(x[index])

    @staticmethod
    def backward(ctx, g):
        shape, index = ctx.info
        out = np.zeros(shape)
        if _is_basic_index(index):
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


class Reshape(Function):
    can_overflow = False

    @staticmethod
    def forward(ctx, x, shape=None):
        ctx.info = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.info),)


class SoftmaxCrossEntropy(Function):
    """Mean cross-entropy of integer targets under softmax(logits) along the last axis."""

    @staticmethod
    def forward(ctx, logits, targets=None):
        targets = np.asarray(targets, dtype=np.int64)
        if logits.ndim != 2 or targets.shape != (logits.shape[0],):
            raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1))
        nll = lse - shifted[np.arange(len(targets)), targets]
        ctx.save(shifted, lse, targets)
        return np.asarray(nll.mean())

    @staticmethod
    def backward(ctx, g):
        shifted, lse, targets = ctx.saved
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(targets)), targets] -= 1.0
        return (g * p / len(targets),)


class LSTMSequence(Function):
    """Single-layer LSTM over a batch of sequences, adjoint by backpropagation through time.

    Inputs: x (B, T, C), w_x (C, 4H), w_h (H, 4H), b (4H,). Gate blocks are
    ordered input, forget, output, candidate. Returns every hidden state (B, T, H)
    with h_0 = c_0 = 0.
    """

    @staticmethod
    def forward(ctx, x, w_x, w_h, b):
        if x.ndim != 3 or w_x.shape[0] != x.shape[2] or w_h.shape[1] != w_x.shape[1] \
                or w_h.shape[1] != 4 * w_h.shape[0] or b.shape != (w_x.shape[1],):
            raise ShapeError(f"lstm: x {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}")
        B, T, _ = x.shape
        H = w_h.shape[0]
        # time-major so every per-step slice is contiguous
        gates = np.matmul(x.transpose(1, 0, 2), w_x)
        gates += b
        cs = np.empty((T + 1, B, H))
        hs = np.empty((T + 1, B, H))
        tcs = np.empty((T, B, H))
        cs[0] = hs[0] = 0.0
        for t in range(T):
            gt = gates[t]
            gt += hs[t] @ w_h
            sig = gt[:, :3 * H]
            sig *= 0.5
            np.tanh(gt, out=gt)
            sig += 1.0
            sig *= 0.5
            np.multiply(gt[:, H:2 * H], cs[t], out=cs[t + 1])
            cs[t + 1] += gt[:, :H] * gt[:, 3 * H:]
            np.tanh(cs[t + 1], out=tcs[t])
            np.multiply(gt[:, 2 * H:3 * H], tcs[t], out=hs[t + 1])
        ctx.save(x, w_x, w_h, gates, cs, hs, tcs)
        return np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    @staticmethod
    def backward(ctx, g):
        x, w_x, w_h, gates, cs, hs, tcs = ctx.saved
        T, B, H4 = gates.shape
        H = H4 // 4
        i, f, o, c_hat = (gates[..., k * H:(k + 1) * H] for k in range(4))
        # local derivatives of each gate pre-activation, all steps at once;
        # blocks i, f, g scale with dc, block o with dh
        local = np.empty((T, B, 4, H))
        local[:, :, 0] = c_hat * i * (1.0 - i)
        local[:, :, 1] = cs[:-1] * f * (1.0 - f)
        local[:, :, 2] = tcs * o * (1.0 - o)
        local[:, :, 3] = i * (1.0 - c_hat * c_hat)
        dc_dh = o * (1.0 - tcs * tcs)
        g = g.transpose(1, 0, 2)
        dz = np.empty((T, B, 4, H))
        dh_next = np.zeros((B, H))
        dc = np.zeros((B, H))
        w_ht = np.ascontiguousarray(w_h.T)
        for t in range(T - 1, -1, -1):
            dh = g[t] + dh_next
            dc += dh * dc_dh[t]
            zt = dz[t]
            np.multiply(local[t], dc[:, None, :], out=zt)
            np.multiply(local[t, :, 2], dh, out=zt[:, 2])
            dh_next = zt.reshape(B, H4) @ w_ht
            dc *= f[t]
        flat = dz.reshape(-1, H4)
        dw_h = hs[:-1].reshape(-1, H).T @ flat if ctx.needs[2] else None
        dx = np.matmul(dz.reshape(T, B, H4), w_x.T).transpose(1, 0, 2) if ctx.needs[0] else None
        dw_x = x.transpose(1, 0, 2).reshape(-1, x.shape[-1]).T @ flat if ctx.needs[1] else None
        db = flat.sum(axis=0) if ctx.needs[3] else None
        return dx, dw_x, dw_h, db


def _sigmoid(x):
    # tanh form never overflows
    y = np.tanh(0.5 * x)
    y += 1.0
    y *= 0.5
    return y


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def matmul(a, b):
    return MatMul.apply(a, b)


def linear(x, w, b):
    return Linear.apply(x, w, b)


def graph_conv(h, a, w, b, pool=False):
    return GraphConv.apply(h, a, w, b, pool=pool)


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


def relu(x):
    return Relu.apply(x)


def softmax(x):
    return Softmax.apply(x)


def concat(xs: Sequence[Tensor]):
    return Concat.apply(*xs)


def tsum(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def tmean(x, axis=None, keepdims=False):
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def take(x, index):
    return Take.apply(x, index=index)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def cross_entropy(logits, targets):
    return SoftmaxCrossEntropy.apply(logits, targets=targets)


def lstm(x, w_x, w_h, b):
    return LSTMSequence.apply(x, w_x, w_h, b)


def build_tape(loss: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``loss`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._node is not None:
            for parent in node._node[2]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every requires-grad leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if node._node is None:
            if g is not None:
                g = np.array(g, dtype=np.float64)
                node.grad = g if node.grad is None else node.grad + g
            continue
        fn, ctx, inputs = node._node
        if g is None:
            continue
        in_grads = fn.backward(ctx, g)
        for parent, pg in zip(inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape:
        node._node = None
    loss._consumed = True


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over all parameter entries of |analytic - central difference| / max(1, |analytic|, |numeric|).

    ``f`` must rebuild its graph from the current values of ``params`` on every call.
    """
    for p in params:
        p.grad = None
    loss = f()
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = f().item()
                flat[k] = orig - eps
                down = f().item()
                flat[k] = orig
                numeric[k] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)
        err = np.abs(a - numeric) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
