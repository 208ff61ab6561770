"""Reverse-mode autodiff over dense float64 numpy arrays.

Each op returns a Tensor holding the result plus a backprop closure
that scatters the output gradient into the inputs. backward() walks
the recorded graph once in reverse topological order and then frees
it; a second backward on the same graph raises StateError.

All reductions inside ops go through gpsft.kernels or numpy calls on
fixed-layout arrays, so a given backend produces bitwise-identical
gradients for identical inputs.
"""

import contextlib
import threading

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    NumericError,
    StateError,
)

# Per-thread so concurrent runs never see each other's no_grad blocks.
_grad_state = threading.local()


def _grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backprop = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def backward(self, leaves=()):
        backward(self, leaves=leaves)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backprop):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _accum(t, g):
    # copy on first write: g may alias a buffer shared with another input
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def backward(loss, leaves=()):
    """Run reverse-mode accumulation from a scalar loss.

    Gradients add into .grad of every reachable requires_grad tensor,
    so calling backward for several losses in turn accumulates their
    sum. Tensors in `leaves` that the graph never touched get a zero
    gradient instead of None. The graph is freed afterwards.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise StateError("graph was already consumed by a previous backward")
    if not loss._parents:
        raise StateError("tensor has no recorded graph to differentiate")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._consumed:
                raise StateError("graph shares nodes already consumed by a previous backward")
            if id(p) not in visited and p._parents:
                stack.append((p, False))
            elif id(p) not in visited:
                visited.add(id(p))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backprop is not None:
            node._backprop(node.grad)
        node._backprop = None
        node._parents = ()
        node._consumed = True

    for leaf in leaves:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------- ops


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul takes 2-d tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    ad, bd = np.ascontiguousarray(a.data), np.ascontiguousarray(b.data)

    def backprop(gout):
        gout = np.ascontiguousarray(gout)
        if a.requires_grad:
            _accum(a, kernels.matmul_grad_a(gout, bd))
        if b.requires_grad:
            _accum(b, kernels.matmul_grad_b(ad, gout))

    return _result(kernels.matmul(ad, bd), (a, b), backprop)


def bmm(a, b):
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError("bmm takes 3-d tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise DimensionError(f"bmm shapes incompatible: {a.data.shape} @ {b.data.shape}")
    ad, bd = np.ascontiguousarray(a.data), np.ascontiguousarray(b.data)

    def backprop(gout):
        gout = np.ascontiguousarray(gout)
        if a.requires_grad:
            _accum(a, kernels.bmm_grad_a(gout, bd))
        if b.requires_grad:
            _accum(b, kernels.bmm_grad_b(ad, gout))

    return _result(kernels.bmm(ad, bd), (a, b), backprop)


def conv2d(x, k, stride=1, padding=0):
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError("conv2d takes NCHW input and OIHW kernel")
    if x.data.shape[1] != k.data.shape[1]:
        raise DimensionError(
            f"channel mismatch: input has {x.data.shape[1]}, kernel expects {k.data.shape[1]}"
        )
    h, w = x.data.shape[2], x.data.shape[3]
    kh, kw = k.data.shape[2], k.data.shape[3]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError("kernel exceeds padded input extent")
    xd, kd = np.ascontiguousarray(x.data), np.ascontiguousarray(k.data)

    def backprop(gout):
        gout = np.ascontiguousarray(gout)
        if x.requires_grad:
            _accum(x, kernels.conv2d_grad_input(gout, kd, xd.shape, stride, padding))
        if k.requires_grad:
            _accum(k, kernels.conv2d_grad_kernel(gout, xd, kd.shape, stride, padding))

    return _result(kernels.conv2d_forward(xd, kd, stride, padding), (x, k), backprop)


def add(a, b):
    """Elementwise add; b may also be a 1-d bias over a's last dim."""
    if a.data.shape == b.data.shape:
        def backprop(gout):
            if a.requires_grad:
                _accum(a, gout)
            if b.requires_grad:
                _accum(b, gout)
        return _result(a.data + b.data, (a, b), backprop)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        lead = tuple(range(a.data.ndim - 1))

        def backprop(gout):
            if a.requires_grad:
                _accum(a, gout)
            if b.requires_grad:
                _accum(b, gout.sum(axis=lead))
        return _result(a.data + b.data, (a, b), backprop)
    raise DimensionError(f"add shapes incompatible: {a.data.shape} + {b.data.shape}")


def add_channel_bias(x, b):
    if x.data.ndim != 4 or b.data.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise DimensionError(
            f"channel bias needs NCHW input and (C,) bias, got {x.data.shape} + {b.data.shape}"
        )

    def backprop(gout):
        if x.requires_grad:
            _accum(x, gout)
        if b.requires_grad:
            _accum(b, gout.sum(axis=(0, 2, 3)))

    return _result(x.data + b.data[None, :, None, None], (x, b), backprop)


def scale(t, c):
    c = float(c)

    def backprop(gout):
        if t.requires_grad:
            _accum(t, gout * c)

    return _result(t.data * c, (t,), backprop)


def reshape(t, shape):
    old = t.data.shape

    def backprop(gout):
        if t.requires_grad:
            _accum(t, gout.reshape(old))

    return _result(t.data.reshape(shape), (t,), backprop)


def transpose(t, axes=None):
    if axes is None:
        axes = tuple(reversed(range(t.data.ndim)))
    inverse = np.argsort(axes)

    def backprop(gout):
        if t.requires_grad:
            _accum(t, np.ascontiguousarray(gout.transpose(inverse)))

    return _result(np.ascontiguousarray(t.data.transpose(axes)), (t,), backprop)


def mean_axis(t, axis):
    n = t.data.shape[axis]

    def backprop(gout):
        if t.requires_grad:
            _accum(t, np.repeat(np.expand_dims(gout / n, axis), n, axis=axis))

    return _result(t.data.mean(axis=axis), (t,), backprop)


def tsum(t):
    def backprop(gout):
        if t.requires_grad:
            _accum(t, np.full_like(t.data, float(gout)))

    return _result(t.data.sum(), (t,), backprop)


def tmean(t):
    n = t.data.size

    def backprop(gout):
        if t.requires_grad:
            _accum(t, np.full_like(t.data, float(gout) / n))

    return _result(t.data.mean(), (t,), backprop)


_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


def activation(t, kind):
    """Apply a named nonlinearity: relu, gelu, or softmax (last dim)."""
    if kind == "relu":
        mask = t.data > 0

        def backprop(gout):
            if t.requires_grad:
                _accum(t, gout * mask)

        return _result(np.where(mask, t.data, 0.0), (t,), backprop)

    if kind == "gelu":
        # tanh form of gelu, differentiated exactly
        x = t.data
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        th = np.tanh(inner)
        out = 0.5 * x * (1.0 + th)

        def backprop(gout):
            if t.requires_grad:
                dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
                local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
                _accum(t, gout * local)

        return _result(out, (t,), backprop)

    if kind == "softmax":
        z = t.data - t.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)

        def backprop(gout):
            if t.requires_grad:
                dot = (gout * s).sum(axis=-1, keepdims=True)
                _accum(t, s * (gout - dot))

        return _result(s, (t,), backprop)

    raise ConfigError(f"unknown activation {kind!r}; expected relu, gelu, or softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last dim, then scale and shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine params must be ({d},), got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    out = xhat * gamma.data + beta.data

    def backprop(gout):
        lead = tuple(range(gout.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (gout * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accum(beta, gout.sum(axis=lead))
        if x.requires_grad:
            dxhat = gout * gamma.data
            gx = invstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, gx)

    return _result(out, (x, gamma, beta), backprop)


def l2_normalize_rows(t):
    if t.data.ndim != 2:
        raise DimensionError("l2_normalize_rows takes a 2-d tensor")
    norms = np.sqrt((t.data**2).sum(axis=1, keepdims=True))
    if not np.all(norms > 0):
        raise NumericError("cannot l2-normalize a zero row")
    zn = t.data / norms

    def backprop(gout):
        if t.requires_grad:
            dot = (gout * zn).sum(axis=1, keepdims=True)
            _accum(t, (gout - dot * zn) / norms)

    return _result(zn, (t,), backprop)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy with integer class labels, fused with softmax."""
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy takes (batch, classes) logits")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.data.shape[0]:
        raise DimensionError("labels must be 1-d and match the batch size")
    n, c = logits.data.shape
    if y.min() < 0 or y.max() >= c:
        raise InputError(f"label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    per_sample = -logp[np.arange(n), y]
    loss = per_sample.mean() if reduction == "mean" else per_sample.sum()

    def backprop(gout):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), y] -= 1.0
            if reduction == "mean":
                p /= n
            _accum(logits, p * float(gout))

    return _result(loss, (logits,), backprop)
