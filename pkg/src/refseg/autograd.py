"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the network is a Tensor of rank <= 4. Ops
record a backward closure returning the gradient contribution for each
parent; backward() replays them in reverse topological order. Any op
that produces a NaN/Inf raises NumericError instead of propagating it.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

_grad_enabled = True

# Testing seam for the grad-check negative control: a wrong sigmoid
# derivative must be detected by the finite-difference suite.
_sigmoid_grad_scale = 1.0


class no_grad:
    """Context manager disabling graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _check_finite(arr):
    if not np.isfinite(arr).all():
        raise NumericError("non-finite value produced")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds 4")
        if arr.size == 0:
            raise ValueError("empty tensor")
        _check_finite(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, backward_fn):
    """Wrap an op result, recording the graph edge when grads are on."""
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b):
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b):
    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _node(a.data * s, (a,), bwd)


def neg(a):
    def bwd(g):
        return (-g,)

    return _node(-a.data, (a,), bwd)


def matmul(a, b):
    """Dense product; 2D or stacked 3D with matching leading extents."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {ad.shape} x {bd.shape}")

    def bwd(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), bwd)


def linear(x, w, b=None):
    """x @ w (+ b): the per-token / per-pixel affine map. x may be 1D or stacked."""
    out = x.data @ w.data

    def grads_xw(g):
        gx = g @ w.data.T
        if x.data.ndim == 1:
            gw = np.outer(x.data, g)
        else:
            gw = _unbroadcast(x.data.swapaxes(-1, -2) @ g, w.data.shape)
        return gx, gw

    if b is None:
        def bwd(g):
            return grads_xw(g)

        return _node(out, (x, w), bwd)

    def bwd(g):
        gx, gw = grads_xw(g)
        return gx, gw, _unbroadcast(g, b.data.shape)

    return _node(out + b.data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), bwd)


def _expit(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    y = _expit(a.data)

    def bwd(g):
        return (g * y * (1.0 - y) * _sigmoid_grad_scale,)

    return _node(y, (a,), bwd)


def softmax(a, axis=-1):
    x = a.data
    y = np.exp(x - x.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (a,), bwd)


def masked_softmax(a, mask, axis=-1):
    """Softmax where masked (True) positions get exactly zero weight.

    Every slice along `axis` must keep at least one unmasked position.
    """
    x = np.where(mask, -np.inf, a.data)
    m = x.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("fully masked softmax slice")
    y = np.exp(x - m)
    y /= y.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        return inv * (gh - m1 - xhat * m2), ggain, gbias

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# convolution / resampling


def _im2col(xp, kh, kw, stride, h_out, w_out):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, h_out, w_out),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return win.reshape(c * kh * kw, h_out * w_out)


def conv2d(x, k, stride=1, padding=0, bias=None):
    """Cross-correlate [C_in,H,W] with [C_out,C_in,kh,kw]."""
    xd, kd = x.data, k.data
    c_out, c_in, kh, kw = kd.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError("kernel extents must be 1 or 3")
    if xd.ndim != 3 or xd.shape[0] != c_in:
        raise ValueError(f"channel mismatch: input {xd.shape} vs kernel {kd.shape}")
    h, w = xd.shape[1:]
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding))) if padding else xd
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, stride, h_out, w_out))
    k2 = kd.reshape(c_out, c_in * kh * kw)
    out = (k2 @ cols).reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bwd(g):
        g2 = g.reshape(c_out, h_out * w_out)
        gk = (g2 @ cols.T).reshape(kd.shape)
        gcols = (k2.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(1, 2))

    parents = (x, k) if bias is None else (x, k, bias)
    return _node(out, parents, bwd)


def avgpool2(x):
    """2x2 average pooling with stride 2 on [C,H,W]; H and W must be even."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"odd spatial extents {h}x{w}")
    y = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _node(y, (x,), bwd)


_interp_cache = {}


def _interp_matrix(n_out, n_in):
    """Corner-aligned bilinear weights [n_out, n_in]; rows sum to 1."""
    key = (n_out, n_in)
    got = _interp_cache.get(key)
    if got is not None:
        return got
    r = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        r[:, 0] = 1.0
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.minimum(pos.astype(np.int64), n_in - 2)
        frac = pos - i0
        r[np.arange(n_out), i0] += 1.0 - frac
        r[np.arange(n_out), i0 + 1] += frac
    _interp_cache[key] = r
    return r


def bilinear_resize(x, out_h, out_w):
    """Corner-aligned bilinear resampling of [C,H,W]; separable, exact linear op."""
    c, h, w = x.data.shape
    rh = _interp_matrix(out_h, h)
    rw = _interp_matrix(out_w, w)
    y = rh @ x.data @ rw.T

    def bwd(g):
        return (rh.T @ g @ rw,)

    return _node(y, (x,), bwd)


def upsample2(x):
    c, h, w = x.data.shape
    return bilinear_resize(x, 2 * h, 2 * w)


def upsample4(x):
    c, h, w = x.data.shape
    return bilinear_resize(x, 4 * h, 4 * w)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape):
    old = x.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose(x, axes):
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _node(x.data.transpose(axes), (x,), bwd)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def take_row(x, i):
    """Row i of a 2D tensor, as a 1D tensor."""
    i = int(i)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _node(x.data[i], (x,), bwd)


def embedding(weight, ids):
    """Gather rows of [V,C] by an integer id sequence."""
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _node(weight.data[ids], (weight,), bwd)


# ---------------------------------------------------------------------------
# reductions / losses


def tsum(x):
    def bwd(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(x.data.sum(), (x,), bwd)


def tmean(x):
    n = x.data.size

    def bwd(g):
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return _node(x.data.mean(), (x,), bwd)


def mean_of(tensors):
    """Mean of same-shape tensors (per-batch loss aggregation)."""
    tensors = tuple(tensors)
    n = len(tensors)

    def bwd(g):
        return tuple(g / n for _ in tensors)

    return _node(sum(t.data for t in tensors) / n, tensors, bwd)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy over all entries, stable log-sigmoid form.

    -log s      = softplus(-x)
    -log (1-s)  = softplus(x)
    so per entry: softplus(x) - t*x, never evaluating log of a saturated
    sigmoid. `targets` is a plain 0/1 float array.
    """
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ValueError(f"target shape {t.shape} mismatches logits {x.shape}")
    n = x.size
    val = (np.logaddexp(0.0, x) - t * x).sum() / n

    def bwd(g):
        return (g * (_expit(x) - t) / n,)

    return _node(val, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward engine


def backward(loss):
    """Accumulate dLoss/d(node) into .grad of every reachable tensor.

    Repeated calls without zeroing add up. `loss` must be scalar.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
