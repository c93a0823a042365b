"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward


def finite_diff_check(f, x: Tensor, h=1e-5):
    """Max relative error between central differences and autograd on x.

    f maps a fresh requires-grad Tensor to a scalar Tensor. The relative
    error denominator is floored at 1e-8 so exact zero gradients compare
    cleanly.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad.copy()

    flat = x.data.copy().reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        with ag.no_grad():
            hi = f(Tensor(flat.reshape(x.data.shape))).data
        flat[i] = saved - h
        with ag.no_grad():
            lo = f(Tensor(flat.reshape(x.data.shape))).data
        flat[i] = saved
        fd[i] = (hi - lo) / (2.0 * h)
    fd = fd.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-8)
    return float((np.abs(fd - analytic) / denom).max())


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def op_suite(seed=0):
    """Finite-difference every differentiable op on small random tensors.

    Returns {op name: max relative error}.
    """
    rng = np.random.default_rng(seed)
    results = {}

    def check(name, f, x):
        results[name] = finite_diff_check(f, x, h=1e-5)

    # weights fixed per case; gradients probed w.r.t. x
    w = rng.uniform(-1, 1, size=(4, 3))
    check("matmul_left", lambda t: ag.tsum(ag.matmul(t, Tensor(w))), _rand(rng, 5, 4))
    a = rng.uniform(-1, 1, size=(5, 4))
    check("matmul_right", lambda t: ag.tsum(ag.matmul(Tensor(a), t)), _rand(rng, 4, 3))
    wb = rng.uniform(-1, 1, size=(2, 4, 3))
    check("matmul_batched", lambda t: ag.tsum(ag.matmul(t, Tensor(wb))), _rand(rng, 2, 5, 4))

    wl = rng.uniform(-1, 1, size=(4, 3))
    bl = rng.uniform(-1, 1, size=3)
    check("linear_x", lambda t: ag.tsum(ag.linear(t, Tensor(wl), Tensor(bl))), _rand(rng, 5, 4))
    xl = rng.uniform(-1, 1, size=(5, 4))
    check("linear_w", lambda t: ag.tsum(ag.linear(Tensor(xl), t, Tensor(bl))), _rand(rng, 4, 3))
    check("linear_vec", lambda t: ag.tsum(ag.linear(t, Tensor(wl), Tensor(bl))), _rand(rng, 4))

    k1 = rng.uniform(-1, 1, size=(3, 2, 1, 1))
    check("conv1x1_x", lambda t: ag.tsum(ag.conv2d(t, Tensor(k1))), _rand(rng, 2, 4, 4))
    k3 = rng.uniform(-1, 1, size=(3, 2, 3, 3))
    cb = rng.uniform(-1, 1, size=3)
    check("conv3x3_x",
          lambda t: ag.tsum(ag.conv2d(t, Tensor(k3), stride=1, padding=1, bias=Tensor(cb))),
          _rand(rng, 2, 5, 5))
    x3 = rng.uniform(-1, 1, size=(2, 5, 5))
    check("conv3x3_k",
          lambda t: ag.tsum(ag.conv2d(Tensor(x3), t, stride=2, padding=1)),
          _rand(rng, 3, 2, 3, 3))

    b2 = rng.uniform(-1, 1, size=(1, 4))
    check("add_broadcast", lambda t: ag.tsum(ag.mul(ag.add(t, Tensor(b2)), Tensor(b2))),
          _rand(rng, 3, 4))
    check("mul_broadcast", lambda t: ag.tsum(ag.mul(t, Tensor(b2))), _rand(rng, 3, 4))
    check("scale", lambda t: ag.tsum(ag.scale(t, 0.37)), _rand(rng, 3, 4))
    check("sub", lambda t: ag.tsum(ag.mul(ag.sub(t, Tensor(b2)), Tensor(b2))), _rand(rng, 3, 4))

    # keep relu inputs away from the kink by more than the step h
    xr = rng.uniform(-1, 1, size=(4, 4))
    xr += np.where(xr >= 0, 0.1, -0.1)
    rw = Tensor(rng.uniform(-1, 1, size=(4, 4)))
    check("relu", lambda t: ag.tsum(ag.mul(ag.relu(t), rw)), Tensor(xr))
    rvec = rng.uniform(-1, 1, size=(4, 5))
    check("sigmoid", lambda t: ag.tsum(ag.mul(ag.sigmoid(t), Tensor(rvec))), _rand(rng, 4, 5))
    check("softmax", lambda t: ag.tsum(ag.mul(ag.softmax(t, axis=-1), Tensor(rvec))),
          _rand(rng, 4, 5))
    mask = rng.random((4, 5)) < 0.3
    mask[:, 0] = False
    check("masked_softmax",
          lambda t: ag.tsum(ag.mul(ag.masked_softmax(t, mask), Tensor(rvec))), _rand(rng, 4, 5))

    gl = rng.uniform(0.5, 1.5, size=5)
    bb = rng.uniform(-1, 1, size=5)
    check("layer_norm_x",
          lambda t: ag.tsum(ag.mul(ag.layer_norm(t, Tensor(gl), Tensor(bb)), Tensor(rvec))),
          _rand(rng, 4, 5))
    xn = rng.uniform(-1, 1, size=(4, 5))
    check("layer_norm_gain",
          lambda t: ag.tsum(ag.mul(ag.layer_norm(Tensor(xn), t, Tensor(bb)), Tensor(rvec))),
          _rand(rng, 5))

    check("avgpool2", lambda t: ag.tsum(ag.mul(ag.avgpool2(t), _rand_fixed)), _rand(rng, 2, 4, 4))
    check("upsample2", lambda t: ag.tsum(ag.mul(ag.upsample2(t), Tensor(up_w))), _rand(rng, 2, 3, 3))
    check("resize_to", lambda t: ag.tsum(ag.mul(ag.bilinear_resize(t, 5, 7), Tensor(rz_w))),
          _rand(rng, 2, 3, 4))

    c2 = rng.uniform(-1, 1, size=(2, 4))
    check("concat", lambda t: ag.tsum(ag.mul(ag.concat([t, Tensor(c2)], axis=0), Tensor(cc_w))),
          _rand(rng, 3, 4))
    check("reshape_transpose",
          lambda t: ag.tsum(ag.mul(ag.transpose(ag.reshape(t, (2, 6)), (1, 0)), Tensor(rt_w))),
          _rand(rng, 3, 4))
    check("take_row", lambda t: ag.tsum(ag.mul(ag.take_row(t, 2), Tensor(tr_w))), _rand(rng, 4, 5))
    check("embedding",
          lambda t: ag.tsum(ag.mul(ag.embedding(t, [0, 2, 2, 1]), Tensor(em_w))),
          _rand(rng, 3, 4))
    check("mean", lambda t: ag.tmean(ag.mul(t, t)), _rand(rng, 3, 4))

    tgt = (rng.random((4, 5)) < 0.5).astype(np.float64)
    check("bce_with_logits", lambda t: ag.bce_with_logits(t, tgt), _rand(rng, 4, 5))

    return results


# fixed weighting tensors so reductions have non-uniform gradients
_fixed_rng = np.random.default_rng(12345)
_rand_fixed = Tensor(_fixed_rng.uniform(-1, 1, size=(2, 2, 2)))
up_w = _fixed_rng.uniform(-1, 1, size=(2, 6, 6))
rz_w = _fixed_rng.uniform(-1, 1, size=(2, 5, 7))
cc_w = _fixed_rng.uniform(-1, 1, size=(5, 4))
rt_w = _fixed_rng.uniform(-1, 1, size=(6, 2))
tr_w = _fixed_rng.uniform(-1, 1, size=5)
em_w = _fixed_rng.uniform(-1, 1, size=(4, 4))
