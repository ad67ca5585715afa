"""The layer vocabulary: forward ops with taped reverse-mode gradients.

Every op accepts the documented unbatched shape or the same shape with one
leading batch dimension. Feature maps are laid out (time, frequency,
channel); vectors are (channel,). Convolutions are cross-correlations with
stride 1 and zero same-padding.

Input gradients are skipped for leaf tensors with requires_grad=False;
weight and bias gradients are always produced.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .engine import Tensor, active_tape, as_tensor


class ShapeError(ValueError):
    pass


class InvalidDistributionError(ValueError):
    pass


def _out(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = True
    return t


def _record(out, backward_fn):
    tape = active_tape()
    if tape is not None:
        tape.record(out, backward_fn)


def _unify(*tensors):
    dtype = np.result_type(*(t.data.dtype for t in tensors))
    return [t.data.astype(dtype, copy=False) for t in tensors], dtype


def _pool_axis(ndim, axis):
    if axis not in ("time", "freq", "frequency"):
        raise ValueError(f"axis must be 'time' or 'freq', got {axis!r}")
    if ndim == 1:
        return 0
    if ndim in (2, 3):
        return 0 if axis == "time" else 1
    if ndim == 4:
        return 1 if axis == "time" else 2
    raise ShapeError(f"cannot pool a {ndim}-d tensor")


def conv2d(x, w, b):
    """3x3 convolution over (time, frequency), zero same-padding, plus bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 4 or w.shape[0] != 3 or w.shape[1] != 3:
        raise ShapeError(f"conv2d weights must be (3,3,Cin,Cout), got {w.shape}")
    cin, cout = w.shape[2], w.shape[3]
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias must be ({cout},), got {b.shape}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ShapeError(f"conv2d input must be (T,F,Cin) or (B,T,F,Cin), got {x.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d input has {x.shape[-1]} channels, weights expect {cin}")
    (xd, wd, bd), dtype = _unify(x, w, b)
    x4 = np.ascontiguousarray(xd if batched else xd[None])
    out4 = np.empty(x4.shape[:3] + (cout,), dtype=dtype)
    kernels.conv2d_fwd(x4, np.ascontiguousarray(wd), bd, out4)
    out = _out(out4 if batched else out4[0])

    def backward(g):
        g4 = np.ascontiguousarray(g if batched else g[None], dtype=dtype)
        dw = np.zeros_like(wd)
        kernels.conv2d_dw(x4, g4, dw)
        w.accumulate_grad(dw.astype(w.dtype, copy=False), own=True)
        b.accumulate_grad(g4.sum(axis=(0, 1, 2)).astype(b.dtype, copy=False), own=True)
        if x.requires_grad:
            wrot = np.ascontiguousarray(wd[::-1, ::-1].transpose(0, 1, 3, 2))
            dx4 = np.empty_like(x4)
            kernels.conv2d_fwd(g4, wrot, np.zeros(cin, dtype=dtype), dx4)
            dx4 = dx4.astype(x.dtype, copy=False)
            x.accumulate_grad(dx4 if batched else dx4[0], own=True)

    _record(out, backward)
    return out


def conv1d(x, w, b):
    """Length-5 convolution over time, zero same-padding, plus bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 3:
        raise ShapeError(f"conv1d weights must be (K,Cin,Cout), got {w.shape}")
    k, cin, cout = w.shape
    if k % 2 != 1:
        raise ShapeError("conv1d kernel length must be odd for same-padding")
    if b.shape != (cout,):
        raise ShapeError(f"conv1d bias must be ({cout},), got {b.shape}")
    batched = x.ndim == 3
    if not batched and x.ndim != 2:
        raise ShapeError(f"conv1d input must be (T,Cin) or (B,T,Cin), got {x.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d input has {x.shape[-1]} channels, weights expect {cin}")
    (xd, wd, bd), dtype = _unify(x, w, b)
    x3 = np.ascontiguousarray(xd if batched else xd[None])
    out3 = np.empty(x3.shape[:2] + (cout,), dtype=dtype)
    kernels.conv1d_fwd(x3, np.ascontiguousarray(wd), bd, out3)
    out = _out(out3 if batched else out3[0])

    def backward(g):
        g3 = np.ascontiguousarray(g if batched else g[None], dtype=dtype)
        dw = np.zeros_like(wd)
        kernels.conv1d_dw(x3, g3, dw)
        w.accumulate_grad(dw.astype(w.dtype, copy=False), own=True)
        b.accumulate_grad(g3.sum(axis=(0, 1)).astype(b.dtype, copy=False), own=True)
        if x.requires_grad:
            wrot = np.ascontiguousarray(wd[::-1].transpose(0, 2, 1))
            dx3 = np.empty_like(x3)
            kernels.conv1d_fwd(g3, wrot, np.zeros(cin, dtype=dtype), dx3)
            dx3 = dx3.astype(x.dtype, copy=False)
            x.accumulate_grad(dx3 if batched else dx3[0], own=True)

    _record(out, backward)
    return out


def conv1x1(x, w, b):
    """Per-position linear map over channels."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 4 or w.shape[0] != 1 or w.shape[1] != 1:
        raise ShapeError(f"conv1x1 weights must be (1,1,Cin,Cout), got {w.shape}")
    cin, cout = w.shape[2], w.shape[3]
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1x1 input has {x.shape[-1]} channels, weights expect {cin}")
    (xd, wd, bd), dtype = _unify(x, w, b)
    w00 = wd[0, 0]
    out = _out(xd @ w00 + bd)

    def backward(g):
        lead = g.reshape(-1, cout)
        xflat = xd.reshape(-1, cin)
        w.accumulate_grad((xflat.T @ lead)[None, None].astype(w.dtype, copy=False), own=True)
        b.accumulate_grad(lead.sum(axis=0).astype(b.dtype, copy=False), own=True)
        if x.requires_grad:
            x.accumulate_grad((g @ w00.T).astype(x.dtype, copy=False), own=True)

    _record(out, backward)
    return out


def dense(x, w, b):
    """Affine map: x @ w + b."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2:
        raise ShapeError(f"dense weights must be 2-d, got {w.shape}")
    n, m = w.shape
    if x.shape[-1] != n:
        raise ShapeError(f"dense input dim {x.shape[-1]} != weight rows {n}")
    if b.shape != (m,):
        raise ShapeError(f"dense bias must be ({m},), got {b.shape}")
    (xd, wd, bd), _ = _unify(x, w, b)
    out = _out(xd @ wd + bd)

    def backward(g):
        if xd.ndim == 1:
            w.accumulate_grad(np.outer(xd, g).astype(w.dtype, copy=False), own=True)
            b.accumulate_grad(g.astype(b.dtype, copy=True), own=True)
        else:
            w.accumulate_grad(
                (xd.reshape(-1, n).T @ g.reshape(-1, m)).astype(w.dtype, copy=False), own=True
            )
            b.accumulate_grad(g.reshape(-1, m).sum(axis=0).astype(b.dtype, copy=False), own=True)
        if x.requires_grad:
            x.accumulate_grad((g @ wd.T).astype(x.dtype, copy=False), own=True)

    _record(out, backward)
    return out


def elu(x):
    """Exponential linear unit with alpha = 1."""
    x = as_tensor(x)
    xd = x.data
    # branch-free: max(x,0) + exp(min(x,0)) - 1 vectorizes; expm1 does not
    out_data = np.maximum(xd, 0.0)
    out_data += np.exp(np.minimum(xd, 0.0))
    out_data -= 1.0
    out = _out(out_data)

    def backward(g):
        dx = np.empty_like(out_data)
        kernels.elu_bwd(
            np.ascontiguousarray(g, dtype=xd.dtype).reshape(-1),
            out_data.reshape(-1),
            dx.reshape(-1),
        )
        x.accumulate_grad(dx, own=True)

    _record(out, backward)
    return out


def softmax(x):
    """Numerically stable softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _out(y)

    def backward(g):
        x.accumulate_grad(y * (g - (g * y).sum(axis=-1, keepdims=True)), own=True)

    _record(out, backward)
    return out


def avg_pool(x, axis, length):
    """Non-overlapping mean over windows of `length` along time or freq."""
    x = as_tensor(x)
    p = int(length)
    if p < 1:
        raise ValueError("pool length must be >= 1")
    ax = _pool_axis(x.ndim, axis)
    n = x.shape[ax]
    if n % p != 0:
        raise ShapeError(f"axis of size {n} not divisible by pool length {p}")
    shape = x.shape[:ax] + (n // p, p) + x.shape[ax + 1:]
    out = _out(x.data.reshape(shape).mean(axis=ax + 1))

    def backward(g):
        x.accumulate_grad(np.repeat(g / p, p, axis=ax), own=True)

    _record(out, backward)
    return out


def upsample_nearest(x, factor):
    """Repeat each index `factor` times along the time axis."""
    x = as_tensor(x)
    k = int(factor)
    if k < 1:
        raise ValueError("upsample factor must be >= 1")
    ax = _pool_axis(x.ndim, "time")
    out = _out(np.repeat(x.data, k, axis=ax))

    def backward(g):
        shape = x.shape[:ax] + (x.shape[ax], k) + x.shape[ax + 1:]
        x.accumulate_grad(g.reshape(shape).sum(axis=ax + 1), own=True)

    _record(out, backward)
    return out


def global_avg_pool(x):
    """Per-channel mean over time: (T,C) -> (C,) or (B,T,C) -> (B,C)."""
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"global_avg_pool expects (T,C) or (B,T,C), got {x.shape}")
    ax = x.ndim - 2
    t = x.shape[ax]
    if t < 1:
        raise ShapeError("empty time axis")
    out = _out(x.data.mean(axis=ax))

    def backward(g):
        x.accumulate_grad(np.repeat(np.expand_dims(g / t, ax), t, axis=ax), own=True)

    _record(out, backward)
    return out


def concat(tensors, axis=-1):
    """Concatenate along an axis."""
    ts = [as_tensor(t) for t in tensors]
    out = _out(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            t.accumulate_grad(piece)

    _record(out, backward)
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = _out(x.data.reshape(shape))

    def backward(g):
        x.accumulate_grad(g.reshape(x.shape))

    _record(out, backward)
    return out


def cross_entropy(pred, label, eps=1e-12):
    """-log(pred[label]), clamped at pred >= eps; batched input returns the mean.

    `pred` must hold valid distributions: (n,) with an int label, or (B,n)
    with (B,) labels.
    """
    pred = as_tensor(pred)
    pd = pred.data
    if pd.ndim == 1:
        labels = np.asarray([int(label)])
        p2 = pd[None]
    elif pd.ndim == 2:
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (pd.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} != batch {pd.shape[0]}")
        p2 = pd
    else:
        raise ShapeError(f"cross_entropy expects (n,) or (B,n), got {pd.shape}")
    if np.any(p2 < -1e-9) or np.any(p2 > 1 + 1e-9):
        raise InvalidDistributionError("probabilities outside [0,1]")
    if np.any(np.abs(p2.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidDistributionError("probabilities do not sum to 1")
    n = p2.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError("label out of range")
    rows = np.arange(p2.shape[0])
    picked = p2[rows, labels]
    safe = np.maximum(picked, eps)
    out = _out(np.asarray(-np.log(safe).mean(), dtype=pd.dtype))

    def backward(g):
        gp = np.zeros_like(p2)
        live = picked >= eps
        gp[rows[live], labels[live]] = -1.0 / safe[live]
        gp *= g / p2.shape[0]
        pred.accumulate_grad(gp if pd.ndim == 2 else gp[0], own=pd.ndim == 2)

    _record(out, backward)
    return out


def sum_all(x):
    """Sum of all elements, as a scalar tensor."""
    x = as_tensor(x)
    out = _out(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward(g):
        x.accumulate_grad(np.full_like(x.data, g), own=True)

    _record(out, backward)
    return out


def weighted_sum(x, weights):
    """Fixed-weight projection to a scalar; handy for gradient checks."""
    x = as_tensor(x)
    wd = np.asarray(weights, dtype=x.dtype)
    if wd.shape != x.shape:
        raise ShapeError(f"weights shape {wd.shape} != input {x.shape}")
    out = _out(np.asarray((x.data * wd).sum(), dtype=x.dtype))

    def backward(g):
        x.accumulate_grad(wd * g, own=True)

    _record(out, backward)
    return out
