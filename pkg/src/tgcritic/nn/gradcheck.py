"""Finite-difference verification of taped gradients."""

from __future__ import annotations

import numpy as np

from .engine import Tape, Tensor


def grad_check(fn, inputs, h=1e-5, sample=None, rng=None):
    """Max relative error between taped and central-difference gradients.

    ``fn(*inputs)`` must return a scalar Tensor. All checked inputs must be
    float64 (central differences at h=1e-5 are meaningless in float32).
    ``sample`` caps the number of coordinates checked per input; by default
    every coordinate is checked. The error for a coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("inputs must be Tensors")
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.zero_grad()
    tape = Tape()
    with tape:
        loss = fn(*inputs)
    tape.backward(loss)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        if sample is not None and flat.size > sample:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        else:
            idxs = range(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(fn(*inputs).data)
            flat[i] = orig - h
            lm = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = an_flat[i]
            rel = abs(a - numeric) / max(1.0, abs(a))
            if rel > worst:
                worst = rel
    return worst
