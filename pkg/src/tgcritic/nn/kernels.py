"""JIT-compiled inner loops for the convolution ops.

The surrounding ops (shapes, padding policy, gradients) live in ops.py;
these kernels only do the arithmetic. Input-gradient passes reuse the
forward kernels with flipped/transposed weights, so only forward and
weight-gradient kernels exist here.

Layout is row-major (batch, time, frequency, channel); the channel axis
is innermost so the co loops vectorize. The ci loops are unrolled by 4
to cut accumulator traffic.
"""

from __future__ import annotations

import warnings

import numpy as np

# The sandboxed TBB runtime is too old for numba's TBB layer; numba falls
# back to its workqueue layer, which is fine for our purposes.
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB")

from numba import njit, prange  # noqa: E402


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_fwd(x, w, b, out):
    # x (B,T,F,Ci), w (3,3,Ci,Co), b (Co), out (B,T,F,Co); zero same-padding.
    B, T, F, Ci = x.shape
    Co = w.shape[3]
    nblk = Ci - (Ci % 4)
    for bt in prange(B * T):
        bb = bt // T
        t = bt - bb * T
        orow = out[bb, t]
        for f in range(F):
            of = orow[f]
            for co in range(Co):
                of[co] = b[co]
        for dt in range(3):
            tt = t + dt - 1
            if tt < 0 or tt >= T:
                continue
            xsl = x[bb, tt]
            for df in range(3):
                off = df - 1
                f0 = -off if off < 0 else 0
                f1 = F - off if off > 0 else F
                wk = w[dt, df]
                for f in range(f0, f1):
                    xr = xsl[f + off]
                    of = orow[f]
                    ci = 0
                    while ci < nblk:
                        x0 = xr[ci]
                        x1 = xr[ci + 1]
                        x2 = xr[ci + 2]
                        x3 = xr[ci + 3]
                        w0 = wk[ci]
                        w1 = wk[ci + 1]
                        w2 = wk[ci + 2]
                        w3 = wk[ci + 3]
                        for co in range(Co):
                            of[co] += x0 * w0[co] + x1 * w1[co] + x2 * w2[co] + x3 * w3[co]
                        ci += 4
                    while ci < Ci:
                        xv = xr[ci]
                        wr = wk[ci]
                        for co in range(Co):
                            of[co] += xv * wr[co]
                        ci += 1
    return out


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_dw(x, g, dw):
    # dw[dt,df,ci,co] = sum_{b,t,f} x[b,t+dt-1,f+df-1,ci] * g[b,t,f,co]
    # dw is (3,3,Ci,Co), preallocated to zeros; the 9 taps are independent.
    B, T, F, Ci = x.shape
    Co = g.shape[3]
    for idx in prange(9):
        dt = idx // 3
        df = idx % 3
        acc = dw[dt, df]
        tlo = 1 - dt if dt < 1 else 0
        thi = T if dt < 2 else T - 1
        flo = 1 - df if df < 1 else 0
        fhi = F if df < 2 else F - 1
        nblk = flo + ((fhi - flo) - (fhi - flo) % 4)
        for bb in range(B):
            for t in range(tlo, thi):
                xsl = x[bb, t + dt - 1]
                gsl = g[bb, t]
                f = flo
                while f < nblk:
                    xr0 = xsl[f + df - 1]
                    xr1 = xsl[f + df]
                    xr2 = xsl[f + df + 1]
                    xr3 = xsl[f + df + 2]
                    g0 = gsl[f]
                    g1 = gsl[f + 1]
                    g2 = gsl[f + 2]
                    g3 = gsl[f + 3]
                    for ci in range(Ci):
                        a0 = xr0[ci]
                        a1 = xr1[ci]
                        a2 = xr2[ci]
                        a3 = xr3[ci]
                        ar = acc[ci]
                        for co in range(Co):
                            ar[co] += a0 * g0[co] + a1 * g1[co] + a2 * g2[co] + a3 * g3[co]
                    f += 4
                while f < fhi:
                    xr = xsl[f + df - 1]
                    gr = gsl[f]
                    for ci in range(Ci):
                        xv = xr[ci]
                        ar = acc[ci]
                        for co in range(Co):
                            ar[co] += xv * gr[co]
                    f += 1
    return dw


@njit(parallel=True, fastmath=True, cache=True)
def conv1d_fwd(x, w, b, out):
    # x (B,T,Ci), w (K,Ci,Co), b (Co), out (B,T,Co); zero same-padding.
    B, T, Ci = x.shape
    K, _, Co = w.shape
    R = K // 2
    nblk = Ci - (Ci % 4)
    for bt in prange(B * T):
        bb = bt // T
        t = bt - bb * T
        of = out[bb, t]
        for co in range(Co):
            of[co] = b[co]
        for dk in range(K):
            tt = t + dk - R
            if tt < 0 or tt >= T:
                continue
            xr = x[bb, tt]
            wk = w[dk]
            ci = 0
            while ci < nblk:
                x0 = xr[ci]
                x1 = xr[ci + 1]
                x2 = xr[ci + 2]
                x3 = xr[ci + 3]
                w0 = wk[ci]
                w1 = wk[ci + 1]
                w2 = wk[ci + 2]
                w3 = wk[ci + 3]
                for co in range(Co):
                    of[co] += x0 * w0[co] + x1 * w1[co] + x2 * w2[co] + x3 * w3[co]
                ci += 4
            while ci < Ci:
                xv = xr[ci]
                wr = wk[ci]
                for co in range(Co):
                    of[co] += xv * wr[co]
                ci += 1
    return out


@njit(parallel=True, fastmath=True, cache=True)
def elu_bwd(g, out, dx):
    # d(elu)/dx = 1 for x > 0 else exp(x) = out + 1; out > 0 iff x > 0.
    n = g.size
    for i in prange(n):
        o = out[i]
        dx[i] = g[i] if o > 0.0 else g[i] * (o + 1.0)
    return dx


@njit(parallel=True, fastmath=True, cache=True)
def conv1d_dw(x, g, dw):
    # dw[dk,ci,co] = sum_{b,t} x[b,t+dk-R,ci] * g[b,t,co]; dw preallocated zeros.
    B, T, Ci = x.shape
    K = dw.shape[0]
    Co = g.shape[2]
    R = K // 2
    for dk in prange(K):
        acc = dw[dk]
        tlo = R - dk if dk < R else 0
        thi = T + R - dk if dk > R else T
        for bb in range(B):
            for t in range(tlo, thi):
                xr = x[bb, t + dk - R]
                gr = g[bb, t]
                for ci in range(Ci):
                    xv = xr[ci]
                    ar = acc[ci]
                    for co in range(Co):
                        ar[co] += xv * gr[co]
    return dw
