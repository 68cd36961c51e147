"""Compiled inner loops for the convolution and pooling layers.

All arrays are channel-last ``(N, H, W, C)``.  Window offsets are enumerated
row-major, so column ``(i * 3 + j) * C + c`` of an im2col row holds
``x[n, r + i, s + j, c]``.  Every kernel writes into a caller-supplied
output array so training can reuse its buffers across batches.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def im2col3(x, out):
    n, h, w, c = x.shape
    ho, wo = h - 2, w - 2
    for a in range(n):
        for r in range(ho):
            for s in range(wo):
                for i in range(3):
                    for j in range(3):
                        base = (i * 3 + j) * c
                        for k in range(c):
                            out[a, r, s, base + k] = x[a, r + i, s + j, k]
    return out


@numba.njit(cache=True)
def maxpool2_fwd(x, out, arg):
    """2x2/stride-2 max; ``arg`` is the row-major window cell, first max wins."""
    n, ho, wo, c = out.shape
    for a in range(n):
        for i in range(ho):
            for j in range(wo):
                for k in range(c):
                    best = x[a, 2 * i, 2 * j, k]
                    bi = 0
                    v = x[a, 2 * i, 2 * j + 1, k]
                    if v > best:
                        best = v
                        bi = 1
                    v = x[a, 2 * i + 1, 2 * j, k]
                    if v > best:
                        best = v
                        bi = 2
                    v = x[a, 2 * i + 1, 2 * j + 1, k]
                    if v > best:
                        best = v
                        bi = 3
                    out[a, i, j, k] = best
                    arg[a, i, j, k] = bi
    return out, arg


@numba.njit(cache=True)
def pool_conv_bwd(dq, arg, cols, wt, dwt, db, dx, need_dx):
    """Backward through 2x2 max-pool then a 3x3 VALID conv, in one pass.

    Only the winning cell of each pooling window carries gradient, so the
    loop visits the nonzero entries of ``dq`` and never forms the dense
    conv-output gradient.  ``wt`` is the kernel as (Cout, 9 * Cin);
    ``dwt`` (same layout) and ``db`` receive the parameter
    gradients and ``dx`` the input gradient when ``need_dx``.
    """
    n, ho, wo, cout = dq.shape
    cin = dx.shape[3]
    kk = cols.shape[3]
    dwt[:] = 0
    db[:] = 0
    if need_dx:
        dx[:] = 0
    for a in range(n):
        for pi in range(ho):
            for pj in range(wo):
                for o in range(cout):
                    v = dq[a, pi, pj, o]
                    if v == 0:
                        continue
                    cell = arg[a, pi, pj, o]
                    r = 2 * pi + cell // 2
                    s = 2 * pj + cell % 2
                    db[o] += v
                    row = cols[a, r, s]
                    drow = dwt[o]
                    for t in range(kk):
                        drow[t] += v * row[t]
                    if need_dx:
                        wrow = wt[o]
                        for i in range(3):
                            for j in range(3):
                                base = (i * 3 + j) * cin
                                px = dx[a, r + i, s + j]
                                for c in range(cin):
                                    px[c] += v * wrow[base + c]
