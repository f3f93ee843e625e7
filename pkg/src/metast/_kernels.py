"""Hot loops of the tagger, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports and ``METAST_NO_NUMBA`` is unset
(or "0"). Set ``METAST_NO_NUMBA=1`` to force the numpy path. Both paths are
importable under explicit names (``*_nb`` / ``*_np``) so they can be compared.

Window layout shared by every kernel: ``ctx`` is an (N, 2w+1) int64 array of
token ids, with -1 marking padding outside the sentence. Padding rows
contribute a zero embedding.
"""
import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("METAST_NO_NUMBA", "0") in ("", "0")


# ---------------------------------------------------------------- numpy twins

def gather_windows_np(E, ctx):
    n, width = ctx.shape
    d = E.shape[1]
    X = E[np.maximum(ctx, 0)]
    X[ctx < 0] = 0.0
    return X.reshape(n, width * d)


def scatter_windows_np(dX, ctx, n_rows):
    n, width = ctx.shape
    d = dX.shape[1] // width
    dE = np.zeros((n_rows, d))
    flat = ctx.reshape(-1)
    keep = flat >= 0
    np.add.at(dE, flat[keep], dX.reshape(n * width, d)[keep])
    return dE


def meta_dots_np(h, d2, X, da, W1, ctx, GE, GW1, Gb1, GW2, Gb2):
    """Inner product of every token's loss gradient with a fixed gradient G.

    ``h`` hidden activations, ``d2`` softmax minus target, ``da`` the hidden
    pre-activation gradient, all for unit token weight and no dropout.
    """
    GX = gather_windows_np(GE, ctx)
    hidden_side = X @ GW1 + GX @ W1 + Gb1
    out_side = h @ GW2 + Gb2
    return (da * hidden_side).sum(axis=1) + (d2 * out_side).sum(axis=1)


# -------------------------------------------------------------- numba kernels

if HAS_NUMBA:

    @njit(cache=True)
    def gather_windows_nb(E, ctx):
        n, width = ctx.shape
        d = E.shape[1]
        X = np.zeros((n, width * d))
        for i in range(n):
            for j in range(width):
                tok = ctx[i, j]
                if tok < 0:
                    continue
                for k in range(d):
                    X[i, j * d + k] = E[tok, k]
        return X

    @njit(cache=True)
    def scatter_windows_nb(dX, ctx, n_rows):
        n, width = ctx.shape
        d = dX.shape[1] // width
        dE = np.zeros((n_rows, d))
        for i in range(n):
            for j in range(width):
                tok = ctx[i, j]
                if tok < 0:
                    continue
                for k in range(d):
                    dE[tok, k] += dX[i, j * d + k]
        return dE

    @njit(cache=True)
    def meta_dots_nb(h, d2, X, da, W1, ctx, GE, GW1, Gb1, GW2, Gb2):
        n, width = ctx.shape
        d = GE.shape[1]
        n_hid = W1.shape[1]
        GX = np.zeros((n, width * d))
        for i in range(n):
            for w in range(width):
                tok = ctx[i, w]
                if tok < 0:
                    continue
                for k in range(d):
                    GX[i, w * d + k] = GE[tok, k]
        hidden_side = np.dot(X, GW1) + np.dot(GX, W1)
        out_side = np.dot(h, GW2)
        out = np.zeros(n)
        for i in range(n):
            acc = 0.0
            for j in range(n_hid):
                acc += da[i, j] * (hidden_side[i, j] + Gb1[j])
            for c in range(d2.shape[1]):
                acc += d2[i, c] * (out_side[i, c] + Gb2[c])
            out[i] = acc
        return out

else:  # pragma: no cover
    gather_windows_nb = gather_windows_np
    scatter_windows_nb = scatter_windows_np
    meta_dots_nb = meta_dots_np


if USE_NUMBA:
    gather_windows = gather_windows_nb
    scatter_windows = scatter_windows_nb
    meta_dots = meta_dots_nb
else:
    gather_windows = gather_windows_np
    scatter_windows = scatter_windows_np
    meta_dots = meta_dots_np

BACKEND = "numba" if USE_NUMBA else "numpy"
