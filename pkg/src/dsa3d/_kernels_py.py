"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and output conventions match the compiled module exactly so the
two can be swapped at import time. Floating-point summation order differs,
so results agree to rounding, not bit for bit.
"""

import numpy as np


def conv3d_forward(xp, w, out):
    K, J, n = w.shape[:3]
    _, D, H, W = out.shape
    out[...] = 0.0
    for a in range(n):
        for b in range(n):
            for c in range(n):
                patch = xp[:, a:a + D, b:b + H, c:c + W]
                out += np.tensordot(w[:, :, a, b, c], patch, axes=(1, 0))


def conv3d_backward(xp, w, g, gxp, gw, need_input_grad=True):
    K, J, n = w.shape[:3]
    _, D, H, W = g.shape
    if need_input_grad:
        gxp[...] = 0.0
    for a in range(n):
        for b in range(n):
            for c in range(n):
                patch = xp[:, a:a + D, b:b + H, c:c + W]
                gw[:, :, a, b, c] = np.tensordot(g, patch, axes=([1, 2, 3], [1, 2, 3]))
                if need_input_grad:
                    gxp[:, a:a + D, b:b + H, c:c + W] += np.tensordot(
                        w[:, :, a, b, c], g, axes=(0, 0))


def maxpool3d_forward(xp, s, out, arg):
    C, D, H, W = out.shape
    _, PD, PH, PW = xp.shape
    blocks = (xp.reshape(C, D, s, H, s, W, s)
                .transpose(0, 1, 3, 5, 2, 4, 6)
                .reshape(C, D, H, W, s * s * s))
    local = np.argmax(blocks, axis=-1)  # first occurrence == lowest flat index
    out[...] = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    a, rem = np.divmod(local, s * s)
    b, c = np.divmod(rem, s)
    ch = np.arange(C).reshape(C, 1, 1, 1)
    zz = np.arange(D).reshape(1, D, 1, 1) * s + a
    yy = np.arange(H).reshape(1, 1, H, 1) * s + b
    xx = np.arange(W).reshape(1, 1, 1, W) * s + c
    arg[...] = ((ch * PD + zz) * PH + yy) * PW + xx


def maxpool3d_backward(arg, g, gin):
    np.add.at(gin, arg, g)
