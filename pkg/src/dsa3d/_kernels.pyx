# cython: language_level=3
"""Compiled inner loops for 3D convolution and non-overlapping max-pooling.

All arrays are float64 and C-contiguous. Padding, bias and activation are
handled by the callers in :mod:`dsa3d.nnops`; these routines only see the
already padded input. Every sum runs in a fixed order over fixed vector
lanes, so results are bit-reproducible for identical inputs.
"""

from libc.string cimport memcpy
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef extern from *:
    """
    #include <string.h>
    /* four-double vector; memcpy gives unaligned loads and stores */
    typedef double dsa_v4 __attribute__((vector_size(32)));
    static inline dsa_v4 dsa_ld(const double *p) { dsa_v4 v; memcpy(&v, p, sizeof v); return v; }
    static inline void dsa_st(double *p, dsa_v4 v) { memcpy(p, &v, sizeof v); }
    /* eight fixed lanes keep the reduction order deterministic and vectorizable */
    static inline double dsa_dot(const double *__restrict g, const double *__restrict x,
                                 Py_ssize_t n) {
        dsa_v4 a = {0}, b = {0};
        Py_ssize_t i = 0;
        for (; i + 8 <= n; i += 8) {
            a += dsa_ld(g + i) * dsa_ld(x + i); b += dsa_ld(g + i + 4) * dsa_ld(x + i + 4);
        }
        double s[8];
        dsa_st(s, a); dsa_st(s + 4, b);
        for (; i < n; ++i) s[0] += g[i] * x[i];
        return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
    }
    /* Four output rows at once, o_m[i] = sum_t wp[4t+m] * x[offs[t] + i], with an
       8-voxel register tile; each output is summed over taps in t order. */
    static void dsa_conv4(double *__restrict o0, double *__restrict o1,
                          double *__restrict o2, double *__restrict o3,
                          const double *__restrict x, const Py_ssize_t *offs,
                          const double *__restrict wp, Py_ssize_t ntap, Py_ssize_t n) {
        Py_ssize_t i = 0;
        for (; i + 8 <= n; i += 8) {
            dsa_v4 a0 = {0}, b0 = {0}, a1 = {0}, b1 = {0}, a2 = {0}, b2 = {0}, a3 = {0}, b3 = {0};
            for (Py_ssize_t t = 0; t < ntap; ++t) {
                const double *xv = x + offs[t] + i;
                const dsa_v4 u = dsa_ld(xv), v = dsa_ld(xv + 4);
                const double w0 = wp[4 * t], w1 = wp[4 * t + 1];
                const double w2 = wp[4 * t + 2], w3 = wp[4 * t + 3];
                a0 += w0 * u; b0 += w0 * v; a1 += w1 * u; b1 += w1 * v;
                a2 += w2 * u; b2 += w2 * v; a3 += w3 * u; b3 += w3 * v;
            }
            dsa_st(o0 + i, a0); dsa_st(o0 + i + 4, b0); dsa_st(o1 + i, a1); dsa_st(o1 + i + 4, b1);
            dsa_st(o2 + i, a2); dsa_st(o2 + i + 4, b2); dsa_st(o3 + i, a3); dsa_st(o3 + i + 4, b3);
        }
        for (; i < n; ++i) {
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (Py_ssize_t t = 0; t < ntap; ++t) {
                const double v = x[offs[t] + i];
                s0 += wp[4 * t] * v; s1 += wp[4 * t + 1] * v;
                s2 += wp[4 * t + 2] * v; s3 += wp[4 * t + 3] * v;
            }
            o0[i] = s0; o1[i] = s1; o2[i] = s2; o3[i] = s3;
        }
    }
    /* single-row version of dsa_conv4 for leftover maps */
    static void dsa_conv1(double *__restrict o, const double *__restrict x,
                          const Py_ssize_t *offs, const double *__restrict wp,
                          Py_ssize_t ntap, Py_ssize_t n) {
        Py_ssize_t i = 0;
        for (; i + 8 <= n; i += 8) {
            dsa_v4 a = {0}, b = {0};
            for (Py_ssize_t t = 0; t < ntap; ++t) {
                const double *xv = x + offs[t] + i;
                a += wp[t] * dsa_ld(xv); b += wp[t] * dsa_ld(xv + 4);
            }
            dsa_st(o + i, a); dsa_st(o + i + 4, b);
        }
        for (; i < n; ++i) {
            double s = 0.0;
            for (Py_ssize_t t = 0; t < ntap; ++t) s += wp[t] * x[offs[t] + i];
            o[i] = s;
        }
    }
    /* r[m] += dot(g_m, x) for four rows g_m sharing one x, eight fixed lanes each */
    static void dsa_dot4(const double *__restrict g0, const double *__restrict g1,
                         const double *__restrict g2, const double *__restrict g3,
                         const double *__restrict x, Py_ssize_t n, double *r) {
        dsa_v4 a0 = {0}, b0 = {0}, a1 = {0}, b1 = {0}, a2 = {0}, b2 = {0}, a3 = {0}, b3 = {0};
        Py_ssize_t i = 0;
        for (; i + 8 <= n; i += 8) {
            const dsa_v4 u = dsa_ld(x + i), v = dsa_ld(x + i + 4);
            a0 += dsa_ld(g0 + i) * u; b0 += dsa_ld(g0 + i + 4) * v;
            a1 += dsa_ld(g1 + i) * u; b1 += dsa_ld(g1 + i + 4) * v;
            a2 += dsa_ld(g2 + i) * u; b2 += dsa_ld(g2 + i + 4) * v;
            a3 += dsa_ld(g3 + i) * u; b3 += dsa_ld(g3 + i + 4) * v;
        }
        double q[4][8];
        dsa_st(q[0], a0); dsa_st(q[0] + 4, b0); dsa_st(q[1], a1); dsa_st(q[1] + 4, b1);
        dsa_st(q[2], a2); dsa_st(q[2] + 4, b2); dsa_st(q[3], a3); dsa_st(q[3] + 4, b3);
        for (; i < n; ++i) {
            const double v = x[i];
            q[0][0] += g0[i] * v; q[1][0] += g1[i] * v; q[2][0] += g2[i] * v; q[3][0] += g3[i] * v;
        }
        for (int m = 0; m < 4; ++m)
            r[m] += ((q[m][0] + q[m][1]) + (q[m][2] + q[m][3]))
                  + ((q[m][4] + q[m][5]) + (q[m][6] + q[m][7]));
    }
    """
    double dsa_dot(const double *g, const double *x, Py_ssize_t n) nogil
    void dsa_conv4(double *o0, double *o1, double *o2, double *o3, const double *x,
                   const Py_ssize_t *offs, const double *wp, Py_ssize_t ntap, Py_ssize_t n) nogil
    void dsa_conv1(double *o, const double *x, const Py_ssize_t *offs, const double *wp,
                   Py_ssize_t ntap, Py_ssize_t n) nogil
    void dsa_dot4(const double *g0, const double *g1, const double *g2, const double *g3,
                  const double *x, Py_ssize_t n, double *r) nogil


def conv3d_forward(double[:, :, :, ::1] xp,
                   double[:, :, :, :, ::1] w,
                   double[:, :, :, ::1] out):
    """Cross-correlate padded input ``xp`` (J, D', H', W') with ``w`` (K, J, n, n, n).

    ``out`` (K, D, H, W) is overwritten with the pre-activation sums. Each
    (channel, tap) pair is a fixed offset into the flattened padded grid, so
    every output map is a sum of shifted input rows; columns that wrap
    around are computed and discarded.
    """
    cdef Py_ssize_t K = w.shape[0], J = w.shape[1], n = w.shape[2]
    cdef Py_ssize_t D = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t PH = xp.shape[2], PW = xp.shape[3]
    cdef Py_ssize_t plane = xp.shape[1] * PH * PW
    cdef Py_ssize_t span = (D - 1) * PH * PW + (H - 1) * PW + W
    cdef Py_ssize_t ntap = J * n * n * n
    cdef double[:, ::1] wide = np.empty((K, max(plane, 1)), dtype=np.float64)
    cdef Py_ssize_t[::1] offs = np.empty(ntap, dtype=np.intp)
    # weights regrouped as (map block of 4, tap, 4) so the microkernel reads them in order
    cdef double[::1] wp = np.zeros(((K + 3) // 4) * ntap * 4, dtype=np.float64)
    cdef const double *xflat = &xp[0, 0, 0, 0]
    cdef Py_ssize_t k, j, a, b, c, z, y, t, m, k0
    t = 0
    for j in range(J):
        for a in range(n):
            for b in range(n):
                for c in range(n):
                    offs[t] = j * plane + (a * PH + b) * PW + c
                    t += 1
    with nogil:
        k0 = 0
        while k0 + 4 <= K:
            for m in range(4):
                t = 0
                for j in range(J):
                    for a in range(n):
                        for b in range(n):
                            for c in range(n):
                                wp[(k0 // 4) * ntap * 4 + 4 * t + m] = w[k0 + m, j, a, b, c]
                                t += 1
            dsa_conv4(&wide[k0, 0], &wide[k0 + 1, 0], &wide[k0 + 2, 0], &wide[k0 + 3, 0],
                      xflat, &offs[0], &wp[(k0 // 4) * ntap * 4], ntap, span)
            k0 += 4
        for k in range(k0, K):
            dsa_conv1(&wide[k, 0], xflat, &offs[0], &w[k, 0, 0, 0, 0], ntap, span)
        for k in range(K):
            for z in range(D):
                for y in range(H):
                    memcpy(&out[k, z, y, 0], &wide[k, (z * PH + y) * PW], W * sizeof(double))


# voxels per weight-gradient pass; about 4 KB per row stays in L1/L2
cdef Py_ssize_t CHUNK = 512


def conv3d_backward(double[:, :, :, ::1] xp,
                    double[:, :, :, :, ::1] w,
                    double[:, :, :, ::1] g,
                    double[:, :, :, ::1] gxp,
                    double[:, :, :, :, ::1] gw,
                    bint need_input_grad=True):
    """Gradients of the cross-correlation.

    ``g`` is the gradient w.r.t. the pre-activation output (K, D, H, W).
    ``gxp`` (padded input shape) and ``gw`` (kernel shape) are overwritten.
    The input gradient is computed as a gather: row j of ``gxp`` sums the
    output gradient rows shifted back by every tap, read from a copy that
    is zero-padded in front so no shift leaves the buffer.
    """
    cdef Py_ssize_t K = w.shape[0], J = w.shape[1], n = w.shape[2]
    cdef Py_ssize_t D = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t PH = xp.shape[2], PW = xp.shape[3]
    cdef Py_ssize_t plane = xp.shape[1] * PH * PW
    cdef Py_ssize_t span = (D - 1) * PH * PW + (H - 1) * PW + W
    cdef Py_ssize_t taps = n * n * n
    cdef Py_ssize_t margin = (n - 1) * (PH * PW + PW + 1)
    cdef Py_ssize_t row = plane + margin
    # gpad[k, margin + q] holds the output gradient at flat padded position q
    cdef double[:, ::1] gpad = np.zeros((K, row), dtype=np.float64)
    cdef Py_ssize_t[::1] tapoff = np.empty(taps, dtype=np.intp)
    cdef Py_ssize_t[::1] offs = np.empty(K * taps, dtype=np.intp)
    cdef double[::1] wp = np.zeros(((J + 3) // 4) * K * taps * 4, dtype=np.float64)
    cdef const double *xflat = &xp[0, 0, 0, 0]
    cdef double *gxflat = &gxp[0, 0, 0, 0]
    cdef Py_ssize_t k, j, a, b, c, z, y, t, m, k0, j0, base
    cdef double r4[4]
    cdef Py_ssize_t i0, len_
    cdef double[:, :, ::1] gwt = np.asarray(gw).reshape(K, J, taps)
    r4[0] = r4[1] = r4[2] = r4[3] = 0.0
    t = 0
    for a in range(n):
        for b in range(n):
            for c in range(n):
                tapoff[t] = (a * PH + b) * PW + c
                t += 1
    with nogil:
        for k in range(K):
            for z in range(D):
                for y in range(H):
                    memcpy(&gpad[k, margin + (z * PH + y) * PW], &g[k, z, y, 0],
                           W * sizeof(double))
        # voxel chunks keep the gradient and input rows cache resident
        for k in range(K):
            for j in range(J):
                for t in range(taps):
                    gwt[k, j, t] = 0.0
        i0 = 0
        while i0 < span:
            len_ = min(CHUNK, span - i0)
            k0 = 0
            while k0 + 4 <= K:
                for j in range(J):
                    for t in range(taps):
                        dsa_dot4(&gpad[k0, margin + i0], &gpad[k0 + 1, margin + i0],
                                 &gpad[k0 + 2, margin + i0], &gpad[k0 + 3, margin + i0],
                                 xflat + j * plane + tapoff[t] + i0, len_, r4)
                        for m in range(4):
                            gwt[k0 + m, j, t] += r4[m]
                            r4[m] = 0.0
                k0 += 4
            for k in range(k0, K):
                for j in range(J):
                    for t in range(taps):
                        gwt[k, j, t] += dsa_dot(&gpad[k, margin + i0],
                                                xflat + j * plane + tapoff[t] + i0, len_)
            i0 += CHUNK
        if need_input_grad:
            for k in range(K):
                for t in range(taps):
                    offs[k * taps + t] = k * row + margin - tapoff[t]
            j0 = 0
            while j0 + 4 <= J:
                base = (j0 // 4) * K * taps * 4
                for k in range(K):
                    for t in range(taps):
                        for m in range(4):
                            wp[base + 4 * (k * taps + t) + m] = w[k, j0 + m, t // (n * n),
                                                                   (t // n) % n, t % n]
                dsa_conv4(gxflat + j0 * plane, gxflat + (j0 + 1) * plane,
                          gxflat + (j0 + 2) * plane, gxflat + (j0 + 3) * plane,
                          &gpad[0, 0], &offs[0], &wp[base], K * taps, plane)
                j0 += 4
            for j in range(j0, J):
                for k in range(K):
                    for t in range(taps):
                        wp[k * taps + t] = w[k, j, t // (n * n), (t // n) % n, t % n]
                dsa_conv1(gxflat + j * plane, &gpad[0, 0], &offs[0], &wp[0], K * taps, plane)


def maxpool3d_forward(double[:, :, :, ::1] xp, Py_ssize_t s,
                      double[:, :, :, ::1] out,
                      cnp.int64_t[:, :, :, ::1] arg):
    """Block maxima of ``xp`` (extents multiples of ``s``); ties keep the lowest flat index."""
    cdef Py_ssize_t C = out.shape[0], D = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t PD = xp.shape[1], PH = xp.shape[2], PW = xp.shape[3]
    cdef Py_ssize_t ch, z, y, x, a, b, c, zz, yy, xx, best_idx
    cdef double best, v
    with nogil:
        for ch in range(C):
            for z in range(D):
                for y in range(H):
                    for x in range(W):
                        best_idx = -1
                        best = 0.0
                        for a in range(s):
                            zz = z * s + a
                            for b in range(s):
                                yy = y * s + b
                                for c in range(s):
                                    xx = x * s + c
                                    v = xp[ch, zz, yy, xx]
                                    if best_idx < 0 or v > best:
                                        best = v
                                        best_idx = ((ch * PD + zz) * PH + yy) * PW + xx
                        out[ch, z, y, x] = best
                        arg[ch, z, y, x] = best_idx


def maxpool3d_backward(cnp.int64_t[::1] arg, double[::1] g, double[::1] gin):
    """Route ``g`` to the recorded argmax positions of the flat ``gin`` buffer."""
    cdef Py_ssize_t i, m = arg.shape[0]
    with nogil:
        for i in range(m):
            gin[arg[i]] += g[i]
