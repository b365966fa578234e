"""numba loops for dilated convolution on zero-bordered planes.

Activations are stored as (N, C, Hp, Wp) buffers whose frame of width
``border`` is zero. Each tap then becomes one long flat loop over the plane;
taps that fall off the image read the zero frame and add an exact +0.

The forward and input-gradient kernels accumulate every output element in a
fixed order (bias, then channel, tap row, tap column) with no
reassociation (forward multiply-adds are contracted to single-rounding FMAs),
so a pixel's value never depends on image size, tiling or thread count.
Only the weight-gradient reduction is compiled with full fastmath.
"""
import numba
import numpy as np
from numba import njit, prange

CHUNK = 2048
# multiply-add pairs become single-rounding FMAs; nothing is reassociated
CONTRACT = {"contract"}


def conv_forward(x, n_in, w, b, dil, wp, out, c0):
    """out[:, c0:c0+O] = conv(x[:, :n_in]); x and out are (N, C, plane)."""
    if w.shape[0] == 3 and w.shape[2] == 3:
        _conv_forward_3x3(x, n_in, w, b, dil, wp, out, c0)
    else:
        _conv_forward_any(x, n_in, w, b, dil, wp, out, c0)


@njit(inline="always", fastmath=CONTRACT)
def _accum_3x3(xn, n_in, w, dil, wp, q0, q1, a0, a1, a2):
    # one pass per input channel over all nine taps; same per-element
    # addition order as _conv_forward_any (channel, tap row, tap column)
    s = dil * wp
    for c in range(n_in):
        xc = xn[c]
        p0s = xc[q0 - s - dil:q1 - s - dil]
        p1s = xc[q0 - s:q1 - s]
        p2s = xc[q0 - s + dil:q1 - s + dil]
        p3s = xc[q0 - dil:q1 - dil]
        p4s = xc[q0:q1]
        p5s = xc[q0 + dil:q1 + dil]
        p6s = xc[q0 + s - dil:q1 + s - dil]
        p7s = xc[q0 + s:q1 + s]
        p8s = xc[q0 + s + dil:q1 + s + dil]
        w00, w01, w02 = w[0, c, 0, 0], w[0, c, 0, 1], w[0, c, 0, 2]
        w03, w04, w05 = w[0, c, 1, 0], w[0, c, 1, 1], w[0, c, 1, 2]
        w06, w07, w08 = w[0, c, 2, 0], w[0, c, 2, 1], w[0, c, 2, 2]
        w10, w11, w12 = w[1, c, 0, 0], w[1, c, 0, 1], w[1, c, 0, 2]
        w13, w14, w15 = w[1, c, 1, 0], w[1, c, 1, 1], w[1, c, 1, 2]
        w16, w17, w18 = w[1, c, 2, 0], w[1, c, 2, 1], w[1, c, 2, 2]
        w20, w21, w22 = w[2, c, 0, 0], w[2, c, 0, 1], w[2, c, 0, 2]
        w23, w24, w25 = w[2, c, 1, 0], w[2, c, 1, 1], w[2, c, 1, 2]
        w26, w27, w28 = w[2, c, 2, 0], w[2, c, 2, 1], w[2, c, 2, 2]
        for q in range(q1 - q0):
            p0 = p0s[q]
            p1 = p1s[q]
            p2 = p2s[q]
            p3 = p3s[q]
            p4 = p4s[q]
            p5 = p5s[q]
            p6 = p6s[q]
            p7 = p7s[q]
            p8 = p8s[q]
            a0[q] = ((((((((a0[q] + w00 * p0) + w01 * p1) + w02 * p2) + w03 * p3) + w04 * p4)
                       + w05 * p5) + w06 * p6) + w07 * p7) + w08 * p8
            a1[q] = ((((((((a1[q] + w10 * p0) + w11 * p1) + w12 * p2) + w13 * p3) + w14 * p4)
                       + w15 * p5) + w16 * p6) + w17 * p7) + w18 * p8
            a2[q] = ((((((((a2[q] + w20 * p0) + w21 * p1) + w22 * p2) + w23 * p3) + w24 * p4)
                       + w25 * p5) + w26 * p6) + w27 * p7) + w28 * p8


@njit(parallel=True, cache=True, fastmath=CONTRACT)
def _conv_forward_3x3(x, n_in, w, b, dil, wp, out, c0):
    n_img = x.shape[0]
    plane = x.shape[2]
    reach = dil * (wp + 1)
    span = plane - 2 * reach
    nchunks = (span + CHUNK - 1) // CHUNK
    for t in prange(n_img * nchunks):
        n = t // nchunks
        q0 = reach + (t % nchunks) * CHUNK
        q1 = min(q0 + CHUNK, plane - reach)
        a0 = out[n, c0, q0:q1]
        a1 = out[n, c0 + 1, q0:q1]
        a2 = out[n, c0 + 2, q0:q1]
        a0[:] = b[0]
        a1[:] = b[1]
        a2[:] = b[2]
        _accum_3x3(x[n], n_in, w, dil, wp, q0, q1, a0, a1, a2)


@njit(parallel=True, cache=True, fastmath=CONTRACT)
def conv_bn_lrelu_infer_3x3(x, n_in, w, b, dil, wp, out, c0, mean, inv_std, gamma, beta, slope):
    """_conv_forward_3x3 followed by inference batchnorm + leaky ReLU on each chunk.

    Per-element arithmetic matches conv_forward then bn_lrelu_infer exactly;
    the caller still zeroes the frame outside the valid rectangle.
    """
    n_img = x.shape[0]
    plane = x.shape[2]
    reach = dil * (wp + 1)
    span = plane - 2 * reach
    nchunks = (span + CHUNK - 1) // CHUNK
    for t in prange(n_img * nchunks):
        n = t // nchunks
        q0 = reach + (t % nchunks) * CHUNK
        q1 = min(q0 + CHUNK, plane - reach)
        a0 = out[n, c0, q0:q1]
        a1 = out[n, c0 + 1, q0:q1]
        a2 = out[n, c0 + 2, q0:q1]
        a0[:] = b[0]
        a1[:] = b[1]
        a2[:] = b[2]
        _accum_3x3(x[n], n_in, w, dil, wp, q0, q1, a0, a1, a2)
        m0, s0, g0, t0 = mean[0], inv_std[0], gamma[0], beta[0]
        m1, s1, g1, t1 = mean[1], inv_std[1], gamma[1], beta[1]
        m2, s2, g2, t2 = mean[2], inv_std[2], gamma[2], beta[2]
        for q in range(q1 - q0):
            v = (a0[q] - m0) * s0 * g0 + t0
            a0[q] = v if v >= 0 else v * slope
            v = (a1[q] - m1) * s1 * g1 + t1
            a1[q] = v if v >= 0 else v * slope
            v = (a2[q] - m2) * s2 * g2 + t2
            a2[q] = v if v >= 0 else v * slope


@njit(parallel=True, cache=True, fastmath=CONTRACT)
def _conv_forward_any(x, n_in, w, b, dil, wp, out, c0):
    n_img = x.shape[0]
    plane = x.shape[2]
    n_out, _, k, _ = w.shape
    r = (k - 1) // 2
    reach = r * dil * (wp + 1)
    span = plane - 2 * reach
    nchunks = (span + CHUNK - 1) // CHUNK
    for t in prange(n_img * nchunks):
        n = t // nchunks
        q0 = reach + (t % nchunks) * CHUNK
        q1 = min(q0 + CHUNK, plane - reach)
        for o in range(n_out):
            acc = out[n, c0 + o, q0:q1]
            acc[:] = b[o]
            for c in range(n_in):
                for i in range(k):
                    for j in range(k):
                        off = (i - r) * dil * wp + (j - r) * dil
                        wv = w[o, c, i, j]
                        src = x[n, c, q0 + off:q1 + off]
                        for q in range(q1 - q0):
                            acc[q] = acc[q] + wv * src[q]


@njit(parallel=True, cache=True)
def conv_backward_input(g, g0, w, dil, wp, gx):
    """gx[:, :n_in] += adjoint of conv applied to g[:, g0:g0+O]."""
    n_img = g.shape[0]
    plane = g.shape[2]
    n_out, n_in, k, _ = w.shape
    r = (k - 1) // 2
    reach = r * dil * (wp + 1)
    span = plane - 2 * reach
    nchunks = (span + CHUNK - 1) // CHUNK
    for t in prange(n_img * nchunks):
        n = t // nchunks
        q0 = reach + (t % nchunks) * CHUNK
        q1 = min(q0 + CHUNK, plane - reach)
        m = q1 - q0
        for c in range(n_in):
            acc = gx[n, c, q0:q1]
            for o in range(n_out):
                for i in range(k):
                    base = q0 - (i - r) * dil * wp
                    if k == 3:
                        sl = g[n, g0 + o, base + dil:base + dil + m]
                        sm = g[n, g0 + o, base:base + m]
                        sr = g[n, g0 + o, base - dil:base - dil + m]
                        w0, w1, w2 = w[o, c, i, 0], w[o, c, i, 1], w[o, c, i, 2]
                        for q in range(m):
                            acc[q] = ((acc[q] + w0 * sl[q]) + w1 * sm[q]) + w2 * sr[q]
                    else:
                        for j in range(k):
                            off = (j - r) * dil
                            wv = w[o, c, i, j]
                            src = g[n, g0 + o, base - off:base - off + m]
                            for q in range(m):
                                acc[q] = acc[q] + wv * src[q]


@njit(cache=True, fastmath=True)
def _dot(a, b):
    s = a.dtype.type(0.0)
    for q in range(a.shape[0]):
        s += a[q] * b[q]
    return s


@njit(parallel=True, cache=True, fastmath=True)
def conv_backward_weights(x, g, g0, dil, wp, gw):
    """gw[o,c,i,j] = sum over images and plane of g[:, g0+o] * shifted x[:, c].

    Partial dot products run over CHUNK-sized spans and are summed in float64.
    """
    n_img = x.shape[0]
    plane = x.shape[2]
    n_out, n_in, k, _ = gw.shape
    r = (k - 1) // 2
    reach = r * dil * (wp + 1)
    total = np.zeros((n_out, n_in, k, k))
    for oc in prange(n_out * n_in):
        o = oc // n_in
        c = oc % n_in
        for n in range(n_img):
            for q0 in range(reach, plane - reach, CHUNK):
                q1 = min(q0 + CHUNK, plane - reach)
                gs = g[n, g0 + o, q0:q1]
                for i in range(k):
                    for j in range(k):
                        off = (i - r) * dil * wp + (j - r) * dil
                        total[o, c, i, j] += _dot(gs, x[n, c, q0 + off:q1 + off])
    for o in range(n_out):
        for c in range(n_in):
            for i in range(k):
                for j in range(k):
                    gw[o, c, i, j] = total[o, c, i, j]


@njit(cache=True)
def lrelu(x, slope, out):
    xf = x.reshape(-1)
    of = out.reshape(-1)
    for q in range(xf.shape[0]):
        v = xf[q]
        of[q] = v if v >= 0 else v * slope


@njit(cache=True)
def lrelu_backward(x, g, slope, out):
    xf = x.reshape(-1)
    gf = g.reshape(-1)
    of = out.reshape(-1)
    for q in range(xf.shape[0]):
        of[q] = gf[q] if xf[q] >= 0 else gf[q] * slope


@njit(parallel=True, cache=True)
def bn_lrelu_infer(buf, c0, mean, inv_std, gamma, beta, slope, y0, y1, x0, x1):
    """In-place inference batchnorm + leaky ReLU on buf[:, c0:c0+C] inside the valid rectangle.

    Everything outside rows [y0, y1) x cols [x0, x1) is set to zero.
    """
    n_img, _, hp, wp = buf.shape
    n_ch = mean.shape[0]
    for t in prange(n_img * hp):
        n = t // hp
        y = t % hp
        for c in range(n_ch):
            row = buf[n, c0 + c, y]
            if y < y0 or y >= y1:
                row[:] = 0.0
                continue
            m = mean[c]
            s = inv_std[c]
            gm = gamma[c]
            bt = beta[c]
            for xx in range(x0):
                row[xx] = 0.0
            for xx in range(x0, x1):
                v = (row[xx] - m) * s * gm + bt
                row[xx] = v if v >= 0 else v * slope
            for xx in range(x1, wp):
                row[xx] = 0.0


@njit(parallel=True, cache=True)
def fixed_point_row_sums(off, scale, limit, sums):
    """sums[c, y] = sum_x rint(off[c, y, x] * scale) in int64; returns the count
    of non-finite or |off| >= limit values (those are skipped)."""
    n_ch, h, w = off.shape
    bad = 0
    for t in prange(n_ch * h):
        c = t // h
        y = t % h
        acc = np.int64(0)
        nb = 0
        for x in range(w):
            v = np.float64(off[c, y, x])
            if not (abs(v) < limit):
                nb += 1
                continue
            acc += np.int64(np.rint(v * scale))
        sums[c, y] = acc
        bad += nb
    return bad


@njit(parallel=True, cache=True)
def add_clip(x, off, out):
    """out = clip(x + off, 0, 1) for (P, 3) arrays; off has 1 or P rows."""
    n = x.shape[0]
    step = 1 if off.shape[0] != 1 else 0
    for i in prange(n):
        r = i * step
        for c in range(3):
            v = x[i, c] + off[r, c]
            out[i, c] = min(max(v, np.float32(0.0)), np.float32(1.0))


def set_threads(n: int) -> None:
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def get_threads() -> int:
    return numba.get_num_threads()


def flat(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) contiguous buffer viewed as (N, C, H*W)."""
    return a.reshape(a.shape[0], a.shape[1], -1)
