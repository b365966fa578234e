"""Independent reference implementations used only by the tests."""
import numpy as np


def conv2d_im2col(x, w, b, dilation):
    """Convolution by explicit patch extraction and one matrix product."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, h, wd), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i * dilation:i * dilation + h, j * dilation:j * dilation + wd]
    out = w.reshape(o, -1) @ cols.reshape(c * k * k, -1)
    return out.reshape(o, n, h, wd).transpose(1, 0, 2, 3) + b[None, :, None, None]


def conv2d_direct(x, w, b, dilation):
    """Literal quadruple-sum definition with out-of-bounds taps skipped."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    r = (k - 1) // 2
    out = np.zeros((n, o, h, wd), dtype=np.float64)
    for nn in range(n):
        for oo in range(o):
            for y in range(h):
                for xx in range(wd):
                    acc = float(b[oo])
                    for cc in range(c):
                        for i in range(k):
                            for j in range(k):
                                sy = y + dilation * (i - r)
                                sx = xx + dilation * (j - r)
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += float(w[oo, cc, i, j]) * float(x[nn, cc, sy, sx])
                    out[nn, oo, y, xx] = acc
    return out


def central_difference(f, x, h=1e-6):
    """Full numerical gradient of a scalar function of one float64 array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        s = flat[i]
        flat[i] = s + h
        fp = f(x)
        flat[i] = s - h
        fm = f(x)
        flat[i] = s
        gf[i] = (fp - fm) / (2 * h)
    return g
