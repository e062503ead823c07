"""Monotonic rational-quadratic spline kernels.

Knots are passed as three arrays of shape (n, K+1): x-positions, y-positions
and derivatives (boundary derivatives included). Outside ``[xk[0], xk[K]]``
the transform is the identity. The per-bin arithmetic lives in plain
functions that work both on numpy arrays (vectorized fallback) and on
scalars inside the numba loops, so the two backends share one formula.
"""
import numpy as np

from .._accel import njit


def _bin_forward(x, x0, x1, y0, y1, d0, d1):
    w = x1 - x0
    h = y1 - y0
    s = h / w
    xi = (x - x0) / w
    t = xi * (1.0 - xi)
    num = h * (s * xi * xi + d0 * t)
    den = s + (d1 + d0 - 2.0 * s) * t
    # equals d1*xi^2 + 2*s*t + d0*(1-xi)^2, written so equal slopes give exactly s
    slope_num = s + (d1 - s) * xi * xi + (d0 - s) * (1.0 - xi) * (1.0 - xi)
    y = y0 + num / den
    logdet = 2.0 * np.log(s) + np.log(slope_num) - 2.0 * np.log(den)
    return y, logdet


def _bin_forward_grads(x, x0, x1, y0, y1, d0, d1, gy, gl):
    """Reverse sweep of ``_bin_forward``; returns grads for (x, x0, x1, y0, y1, d0, d1)."""
    w = x1 - x0
    h = y1 - y0
    s = h / w
    xi = (x - x0) / w
    t = xi * (1.0 - xi)
    c = d1 + d0 - 2.0 * s
    poly = s * xi * xi + d0 * t
    num = h * poly
    den = s + c * t
    slope_num = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi)

    g_num = gy / den
    g_den = -gy * num / (den * den) - 2.0 * gl / den
    g_a = gl / slope_num
    g_s = 2.0 * gl / s
    # slope numerator
    g_d1 = g_a * xi * xi
    g_s = g_s + g_a * 2.0 * t
    g_t = g_a * 2.0 * s
    g_d0 = g_a * (1.0 - xi) * (1.0 - xi)
    g_xi = g_a * (2.0 * d1 * xi - 2.0 * d0 * (1.0 - xi))
    # denominator
    g_s = g_s + g_den * (1.0 - 2.0 * t)
    g_d1 = g_d1 + g_den * t
    g_d0 = g_d0 + g_den * t
    g_t = g_t + g_den * c
    # numerator
    g_h = g_num * poly
    g_s = g_s + g_num * h * xi * xi
    g_xi = g_xi + g_num * h * 2.0 * s * xi
    g_d0 = g_d0 + g_num * h * t
    g_t = g_t + g_num * h * d0
    # t = xi (1 - xi)
    g_xi = g_xi + g_t * (1.0 - 2.0 * xi)
    # xi = (x - x0) / w, s = h / w
    g_x = g_xi / w
    g_w = -g_xi * xi / w - g_s * s / w
    g_h = g_h + g_s / w
    g_x0 = -g_x - g_w
    g_x1 = g_w
    g_y0 = gy - g_h
    g_y1 = g_h
    return g_x, g_x0, g_x1, g_y0, g_y1, g_d0, g_d1


def _bin_inverse(y, x0, x1, y0, y1, d0, d1):
    w = x1 - x0
    h = y1 - y0
    s = h / w
    dy = y - y0
    c = d1 + d0 - 2.0 * s
    qa = h * (s - d0) + dy * c
    qb = h * d0 - dy * c
    qc = -s * dy
    disc = np.maximum(qb * qb - 4.0 * qa * qc, 0.0)
    xi = 2.0 * qc / (-qb - np.sqrt(disc))
    return x0 + xi * w


_bin_forward_nb = njit(_bin_forward)
_bin_forward_grads_nb = njit(_bin_forward_grads)
_bin_inverse_nb = njit(_bin_inverse)


# -- numba loops ---------------------------------------------------------------
@njit
def _locate(v, knots):
    k = knots.shape[0] - 1
    if v < knots[0] or v > knots[k]:
        return -1
    lo, hi = 0, k - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if knots[mid] <= v:
            lo = mid
        else:
            hi = mid - 1
    return lo


@njit
def forward_nb(x, xk, yk, d):
    n = x.shape[0]
    y = np.empty(n)
    ld = np.zeros(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = _locate(x[i], xk[i])
        idx[i] = k
        if k < 0:
            y[i] = x[i]
        else:
            y[i], ld[i] = _bin_forward_nb(x[i], xk[i, k], xk[i, k + 1], yk[i, k], yk[i, k + 1],
                                          d[i, k], d[i, k + 1])
    return y, ld, idx


@njit
def inverse_nb(y, xk, yk, d):
    n = y.shape[0]
    x = np.empty(n)
    ld = np.zeros(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = _locate(y[i], yk[i])
        idx[i] = k
        if k < 0:
            x[i] = y[i]
        else:
            a = (xk[i, k], xk[i, k + 1], yk[i, k], yk[i, k + 1], d[i, k], d[i, k + 1])
            x[i] = _bin_inverse_nb(y[i], a[0], a[1], a[2], a[3], a[4], a[5])
            ld[i] = -_bin_forward_nb(x[i], a[0], a[1], a[2], a[3], a[4], a[5])[1]
    return x, ld, idx


@njit
def _scatter_bin(i, k, gxk, gyk, gd, g):
    gxk[i, k] += g[1]
    gxk[i, k + 1] += g[2]
    gyk[i, k] += g[3]
    gyk[i, k + 1] += g[4]
    gd[i, k] += g[5]
    gd[i, k + 1] += g[6]


@njit
def forward_backward_nb(x, xk, yk, d, idx, gy, gl):
    n = x.shape[0]
    gx = np.empty(n)
    gxk = np.zeros_like(xk)
    gyk = np.zeros_like(yk)
    gd = np.zeros_like(d)
    for i in range(n):
        k = idx[i]
        if k < 0:
            gx[i] = gy[i]
            continue
        g = _bin_forward_grads_nb(x[i], xk[i, k], xk[i, k + 1], yk[i, k], yk[i, k + 1],
                                  d[i, k], d[i, k + 1], gy[i], gl[i])
        gx[i] = g[0]
        _scatter_bin(i, k, gxk, gyk, gd, g)
    return gx, gxk, gyk, gd


@njit
def inverse_backward_nb(x, xk, yk, d, idx, gx, gl):
    """Gradients of (x(y, knots), logdet_inv) by implicit differentiation."""
    n = x.shape[0]
    gy = np.empty(n)
    gxk = np.zeros_like(xk)
    gyk = np.zeros_like(yk)
    gd = np.zeros_like(d)
    for i in range(n):
        k = idx[i]
        if k < 0:
            gy[i] = gx[i]
            continue
        a = (x[i], xk[i, k], xk[i, k + 1], yk[i, k], yk[i, k + 1], d[i, k], d[i, k + 1])
        _, ld = _bin_forward_nb(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
        dld_dx = _bin_forward_grads_nb(a[0], a[1], a[2], a[3], a[4], a[5], a[6], 0.0, 1.0)[0]
        u = (gx[i] - gl[i] * dld_dx) / np.exp(ld)
        g = _bin_forward_grads_nb(a[0], a[1], a[2], a[3], a[4], a[5], a[6], -u, -gl[i])
        gy[i] = u
        _scatter_bin(i, k, gxk, gyk, gd, g)
    return gy, gxk, gyk, gd


# -- numpy fallback -------------------------------------------------------------
def _locate_np(v, knots):
    k = knots.shape[1] - 1
    idx = (v[:, None] >= knots[:, 1:k]).sum(axis=1)
    outside = (v < knots[:, 0]) | (v > knots[:, k])
    return np.where(outside, -1, idx)


def _gather(idx, xk, yk, d):
    rows = np.arange(idx.shape[0])
    k = np.maximum(idx, 0)
    return xk[rows, k], xk[rows, k + 1], yk[rows, k], yk[rows, k + 1], d[rows, k], d[rows, k + 1]


def _safe_args(idx, args):
    # tail rows get a dummy unit bin so the vectorized arithmetic stays finite
    inside = idx >= 0
    x0, x1, y0, y1, d0, d1 = args
    return inside, (np.where(inside, x0, 0.0), np.where(inside, x1, 1.0), np.where(inside, y0, 0.0),
                    np.where(inside, y1, 1.0), np.where(inside, d0, 1.0), np.where(inside, d1, 1.0))


def _scatter_np(idx, inside, g, shape):
    rows = np.arange(idx.shape[0])[inside]
    k = idx[inside]
    gxk, gyk, gd = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for target, lo, hi in ((gxk, g[1], g[2]), (gyk, g[3], g[4]), (gd, g[5], g[6])):
        target[rows, k] += lo[inside]
        target[rows, k + 1] += hi[inside]
    return gxk, gyk, gd


def forward_np(x, xk, yk, d):
    idx = _locate_np(x, xk)
    inside, args = _safe_args(idx, _gather(idx, xk, yk, d))
    xs = np.where(inside, x, 0.5)
    y, ld = _bin_forward(xs, *args)
    return np.where(inside, y, x), np.where(inside, ld, 0.0), idx


def inverse_np(y, xk, yk, d):
    idx = _locate_np(y, yk)
    inside, args = _safe_args(idx, _gather(idx, xk, yk, d))
    ys = np.where(inside, y, 0.5)
    x = _bin_inverse(ys, *args)
    ld = -_bin_forward(x, *args)[1]
    return np.where(inside, x, y), np.where(inside, ld, 0.0), idx


def forward_backward_np(x, xk, yk, d, idx, gy, gl):
    inside, args = _safe_args(idx, _gather(idx, xk, yk, d))
    xs = np.where(inside, x, 0.5)
    g = _bin_forward_grads(xs, *args, gy, gl)
    gx = np.where(inside, g[0], gy)
    return (gx, *_scatter_np(idx, inside, g, xk.shape))


def inverse_backward_np(x, xk, yk, d, idx, gx, gl):
    inside, args = _safe_args(idx, _gather(idx, xk, yk, d))
    xs = np.where(inside, x, 0.5)
    _, ld = _bin_forward(xs, *args)
    dld_dx = _bin_forward_grads(xs, *args, np.zeros_like(gx), np.ones_like(gl))[0]
    u = (gx - gl * dld_dx) / np.exp(ld)
    g = _bin_forward_grads(xs, *args, -u, -gl)
    gy = np.where(inside, u, gx)
    return (gy, *_scatter_np(idx, inside, g, xk.shape))
