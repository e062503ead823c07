"""Rational-quadratic spline transforms: scalar API and differentiable op."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .. import _accel
from ..autodiff import tensor as T
from . import _spline_kernels as K

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(0 + offset) + MIN_DERIVATIVE == 1, so zero raw outputs give unit slopes
DERIVATIVE_OFFSET = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


def _kernels(use_numba=None):
    use = _accel.USE_NUMBA if use_numba is None else use_numba
    if use:
        return K.forward_nb, K.inverse_nb, K.forward_backward_nb, K.inverse_backward_nb
    return K.forward_np, K.inverse_np, K.forward_backward_np, K.inverse_backward_np


@dataclass(frozen=True)
class SplineParams:
    """One-dimensional spline: K bin widths/heights, K-1 interior knot slopes.

    Widths and heights are rescaled to sum to ``2 * tail_bound``; the two
    boundary slopes are fixed to 1 so the identity tails join smoothly.
    """

    widths: np.ndarray
    heights: np.ndarray
    derivatives: np.ndarray
    tail_bound: float = 4.0

    def __post_init__(self):
        w = np.asarray(self.widths, dtype=float)
        h = np.asarray(self.heights, dtype=float)
        d = np.asarray(self.derivatives, dtype=float)
        if w.ndim != 1 or w.size < 2 or h.shape != w.shape or d.shape != (w.size - 1,):
            raise ValueError("SplineParams needs K>=2 widths, K heights and K-1 derivatives")
        if np.any(w <= 0) or np.any(h <= 0) or np.any(d <= 0):
            raise ValueError("spline widths, heights and derivatives must be positive")
        if self.tail_bound <= 0:
            raise ValueError("tail_bound must be positive")
        span = 2.0 * self.tail_bound
        object.__setattr__(self, "widths", w * span / w.sum())
        object.__setattr__(self, "heights", h * span / h.sum())
        object.__setattr__(self, "derivatives", d)

    @property
    def n_bins(self):
        return self.widths.size

    def knots(self):
        B = self.tail_bound
        xk = np.concatenate([[-B], -B + np.cumsum(self.widths)])
        yk = np.concatenate([[-B], -B + np.cumsum(self.heights)])
        xk[-1] = yk[-1] = B
        d = np.concatenate([[1.0], self.derivatives, [1.0]])
        return xk, yk, d

    @classmethod
    def identity(cls, n_bins=8, tail_bound=4.0):
        return cls(np.ones(n_bins), np.ones(n_bins), np.ones(n_bins - 1), tail_bound)


def rq_spline_forward(x, p, use_numba=None):
    """Scalar forward map; returns (y, log|dy/dx|)."""
    xk, yk, d = p.knots()
    fwd = _kernels(use_numba)[0]
    y, ld, _ = fwd(np.array([float(x)]), xk[None], yk[None], d[None])
    return float(y[0]), float(ld[0])


def rq_spline_inverse(y, p, use_numba=None):
    """Scalar inverse map; returns (x, log|dx/dy|)."""
    xk, yk, d = p.knots()
    inv = _kernels(use_numba)[1]
    x, ld, _ = inv(np.array([float(y)]), xk[None], yk[None], d[None])
    return float(x[0]), float(ld[0])


def spline_batch(x, xk, yk, d, inverse=False, use_numba=None):
    """Plain-array batched transform: x (n,), knots (n, K+1)."""
    fwd, inv, _, _ = _kernels(use_numba)
    out, ld, _ = (inv if inverse else fwd)(np.ascontiguousarray(x, dtype=float),
                                           np.ascontiguousarray(xk), np.ascontiguousarray(yk),
                                           np.ascontiguousarray(d))
    return out, ld


def knots_from_raw(raw_w, raw_h, raw_d, tail_bound):
    """Differentiable map from unconstrained outputs to knot arrays.

    ``raw_w``/``raw_h`` are (n, K), ``raw_d`` is (n, K-1); returns DiffArrays
    ``xk``, ``yk`` and ``d`` of shape (n, K+1). The softmax, cumulative sum
    and softplus are fused into one graph node with a hand-written backward.
    """
    raw_w, raw_h, raw_d = (T.as_diff(a) for a in (raw_w, raw_h, raw_d))
    n_bins = raw_w.shape[-1]
    span = 2.0 * tail_bound
    pw = special.softmax(raw_w.values, axis=-1)
    ph = special.softmax(raw_h.values, axis=-1)
    xk = _cumulative_knots(pw, MIN_BIN_WIDTH, n_bins, span, tail_bound)
    yk = _cumulative_knots(ph, MIN_BIN_HEIGHT, n_bins, span, tail_bound)
    shifted = raw_d.values + DERIVATIVE_OFFSET
    d = np.ones(raw_d.shape[:-1] + (n_bins + 1,))
    d[..., 1:-1] = np.logaddexp(0.0, shifted) + MIN_DERIVATIVE

    def backward(g):
        gx, gy, gd = g[0], g[1], g[2]
        return (_knot_grad(gx, pw, MIN_BIN_WIDTH, n_bins, span),
                _knot_grad(gy, ph, MIN_BIN_HEIGHT, n_bins, span),
                gd[..., 1:-1] * special.expit(shifted))

    node = T._node(np.stack([xk, yk, d]), (raw_w, raw_h, raw_d), backward, "spline_knots")
    return node[0], node[1], node[2]


def _cumulative_knots(probs, minimum, n_bins, span, bound):
    widths = (probs * (1.0 - minimum * n_bins) + minimum) * span
    out = np.empty(probs.shape[:-1] + (n_bins + 1,))
    out[..., 0] = -bound
    out[..., 1:-1] = np.cumsum(widths[..., :-1], axis=-1) - bound
    out[..., -1] = bound
    return out


def _knot_grad(g, probs, minimum, n_bins, span):
    # knot k (1 <= k <= K-1) is the sum of widths 0..k-1, so width j collects
    # the gradient of every interior knot above it
    gw = np.zeros_like(probs)
    gw[..., :-1] = np.cumsum(g[..., 1:-1][..., ::-1], axis=-1)[..., ::-1]
    gp = gw * (1.0 - minimum * n_bins) * span
    return probs * (gp - np.sum(gp * probs, axis=-1, keepdims=True))


def rq_spline(x, xk, yk, d, inverse=False, use_numba=None):
    """Differentiable batched spline; returns DiffArrays (output, log|det|).

    ``x`` is (n,), knot arrays are (n, K+1). In the inverse direction the
    gradient is obtained by implicit differentiation of the forward map.
    """
    x, xk, yk, d = (T.as_diff(a) for a in (x, xk, yk, d))
    fwd, inv, fwd_b, inv_b = _kernels(use_numba)
    xv = np.ascontiguousarray(x.values)
    kx, ky, kd = (np.ascontiguousarray(a.values) for a in (xk, yk, d))
    if inverse:
        out, ld, idx = inv(xv, kx, ky, kd)
    else:
        out, ld, idx = fwd(xv, kx, ky, kd)
    both = np.stack([out, ld])

    def backward(g):
        g_out = np.ascontiguousarray(g[0])
        g_ld = np.ascontiguousarray(g[1])
        if inverse:
            return inv_b(out, kx, ky, kd, idx, g_out, g_ld)
        return fwd_b(xv, kx, ky, kd, idx, g_out, g_ld)

    node = T._node(both, (x, xk, yk, d), backward, "rq_spline")
    return node[0], node[1]
