"""Masked autoregressive conditioner producing spline parameters."""
import numpy as np

from ..autodiff import tensor as T
from ..autodiff.layers import dense, gelu, init_dense, masked_dense
from .spline import SplineParams, knots_from_raw


def hidden_degrees(dim, hidden):
    if dim == 1:
        return np.zeros(hidden, dtype=int)
    return np.arange(hidden) % (dim - 1) + 1


def build_masks(dim, hidden, n_hidden_layers, n_out_per_dim):
    """0/1 masks for input->hidden, hidden->hidden (repeated) and hidden->output.

    Output block ``i`` (degree i+1) sees only inputs of degree <= i.
    """
    d_in = np.arange(1, dim + 1)
    d_h = hidden_degrees(dim, hidden)
    d_out = np.repeat(d_in, n_out_per_dim)
    first = (d_h[:, None] >= d_in[None, :]).astype(float)
    middle = [(d_h[:, None] >= d_h[None, :]).astype(float) for _ in range(n_hidden_layers - 1)]
    last = (d_out[:, None] > d_h[None, :]).astype(float)
    return first, middle, last


class MadeConditioner:
    """Autoregressive network: (y, context) -> raw spline outputs per dimension.

    Weights live in ``store`` under ``prefix``. The output layer starts at
    zero so a fresh conditioner yields the identity spline.
    """

    def __init__(self, store, prefix, dim, context_dim, hidden=128, n_hidden_layers=2,
                 n_bins=8, tail_bound=4.0, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim, self.context_dim, self.hidden = dim, context_dim, hidden
        self.n_bins, self.tail_bound = n_bins, tail_bound
        self.n_raw = 3 * n_bins - 1
        self.prefix = prefix
        self.store = store
        self.mask_in, self.mask_hidden, self.mask_out = build_masks(dim, hidden, n_hidden_layers, self.n_raw)

        W, b = init_dense(rng, hidden, dim)
        store.add(f"{prefix}.in.weight", W)
        store.add(f"{prefix}.in.bias", b)
        Wc, _ = init_dense(rng, hidden, context_dim)
        store.add(f"{prefix}.ctx.weight", Wc)
        for layer in range(n_hidden_layers - 1):
            W, b = init_dense(rng, hidden, hidden)
            store.add(f"{prefix}.h{layer}.weight", W)
            store.add(f"{prefix}.h{layer}.bias", b)
        store.add(f"{prefix}.out.weight", np.zeros((dim * self.n_raw, hidden)))
        store.add(f"{prefix}.out.bias", np.zeros(dim * self.n_raw))

    def _p(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def context_term(self, context):
        """Unmasked context projection plus first-layer bias, shape (batch, hidden)."""
        return dense(context, self._p("ctx.weight"), self._p("in.bias"))

    def raw(self, y, context_term, only_dim=None):
        """Raw outputs (batch, dim, 3K-1), or (batch, 3K-1) for ``only_dim``."""
        pre = masked_dense(y, self._p("in.weight"), self.mask_in) + context_term
        return self.head(pre, only_dim)

    def input_columns(self):
        """Masked first-layer weight; column j is the contribution of input j."""
        return self._p("in.weight") * self.mask_in

    def head(self, pre, only_dim=None):
        """Everything after the first-layer pre-activation ``pre`` (batch, hidden)."""
        W, b = self._p("out.weight"), self._p("out.bias")
        if only_dim is not None:
            rows = slice(only_dim * self.n_raw, (only_dim + 1) * self.n_raw)
            if not self.mask_out[rows].any():
                # the first dimension sees no hidden unit: its outputs are the bias
                return T.add(np.zeros((pre.shape[0], self.n_raw)), b[rows])
        h = gelu(pre)
        for layer, mask in enumerate(self.mask_hidden):
            h = gelu(masked_dense(h, self._p(f"h{layer}.weight"), mask, self._p(f"h{layer}.bias")))
        if only_dim is None:
            out = masked_dense(h, W, self.mask_out, b)
            return T.reshape(out, (pre.shape[0], self.dim, self.n_raw))
        return masked_dense(h, W[rows], self.mask_out[rows], b[rows])

    def knots(self, raw):
        """Knot arrays for raw outputs of shape (..., 3K-1), flattened to (n, K+1)."""
        flat = T.reshape(raw, (-1, self.n_raw))
        K = self.n_bins
        return knots_from_raw(flat[:, :K], flat[:, K:2 * K], flat[:, 2 * K:], self.tail_bound)

    def spline_params(self, y, context):
        """Per-dimension :class:`SplineParams` for a single (y, context) pair."""
        y = np.asarray(y, dtype=float).reshape(1, self.dim)
        context = np.asarray(context, dtype=float).reshape(1, self.context_dim)
        raw = self.raw(T.DiffArray(y), self.context_term(T.DiffArray(context))).values[0]
        out = []
        K = self.n_bins
        for row in raw:
            xk, yk, d = (a.values[0] for a in knots_from_raw(
                T.DiffArray(row[None, :K]), T.DiffArray(row[None, K:2 * K]),
                T.DiffArray(row[None, 2 * K:]), self.tail_bound))
            out.append(SplineParams(np.diff(xk), np.diff(yk), d[1:-1], self.tail_bound))
        return out
