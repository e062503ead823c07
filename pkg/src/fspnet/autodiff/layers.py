"""Fused layer operations with hand-written backward passes."""
import numpy as np
from scipy import special

from .tensor import _node, as_diff, concat, flip, gelu  # noqa: F401  (gelu re-exported)


def dense(x, W, b=None):
    """``x @ W.T + b`` for ``x`` of shape (..., in) and ``W`` of shape (out, in)."""
    x, W = as_diff(x), as_diff(W)
    xv, Wv = x.values, W.values
    if xv.shape[-1] != Wv.shape[1]:
        raise ValueError(f"dense: input width {xv.shape[-1]} does not match weight {Wv.shape}")
    out = xv @ Wv.T
    parents = [x, W]
    if b is not None:
        b = as_diff(b)
        if b.shape != (Wv.shape[0],):
            raise ValueError(f"dense: bias shape {b.shape} does not match {Wv.shape[0]} outputs")
        out = out + b.values
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wv
        gW = g2.T @ xv.reshape(-1, xv.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _node(out, parents, backward, "dense")


def masked_dense(x, W, mask, b=None):
    """Dense layer whose weight is multiplied elementwise by a fixed 0/1 mask."""
    W = as_diff(W)
    Wm = _node(W.values * mask, (W,), lambda g: (g * mask,), "mask")
    return dense(x, Wm, b)


def _conv_padding(kernel):
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def conv1d(x, W, b=None, stride=1):
    """Cross-correlation over the last axis with zero padding.

    ``x`` is (batch, ch_in, length), ``W`` is (ch_out, ch_in, kernel). Output
    length is ``ceil(length / stride)``.
    """
    if int(stride) != stride or stride < 1:
        raise ValueError(f"conv1d: stride must be a positive integer, got {stride}")
    stride = int(stride)
    x, W = as_diff(x), as_diff(W)
    xv, Wv = x.values, W.values
    batch, ch_in, length = xv.shape
    ch_out, w_in, kernel = Wv.shape
    if w_in != ch_in:
        raise ValueError(f"conv1d: kernel expects {w_in} channels, input has {ch_in}")
    if length < kernel:
        raise ValueError(f"conv1d: length {length} shorter than kernel {kernel}")
    left, right = _conv_padding(kernel)
    n_out = -(-length // stride)
    xp = np.pad(xv, ((0, 0), (0, 0), (left, right)))
    span = stride * (n_out - 1) + 1
    cols = np.stack([xp[:, :, k:k + span:stride] for k in range(kernel)], axis=2)
    out = np.einsum("ock,bckj->boj", Wv, cols, optimize=True)
    parents = [x, W]
    if b is not None:
        b = as_diff(b)
        out = out + b.values[None, :, None]
        parents.append(b)

    def backward(g):
        gW = np.einsum("boj,bckj->ock", g, cols, optimize=True)
        gcols = np.einsum("ock,boj->bckj", Wv, g, optimize=True)
        gxp = np.zeros_like(xp)
        for k in range(kernel):
            gxp[:, :, k:k + span:stride] += gcols[:, :, k, :]
        gx = gxp[:, :, left:left + length]
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=(0, 2))

    return _node(out, parents, backward, "conv1d")


def gru(seq, W_ih, W_hh, b_ih, b_hh):
    """Single-direction GRU over (batch, length, feat); returns all hidden states.

    Gate rows of ``W_ih``/``W_hh`` are ordered (reset, update, candidate);
    the initial hidden state is zero.
    """
    seq, W_ih, W_hh, b_ih, b_hh = (as_diff(a) for a in (seq, W_ih, W_hh, b_ih, b_hh))
    x = seq.values
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"gru: expected non-empty (batch, length, feat) sequence, got {x.shape}")
    Wi, Wh, bi, bh = W_ih.values, W_hh.values, b_ih.values, b_hh.values
    batch, length, _ = x.shape
    hidden = Wh.shape[1]
    H = hidden

    gi = x @ Wi.T + bi
    hs = np.zeros((batch, length, hidden))
    r_all = np.empty_like(hs)
    z_all = np.empty_like(hs)
    n_all = np.empty_like(hs)
    ghn_all = np.empty_like(hs)
    h = np.zeros((batch, hidden))
    for t in range(length):
        gh = h @ Wh.T + bh
        r = special.expit(gi[:, t, :H] + gh[:, :H])
        z = special.expit(gi[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, t, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        r_all[:, t], z_all[:, t], n_all[:, t], ghn_all[:, t] = r, z, n, gh[:, 2 * H:]
        hs[:, t] = h

    def backward(G):
        dgi = np.empty_like(gi)
        dWh = np.zeros_like(Wh)
        dbh = np.zeros_like(bh)
        dh_next = np.zeros((batch, hidden))
        for t in range(length - 1, -1, -1):
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((batch, hidden))
            r, z, n, ghn = r_all[:, t], z_all[:, t], n_all[:, t], ghn_all[:, t]
            dh = G[:, t] + dh_next
            dan = dh * (1.0 - z) * (1.0 - n * n)
            daz = dh * (h_prev - n) * z * (1.0 - z)
            dar = dan * ghn * r * (1.0 - r)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dgi[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dWh += dgh.T @ h_prev
            dbh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ Wh
        flat = dgi.reshape(-1, 3 * hidden)
        dx = dgi @ Wi
        dWi = flat.T @ x.reshape(-1, x.shape[-1])
        return dx, dWi, dWh, flat.sum(axis=0), dbh

    return _node(hs, (seq, W_ih, W_hh, b_ih, b_hh), backward, "gru")


def bigru(seq, fwd, bwd):
    """Bidirectional GRU; ``fwd``/``bwd`` are (W_ih, W_hh, b_ih, b_hh) tuples.

    Returns (batch, length, 2 * hidden) with the forward-time states first.
    """
    seq = as_diff(seq)
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ValueError(f"bigru: expected non-empty (batch, length, feat) sequence, got {seq.shape}")
    ahead = gru(seq, *fwd)
    behind = flip(gru(flip(seq, 1), *bwd), 1)
    return concat([ahead, behind], axis=-1)


def init_dense(rng, n_out, n_in, scale=None):
    bound = (1.0 / n_in) ** 0.5 if scale is None else scale
    return rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)


def init_conv(rng, ch_out, ch_in, kernel):
    bound = (1.0 / (ch_in * kernel)) ** 0.5
    return rng.uniform(-bound, bound, size=(ch_out, ch_in, kernel)), np.zeros(ch_out)


def init_gru(rng, feat, hidden):
    bound = (1.0 / hidden) ** 0.5
    return (rng.uniform(-bound, bound, size=(3 * hidden, feat)),
            rng.uniform(-bound, bound, size=(3 * hidden, hidden)),
            np.zeros(3 * hidden), np.zeros(3 * hidden))
