"""Conditional autoregressive spline flow over the normalized parameters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import tensor as T
from .made import MadeConditioner
from .spline import rq_spline

LOG_2PI = float(np.log(2.0 * np.pi))


class FlowError(FloatingPointError):
    def __init__(self, transform, message="non-finite value"):
        super().__init__(f"transform {transform}: {message}")
        self.transform = transform


@dataclass(frozen=True)
class FlowConfig:
    dim: int = 5
    context_dim: int = 64
    n_transforms: int = 10
    hidden: int = 128
    n_hidden_layers: int = 2
    n_bins: int = 8
    tail_bound: float = 4.0


@dataclass
class PosteriorDraws:
    samples: np.ndarray  # (n_draws, dim), normalized coordinates
    log_prob: np.ndarray  # (n_draws,)
    context: np.ndarray

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("PosteriorDraws needs at least one draw")


def standard_normal_logpdf(z):
    z = T.as_diff(z)
    return -0.5 * T.sum_(T.square(z), axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


class FlowModel:
    """Ten (reversal permutation, autoregressive spline) layers.

    Sampling direction maps base noise to parameters: each layer reverses the
    coordinate order and then applies a spline whose knots for coordinate i
    depend on already-produced coordinates < i and on the context.
    """

    def __init__(self, store, config=FlowConfig(), rng=None, prefix="flow"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        self.store = store
        self.layers = [
            MadeConditioner(store, f"{prefix}.t{i}", config.dim, config.context_dim, config.hidden,
                            config.n_hidden_layers, config.n_bins, config.tail_bound, rng)
            for i in range(config.n_transforms)
        ]
        self.permutations = [np.arange(config.dim)[::-1].copy() for _ in range(config.n_transforms)]

    @property
    def dim(self):
        return self.config.dim

    # -- density ----------------------------------------------------------------
    def log_prob(self, theta, context):
        """log q(theta | context), theta (batch, dim) and context (batch, C)."""
        y = T.as_diff(theta)
        context = T.as_diff(context)
        batch, dim = y.shape
        total = None
        for t in range(len(self.layers) - 1, -1, -1):
            made = self.layers[t]
            raw = made.raw(y, made.context_term(context))
            xk, yk, d = made.knots(raw)
            w, ld = rq_spline(T.reshape(y, (-1,)), xk, yk, d, inverse=True)
            if not (np.all(np.isfinite(w.values)) and np.all(np.isfinite(ld.values))):
                raise FlowError(t)
            ld = T.sum_(T.reshape(ld, (batch, dim)), axis=1)
            total = ld if total is None else total + ld
            inv_perm = np.argsort(self.permutations[t])
            y = T.reshape(w, (batch, dim))[:, inv_perm]
        return standard_normal_logpdf(y) + total

    # -- sampling ----------------------------------------------------------------
    def transform_noise(self, noise, context):
        """Push base noise (batch, dim) through all layers.

        Returns (samples, log q) as DiffArrays; the path is differentiable in
        the flow weights and the context.
        """
        z = T.as_diff(noise)
        context = T.as_diff(context)
        batch, dim = z.shape
        logq = standard_normal_logpdf(z)
        v = z
        for t, made in enumerate(self.layers):
            v = v[:, self.permutations[t]]
            # first-layer pre-activation grows one input column at a time
            pre = made.context_term(context)
            w_in = made.input_columns()
            cols = []
            for i in range(dim):
                raw = made.head(pre, only_dim=i)
                xk, yk, d = made.knots(raw)
                yi, ld = rq_spline(v[:, i], xk, yk, d)
                if not (np.all(np.isfinite(yi.values)) and np.all(np.isfinite(ld.values))):
                    raise FlowError(t)
                cols.append(yi)
                logq = logq - ld
                if i + 1 < dim:
                    pre = pre + T.reshape(yi, (batch, 1)) * w_in[:, i]
            v = T.stack(cols, axis=1)
        return v, logq

    def sample(self, context, n, rng):
        """Draws for one context vector; the context is broadcast, not re-encoded."""
        if n < 1:
            raise ValueError("need n >= 1 draws")
        context = np.asarray(context, dtype=float).reshape(1, -1)
        noise = rng.standard_normal((n, self.dim))
        tiled = np.broadcast_to(context, (n, context.shape[1]))
        samples, logq = self.transform_noise(noise, tiled)
        return PosteriorDraws(samples.values, logq.values, context[0].copy())


def flow_log_prob(theta, context, flow):
    """Scalar log-density of one parameter vector given one context."""
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    context = np.asarray(context, dtype=float).reshape(1, -1)
    return float(flow.log_prob(theta, context).values[0])


def flow_sample(context, n, flow, seed):
    return flow.sample(context, n, np.random.default_rng(seed))
