"""Encoder, decoder and the assembled autoencoder-with-flow."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..autodiff import ParamStore, checkpoint, no_grad
from ..autodiff import tensor as T
from ..autodiff.layers import bigru, conv1d, dense, gelu, init_conv, init_dense, init_gru
from ..dataset import Normalization
from ..flow import FlowConfig, FlowModel


@dataclass(frozen=True)
class NetConfig:
    n_bins: int = 240
    context_dim: int = 64
    conv_channels: tuple = (32, 64, 64)
    conv_kernel: int = 5
    conv_stride: int = 2
    encoder_hidden: int = 256
    flow_transforms: int = 10
    flow_hidden: int = 128
    flow_layers: int = 2
    spline_bins: int = 8
    tail_bound: float = 4.0
    decoder_hidden: int = 128
    decoder_steps: int = 30
    decoder_features: int = 16
    gru_hidden: int = 32
    n_params: int = 5
    decoder: bool = True

    def flow_config(self):
        return FlowConfig(self.n_params, self.context_dim, self.flow_transforms, self.flow_hidden,
                          self.flow_layers, self.spline_bins, self.tail_bound)

    def encoded_length(self):
        length = self.n_bins
        for _ in self.conv_channels:
            length = -(-length // self.conv_stride)
        return length

    def to_meta(self):
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                for i, v in enumerate(value):
                    out[f"meta.net.{key}.{i}"] = np.array(float(v))
                out[f"meta.net.{key}.len"] = np.array(float(len(value)))
            else:
                out[f"meta.net.{key}"] = np.array(float(value))
        return out

    @classmethod
    def from_meta(cls, arrays):
        kwargs = {}
        for f in fields(cls):
            if f"meta.net.{f.name}.len" in arrays:
                n = int(arrays[f"meta.net.{f.name}.len"])
                kwargs[f.name] = tuple(int(arrays[f"meta.net.{f.name}.{i}"]) for i in range(n))
            elif f"meta.net.{f.name}" in arrays:
                v = float(arrays[f"meta.net.{f.name}"])
                kwargs[f.name] = v if isinstance(f.default, float) else (
                    bool(v) if isinstance(f.default, bool) else int(v))
        return cls(**kwargs)


def upsample_matrix(n_in, n_out):
    """Linear interpolation from ``n_in`` evenly spaced points onto ``n_out``."""
    src = np.linspace(0.0, 1.0, n_in)
    dst = np.linspace(0.0, 1.0, n_out)
    M = np.zeros((n_out, n_in))
    for j, pos in enumerate(dst):
        k = min(int(np.searchsorted(src, pos, side="right")) - 1, n_in - 2)
        t = (pos - src[k]) / (src[k + 1] - src[k])
        M[j, k], M[j, k + 1] = 1.0 - t, t
    return M


class Encoder:
    """Strided convolutions then dense layers: spectrum -> context."""

    def __init__(self, store, cfg, rng, prefix="encoder"):
        self.store, self.cfg, self.prefix = store, cfg, prefix
        ch_in = 1
        for i, ch in enumerate(cfg.conv_channels):
            W, b = init_conv(rng, ch, ch_in, cfg.conv_kernel)
            store.add(f"{prefix}.conv{i}.weight", W)
            store.add(f"{prefix}.conv{i}.bias", b)
            ch_in = ch
        flat = ch_in * cfg.encoded_length()
        for name, n_out, n_in in (("fc0", cfg.encoder_hidden, flat),
                                  ("fc1", cfg.context_dim, cfg.encoder_hidden)):
            W, b = init_dense(rng, n_out, n_in)
            store.add(f"{prefix}.{name}.weight", W)
            store.add(f"{prefix}.{name}.bias", b)
        self.calls = 0
        self.rows = 0

    def __call__(self, x):
        s, p, cfg = self.store, self.prefix, self.cfg
        x = T.as_diff(x)
        self.calls += 1
        self.rows += x.shape[0]
        h = T.reshape(x, (x.shape[0], 1, x.shape[1]))
        for i in range(len(cfg.conv_channels)):
            h = gelu(conv1d(h, s[f"{p}.conv{i}.weight"], s[f"{p}.conv{i}.bias"], cfg.conv_stride))
        h = T.reshape(h, (h.shape[0], -1))
        h = gelu(dense(h, s[f"{p}.fc0.weight"], s[f"{p}.fc0.bias"]))
        return dense(h, s[f"{p}.fc1.weight"], s[f"{p}.fc1.bias"])


class Decoder:
    """Parameters -> dense expansion -> bidirectional GRU -> per-step head -> spectrum."""

    def __init__(self, store, cfg, rng, prefix="decoder"):
        self.store, self.cfg, self.prefix = store, cfg, prefix
        seq = cfg.decoder_steps * cfg.decoder_features
        for name, n_out, n_in in (("fc0", cfg.decoder_hidden, cfg.n_params),
                                  ("fc1", seq, cfg.decoder_hidden),
                                  ("head", 1, 2 * cfg.gru_hidden)):
            W, b = init_dense(rng, n_out, n_in)
            store.add(f"{prefix}.{name}.weight", W)
            store.add(f"{prefix}.{name}.bias", b)
        for direction in ("fwd", "bwd"):
            for key, arr in zip(("w_ih", "w_hh", "b_ih", "b_hh"),
                                init_gru(rng, cfg.decoder_features, cfg.gru_hidden)):
                store.add(f"{prefix}.gru.{direction}.{key}", arr)
        self.upsample = upsample_matrix(cfg.decoder_steps, cfg.n_bins)

    def _gru(self, direction):
        s, p = self.store, self.prefix
        return tuple(s[f"{p}.gru.{direction}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh"))

    def __call__(self, theta):
        s, p, cfg = self.store, self.prefix, self.cfg
        theta = T.as_diff(theta)
        batch = theta.shape[0]
        h = gelu(dense(theta, s[f"{p}.fc0.weight"], s[f"{p}.fc0.bias"]))
        h = gelu(dense(h, s[f"{p}.fc1.weight"], s[f"{p}.fc1.bias"]))
        h = T.reshape(h, (batch, cfg.decoder_steps, cfg.decoder_features))
        h = bigru(h, self._gru("fwd"), self._gru("bwd"))
        steps = T.reshape(dense(h, s[f"{p}.head.weight"], s[f"{p}.head.bias"]),
                          (batch, cfg.decoder_steps))
        return dense(steps, self.upsample)


class NetworkAssembly:
    """Encoder + conditional flow + (optional) decoder sharing one ParamStore."""

    def __init__(self, cfg=NetConfig(), seed=0):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
        self.encoder = Encoder(self.store, cfg, rng)
        self.flow = FlowModel(self.store, cfg.flow_config(), rng)
        self.decoder = Decoder(self.store, cfg, rng) if cfg.decoder else None
        self.stages_done = []
        self.norm = None  # spectrum normalization fixed by the first training stage

    # -- inference ---------------------------------------------------------------
    def context(self, x):
        with no_grad():
            return self.encoder(x).values

    def posterior(self, x, n_draws, seed, offset=0):
        """``n_draws`` samples per spectrum, encoding each spectrum exactly once.

        Spectrum ``i`` draws its noise from seed (seed, 3, offset + i), so any
        chunking of the rows gives identical samples. Returns
        (n_spec, n_draws, dim) samples in unit coordinates.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ctx = self.context(x)
        dim = self.cfg.n_params
        noise = np.stack([
            np.random.default_rng(np.random.SeedSequence([int(seed), 3, offset + i]))
            .standard_normal((n_draws, dim)) for i in range(x.shape[0])])
        tiled = np.repeat(ctx, n_draws, axis=0)
        with no_grad():
            samples, _ = self.flow.transform_noise(noise.reshape(-1, dim), tiled)
        return samples.values.reshape(x.shape[0], n_draws, dim)

    # -- persistence ---------------------------------------------------------------
    def state_arrays(self):
        arrays = self.store.as_arrays()
        arrays.update(self.cfg.to_meta())
        for stage in ("decoder", "synthetic", "real"):
            arrays[f"meta.stage.{stage}"] = np.array(float(stage in self.stages_done))
        if self.norm is not None:
            arrays["meta.norm.mean"] = np.array(self.norm.mean)
            arrays["meta.norm.std"] = np.array(self.norm.std)
        return arrays

    def save(self, path):
        checkpoint.save(path, self.state_arrays())

    @classmethod
    def from_arrays(cls, arrays):
        net = cls(NetConfig.from_meta(arrays))
        net.store.load_arrays({k: v for k, v in arrays.items() if not k.startswith("meta.")})
        net.stages_done = [s for s in ("decoder", "synthetic", "real")
                           if float(arrays.get(f"meta.stage.{s}", 0.0)) == 1.0]
        if "meta.norm.mean" in arrays:
            net.norm = Normalization(float(arrays["meta.norm.mean"]), float(arrays["meta.norm.std"]))
        return net

    @classmethod
    def load(cls, path):
        return cls.from_arrays(checkpoint.load(path))
