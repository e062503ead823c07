"""Prior sampling, synthetic dataset generation, normalization and FSPN files."""
from __future__ import annotations

import json
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .physics import PARAM_NAMES, EnergyGrid, ResponseModel, forward_model

LN10 = float(np.log(10.0))
COUNT_FLOOR = 0.1


@dataclass(frozen=True)
class PriorBox:
    names: tuple
    lower: tuple
    upper: tuple
    log_scale: tuple

    def __post_init__(self):
        for name, lo, hi, is_log in zip(self.names, self.lower, self.upper, self.log_scale):
            if not lo < hi:
                raise ValueError(f"{name}: min {lo} must be below max {hi}")
            if is_log and lo <= 0:
                raise ValueError(f"{name}: log scale needs a positive lower bound")

    @property
    def dim(self):
        return len(self.names)


DEFAULT_PRIOR = PriorBox(
    names=PARAM_NAMES,
    lower=(0.1, 10.0, 1.3, 1e-3, 0.01),
    upper=(2.5, 1e5, 3.5, 1.0, 10.0),
    log_scale=(False, True, False, True, True),
)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_prior(box, n, seed):
    """Independent uniform draws per parameter, in linear or log space."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    u = rng.random((n, box.dim))
    lo = np.array(box.lower, dtype=float)
    hi = np.array(box.upper, dtype=float)
    is_log = np.array(box.log_scale)
    a = np.where(is_log, np.log(lo), lo)
    b = np.where(is_log, np.log(hi), hi)
    v = a + u * (b - a)
    return np.clip(np.where(is_log, np.exp(v), v), lo, hi)


# -- parameter coordinates ---------------------------------------------------------
class ClampCounter:
    count = 0


def _box_arrays(box):
    lo = np.array(box.lower, dtype=float)
    hi = np.array(box.upper, dtype=float)
    is_log = np.array(box.log_scale)
    return np.where(is_log, np.log(lo), lo), np.where(is_log, np.log(hi), hi), is_log


def params_to_unit(p, box=DEFAULT_PRIOR):
    """Map physical parameters (..., 5) to [-1, 1]; out-of-box values are clamped."""
    p = np.asarray(p, dtype=float)
    a, b, is_log = _box_arrays(box)
    lo, hi = np.array(box.lower), np.array(box.upper)
    outside = (p < lo) | (p > hi)
    if np.any(outside):
        ClampCounter.count += int(outside.sum())
        warnings.warn(f"{int(outside.sum())} parameter values outside the prior box were clamped",
                      stacklevel=2)
        p = np.clip(p, lo, hi)
    v = np.where(is_log, np.log(p), p)
    return 2.0 * (v - a) / (b - a) - 1.0


def unit_to_params(u, box=DEFAULT_PRIOR):
    u = np.asarray(u, dtype=float)
    a, b, is_log = _box_arrays(box)
    v = a + 0.5 * (u + 1.0) * (b - a)
    return np.where(is_log, np.exp(v), v)


# -- spectra normalization ----------------------------------------------------------
@dataclass(frozen=True)
class Normalization:
    mean: float
    std: float

    @classmethod
    def fit(cls, counts):
        logc = np.log10(np.maximum(counts, COUNT_FLOOR))
        return cls(float(logc.mean()), float(logc.std()))


def preprocess(counts, uncertainty, norm):
    """Standardized log-counts and the matching propagated uncertainty."""
    counts = np.asarray(counts, dtype=float)
    floored = np.maximum(counts, COUNT_FLOOR)
    x = (np.log10(floored) - norm.mean) / norm.std
    sigma = np.asarray(uncertainty, dtype=float) / (floored * LN10 * norm.std)
    return x, sigma


def unpreprocess(x, norm):
    return 10.0 ** (np.asarray(x, dtype=float) * norm.std + norm.mean)


# -- datasets -----------------------------------------------------------------------
@dataclass
class Dataset:
    counts: np.ndarray
    uncertainty: np.ndarray
    params: np.ndarray
    noisy: bool
    response: dict
    norm: Normalization
    exposures: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.params)
        if self.counts.shape[0] != n or self.uncertainty.shape != self.counts.shape:
            raise ValueError("dataset members disagree on row count")
        if not (np.isfinite(self.norm.mean) and np.isfinite(self.norm.std)):
            raise ValueError("normalization constants must be finite")

    def __len__(self):
        return len(self.params)

    @property
    def n_bins(self):
        return self.counts.shape[1]

    def exposure(self, i):
        return float(self.exposures[i]) if self.exposures is not None else float(self.response["exposure"])

    def subset(self, idx, norm=None):
        return replace(self, counts=self.counts[idx], uncertainty=self.uncertainty[idx],
                       params=self.params[idx],
                       exposures=None if self.exposures is None else self.exposures[idx],
                       norm=self.norm if norm is None else norm)

    def normalized(self, box=DEFAULT_PRIOR):
        x, sigma = preprocess(self.counts, self.uncertainty, self.norm)
        return NormalizedBatch(x, sigma, params_to_unit(self.params, box))


@dataclass
class NormalizedBatch:
    x: np.ndarray
    sigma: np.ndarray
    theta: np.ndarray


def row_seed(seed, i):
    return np.random.SeedSequence([int(seed), 1, int(i)])


def _generate_rows(args):
    params, start, seed, descriptor, noisy, exposure_range = args
    response = ResponseModel.from_descriptor(descriptor)
    n = len(params)
    counts = np.empty((n, response.grid.n_bins))
    unc = np.empty_like(counts)
    expo = np.empty(n)
    for k in range(n):
        rng = np.random.default_rng(row_seed(seed, start + k))
        exposure = response.exposure
        if exposure_range is not None:
            exposure = float(rng.uniform(*exposure_range))
        try:
            spec = forward_model(params[k], response, noisy=noisy, seed=rng, exposure=exposure)
        except Exception as exc:
            raise RuntimeError(f"forward model failed at row {start + k}: {exc}") from exc
        counts[k], unc[k], expo[k] = spec.counts, spec.uncertainty, exposure
    return counts, unc, expo


def generate_dataset(box, n, grid, response=None, noisy=False, seed=0, workers=1,
                     exposure_range=None):
    """Synthetic spectra for ``n`` prior draws; row i uses seed (seed, i).

    ``exposure_range`` draws a per-spectrum exposure uniformly, as used for
    the noisy stand-in for real observations.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    response = ResponseModel(grid) if response is None else response
    params = sample_prior(box, n, np.random.SeedSequence([int(seed), 0]))
    descriptor = response.descriptor()
    chunk = max(1, -(-n // max(1, workers * 4)))
    jobs = [(params[s:s + chunk], s, seed, descriptor, noisy, exposure_range)
            for s in range(0, n, chunk)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_generate_rows, jobs))
    else:
        parts = [_generate_rows(job) for job in jobs]
    counts = np.concatenate([p[0] for p in parts])
    unc = np.concatenate([p[1] for p in parts])
    expo = np.concatenate([p[2] for p in parts])
    return Dataset(counts, unc, params, noisy, descriptor, Normalization.fit(counts),
                   expo if exposure_range is not None else None)


def split(ds, frac=0.8, seed=0):
    """Seeded permutation split; normalization refit on the training rows."""
    if not 0.0 < frac < 1.0:
        raise ValueError("frac must lie strictly between 0 and 1")
    n = len(ds)
    n_val = int(round(n * (1.0 - frac)))
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 2])).permutation(n)
    train_idx, val_idx = np.sort(perm[n_val:]), np.sort(perm[:n_val])
    norm = Normalization.fit(ds.counts[train_idx])
    return ds.subset(train_idx, norm), ds.subset(val_idx, norm)


def export_params_csv(path, params):
    np.savetxt(path, np.asarray(params), delimiter=",", header=",".join(PARAM_NAMES),
               comments="", fmt="%.17g")


# -- FSPN format ---------------------------------------------------------------------
MAGIC = b"FSPN"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


def _header(ds):
    meta = {"response": ds.response}
    if ds.exposures is not None:
        meta["exposures"] = [float(e) for e in ds.exposures]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<IQIB", VERSION, len(ds), ds.n_bins, int(ds.noisy)),
        struct.pack("<I", len(blob)), blob,
        struct.pack("<dd", ds.norm.mean, ds.norm.std),
    ])


def dumps(ds):
    return b"".join([
        _header(ds),
        np.ascontiguousarray(ds.counts, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.uncertainty, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.params, dtype="<f8").tobytes(),
    ])


def header_size(ds):
    return len(_header(ds))


def loads(blob):
    if blob[:4] != MAGIC:
        raise BadMagicError("bad magic")
    pos = 4

    def take(k):
        nonlocal pos
        if pos + k > len(blob):
            raise TruncatedError(f"file truncated at byte {len(blob)}, needed {pos + k}")
        out = blob[pos:pos + k]
        pos += k
        return out

    version, n, n_bins, noisy = struct.unpack("<IQIB", take(17))
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    mean, std = struct.unpack("<dd", take(16))
    counts = np.frombuffer(take(4 * n * n_bins), dtype="<f4").reshape(n, n_bins)
    unc = np.frombuffer(take(4 * n * n_bins), dtype="<f4").reshape(n, n_bins)
    params = np.frombuffer(take(8 * n * 5), dtype="<f8").reshape(n, 5)
    if pos != len(blob):
        raise DatasetFormatError("trailing bytes after parameter block")
    expo = meta.get("exposures")
    return Dataset(counts.astype(np.float64), unc.astype(np.float64), params.astype(np.float64),
                   bool(noisy), meta["response"], Normalization(mean, std),
                   None if expo is None else np.array(expo, dtype=float))


def save_dataset(path, ds):
    with open(path, "wb") as fh:
        fh.write(dumps(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def response_of(ds):
    return ResponseModel.from_descriptor(ds.response)


def grid_of(ds):
    return EnergyGrid(int(ds.response["n_bins"]))
