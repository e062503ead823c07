"""Classical comparison path: PGStat, Metropolis-Hastings, autocorrelation time."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit
from .dataset import DEFAULT_PRIOR, unit_to_params
from .physics import PARAM_NAMES, expected_counts

TARGET_ACCEPTANCE = 0.234
FIT_ITERATIONS = 130


# -- PGStat -----------------------------------------------------------------------------
def _profiled_background(S, m, B, var):
    """Non-negative root of f^2 + f (m - B + var) + (var m - var S - B m) = 0."""
    b = m - B + var
    c = var * (m - S) - B * m
    root = np.sqrt(np.maximum(b * b - 4.0 * c, 0.0))
    # for b > 0 the conjugate form avoids cancellation
    denom = np.where(b > 0.0, b + root, 1.0)
    f = np.where(b > 0.0, -2.0 * c / denom, 0.5 * (root - b))
    return np.maximum(f, 0.0)


@njit
def _profiled_background_nb(S, m, B, var):
    b = m - B + var
    c = var * (m - S) - B * m
    root = math.sqrt(max(b * b - 4.0 * c, 0.0))
    f = -2.0 * c / (b + root) if b > 0.0 else 0.5 * (root - b)
    return max(f, 0.0)


def _pgstat_terms(S, m, B, sigma):
    var = sigma * sigma
    f = np.where(sigma > 0.0, _profiled_background(S, m, B, var), B)
    mf = m + f
    safe_S = np.where(S > 0.0, S, 1.0)
    safe_mf = np.where(mf > 0.0, mf, 1.0)
    log_term = np.where(S > 0.0, S * np.log(safe_S / safe_mf), 0.0)
    poisson = 2.0 * (mf - S + log_term)
    poisson = np.where((mf <= 0.0) & (S > 0.0), np.inf, poisson)
    gauss = np.where(sigma > 0.0, (f - B) ** 2 / np.where(sigma > 0.0, var, 1.0), 0.0)
    return poisson + gauss, f


@njit
def _pgstat_nb(S, m, B, sigma):
    total = 0.0
    for i in range(S.shape[0]):
        var = sigma[i] * sigma[i]
        if sigma[i] > 0.0:
            f = _profiled_background_nb(S[i], m[i], B[i], var)
        else:
            f = B[i]
        mf = m[i] + f
        if S[i] > 0.0:
            if mf <= 0.0:
                return np.inf
            term = 2.0 * (mf - S[i] + S[i] * np.log(S[i] / mf))
        else:
            term = 2.0 * mf
        if sigma[i] > 0.0:
            term += (f - B[i]) ** 2 / var
        total += term
    return total


@dataclass
class PgStatInputs:
    S: np.ndarray
    m: np.ndarray
    B: np.ndarray | None = None
    sigma: np.ndarray | None = None

    def arrays(self):
        S = np.ascontiguousarray(self.S, dtype=float)
        m = np.ascontiguousarray(self.m, dtype=float)
        B = np.zeros_like(S) if self.B is None else np.ascontiguousarray(self.B, dtype=float)
        sig = np.zeros_like(S) if self.sigma is None else np.ascontiguousarray(self.sigma, dtype=float)
        if np.any(m < 0) or np.any(S < 0):
            raise ValueError("observed and model counts must be non-negative")
        return S, m, np.broadcast_to(B, S.shape).copy(), np.broadcast_to(sig, S.shape).copy()


def pgstat(inp, use_numba=None):
    """Poisson data / Gaussian background fit statistic with the background profiled per bin.

    Bins with ``sigma == 0`` use the background estimate as known (Cash
    statistic when it is zero). Returns ``inf`` when a bin has counts but
    zero predicted rate.
    """
    S, m, B, sigma = inp.arrays()
    use = _accel.USE_NUMBA if use_numba is None else use_numba
    if use:
        return float(_pgstat_nb(S, m, B, sigma))
    terms, _ = _pgstat_terms(S, m, B, sigma)
    return float(terms.sum())


def pgstat_bins(inp):
    """Per-bin statistic and profiled background (numpy path)."""
    return _pgstat_terms(*inp.arrays())


def reduced_pgstat(stat, n_bins, n_free=5):
    if n_bins <= n_free:
        raise ValueError("need more bins than free parameters")
    return stat / (n_bins - n_free)


# -- Metropolis-Hastings -------------------------------------------------------------------
@dataclass
class ChainResult:
    samples: np.ndarray  # post burn-in, unit coordinates
    stats: np.ndarray  # PGStat (or -2 log target) per post burn-in step
    accepted: np.ndarray
    acceptance_rate: float
    scale: np.ndarray
    warnings: list = field(default_factory=list)

    def physical(self, box=DEFAULT_PRIOR):
        return unit_to_params(self.samples, box)


def metropolis(stat_fn, init, n_steps, burn_in, rng, scale=0.05, lower=-1.0, upper=1.0,
               greedy=False, adapt=True):
    """Random-walk MH targeting exp(-stat/2) on a box.

    The proposal scale adapts during burn-in (Robbins-Monro on log-scale
    toward 23.4% acceptance) and is frozen afterwards. ``greedy`` accepts
    only improvements, which turns the walk into a crude fit loop.
    """
    if not n_steps > burn_in >= 0:
        raise ValueError("need n_steps > burn_in >= 0")
    x = np.array(init, dtype=float)
    if np.any(x < lower) or np.any(x > upper):
        raise ValueError("initial point lies outside the box")
    dim = x.size
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (dim,)).copy()
    cur = float(stat_fn(x))
    if not np.isfinite(cur):
        raise ValueError("statistic is not finite at the initial point")
    keep = n_steps - burn_in
    samples = np.empty((keep, dim))
    stats = np.empty(keep)
    flags = np.zeros(keep, dtype=bool)
    n_acc = 0
    log_adapt = 0.0
    for step in range(n_steps):
        prop = x + np.exp(log_adapt) * scale * rng.standard_normal(dim)
        ok = False
        if np.all(prop >= lower) and np.all(prop <= upper):
            new = float(stat_fn(prop))
            if np.isfinite(new):
                if greedy:
                    ok = new < cur
                else:
                    ok = math.log(rng.random() + 1e-300) < -0.5 * (new - cur)
        if ok:
            x, cur = prop, new
        if step < burn_in:
            if adapt:
                log_adapt += (float(ok) - TARGET_ACCEPTANCE) / (step + 1.0) ** 0.6
        else:
            k = step - burn_in
            samples[k], stats[k], flags[k] = x, cur, ok
            n_acc += ok
    rate = n_acc / keep
    notes = []
    final_scale = np.exp(log_adapt) * scale
    if np.all(final_scale == 0):
        notes.append("zero proposal scale: chain cannot move")
        warnings.warn(notes[-1], stacklevel=2)
    return ChainResult(samples, stats, flags, rate, final_scale, notes)


def spectrum_stat(counts, response, exposure=None, background=None, bkg_sigma=None,
                  box=DEFAULT_PRIOR):
    """Closure: unit parameters -> PGStat of the observed counts."""
    counts = np.asarray(counts, dtype=float)

    def stat(u):
        m = expected_counts(unit_to_params(u, box), response, exposure)
        return pgstat(PgStatInputs(counts, m, background, bkg_sigma))

    return stat


def mh_chain(counts, response, init, n_steps, burn_in, seed, exposure=None, stat_fn=None,
             scale=0.05, box=DEFAULT_PRIOR):
    rng = np.random.default_rng(seed)
    fn = stat_fn if stat_fn is not None else spectrum_stat(counts, response, exposure, box=box)
    return metropolis(fn, init, n_steps, burn_in, rng, scale=scale)


def greedy_fit(counts, response, init, seed, exposure=None, n_iter=FIT_ITERATIONS, scale=0.05,
               box=DEFAULT_PRIOR):
    """130 accept-if-better steps: the single-fit timing analog."""
    rng = np.random.default_rng(seed)
    fn = spectrum_stat(counts, response, exposure, box=box)
    res = metropolis(fn, init, n_iter + 1, 1, rng, scale=scale, greedy=True, adapt=False)
    best = int(np.argmin(res.stats))
    return res.samples[best], float(res.stats[best])


# -- autocorrelation ---------------------------------------------------------------------------
@dataclass
class AutocorrResult:
    tau: np.ndarray
    degenerate: np.ndarray

    @property
    def max(self):
        return float(self.tau.max())


def _autocorrelation(x):
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / acov[0]


def _ips_tau(rho):
    # Geyer's initial positive sequence on pair sums rho(2m) + rho(2m+1)
    n_pairs = rho.size // 2
    pairs = rho[:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    nonpos = np.nonzero(pairs <= 0.0)[0]
    stop = nonpos[0] if nonpos.size else n_pairs
    return max(1.0, -1.0 + 2.0 * pairs[:stop].sum())


def autocorr_time(chain):
    """Integrated autocorrelation time per coordinate of a (length, dim) chain."""
    chain = np.asarray(chain, dtype=float)
    if chain.ndim == 1:
        chain = chain[:, None]
    length = chain.shape[0]
    if length < 100:
        raise ValueError("need a chain of at least 100 steps")
    tau = np.empty(chain.shape[1])
    degenerate = np.zeros(chain.shape[1], dtype=bool)
    for j in range(chain.shape[1]):
        col = chain[:, j]
        if np.all(col == col[0]):
            tau[j], degenerate[j] = float(length), True
            continue
        tau[j] = _ips_tau(_autocorrelation(col))
    return AutocorrResult(tau, degenerate)


def mcmc_time_estimate(n_samples, tau, burn_in, t, chain_length, n_val):
    """Wall time for ``n_samples`` effective draws on each of ``n_val`` spectra."""
    if chain_length <= 0 or min(n_samples, tau, t, n_val) <= 0 or burn_in < 0:
        raise ValueError("inputs must be positive (burn-in non-negative)")
    return (n_samples * tau + burn_in) * t / (chain_length + burn_in) * n_val


def write_chain_csv(path, result, box=DEFAULT_PRIOR):
    phys = result.physical(box)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *PARAM_NAMES, "pgstat", "accepted"])
        for k in range(len(phys)):
            w.writerow([k, *(repr(float(v)) for v in phys[k]), repr(float(result.stats[k])),
                        int(result.accepted[k])])
