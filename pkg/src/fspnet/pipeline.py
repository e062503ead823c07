"""High-level steps shared by the command line and the acceptance suite."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .dataset import DEFAULT_PRIOR, NormalizedBatch, params_to_unit, preprocess, response_of
from .evaluation import (
    EvalReport,
    coverage_curve,
    poisson_realization,
    posterior_point,
    reconstruct_and_score,
    summarize_predictions,
)
from .training import NetConfig, NetworkAssembly, run_stage


def network_for(ds, cfg=None, seed=0, decoder=True):
    """Fresh assembly sized for the dataset; normalization taken from ``ds``."""
    cfg = NetConfig(n_bins=ds.n_bins, decoder=decoder) if cfg is None else cfg
    if cfg.n_bins != ds.n_bins:
        raise ValueError(f"network expects {cfg.n_bins} bins, dataset has {ds.n_bins}")
    net = NetworkAssembly(cfg, seed)
    net.norm = ds.norm
    return net


def batch_for(net, ds, box=DEFAULT_PRIOR):
    """Network-ready arrays using the normalization frozen into ``net``."""
    norm = ds.norm if net.norm is None else net.norm
    x, sigma = preprocess(ds.counts, ds.uncertainty, norm)
    return NormalizedBatch(x, sigma, params_to_unit(ds.params, box))


def train(net, cfg, train_ds, val_ds, progress=None, box=DEFAULT_PRIOR):
    if net.norm is None:
        net.norm = train_ds.norm
    return run_stage(cfg, net, batch_for(net, train_ds, box), batch_for(net, val_ds, box), progress)


def _infer_chunk(args):
    arrays, x, n_draws, seed, offset = args
    net = NetworkAssembly.from_arrays(arrays)
    return net.posterior(x, n_draws, seed, offset)


def infer(net, ds, n_draws, seed=0, workers=1, chunk=25):
    """Unit-coordinate posterior draws (n, n_draws, 5); worker count never changes results."""
    x = batch_for(net, ds).x
    starts = range(0, len(x), chunk)
    if workers > 1:
        arrays = net.state_arrays()
        jobs = [(arrays, x[s:s + chunk], n_draws, seed, s) for s in starts]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_infer_chunk, jobs))
    else:
        parts = [net.posterior(x[s:s + chunk], n_draws, seed, s) for s in starts]
    return np.concatenate(parts)


def observed_counts(ds, seed=0):
    """Counts used as data when scoring: noisy sets as stored, noiseless ones Poisson-sampled."""
    return ds.counts.copy() if ds.noisy else poisson_realization(ds.counts, seed)


def exposures_of(ds):
    return None if ds.exposures is None else np.asarray(ds.exposures)


def evaluate(draws_unit, ds, seed=0, extra=None, box=DEFAULT_PRIOR, n_sets=50, n_spec=250):
    """Correlation, line fits and reconstruction scores for one model's draws.

    ``extra`` maps further scenario names to unit draws scored the same way
    (for instance a decoder-free model).
    """
    response = response_of(ds)
    counts = observed_counts(ds, seed)
    expo = exposures_of(ds)
    rate = ds.counts.sum(axis=1) / (expo if expo is not None else response.exposure)
    report = summarize_predictions(ds.params, draws_unit, n_sets, n_spec, seed, box, rate)
    report.pgstat["targets"] = reconstruct_and_score(ds.params, counts, response, expo).median
    report.pgstat["flow"] = reconstruct_and_score(posterior_point(draws_unit, box), counts,
                                                  response, expo).median
    for name, draws in (extra or {}).items():
        report.pgstat[name] = reconstruct_and_score(posterior_point(draws, box), counts,
                                                    response, expo).median
    return report


def coverage_report(draws_unit, ds, levels, box=DEFAULT_PRIOR):
    report = EvalReport()
    report.coverage = coverage_curve(draws_unit, params_to_unit(ds.params, box), levels)
    return report
