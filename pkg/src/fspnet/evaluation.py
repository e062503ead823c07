"""Evaluation battery: correlation, ensemble line fits, reconstruction scores,
coverage curves, timing and the CSV/SVG report files."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import (
    PgStatInputs,
    autocorr_time,
    greedy_fit,
    mcmc_time_estimate,
    mh_chain,
    pgstat,
    reduced_pgstat,
)
from .dataset import DEFAULT_PRIOR, params_to_unit, unit_to_params
from .physics import PARAM_NAMES, expected_counts

DEFAULT_LEVELS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


class EvaluationError(ValueError):
    pass


# -- correlation and line fits ------------------------------------------------------
def pcc(x, y):
    """Sample Pearson correlation of two equally long vectors."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise EvaluationError("pcc needs two vectors of equal length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0.0 or syy == 0.0:
        raise EvaluationError("correlation is undefined for a constant input")
    return float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass(frozen=True)
class LinFit:
    slope_mean: float
    slope_std: float
    intercept_mean: float
    intercept_std: float


def ensemble_linfit(targets, draw_sets):
    """Least-squares line of each draw set against the targets, summarized.

    ``draw_sets`` is (n_sets, n); the standard deviations are population
    values over the sets.
    """
    t = np.asarray(targets, dtype=float)
    sets = np.atleast_2d(np.asarray(draw_sets, dtype=float))
    if sets.shape[1] != t.size:
        raise EvaluationError("each draw set must pair with the targets")
    dt = t - t.mean()
    stt = np.dot(dt, dt)
    if stt == 0.0:
        raise EvaluationError("targets are constant; the line fit is degenerate")
    slopes = (sets - sets.mean(axis=1, keepdims=True)) @ dt / stt
    intercepts = sets.mean(axis=1) - slopes * t.mean()
    return LinFit(float(slopes.mean()), float(slopes.std()),
                  float(intercepts.mean()), float(intercepts.std()))


# -- coverage --------------------------------------------------------------------
@dataclass
class CoverageTable:
    levels: np.ndarray
    coverage: np.ndarray
    per_param: np.ndarray  # (n_levels, dim)
    n_spectra: int

    def binomial_se(self):
        """Conservative standard error, counting spectra rather than pairs."""
        lv = np.asarray(self.levels)
        return np.sqrt(lv * (1.0 - lv) / max(self.n_spectra, 1))


def min_draws(level):
    """Draws needed so each tail of a central interval expects one sample."""
    return int(math.ceil(2.0 / (1.0 - level) - 1e-9))


def coverage_curve(draws, truths, levels=DEFAULT_LEVELS):
    """Empirical coverage of central credible intervals, averaged over parameters.

    ``draws`` is (n_spec, n_draws, dim), ``truths`` is (n_spec, dim).
    """
    draws = np.asarray(draws, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if draws.ndim != 3 or truths.shape != (draws.shape[0], draws.shape[2]):
        raise EvaluationError("draws must be (n_spec, n_draws, dim) and truths (n_spec, dim)")
    levels = np.asarray(levels, dtype=float)
    if levels.size == 0:
        return CoverageTable(levels, np.zeros(0), np.zeros((0, draws.shape[2])), draws.shape[0])
    if np.any((levels <= 0) | (levels >= 1)):
        raise EvaluationError("credible levels must lie in (0, 1)")
    need = min_draws(levels.max())
    if draws.shape[1] < need:
        raise EvaluationError(f"level {levels.max():g} needs at least {need} draws per spectrum, "
                              f"got {draws.shape[1]}")
    per = np.empty((levels.size, draws.shape[2]))
    for k, g in enumerate(levels):
        lo, hi = np.quantile(draws, [(1.0 - g) / 2.0, (1.0 + g) / 2.0], axis=1)
        per[k] = np.mean((truths >= lo) & (truths <= hi), axis=0)
    return CoverageTable(levels, per.mean(axis=1), per, draws.shape[0])


def self_consistency_draws(draws, seed=0):
    """Replace each truth by one of the spectrum's own draws.

    Returns (remaining draws, pseudo truths); calibrated by construction, so
    coverage should follow the diagonal within Monte-Carlo error.
    """
    draws = np.asarray(draws, dtype=float)
    n_spec, n_draws, _ = draws.shape
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, n_draws, n_spec)
    keep = np.ones((n_spec, n_draws), dtype=bool)
    keep[np.arange(n_spec), pick] = False
    truths = draws[np.arange(n_spec), pick]
    rest = draws[keep].reshape(n_spec, n_draws - 1, -1)
    return rest, truths


# -- reconstruction scores -----------------------------------------------------------
@dataclass
class ScoreResult:
    median: float
    per_spectrum: np.ndarray


def reconstruct_and_score(params, counts, response, exposures=None, n_free=5):
    """Median reduced PGStat of noiseless model spectra against observed counts.

    ``params`` are physical values (n, 5). No background is modeled, so the
    statistic takes its Cash limit.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    if params.shape[0] != counts.shape[0]:
        raise EvaluationError("one parameter vector per spectrum is required")
    n_bins = counts.shape[1]
    out = np.empty(len(params))
    for i, p in enumerate(params):
        expo = None if exposures is None else float(exposures[i])
        model = expected_counts(p, response, expo)
        out[i] = reduced_pgstat(pgstat(PgStatInputs(counts[i], model)), n_bins, n_free)
    return ScoreResult(float(np.median(out)), out)


def poisson_realization(counts, seed):
    """Seeded Poisson draw of expected counts, used as observed data for scoring."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    return rng.poisson(np.asarray(counts, dtype=float)).astype(float)


def posterior_point(draws_unit, box=DEFAULT_PRIOR):
    """Per-parameter posterior median, clipped to the prior box, in physical units."""
    return unit_to_params(np.clip(np.median(draws_unit, axis=1), -1.0, 1.0), box)


# -- timing ---------------------------------------------------------------------------
@dataclass
class BenchmarkResult:
    flow_seconds: dict          # draws -> mean seconds per spectrum
    fit_seconds: float          # mean greedy-fit seconds per spectrum
    mcmc_seconds: float         # extrapolated seconds per spectrum for 1000 effective draws
    tau: float
    chain_seconds: float
    chain_length: int
    burn_in: int
    encoded_rows: dict          # draws -> spectra passed through the encoder
    n_spectra: int

    def speedups(self):
        out = {}
        if 1 in self.flow_seconds:
            out["single"] = self.fit_seconds / self.flow_seconds[1]
        if 1000 in self.flow_seconds:
            out["posterior"] = self.mcmc_seconds / self.flow_seconds[1000]
        return out

    def table(self):
        rows = [(f"flow_{n}_draws", s) for n, s in sorted(self.flow_seconds.items())]
        rows.append(("fit_130_iterations", self.fit_seconds))
        rows.append(("mcmc_1000_samples_estimate", self.mcmc_seconds))
        return rows


def time_flow(net, x, n_draws, seed=0, repeats=1):
    """Mean seconds per spectrum: encode once, then draw ``n_draws`` samples."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    before = net.encoder.rows
    t0 = time.perf_counter()
    for _ in range(repeats):
        for i in range(len(x)):
            net.posterior(x[i:i + 1], n_draws, seed + i)
    elapsed = (time.perf_counter() - t0) / (repeats * len(x))
    return elapsed, (net.encoder.rows - before) // repeats


def benchmark(net, x, counts, response, draws=(1, 1000), n_fit=3, chain_length=2000,
              burn_in=500, seed=0, exposures=None, box=DEFAULT_PRIOR):
    """Flow sampling time against the fitting and MCMC baselines, per spectrum."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    net.posterior(x[:1], max(draws), seed)  # warm-up
    flow_s, rows = {}, {}
    for n in draws:
        flow_s[n], rows[n] = time_flow(net, x, n, seed)

    n_fit = min(n_fit, len(counts))
    init = np.zeros(len(PARAM_NAMES))
    t0 = time.perf_counter()
    for i in range(n_fit):
        greedy_fit(counts[i], response, init, seed + i,
                   None if exposures is None else float(exposures[i]), box=box)
    fit_s = (time.perf_counter() - t0) / n_fit

    start = params_to_unit(posterior_point(net.posterior(x[:1], 200, seed), box), box)[0]
    t0 = time.perf_counter()
    chain = mh_chain(counts[0], response, np.clip(start, -0.999, 0.999), chain_length, burn_in,
                     seed, None if exposures is None else float(exposures[0]), box=box)
    chain_s = time.perf_counter() - t0
    tau = autocorr_time(chain.samples).max
    post_burn = chain_length - burn_in
    mcmc_s = mcmc_time_estimate(1000, tau, burn_in, chain_s, post_burn, 1)
    return BenchmarkResult(flow_s, fit_s, mcmc_s, float(tau), chain_s, post_burn, burn_in,
                           rows, len(x))


# -- report ---------------------------------------------------------------------------
@dataclass
class EvalReport:
    pcc: dict = field(default_factory=dict)
    linfit: dict = field(default_factory=dict)
    pgstat: dict = field(default_factory=dict)
    coverage: CoverageTable | None = None
    timing: list = field(default_factory=list)
    # plotting coordinates: log10 for log-scale parameters, physical otherwise
    targets: np.ndarray | None = None           # (n_spec, dim)
    medians: np.ndarray | None = None           # (n_spec, dim)
    scatter_index: np.ndarray | None = None     # rows of the scatter subset
    scatter_draws: np.ndarray | None = None     # (n_sets, n_sub, dim)
    count_rate: np.ndarray | None = None        # (n_spec,)


def plot_coords(params, box=DEFAULT_PRIOR):
    out = np.array(params, dtype=float)
    is_log = np.asarray(box.log_scale)
    out[..., is_log] = np.log10(out[..., is_log])
    return out


def summarize_predictions(targets, draws, n_sets=50, n_spec=250, seed=0, box=DEFAULT_PRIOR,
                          count_rate=None):
    """PCC of posterior medians and ensemble line fits over ``n_sets`` draw sets.

    ``targets`` are physical (n, dim); ``draws`` are unit-coordinate posterior
    samples (n, n_draws, dim). Both are compared in plotting coordinates
    (log10 for log-scale parameters). Returns a partially filled report.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.shape[1] < n_sets:
        raise EvaluationError(f"need at least {n_sets} draws per spectrum")
    t = plot_coords(targets, box)
    med = plot_coords(posterior_point(draws, box), box)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(t), size=min(n_spec, len(t)), replace=False))
    sets = np.stack([plot_coords(unit_to_params(draws[pick, k], box), box) for k in range(n_sets)])
    report = EvalReport()
    for j, name in enumerate(PARAM_NAMES):
        report.pcc[name] = pcc(t[:, j], med[:, j])
        report.linfit[name] = ensemble_linfit(t[pick, j], sets[:, :, j])
    report.targets, report.medians = t, med
    report.scatter_index, report.scatter_draws = pick, sets
    report.count_rate = None if count_rate is None else np.asarray(count_rate, dtype=float)
    return report


def _fmt(v):
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


ALL_PARTS = ("pcc", "pgstat", "coverage", "timing", "scatter")


def emit_artifacts(report, outdir, parts=ALL_PARTS):
    """Write one CSV per table plus scatter and coverage SVGs; returns paths.

    ``parts`` restricts output to some tables, so separate commands can share
    one output directory.
    """
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvaluationError(f"cannot create output directory {out}: {exc}") from exc
    written = []

    def put(name, header, rows):
        path = out / name
        _write_csv(path, header, rows)
        written.append(path)

    def put_text(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    if "pcc" in parts:
        put("pcc.csv", ["param", "pcc", "slope_mean", "slope_std", "intercept_mean", "intercept_std"],
            [[name, _fmt(report.pcc[name]), *(_fmt(v) for v in (
                report.linfit[name].slope_mean, report.linfit[name].slope_std,
                report.linfit[name].intercept_mean, report.linfit[name].intercept_std))]
             for name in report.pcc])
        rows = []
        if report.targets is not None:
            for i in range(len(report.targets)):
                rate = "" if report.count_rate is None else _fmt(report.count_rate[i])
                rows.append([i, *(_fmt(v) for v in report.targets[i]),
                             *(_fmt(v) for v in report.medians[i]), rate])
        put("predictions.csv", ["spectrum", *(f"target_{n}" for n in PARAM_NAMES),
                                *(f"median_{n}" for n in PARAM_NAMES), "count_rate"], rows)
    if "pgstat" in parts:
        put("pgstat.csv", ["scenario", "median_reduced_pgstat"],
            [[k, _fmt(v)] for k, v in report.pgstat.items()])
    if "coverage" in parts:
        cov = report.coverage
        cov_rows = [] if cov is None else [
            [_fmt(g), _fmt(c), _fmt(se)] for g, c, se in zip(cov.levels, cov.coverage, cov.binomial_se())]
        put("coverage.csv", ["level", "coverage", "binomial_se"], cov_rows)
        put_text("coverage.svg", coverage_svg(cov))
    if "timing" in parts:
        put("timing.csv", ["scenario", "seconds"], [[k, _fmt(v)] for k, v in report.timing])
    if "scatter" in parts:
        rows = []
        sets = report.scatter_draws
        if sets is not None:
            for a, i in enumerate(report.scatter_index):
                rate = "" if report.count_rate is None else _fmt(report.count_rate[i])
                for k in range(sets.shape[0]):
                    for j, name in enumerate(PARAM_NAMES):
                        rows.append([int(i), k, name, _fmt(report.targets[i, j]),
                                     _fmt(sets[k, a, j]), rate])
        put("scatter.csv", ["spectrum", "draw", "param", "target", "predicted", "count_rate"], rows)
        for j, name in enumerate(PARAM_NAMES):
            if sets is None:
                put_text(f"scatter_{name}.svg", svg_plot([], [], title=name))
                continue
            t = np.broadcast_to(report.targets[report.scatter_index, j][None, :], sets.shape[:2])
            rate = None
            if report.count_rate is not None:
                rate = np.broadcast_to(report.count_rate[report.scatter_index][None, :],
                                       sets.shape[:2]).ravel()
            put_text(f"scatter_{name}.svg", scatter_svg(t.ravel(), sets[:, :, j].ravel(), name,
                                                        report.linfit.get(name), rate))
    return written


# -- minimal deterministic SVG ------------------------------------------------------
W_PX, H_PX, PAD = 400, 400, 50


def _scale(vals, lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return a + (np.asarray(vals, dtype=float) - lo) / (hi - lo) * (b - a)


def svg_plot(points_x, points_y, title="", lines=(), limits=None, shades=None):
    """Axes, optional points and optional polylines given in data coordinates."""
    px = np.asarray(points_x, dtype=float)
    py = np.asarray(points_y, dtype=float)
    if limits is None:
        both = np.concatenate([px, py]) if px.size else np.array([0.0, 1.0])
        limits = (float(both.min()), float(both.max()))
    lo, hi = limits
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W_PX}" height="{H_PX}" '
             f'viewBox="0 0 {W_PX} {H_PX}">',
             f'<rect x="0" y="0" width="{W_PX}" height="{H_PX}" fill="white"/>',
             f'<line x1="{PAD}" y1="{H_PX - PAD}" x2="{W_PX - PAD}" y2="{H_PX - PAD}" stroke="black"/>',
             f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H_PX - PAD}" stroke="black"/>',
             f'<text x="{W_PX / 2:.0f}" y="{PAD / 2:.0f}" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{PAD}" y="{H_PX - PAD + 15}" font-size="10">{lo:.4g}</text>',
             f'<text x="{W_PX - PAD}" y="{H_PX - PAD + 15}" text-anchor="end" font-size="10">{hi:.4g}</text>']
    if px.size:
        sx = _scale(px, lo, hi, PAD, W_PX - PAD)
        sy = _scale(py, lo, hi, H_PX - PAD, PAD)
        grey = np.zeros(px.size) if shades is None else shades
        for x, y, s in zip(sx, sy, grey):
            level = int(round(200 * float(s)))
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.2" '
                         f'fill="rgb({level},{level},{level})" fill-opacity="0.5"/>')
    for xs, ys, color in lines:
        sx = _scale(xs, lo, hi, PAD, W_PX - PAD)
        sy = _scale(ys, lo, hi, H_PX - PAD, PAD)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(sx, sy))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scatter_svg(targets, predicted, name, fit=None, rate=None):
    lo = float(min(targets.min(), predicted.min()))
    hi = float(max(targets.max(), predicted.max()))
    lines = [([lo, hi], [lo, hi], "black")]
    if fit is not None and np.isfinite(fit.slope_mean):
        lines.append(([lo, hi], [fit.intercept_mean + fit.slope_mean * lo,
                                 fit.intercept_mean + fit.slope_mean * hi], "red"))
    shades = None
    if rate is not None and rate.size:
        lr = np.log10(np.maximum(rate, 1e-300))
        span = lr.max() - lr.min()
        shades = (lr - lr.min()) / span if span > 0 else np.zeros_like(lr)
    return svg_plot(targets, predicted, name, lines, (lo, hi), shades)


def coverage_svg(table):
    lines = [([0.0, 1.0], [0.0, 1.0], "black")]
    if table is not None and len(table.levels):
        lines.append((list(table.levels), list(table.coverage), "blue"))
    return svg_plot([], [], "coverage", lines, (0.0, 1.0))
