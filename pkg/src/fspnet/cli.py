"""Command line entry point: ``fspnet <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baseline, dataset, evaluation, pipeline
from .physics import EnergyGrid, ResponseModel
from .training import (
    ConfigError,
    NetConfig,
    NetworkAssembly,
    StagePrerequisiteError,
    TrainConfig,
    apply_overrides,
    dump_config,
    parse_config_text,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.needed = []

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def need(self, *flags, **kwargs):
        """A required option that may also be supplied through --config."""
        kwargs["help"] = (kwargs.get("help", "") + " (required)").strip()
        self.needed.append(self.add_argument(*flags, **kwargs))

    def check_needed(self, args):
        missing = [a.option_strings[0] for a in self.needed if getattr(args, a.dest) is None]
        if missing:
            self.error(f"the following arguments are required: {', '.join(missing)}")


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _default_seed():
    raw = os.environ.get("FSPNET_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FSPNET_SEED must be an integer, got {raw!r}") from None


def build_parser():
    parser = _Parser(prog="fspnet", description="Spectral-fit posterior networks and baselines.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, workers=False):
        p.add_argument("--seed", type=int, default=None, help="master seed (default: $FSPNET_SEED or 0)")
        p.add_argument("--config", type=Path, help="flat key = value file; explicit flags win")
        if workers:
            p.add_argument("--workers", type=_positive_int, default=1)

    p = sub.add_parser("generate", help="simulate a dataset file")
    common(p, workers=True)
    p.need("--n", type=_positive_int)
    p.add_argument("--bins", type=_positive_int, default=240)
    p.add_argument("--noisy", type=_bool, default=False)
    p.add_argument("--exposure", type=float, help="fixed exposure in seconds")
    p.add_argument("--exposure-range", type=float, nargs=2, metavar=("LO", "HI"),
                   help="random per-spectrum exposure (default 50 500 when --noisy true)")
    p.need("--out", type=Path)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.need("--stage", choices=("decoder", "synthetic", "real"))
    p.need("--data", type=Path)
    p.add_argument("--val", type=Path, help="validation dataset (default: 80/20 split of --data)")
    p.add_argument("--init", type=Path, help="checkpoint from the previous stage")
    p.need("--outdir", type=Path)
    p.add_argument("--epochs", type=_positive_int, dest="max_epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=_positive_int, dest="batch_size")
    p.add_argument("--w-rec", type=float, dest="w_rec")
    p.add_argument("--w-lat", type=float, dest="w_lat")
    p.add_argument("--w-nf", type=float, dest="w_nf")
    p.add_argument("--decoder-free", type=_bool, dest="decoder_free")

    p = sub.add_parser("infer", help="posterior draws for every spectrum of a dataset")
    common(p, workers=True)
    p.need("--model", type=Path)
    p.need("--data", type=Path)
    p.add_argument("--draws", type=_positive_int, default=1000)
    p.need("--outdir", type=Path)

    p = sub.add_parser("mcmc", help="Metropolis-Hastings chains for selected spectra")
    common(p, workers=True)
    p.need("--data", type=Path)
    p.add_argument("--spectra", type=_positive_int, default=1, help="first N spectra")
    p.add_argument("--steps", type=_positive_int, default=5000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.need("--outdir", type=Path)

    for name, text in (("evaluate", "correlations, line fits and reconstruction scores"),
                       ("coverage", "coverage versus credible level")):
        p = sub.add_parser(name, help=text)
        common(p, workers=True)
        p.need("--model", type=Path)
        p.need("--data", type=Path)
        p.add_argument("--draws", type=_positive_int, default=1000)
        p.need("--outdir", type=Path)
        if name == "evaluate":
            p.add_argument("--compare", type=Path, nargs="*", default=[],
                           help="further checkpoints scored under their file stem")
        else:
            p.add_argument("--levels", type=float, nargs="+",
                           default=[round(0.1 * k, 1) for k in range(1, 10)])

    p = sub.add_parser("benchmark", help="flow sampling time against the classical baselines")
    common(p)
    p.need("--model", type=Path)
    p.need("--data", type=Path)
    p.add_argument("--spectra", type=_positive_int, default=20)
    p.add_argument("--fits", type=_positive_int, default=3)
    p.add_argument("--chain-length", type=_positive_int, default=2000)
    p.add_argument("--burn-in", type=int, default=500)
    p.need("--outdir", type=Path)
    return parser


# -- helpers -------------------------------------------------------------------------
def _options(args, skip=("command", "config")):
    return {k: v for k, v in vars(args).items() if k not in skip}


def _merge_config(args, actions):
    """Config-file values fill options the user did not set on the command line."""
    if args.config is None:
        return {}
    try:
        pairs = parse_config_text(args.config.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    leftovers = {}
    for key, raw in pairs.items():
        action = actions.get(key.replace("-", "_"))
        if action is None or action.dest in ("help", "config"):
            leftovers[key] = raw
        elif getattr(args, action.dest) == action.default:
            setattr(args, action.dest, _convert(action, raw, key))
    return leftovers


def _convert(action, raw, key):
    """Parse a config string with the same converter the flag uses."""
    convert = action.type or str
    try:
        if action.nargs in ("+", "*") or isinstance(action.nargs, int):
            return [convert(v) for v in raw.replace(",", " ").split()]
        value = convert(raw.strip())
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"config key {key!r}: {exc}") from exc
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config key {key!r}: {value!r} is not one of {list(action.choices)}")
    return value


def _echo(path, args, extra=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in sorted(_options(args).items())]
    text = "\n".join(lines) + "\n"
    if extra:
        text += extra
    path.write_text(text, encoding="utf-8")


def _load_dataset(path):
    if not path.is_file():
        raise UsageError(f"dataset not found: {path}")
    return dataset.load_dataset(path)


def _load_model(path):
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return NetworkAssembly.load(path)


# -- subcommands -----------------------------------------------------------------------
def cmd_generate(args, extra):
    if extra:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(extra))}")
    if args.exposure is not None and args.exposure_range is not None:
        raise UsageError("--exposure and --exposure-range are mutually exclusive")
    if args.exposure is not None and args.exposure <= 0:
        raise UsageError("--exposure must be positive")
    rng_expo = args.exposure_range
    if rng_expo is None and args.noisy and args.exposure is None:
        rng_expo = (50.0, 500.0)
    if rng_expo is not None and not 0 < rng_expo[0] <= rng_expo[1]:
        raise UsageError("--exposure-range needs 0 < LO <= HI")
    grid = EnergyGrid(args.bins)
    response = ResponseModel(grid, exposure=args.exposure if args.exposure else 100.0)
    ds = dataset.generate_dataset(dataset.DEFAULT_PRIOR, args.n, grid, response, args.noisy,
                                  args.seed, args.workers, tuple(rng_expo) if rng_expo else None)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dataset.save_dataset(args.out, ds)
    _echo(args.out.with_name(args.out.name + ".config.txt"), args)
    print(f"wrote {len(ds)} spectra x {ds.n_bins} bins to {args.out}")


def cmd_train(args, extra):
    overrides = dict(extra)
    for key in ("max_epochs", "lr", "batch_size", "w_rec", "w_lat", "w_nf", "decoder_free"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    overrides["seed"] = args.seed
    overrides["stage"] = args.stage
    try:
        cfg = apply_overrides(TrainConfig(stage=args.stage), overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    cfg = replace(cfg, lr=cfg.initial_lr)  # echo the stage default actually used
    if args.init is not None and not args.init.is_file():
        raise UsageError(f"checkpoint not found: {args.init}")
    if args.init is None and args.stage != "decoder" and not cfg.decoder_free:
        raise StagePrerequisiteError(
            f"stage prerequisite: stage {args.stage!r} needs --init with a checkpoint from the "
            f"{'decoder' if args.stage == 'synthetic' else 'synthetic'} stage")
    if args.init is None and args.stage == "real":
        raise StagePrerequisiteError("stage prerequisite: stage 'real' needs a 'synthetic' checkpoint")

    data = _load_dataset(args.data)
    if args.val is not None:
        train_ds, val_ds = data, _load_dataset(args.val)
    else:
        train_ds, val_ds = dataset.split(data, 0.8, args.seed)
    if args.init is not None:
        net = NetworkAssembly.load(args.init)
    else:
        net = pipeline.network_for(train_ds, NetConfig(n_bins=train_ds.n_bins,
                                                       decoder=not cfg.decoder_free), args.seed)
    args.outdir.mkdir(parents=True, exist_ok=True)
    _echo(args.outdir / "effective_config.txt", args, "# training\n" + dump_config(cfg))

    def progress(row):
        print(f"epoch {row.epoch:4d} lr {row.lr:.2e} train {row.loss_total:.6g} "
              f"val {row.val_total:.6g}", flush=True)

    log = pipeline.train(net, cfg, train_ds, val_ds, progress)
    net.save(args.outdir / "model.fspc")
    log.to_csv(args.outdir / "train_log.csv")
    print(f"stage {args.stage}: {len(log.rows)} epochs, checkpoint {args.outdir / 'model.fspc'}")


def _reject(extra):
    if extra:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(extra))}")


def cmd_infer(args, extra):
    _reject(extra)
    net, ds = _load_model(args.model), _load_dataset(args.data)
    draws = pipeline.infer(net, ds, args.draws, args.seed, args.workers)
    phys = dataset.unit_to_params(draws)
    args.outdir.mkdir(parents=True, exist_ok=True)
    np.save(args.outdir / "posterior_draws.npy", phys)
    rows = []
    q = np.quantile(draws, [0.16, 0.5, 0.84], axis=1)
    for i in range(len(ds)):
        phys_q = dataset.unit_to_params(np.clip(q[:, i], -1.0, 1.0))
        rows.append([i, *(repr(float(v)) for v in phys_q.T.ravel())])
    header = ["spectrum"] + [f"{name}_{tag}" for name in dataset.PARAM_NAMES
                             for tag in ("q16", "median", "q84")]
    evaluation._write_csv(args.outdir / "posterior_summary.csv", header, rows)
    _echo(args.outdir / "effective_config.txt", args)
    print(f"wrote {args.draws} draws for {len(ds)} spectra to {args.outdir}")


def _chain_job(job):
    counts, descriptor, exposure, steps, burn_in, seed = job
    response = ResponseModel.from_descriptor(descriptor)
    return baseline.mh_chain(counts, response, np.zeros(5), steps, burn_in, seed, exposure)


def cmd_mcmc(args, extra):
    _reject(extra)
    if not 0 <= args.burn_in < args.steps:
        raise UsageError("--burn-in must satisfy 0 <= burn-in < steps")
    ds = _load_dataset(args.data)
    n = min(args.spectra, len(ds))
    counts = pipeline.observed_counts(ds, args.seed)
    jobs = [(counts[i], ds.response, ds.exposure(i), args.steps, args.burn_in,
             np.random.SeedSequence([args.seed, 4, i])) for i in range(n)]
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            chains = list(pool.map(_chain_job, jobs))
    else:
        chains = [_chain_job(j) for j in jobs]
    args.outdir.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, res in enumerate(chains):
        baseline.write_chain_csv(args.outdir / f"chain_{i:04d}.csv", res)
        tau = baseline.autocorr_time(res.samples) if len(res.samples) >= 100 else None
        summary.append([i, repr(res.acceptance_rate), "" if tau is None else repr(tau.max)])
    evaluation._write_csv(args.outdir / "chains.csv", ["spectrum", "acceptance_rate", "tau_max"], summary)
    _echo(args.outdir / "effective_config.txt", args)
    print(f"wrote {n} chains to {args.outdir}")


def cmd_evaluate(args, extra):
    _reject(extra)
    for path in args.compare:
        if not path.is_file():
            raise UsageError(f"checkpoint not found: {path}")
    net, ds = _load_model(args.model), _load_dataset(args.data)
    draws = pipeline.infer(net, ds, args.draws, args.seed, args.workers)
    others = {p.stem: pipeline.infer(_load_model(p), ds, args.draws, args.seed, args.workers)
              for p in args.compare}
    report = pipeline.evaluate(draws, ds, args.seed, others)
    evaluation.emit_artifacts(report, args.outdir, parts=("pcc", "pgstat", "scatter"))
    _echo(args.outdir / "effective_config.txt", args)
    for name, value in report.pcc.items():
        print(f"pcc {name}: {value:.4f}")
    for name, value in report.pgstat.items():
        print(f"median reduced pgstat {name}: {value:.4f}")


def cmd_coverage(args, extra):
    _reject(extra)
    levels = np.asarray(args.levels, dtype=float)
    if np.any((levels <= 0) | (levels >= 1)):
        raise UsageError("--levels must lie strictly between 0 and 1")
    need = evaluation.min_draws(levels.max())
    if args.draws < need:
        raise UsageError(f"level {levels.max():g} needs at least {need} draws")
    net, ds = _load_model(args.model), _load_dataset(args.data)
    draws = pipeline.infer(net, ds, args.draws, args.seed, args.workers)
    report = pipeline.coverage_report(draws, ds, levels)
    evaluation.emit_artifacts(report, args.outdir, parts=("coverage",))
    _echo(args.outdir / "coverage_config.txt", args)
    for g, c in zip(report.coverage.levels, report.coverage.coverage):
        print(f"level {g:.2f}: coverage {c:.3f}")


def cmd_benchmark(args, extra):
    _reject(extra)
    if not 0 <= args.burn_in < args.chain_length:
        raise UsageError("--burn-in must satisfy 0 <= burn-in < chain-length")
    net, ds = _load_model(args.model), _load_dataset(args.data)
    n = min(args.spectra, len(ds))
    sub = ds.subset(np.arange(n))
    x = pipeline.batch_for(net, sub).x
    counts = pipeline.observed_counts(sub, args.seed)
    res = evaluation.benchmark(net, x, counts, dataset.response_of(ds), n_fit=args.fits,
                               chain_length=args.chain_length, burn_in=args.burn_in,
                               seed=args.seed, exposures=pipeline.exposures_of(sub))
    report = evaluation.EvalReport(timing=res.table())
    evaluation.emit_artifacts(report, args.outdir, parts=("timing",))
    speed = res.speedups()
    (args.outdir / "speedup.json").write_text(json.dumps(
        {"speedup_single": speed.get("single"), "speedup_posterior": speed.get("posterior"),
         "tau": res.tau, "encoded_rows": {str(k): v for k, v in res.encoded_rows.items()},
         "n_spectra": res.n_spectra}, indent=2, sort_keys=True) + "\n")
    _echo(args.outdir / "benchmark_config.txt", args)
    for name, sec in res.table():
        print(f"{name}: {sec:.6g} s")
    for name, ratio in speed.items():
        print(f"speedup {name}: {ratio:.1f}x")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "mcmc": cmd_mcmc,
    "evaluate": cmd_evaluate,
    "coverage": cmd_coverage,
    "benchmark": cmd_benchmark,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        sub = parser._subparsers._group_actions[0].choices[args.command]
        extra = _merge_config(args, {a.dest: a for a in sub._actions})
        sub.check_needed(args)
        if args.seed is None:
            args.seed = _default_seed()
        COMMANDS[args.command](args, extra)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StagePrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
