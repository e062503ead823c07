"""Loss assembly and the three-stage training loop."""
from __future__ import annotations

import csv
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from ..autodiff import SchedulerState, adamw_step, no_grad, plateau_step
from ..autodiff import tensor as T
from .losses import flow_nll, gaussian_nll, latent_mse

PREREQUISITE = {"synthetic": "decoder", "real": "synthetic"}


class TrainingError(RuntimeError):
    pass


class StagePrerequisiteError(RuntimeError):
    pass


class FrozenWeightError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_rec: float
    loss_lat: float
    loss_nf: float
    val_total: float
    val_rec: float
    val_lat: float
    val_nf: float
    wall_time: float


CSV_COLUMNS = [f.name for f in fields(EpochRecord) if f.name != "wall_time"]


@dataclass
class TrainLog:
    rows: list
    stopped_early: bool = False

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch] + [repr(float(v)) for v in astuple(r)[1:-1]])

    def deterministic_rows(self):
        return [astuple(r)[:-1] for r in self.rows]


@dataclass
class LossTerms:
    total: T.DiffArray
    rec: float
    lat: float
    nf: float


def compute_losses(net, cfg, x, sigma, theta, noise):
    """All loss terms for one batch; ``noise`` is (batch * latent_draws, dim)."""
    w_rec, w_lat, w_nf = cfg.weights
    if cfg.stage == "decoder":
        rec = gaussian_nll(net.decoder(theta), x, sigma)
        return LossTerms(rec, rec.item(), 0.0, 0.0)

    ctx = net.encoder(x)
    nf = flow_nll(net.flow, theta, ctx)
    total = w_nf * nf
    lat_v = rec_v = 0.0
    use_rec = w_rec > 0 and net.decoder is not None and not cfg.decoder_free
    if w_lat > 0 or use_rec:
        reps = cfg.latent_draws
        ctx_rep = ctx if reps == 1 else T.getitem(ctx, np.repeat(np.arange(x.shape[0]), reps))
        theta_rep = np.repeat(theta, reps, axis=0)
        draws, _ = net.flow.transform_noise(noise, ctx_rep)
        lat = latent_mse(draws, theta_rep)
        total = total + w_lat * lat
        lat_v = lat.item()
        if use_rec:
            rec = gaussian_nll(net.decoder(draws), np.repeat(x, reps, axis=0),
                               np.repeat(sigma, reps, axis=0))
            total = total + w_rec * rec
            rec_v = rec.item()
    return LossTerms(total, rec_v, lat_v, nf.item())


def _set_trainable(net, stage):
    store = net.store
    if stage == "decoder":
        store.freeze("encoder.")
        store.freeze("flow.")
        store.unfreeze("decoder.")
    else:
        store.unfreeze("encoder.")
        store.unfreeze("flow.")
        store.freeze("decoder.")


def _check_prerequisites(net, cfg):
    if cfg.stage == "decoder":
        if net.decoder is None:
            raise StagePrerequisiteError("stage prerequisite: decoder stage needs a decoder")
        return
    if cfg.decoder_free or net.decoder is None:
        if cfg.stage == "real" and "synthetic" not in net.stages_done:
            raise StagePrerequisiteError("stage prerequisite: 'real' needs a completed 'synthetic' stage")
        return
    need = PREREQUISITE[cfg.stage]
    if need not in net.stages_done:
        raise StagePrerequisiteError(f"stage prerequisite: {cfg.stage!r} needs a completed {need!r} stage")


def evaluate_losses(net, cfg, data, seed, chunk=500):
    """Validation losses with fixed noise; no graph is built."""
    n = len(data.theta)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 99]))
    noise = rng.standard_normal((n * cfg.latent_draws, net.cfg.n_params))
    sums = np.zeros(4)
    with no_grad():
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            terms = compute_losses(net, cfg, data.x[s:e], data.sigma[s:e], data.theta[s:e],
                                   noise[s * cfg.latent_draws:e * cfg.latent_draws])
            sums += (e - s) * np.array([terms.total.item(), terms.rec, terms.lat, terms.nf])
    return sums / n


def run_stage(cfg, net, train, val, progress=None):
    """Train one stage in place; returns the epoch log.

    ``train``/``val`` are :class:`NormalizedBatch` objects. Early stopping
    watches the validation total loss over a trailing window of epochs.
    """
    _check_prerequisites(net, cfg)
    _set_trainable(net, cfg.stage)
    frozen_sum = net.store.checksum("decoder.") if cfg.stage != "decoder" else None

    sched = SchedulerState(lr=cfg.initial_lr, initial_lr=cfg.initial_lr, patience=cfg.sched_patience,
                           factor=cfg.sched_factor, floor=min(cfg.min_lr, cfg.initial_lr),
                           threshold=cfg.sched_threshold)
    n = len(train.theta)
    dim = net.cfg.n_params
    rows = []
    best, best_epoch = np.inf, 0
    stopped = False
    t0 = time.perf_counter()
    stage_id = ("decoder", "synthetic", "real").index(cfg.stage)
    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), stage_id, epoch]))
        order = rng.permutation(n)
        sums = np.zeros(4)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            noise = rng.standard_normal((len(idx) * cfg.latent_draws, dim))
            net.store.zero_grad()
            terms = compute_losses(net, cfg, train.x[idx], train.sigma[idx], train.theta[idx], noise)
            loss = terms.total.item()
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            terms.total.backward()
            adamw_step(net.store, sched.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            sums += len(idx) * np.array([loss, terms.rec, terms.lat, terms.nf])
        tr = sums / n
        va = evaluate_losses(net, cfg, val, cfg.seed)
        rows.append(EpochRecord(epoch, sched.lr, *tr, *va, time.perf_counter() - t0))
        if progress is not None:
            progress(rows[-1])
        if not np.isfinite(va[0]):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        sched = plateau_step(sched, va[0])
        if va[0] < best - cfg.early_stop_threshold * abs(best) or best == np.inf:
            best, best_epoch = va[0], epoch
        elif epoch - best_epoch >= cfg.plateau_window:
            stopped = True
            break

    if frozen_sum is not None and net.store.checksum("decoder.") != frozen_sum:
        raise FrozenWeightError("decoder weights changed during a frozen-decoder stage")
    if cfg.stage not in net.stages_done:
        net.stages_done.append(cfg.stage)
    return TrainLog(rows, stopped)
