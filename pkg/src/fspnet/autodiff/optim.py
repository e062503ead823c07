"""Named parameter collection, AdamW and reduce-on-plateau scheduling."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import DiffArray


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Ordered mapping of dotted names to trainable leaves plus AdamW moments."""

    def __init__(self):
        self._params = {}
        self._state = {}

    def add(self, name, values):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = DiffArray(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = p
        self._state[name] = AdamState(np.zeros_like(p.values), np.zeros_like(p.values))
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def items(self, prefix=""):
        return [(n, p) for n, p in self._params.items() if n.startswith(prefix)]

    def state(self, name):
        return self._state[name]

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def freeze(self, prefix):
        for _, p in self.items(prefix):
            p.set_requires_grad(False)

    def unfreeze(self, prefix):
        for _, p in self.items(prefix):
            p.set_requires_grad(True)

    def trainable(self):
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def checksum(self, prefix=""):
        h = hashlib.sha256()
        for name, p in self.items(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()

    def as_arrays(self):
        return {n: p.values.copy() for n, p in self._params.items()}

    def load_arrays(self, arrays, strict=True):
        for name, values in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            target = self._params[name]
            if target.shape != np.shape(values):
                raise ValueError(f"{name}: shape {np.shape(values)} != {target.shape}")
            target.values[...] = values


@dataclass
class StepDiagnostics:
    updated: int = 0
    skipped_nonfinite: list = field(default_factory=list)


def adamw_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
    """One AdamW update of every trainable entry, in place.

    Decoupled decay is applied to the weights before the moment update.
    Entries with non-finite gradients are left untouched and reported.
    """
    diag = StepDiagnostics()
    for name, p in store.trainable():
        g = p.grad
        if not np.all(np.isfinite(g)):
            diag.skipped_nonfinite.append(name)
            continue
        st = store.state(name)
        p.values *= 1.0 - lr * weight_decay
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        m_hat = st.m / (1.0 - beta1**st.step)
        v_hat = st.v / (1.0 - beta2**st.step)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
        diag.updated += 1
    return diag


@dataclass(frozen=True)
class SchedulerState:
    lr: float
    initial_lr: float
    best: float = float("inf")
    bad_epochs: int = 0
    patience: int = 10
    factor: float = 0.5
    floor: float = 1e-6
    threshold: float = 1e-4


def plateau_step(s, epoch_metric):
    """Advance the scheduler by one epoch; returns the new state."""
    if not np.isfinite(epoch_metric):
        raise ValueError(f"plateau_step needs a finite metric, got {epoch_metric}")
    if s.best == float("inf") or epoch_metric < s.best - s.threshold * abs(s.best):
        return replace(s, best=float(epoch_metric), bad_epochs=0)
    bad = s.bad_epochs + 1
    if bad >= s.patience:
        return replace(s, lr=max(s.lr * s.factor, s.floor), bad_epochs=0)
    return replace(s, bad_epochs=bad)
