"""Simplified X-ray continuum model folded through a synthetic response.

Disk blackbody seed photons, photon-conserving up-scattering into a power
law, photoelectric absorption, then Gaussian energy redistribution and an
effective-area curve. Fluxes are photons / s / cm^2 / keV evaluated at log
bin centres; folding multiplies by bin width, area and exposure.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

BAND = (0.3, 10.0)
EXTENDED_MAX = 100.0
PARAM_NAMES = ("kT", "N", "gamma", "fsc", "nH")

DISK_X_MIN = 0.05
DISK_NODES = 64
EXP_CUTOFF = 700.0
ABSORPTION_SIGMA1 = 0.23

DEFAULT_AREA_ANCHORS = ((0.3, 50.0), (0.8, 1400.0), (1.5, 1900.0), (3.0, 1100.0), (6.0, 600.0),
                        (10.0, 300.0))
DEFAULT_SIGMA_COEFF = 0.05
DEFAULT_EXPOSURE = 100.0


class ModelError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class PhysParams:
    kT: float
    N: float
    gamma: float
    fsc: float
    nH: float

    def to_array(self):
        return np.array([self.kT, self.N, self.gamma, self.fsc, self.nH], dtype=float)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class EnergyGrid:
    """Log-uniform instrument grid over the band and its extension to 100 keV.

    The extended grid shares the instrument bin ratio, so its first
    ``n_bins`` bins are exactly the instrument bins.
    """

    n_bins: int = 240
    band: tuple = BAND
    extended_max: float = EXTENDED_MAX

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("need at least two bins")
        lo, hi = self.band
        step = np.log(hi / lo) / self.n_bins
        n_ext = int(np.ceil(np.log(self.extended_max / lo) / step - 1e-9))
        ext = lo * np.exp(step * np.arange(n_ext + 1))
        ext[self.n_bins] = hi
        object.__setattr__(self, "_ext_edges", ext)

    @property
    def edges(self):
        return self._ext_edges[:self.n_bins + 1]

    @property
    def ext_edges(self):
        return self._ext_edges

    @property
    def n_ext(self):
        return self._ext_edges.size - 1

    @property
    def centers(self):
        e = self.edges
        return np.sqrt(e[:-1] * e[1:])

    @property
    def ext_centers(self):
        e = self._ext_edges
        return np.sqrt(e[:-1] * e[1:])

    @property
    def ext_widths(self):
        return np.diff(self._ext_edges)


# -- spectral components ----------------------------------------------------------
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(DISK_NODES)


def _disk_integral(E, kT, x_min=DISK_X_MIN):
    """Integral over x = T/T_in of x^(-11/3) E^2 / (exp(E/(kT x)) - 1), Gauss-Legendre in ln x."""
    E = np.asarray(E, dtype=float)
    a, b = np.log(x_min), 0.0
    u = 0.5 * (b - a) * _GL_NODES + 0.5 * (b + a)
    w = 0.5 * (b - a) * _GL_WEIGHTS
    x = np.exp(u)
    arg = E[..., None] / (kT * x)
    safe = arg <= EXP_CUTOFF
    denom = np.expm1(np.where(safe, arg, 1.0))
    vals = np.where(safe, x ** (-8.0 / 3.0) * E[..., None] ** 2 / denom, 0.0)
    return vals @ w


_DISK_NORM = 1.0 / float(_disk_integral(np.array(1.0), 1.0))


def diskbb_flux(E, kT, N):
    """Multicolour disk photon flux; ``diskbb_flux(1, 1, 1) == 1``."""
    if kT <= 0 or np.any(np.asarray(E) <= 0):
        raise ModelError("diskbb", "energies and kT must be positive")
    return N * (_DISK_NORM * _disk_integral(E, kT))


def scatter_matrix(edges, gamma):
    """Column-stochastic up-scattering matrix on a binned grid.

    Column j holds the fraction of photons from bin j landing in each bin
    i >= j under the kernel (gamma-1) E0^(gamma-1) E^(-gamma), E >= E0,
    with E0 the centre of bin j. Mass beyond the last edge is folded back
    by renormalizing each column, so photon number is conserved on the grid.
    """
    if gamma <= 1:
        raise ModelError("simpl", f"photon index must exceed 1, got {gamma}")
    edges = np.asarray(edges, dtype=float)
    centers = np.sqrt(edges[:-1] * edges[1:])
    lo = np.maximum(edges[:-1][:, None], centers[None, :])
    hi = edges[1:][:, None]
    p = 1.0 - gamma
    mass = np.where(hi > centers[None, :],
                    centers[None, :] ** (gamma - 1.0) * (lo**p - hi**p), 0.0)
    mass = np.maximum(mass, 0.0)
    return mass / mass.sum(axis=0, keepdims=True)


def simpl_comptonize(seed_flux, gamma, fsc, edges):
    """Redistribute a fraction ``fsc`` of seed photons into a power-law tail."""
    if not 0.0 <= fsc <= 1.0:
        raise ModelError("simpl", f"scattered fraction must lie in [0, 1], got {fsc}")
    seed_flux = np.asarray(seed_flux, dtype=float)
    if fsc == 0.0:
        return seed_flux.copy()
    widths = np.diff(edges)
    scattered = scatter_matrix(edges, gamma) @ (seed_flux * widths) / widths
    return (1.0 - fsc) * seed_flux + fsc * scattered


def transmission(E, nH):
    if nH < 0:
        raise ModelError("absorb", f"column density must be non-negative, got {nH}")
    return np.exp(-nH * ABSORPTION_SIGMA1 * np.asarray(E, dtype=float) ** (-8.0 / 3.0))


def absorb(flux, nH, E):
    return np.asarray(flux, dtype=float) * transmission(E, nH)


# -- instrument ---------------------------------------------------------------
def effective_area(E, anchors=DEFAULT_AREA_ANCHORS):
    """Area interpolated linearly in log-energy; flat beyond the outer anchors."""
    a = np.asarray(anchors, dtype=float)
    return np.interp(np.log(E), np.log(a[:, 0]), a[:, 1])


@dataclass
class ResponseModel:
    """Gaussian redistribution + effective area + exposure on a given grid."""

    grid: EnergyGrid
    sigma_coeff: float = DEFAULT_SIGMA_COEFF
    anchors: tuple = DEFAULT_AREA_ANCHORS
    exposure: float = DEFAULT_EXPOSURE
    redistribution: np.ndarray = field(init=False, repr=False)
    area: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.anchors = tuple(tuple(float(v) for v in a) for a in self.anchors)
        e_in = self.grid.ext_centers
        sig = self.sigma_coeff * np.sqrt(e_in)
        out_edges = self.grid.edges
        cdf = special.ndtr((out_edges[:, None] - e_in[None, :]) / sig[None, :])
        self.redistribution = np.diff(cdf, axis=0)
        self.area = effective_area(e_in, self.anchors)
        self._fold = self.redistribution * (self.area * self.grid.ext_widths)[None, :]

    @classmethod
    def transparent(cls, grid, exposure=1.0):
        """Identity redistribution on the instrument bins, unit area."""
        r = cls(grid, exposure=exposure)
        R = np.zeros((grid.n_bins, grid.n_ext))
        R[:, :grid.n_bins] = np.eye(grid.n_bins)
        r.redistribution = R
        r.area = np.ones(grid.n_ext)
        r._fold = R * grid.ext_widths[None, :]
        return r

    def descriptor(self):
        return {"n_bins": self.grid.n_bins, "sigma_coeff": self.sigma_coeff,
                "anchors": [list(a) for a in self.anchors], "exposure": self.exposure}

    @classmethod
    def from_descriptor(cls, d):
        return cls(EnergyGrid(int(d["n_bins"])), float(d["sigma_coeff"]),
                   tuple(tuple(a) for a in d["anchors"]), float(d["exposure"]))


def apply_response(source_flux, response, exposure=None):
    source_flux = np.asarray(source_flux, dtype=float)
    if np.any(source_flux < 0):
        raise ModelError("response", "source flux must be non-negative")
    exposure = response.exposure if exposure is None else exposure
    return exposure * (response._fold @ source_flux)


# -- full model ----------------------------------------------------------------
@dataclass
class Spectrum:
    counts: np.ndarray
    uncertainty: np.ndarray
    exposure: float
    noisy: bool

    @property
    def n_bins(self):
        return self.counts.size


def source_flux(p, grid):
    """Absorbed, Comptonized disk flux on the extended grid."""
    E = grid.ext_centers
    seed = diskbb_flux(E, p.kT, p.N)
    comp = simpl_comptonize(seed, p.gamma, p.fsc, grid.ext_edges)
    return absorb(comp, p.nH, E)


def expected_counts(p, response, exposure=None):
    if isinstance(p, np.ndarray):
        p = PhysParams.from_array(p)
    return apply_response(source_flux(p, response.grid), response, exposure)


def forward_model(p, response, noisy=False, seed=None, exposure=None):
    """Noiseless expected counts or one Poisson realization of them."""
    exposure = response.exposure if exposure is None else float(exposure)
    lam = expected_counts(p, response, exposure)
    if not noisy:
        return Spectrum(lam, np.maximum(np.sqrt(lam), 1.0), exposure, False)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    counts = rng.poisson(lam).astype(float)
    return Spectrum(counts, np.maximum(np.sqrt(counts), 1.0), exposure, True)


def params_dict(p):
    return asdict(p)
