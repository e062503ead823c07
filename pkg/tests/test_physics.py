import numpy as np
import pytest

from fspnet.physics import (
    EnergyGrid,
    ModelError,
    PhysParams,
    ResponseModel,
    absorb,
    apply_response,
    diskbb_flux,
    expected_counts,
    forward_model,
    scatter_matrix,
    simpl_comptonize,
    source_flux,
    transmission,
)

P0 = PhysParams(kT=1.0, N=100.0, gamma=2.2, fsc=0.3, nH=0.5)


@pytest.fixture(scope="module")
def grid():
    return EnergyGrid(240)


@pytest.fixture(scope="module")
def response(grid):
    return ResponseModel(grid)


def test_grid_layout(grid):
    e = grid.edges
    assert e.size == 241
    assert e[0] == 0.3 and e[-1] == 10.0
    assert np.all(np.diff(e) > 0)
    ratios = e[1:] / e[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)
    assert grid.ext_edges[-1] >= 100.0
    np.testing.assert_array_equal(grid.ext_edges[:241], e)


def test_grid_rejects_tiny():
    with pytest.raises(ValueError):
        EnergyGrid(1)


# -- disk ------------------------------------------------------------------------------
def test_disk_normalization_and_linearity():
    assert diskbb_flux(np.array(1.0), 1.0, 1.0) == pytest.approx(1.0, rel=1e-14)
    E = np.geomspace(0.3, 20, 50)
    np.testing.assert_array_equal(diskbb_flux(E, 0.7, 0.0), 0.0)
    np.testing.assert_array_equal(diskbb_flux(E, 0.7, 2.0), 2.0 * diskbb_flux(E, 0.7, 1.0))


def _dense_disk(E, kT, n=10**6):
    x = np.linspace(0.05, 1.0, n)
    f = x ** (-11.0 / 3.0) * E**2 / np.expm1(E / (kT * x))
    return np.trapezoid(f, x)


def test_disk_matches_dense_quadrature():
    ratio = diskbb_flux(np.array(2.0), 1.0, 1.0) / diskbb_flux(np.array(1.0), 1.0, 1.0)
    oracle = _dense_disk(2.0, 1.0) / _dense_disk(1.0, 1.0)
    assert abs(ratio / oracle - 1.0) < 1e-6


def test_disk_overflow_guard():
    out = diskbb_flux(np.array([50.0, 90.0]), 0.1, 1.0)
    assert np.all(np.isfinite(out)) and out[1] == 0.0


def test_disk_rejects_bad_inputs():
    with pytest.raises(ModelError, match="diskbb"):
        diskbb_flux(np.array(1.0), -1.0, 1.0)


# -- comptonization ---------------------------------------------------------------------
def test_no_scattering_is_identity(grid, rng):
    seed = rng.random(grid.n_ext)
    np.testing.assert_array_equal(simpl_comptonize(seed, 2.0, 0.0, grid.ext_edges), seed)


@pytest.mark.parametrize("gamma", [1.5, 2.0, 2.7, 3.5])
def test_photon_number_conserved(grid, gamma):
    seed = diskbb_flux(grid.ext_centers, 0.8, 1.0)
    out = simpl_comptonize(seed, gamma, 0.6, grid.ext_edges)
    w = grid.ext_widths
    assert abs((out * w).sum() / (seed * w).sum() - 1.0) < 1e-3


def test_scatter_columns_stochastic(grid):
    S = scatter_matrix(grid.ext_edges, 2.4)
    np.testing.assert_allclose(S.sum(axis=0), 1.0, rtol=1e-12)
    assert np.all(np.triu(S, 1) == 0.0)  # only up-scattering


def test_monochromatic_power_law_slope(grid):
    j = 40
    seed = np.zeros(grid.n_ext)
    seed[j] = 1.0
    gamma = 2.3
    out = simpl_comptonize(seed, gamma, 1.0, grid.ext_edges)
    E = grid.ext_centers
    sel = slice(j + 5, j + 200)
    slope = np.polyfit(np.log(E[sel]), np.log(out[sel]), 1)[0]
    assert abs(slope + gamma) < 0.01


def test_simpl_contract_violations(grid):
    with pytest.raises(ModelError, match="simpl"):
        simpl_comptonize(np.ones(grid.n_ext), 1.0, 0.5, grid.ext_edges)
    with pytest.raises(ModelError):
        simpl_comptonize(np.ones(grid.n_ext), 2.0, 1.5, grid.ext_edges)


# -- absorption ----------------------------------------------------------------------------
def test_absorption_values():
    E = np.geomspace(0.3, 10, 30)
    np.testing.assert_array_equal(transmission(E, 0.0), 1.0)
    assert transmission(1.0, 1.0) == pytest.approx(np.exp(-0.23), rel=1e-15)
    assert transmission(1.0, 1.0) == pytest.approx(0.7945, abs=1e-4)
    assert np.all(np.diff(transmission(E, 0.5)) > 0)
    assert transmission(2.0, 1.0) < transmission(2.0, 0.5)


def test_absorption_composes(rng):
    E = np.geomspace(0.3, 10, 30)
    f = rng.random(30)
    np.testing.assert_allclose(absorb(absorb(f, 0.3, E), 0.9, E), absorb(f, 1.2, E), rtol=1e-14)
    with pytest.raises(ModelError):
        transmission(E, -1.0)


# -- response ---------------------------------------------------------------------------------
def test_response_null_and_transparent(grid, response, rng):
    assert np.all(apply_response(np.zeros(grid.n_ext), response) == 0.0)
    flux = rng.random(grid.n_ext)
    t = ResponseModel.transparent(grid)
    np.testing.assert_allclose(apply_response(flux, t), flux[:grid.n_bins] * grid.ext_widths[:grid.n_bins])


def test_response_truncation_bound(grid, response, rng):
    flux = rng.random(grid.n_ext)
    total = apply_response(flux, response).sum()
    assert total <= response.exposure * np.sum(response.area * flux * grid.ext_widths)
    assert np.all(response.redistribution.sum(axis=0) <= 1.0 + 1e-12)
    assert np.all(response.area >= 0)


def test_response_rejects_negative_flux(grid, response):
    with pytest.raises(ModelError, match="response"):
        apply_response(-np.ones(grid.n_ext), response)


def test_response_descriptor_round_trip(response):
    again = ResponseModel.from_descriptor(response.descriptor())
    np.testing.assert_array_equal(again._fold, response._fold)


# -- full model ------------------------------------------------------------------------------
def test_single_component_limit(response, grid):
    p = PhysParams(1.0, 100.0, 2.0, 0.0, 0.0)
    disk = diskbb_flux(grid.ext_centers, 1.0, 100.0)
    np.testing.assert_allclose(expected_counts(p, response), apply_response(disk, response), rtol=1e-14)


def test_noiseless_is_deterministic(response):
    a = forward_model(P0, response)
    b = forward_model(P0, response)
    assert a.counts.tobytes() == b.counts.tobytes()
    assert np.all(a.uncertainty >= 1.0) and a.n_bins == 240


def test_linear_in_normalization(response):
    a = expected_counts(P0, response)
    b = expected_counts(PhysParams(P0.kT, 2 * P0.N, P0.gamma, P0.fsc, P0.nH), response)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-14)


def test_poisson_mean(response):
    p = PhysParams(0.5, 10.0, 2.0, 0.1, 1.0)
    lam = expected_counts(p, response, exposure=1.0)
    rng = np.random.default_rng(7)
    draws = np.array([forward_model(p, response, True, rng, exposure=1.0).counts for _ in range(10_000)])
    outside = np.abs(draws.mean(axis=0) - lam) > 3 * np.sqrt(lam / 1e4)
    # each bin is a 3-sigma test, so about 0.3% of 240 bins may fall outside by chance
    assert outside.sum() <= 3


@pytest.mark.parametrize("index", range(5))
def test_finite_differences_stable(response, index):
    base = P0.to_array()

    def fd(h):
        up, down = base.copy(), base.copy()
        up[index] += h
        down[index] -= h
        return (expected_counts(up, response) - expected_counts(down, response)) / (2 * h)

    h = 1e-3 * base[index]
    a, b = fd(h), fd(h / 2)
    big = np.abs(b) > 1e-6 * np.abs(b).max()
    assert np.all(np.abs(a[big] / b[big] - 1.0) < 0.05)


def test_source_flux_positive(grid):
    assert np.all(source_flux(P0, grid) >= 0)
