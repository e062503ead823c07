import warnings

import numpy as np
import pytest

from fspnet.dataset import (
    DEFAULT_PRIOR,
    BadMagicError,
    ClampCounter,
    Normalization,
    PriorBox,
    TruncatedError,
    VersionMismatchError,
    dumps,
    export_params_csv,
    generate_dataset,
    header_size,
    load_dataset,
    loads,
    params_to_unit,
    preprocess,
    row_seed,
    sample_prior,
    save_dataset,
    split,
    unit_to_params,
    unpreprocess,
)
from fspnet.physics import EnergyGrid, ResponseModel, forward_model


@pytest.fixture(scope="module")
def small():
    return generate_dataset(DEFAULT_PRIOR, 12, EnergyGrid(32), seed=4)


# -- prior ---------------------------------------------------------------------------------
def test_prior_box_validation():
    with pytest.raises(ValueError):
        PriorBox(("a",), (1.0,), (1.0,), (False,))
    with pytest.raises(ValueError):
        PriorBox(("a",), (0.0,), (1.0,), (True,))


def test_degenerate_box_containment():
    box = PriorBox(("a",), (1.0,), (1.0 + 1e-12,), (False,))
    draws = sample_prior(box, 1000, 0)
    assert np.all((draws >= 1.0) & (draws <= 1.0 + 1e-12))


def test_log_uniform_median():
    box = PriorBox(("N",), (10.0,), (1e5,), (True,))
    d = np.log(sample_prior(box, 100_000, 1)[:, 0])
    # the median of log N is normal with sd = (range / 2) / sqrt(n) for a uniform law
    se = 0.5 * (np.log(1e5) - np.log(10.0)) / np.sqrt(100_000)
    assert abs(np.median(d) - np.log(1e3)) < 3 * se


def test_prior_determinism_and_bounds():
    a = sample_prior(DEFAULT_PRIOR, 500, 3)
    np.testing.assert_array_equal(a, sample_prior(DEFAULT_PRIOR, 500, 3))
    assert np.all(a >= np.array(DEFAULT_PRIOR.lower)) and np.all(a <= np.array(DEFAULT_PRIOR.upper))
    with pytest.raises(ValueError):
        sample_prior(DEFAULT_PRIOR, 0, 3)


# -- unit coordinates ----------------------------------------------------------------------------
def test_unit_endpoints_and_midpoint():
    lo, hi = np.array(DEFAULT_PRIOR.lower), np.array(DEFAULT_PRIOR.upper)
    np.testing.assert_allclose(params_to_unit(lo), -1.0, atol=1e-15)
    np.testing.assert_allclose(params_to_unit(hi), 1.0, atol=1e-15)
    mid = np.where(DEFAULT_PRIOR.log_scale, np.sqrt(lo * hi), 0.5 * (lo + hi))
    np.testing.assert_allclose(params_to_unit(mid), 0.0, atol=1e-14)


def test_unit_round_trip(rng):
    p = sample_prior(DEFAULT_PRIOR, 1000, rng)
    back = unit_to_params(params_to_unit(p))
    assert np.max(np.abs(back / p - 1.0)) < 1e-12


def test_unit_monotone():
    lo, hi = np.array(DEFAULT_PRIOR.lower), np.array(DEFAULT_PRIOR.upper)
    t = np.linspace(0, 1, 50)[:, None]
    path = lo + t * (hi - lo)
    assert np.all(np.diff(params_to_unit(path), axis=0) > 0)


def test_out_of_box_is_clamped():
    before = ClampCounter.count
    p = np.array([[5.0, 1e6, 2.0, 0.5, 1.0]])
    with pytest.warns(UserWarning, match="clamped"):
        u = params_to_unit(p)
    assert u[0, 0] == 1.0 and u[0, 1] == 1.0
    assert ClampCounter.count == before + 2


# -- preprocessing ---------------------------------------------------------------------------
def test_preprocess_centering_and_floor():
    norm = Normalization(2.0, 1.0)
    x, _ = preprocess(np.full(5, 100.0), np.ones(5), norm)
    np.testing.assert_array_equal(x, 0.0)
    x, s = preprocess(np.array([0.0, 1.0]), np.array([1.0, 1.0]), norm)
    assert x[0] == pytest.approx(-3.0) and np.all(np.isfinite(s))


def test_preprocess_round_trip(rng):
    counts = rng.uniform(0.2, 1e6, 200)
    norm = Normalization(3.1, 0.7)
    x, sigma = preprocess(counts, np.sqrt(counts), norm)
    assert np.max(np.abs(unpreprocess(x, norm) / counts - 1.0)) < 1e-10
    np.testing.assert_allclose(sigma, np.sqrt(counts) / (counts * np.log(10) * 0.7))


# -- generation ---------------------------------------------------------------------------------
def test_single_row_matches_forward_model():
    grid = EnergyGrid(32)
    ds = generate_dataset(DEFAULT_PRIOR, 1, grid, seed=9, noisy=True)
    rng = np.random.default_rng(row_seed(9, 0))
    spec = forward_model(ds.params[0], ResponseModel(grid), noisy=True, seed=rng)
    np.testing.assert_array_equal(ds.counts[0], spec.counts)


def test_parallel_matches_serial():
    grid = EnergyGrid(32)
    a = generate_dataset(DEFAULT_PRIOR, 20, grid, noisy=True, seed=2, workers=1)
    b = generate_dataset(DEFAULT_PRIOR, 20, grid, noisy=True, seed=2, workers=3)
    assert dumps(a) == dumps(b)


def test_exposure_range():
    ds = generate_dataset(DEFAULT_PRIOR, 6, EnergyGrid(16), noisy=True, seed=1, exposure_range=(50, 500))
    assert np.all((ds.exposures >= 50) & (ds.exposures <= 500))
    assert ds.exposure(2) == ds.exposures[2]


def test_split_partition(small):
    ds = small.subset(np.arange(10))
    tr, va = split(ds, 0.8, seed=1)
    assert len(tr) == 8 and len(va) == 2
    rows = np.concatenate([tr.params, va.params])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, ds.params))
    tr2, va2 = split(ds, 0.8, seed=1)
    np.testing.assert_array_equal(va.params, va2.params)
    with pytest.raises(ValueError):
        split(ds, 1.0)


def test_split_norm_from_train_only(small):
    tr, va = split(small, 0.75, seed=0)
    assert tr.norm == Normalization.fit(tr.counts)
    assert va.norm == tr.norm
    b = va.normalized()
    assert np.all(np.isfinite(b.x)) and np.all(np.isfinite(b.sigma))


# -- files ----------------------------------------------------------------------------------------
def test_save_load_round_trip(tmp_path, small):
    path = tmp_path / "a.fspn"
    save_dataset(path, small)
    back = load_dataset(path)
    save_dataset(tmp_path / "b.fspn", back)
    assert (tmp_path / "a.fspn").read_bytes() == (tmp_path / "b.fspn").read_bytes()
    np.testing.assert_array_equal(back.params, small.params)


def test_file_size_arithmetic(small):
    n, bins = small.counts.shape
    assert len(dumps(small)) == header_size(small) + 2 * n * bins * 4 + n * 5 * 8


def test_format_errors(small):
    blob = dumps(small)
    with pytest.raises(BadMagicError, match="bad magic"):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatchError):
        loads(blob[:4] + (7).to_bytes(4, "little") + blob[8:])
    with pytest.raises(TruncatedError):
        loads(blob[:-10])


def test_params_csv(tmp_path, small):
    path = tmp_path / "p.csv"
    export_params_csv(path, small.params)
    lines = path.read_text().splitlines()
    assert lines[0] == "kT,N,gamma,fsc,nH"
    np.testing.assert_array_equal(np.loadtxt(path, delimiter=",", skiprows=1), small.params)


def test_in_box_values_do_not_warn(small):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        small.normalized()
