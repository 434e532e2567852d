import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimc_tile.analysis import (CompensationFactors, ErrorReport, apply_compensation,
                                calibrate_columns, epsilon_metric, identity_mse,
                                term_error_heatmap)
from aimc_tile.errors import DimensionError, UndefinedMetricError

finite = st.floats(-1e3, 1e3, allow_nan=False)


def spread_vector(min_size=3):
    return st.lists(finite, min_size=min_size, max_size=50).filter(
        lambda v: np.std(v) > 1e-3 * max(1.0, np.max(np.abs(v))))


# --- epsilon -----------------------------------------------------------------

def test_epsilon_identity():
    y = np.arange(10.0)
    rep = epsilon_metric(y, y)
    assert rep.epsilon == 0.0 and rep.r_squared == 1.0
    assert (rep.fit_slope, rep.fit_offset, rep.n_points) == (1.0, 0.0, 10)


def test_epsilon_affine_image_is_zero():
    y = np.linspace(-3, 7, 25)
    assert epsilon_metric(2 * y + 5, y).epsilon == pytest.approx(0.0, abs=1e-14)


def test_epsilon_unit_noise_on_spread_ten(rng):
    ideal = rng.normal(0, 10, 5000)
    ideal = 10 * (ideal - ideal.mean()) / ideal.std()
    actual = ideal + rng.standard_normal(5000)
    assert epsilon_metric(actual, ideal).epsilon == pytest.approx(0.10, abs=0.02)


def test_epsilon_reference_values():
    # hand-worked: fit of [0, 2, 1, 4] on [0, 1, 2, 3] gives slope 1.1, offset 0.1,
    # residuals [-0.1, 0.8, -1.3, 0.6]
    rep = epsilon_metric([0, 2, 1, 4], [0, 1, 2, 3])
    assert rep.fit_slope == pytest.approx(1.1)
    assert rep.fit_offset == pytest.approx(0.1)
    resid_std = np.sqrt((0.01 + 0.64 + 1.69 + 0.36) / 4)
    assert rep.epsilon == pytest.approx(resid_std / (1.1 * np.sqrt(1.25)))
    assert rep.r_squared == pytest.approx(1 - 2.7 / 8.75)


def test_epsilon_errors():
    with pytest.raises(UndefinedMetricError):
        epsilon_metric([1, 2, 3], [4, 4, 4])
    with pytest.raises(UndefinedMetricError):
        epsilon_metric([1, 2], [1, 2])
    with pytest.raises(DimensionError):
        epsilon_metric([1, 2, 3], [1, 2, 3, 4])


def test_epsilon_flat_actual_is_infinite():
    assert epsilon_metric([5, 5, 5, 5], [1, 2, 3, 4]).epsilon == np.inf


@given(spread_vector(), st.floats(0.01, 100), finite, st.booleans())
def test_epsilon_affine_invariance(y, a, b, negate):
    y = np.array(y)
    a = -a if negate else a
    assert epsilon_metric(a * y + b, y).epsilon < 1e-6


@given(spread_vector(4), st.randoms())
def test_epsilon_permutation_symmetry(y, rnd):
    y = np.array(y)
    noise = np.cos(np.arange(y.size)) * np.std(y)
    perm = list(range(y.size))
    rnd.shuffle(perm)
    a = epsilon_metric(y + noise, y).epsilon
    b = epsilon_metric((y + noise)[perm], y[perm]).epsilon
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_report_json():
    rep = epsilon_metric([0, 2, 1, 4], [0, 1, 2, 3])
    assert ErrorReport(**json.loads(rep.to_json())) == rep


def test_identity_mse():
    assert identity_mse([1, 2, 3], [1, 2, 5]) == pytest.approx(4 / 3)


# --- heatmaps ----------------------------------------------------------------

def test_heatmap_identical_inputs(rng):
    t = rng.normal(0, 20, 2000)
    hm = term_error_heatmap(t, t)
    zero = hm.error_bin_of(0.0)
    assert hm.counts.sum() == 2000
    assert hm.counts[:, zero].sum() == 2000
    assert hm.counts.shape == (64, 64)


def test_heatmap_constant_bias(rng):
    t = rng.normal(0, 20, 2000)
    hm = term_error_heatmap(t + 0.75, t)
    assert hm.counts[:, hm.error_bin_of(0.75)].sum() == 2000


def test_heatmap_rows_normalised_and_clipped(rng):
    t = rng.normal(0, 1, 5000)
    e = 0.1 * t * rng.standard_normal(5000)
    e[0] = 1e6  # outlier lands in the edge bin
    hm = term_error_heatmap(t + e, t, n_bins=16)
    rows = hm.density.sum(axis=1)
    assert np.allclose(rows[hm.counts.sum(axis=1) > 0], 1.0)
    assert hm.counts.sum() == 5000


def test_heatmap_csv(tmp_path, rng):
    t = rng.normal(0, 1, 500)
    hm = term_error_heatmap(t + 0.01 * rng.standard_normal(500), t, n_bins=4)
    path = tmp_path / "hm.csv"
    hm.to_csv(path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["term_lo", "term_hi", "error_lo", "error_hi", "count", "density"]
    assert len(rows) == 1 + 16
    assert sum(int(r[4]) for r in rows[1:]) == 500


def test_heatmap_length_mismatch():
    with pytest.raises(DimensionError):
        term_error_heatmap([1, 2], [1, 2, 3])


# --- compensation ------------------------------------------------------------

def test_calibrate_identity_and_affine(rng):
    ideal = rng.normal(0, 10, (50, 3))
    f = calibrate_columns(ideal, ideal)
    assert np.allclose(f.scale, 1) and np.allclose(f.shift, 0, atol=1e-12)
    f = calibrate_columns(ideal, 0.5 * ideal - 3)
    assert np.allclose(f.scale, 2) and np.allclose(f.shift, 6)
    assert not f.flagged.any()


def test_calibrate_flags_degenerate_column(rng):
    ideal = rng.normal(0, 1, (20, 2))
    noisy = ideal.copy()
    noisy[:, 1] = 4.0
    f = calibrate_columns(ideal, noisy)
    assert f.flagged.tolist() == [False, True]
    assert (f.scale[1], f.shift[1]) == (1.0, 0.0)


def test_calibrate_errors(rng):
    with pytest.raises(DimensionError):
        calibrate_columns(np.zeros((7, 1)), np.zeros((7, 1)))
    with pytest.raises(DimensionError):
        calibrate_columns(np.zeros((8, 2)), np.zeros((8, 3)))
    with pytest.raises(DimensionError):
        apply_compensation(np.zeros((8, 2)), CompensationFactors.identity(3))


@given(st.integers(0, 2**32 - 1), st.floats(0.2, 3), st.floats(-50, 50))
def test_compensation_properties(seed, gain, bias):
    rng = np.random.default_rng(seed)
    ideal = rng.normal(0, 10, (40, 2))
    noisy = gain * ideal + bias + rng.normal(0, 1, ideal.shape)
    f = calibrate_columns(ideal, noisy)
    out = apply_compensation(noisy, f)
    assert np.allclose(out.mean(axis=0), ideal.mean(axis=0))
    for c in range(2):
        assert identity_mse(out[:, c], ideal[:, c]) <= identity_mse(noisy[:, c], ideal[:, c]) + 1e-9
        before = epsilon_metric(noisy[:, c], ideal[:, c]).epsilon
        after = epsilon_metric(out[:, c], ideal[:, c]).epsilon
        assert after == pytest.approx(before, rel=1e-9)


def test_apply_compensation_vector_and_json():
    f = CompensationFactors(np.array([1.0]), np.array([3.0]), np.array([False]))
    assert apply_compensation([1.0, 2.0], f).tolist() == [4.0, 7.0]
    back = CompensationFactors.from_dict(json.loads(f.to_json()))
    assert back.to_dict() == f.to_dict()
