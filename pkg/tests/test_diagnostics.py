import math

import numpy as np
import pytest

from pdjump import SimConfig
from pdjump.core import inhomogeneous_from_limit
from pdjump.diagnostics import (EmpiricalLaw, GapCurve, NonStationaryError, SampleSizeError, dF_estimate,
                                default_bins, equilibrium_gap, mean_field_gap, permutation_tv_test, pi_reference,
                                pseudotrajectory_gap, tv_estimate, two_start_gap)
from pdjump.generator import make_dictionary
from pdjump.models import HawkesParams, make_hawkes_limit, make_hawkes_system
from pdjump.rng import chunk_rng

import oracles
from conftest import col, limit_1d


def _ou():
    return limit_1d(drift=lambda x: -x, sigma=1.0)


# -- total variation -------------------------------------------------------------


def test_identical_samples_have_zero_tv():
    a = chunk_rng(0).normal(size=2000)
    est = tv_estimate(a, a.copy())
    assert est.value == 0.0 and est.ci_lo == 0.0


def test_disjoint_supports_have_unit_tv():
    rng = chunk_rng(1)
    est = tv_estimate(rng.uniform(0, 1, 1000), rng.uniform(2, 3, 1000))
    assert est.value == 1.0 and est.ci_lo <= 1.0 <= est.ci_hi


def test_gaussian_shift_tv_matches_closed_form():
    rng = chunk_rng(2)
    ref = oracles.gaussian_tv(1.0)
    assert ref == pytest.approx(0.3829, abs=1e-4)
    est = tv_estimate(rng.normal(size=100_000), rng.normal(1.0, 1.0, size=100_000), seed=0)
    assert est.ci_lo <= ref <= est.ci_hi


def test_small_samples_are_refused():
    with pytest.raises(SampleSizeError):
        tv_estimate(np.zeros(99), np.zeros(500))


def test_default_bin_count():
    assert default_bins(1000) == 10
    assert default_bins(10 ** 6) == 32


def test_weighted_law_changes_tv():
    x = np.concatenate([np.zeros(500), np.ones(500)])
    w = np.concatenate([np.full(500, 3.0), np.ones(500)])
    est = tv_estimate(EmpiricalLaw(x, weights=w), x)
    assert est.value == pytest.approx(0.25)


def test_permutation_test_separates_shifted_samples():
    rng = chunk_rng(3)
    assert permutation_tv_test(rng.normal(size=2000), rng.normal(size=2000)) > 0.01
    assert permutation_tv_test(rng.normal(size=2000), rng.normal(0.5, 1, size=2000)) < 0.01


# -- dictionary distance -------------------------------------------------------------


def test_same_law_same_seed_has_zero_dF():
    a = chunk_rng(4).normal(size=1000)
    assert dF_estimate(a, a.copy()).value == 0.0


@pytest.mark.parametrize("h", [0.5, 0.05, 0.001])
def test_point_masses_are_within_their_distance(h):
    dic = make_dictionary(1, ([-1.0], [1.0]), size=64)
    est = dF_estimate(np.zeros(200), np.full(200, h), dic)
    assert 0 < est.value <= h


def test_dictionary_distance_is_below_tv():
    rng = chunk_rng(5)
    a, b = rng.normal(size=20_000), rng.normal(1.0, 1.0, size=20_000)
    tv, dF = tv_estimate(a, b), dF_estimate(a, b)
    assert dF.value <= tv.value + (tv.ci_hi - tv.value) + (dF.ci_hi - dF.value)


def test_paired_estimate_needs_equal_sizes():
    with pytest.raises(ValueError):
        dF_estimate(np.zeros(10), np.zeros(11), paired=True)


def test_thin_samples_get_a_usable_dictionary():
    # nearly constant second coordinate: the dictionary box is widened instead of collapsing
    rng = chunk_rng(6)
    a = np.column_stack([rng.normal(size=500), np.full(500, 0.3)])
    b = np.column_stack([rng.normal(0.5, 1, size=500), np.full(500, 0.3)])
    assert dF_estimate(a, b).value > 0.01


# -- gap curves ---------------------------------------------------------------------


def test_gap_curve_helpers(tmp_path):
    x = np.array([1.0, 2.0, 4.0])
    curve = GapCurve(x, x ** -2.0, x ** -2.0 * 0.9, x ** -2.0 * 1.1, "tv_binned")
    assert curve.strictly_decreasing()
    assert curve.decay_exponent() == pytest.approx(2.0)
    curve.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "x,gap,ci_lo,ci_hi,estimator" and len(lines) == 4
    overlapping = GapCurve(x, [0.5, 0.4, 0.3], [0.3, 0.3, 0.2], [0.6, 0.5, 0.4], "tv_binned")
    assert not overlapping.strictly_decreasing()


def test_envelope_constant_is_tight():
    r, T = 0.5, 2.0
    x = np.array([1.0, 2.0, 3.0])
    shape = (np.exp(-r * x) - np.exp(-r * (x + T))) / r
    curve = GapCurve(x, 3.0 * shape, 3.0 * shape, 3.0 * shape, "dF_dictionary")
    assert curve.envelope_constant(r, T) == pytest.approx(3.0)


def test_pseudotrajectory_of_a_limit_against_itself_is_exactly_zero(cir):
    _, _, lim = cir
    curve = pseudotrajectory_gap(inhomogeneous_from_limit(lim), lim, [1.0], [0.5, 1.0], T=0.5, s_grid=[0.25, 0.5],
                                 config=SimConfig(dt=0.05, n_paths=300, seed=3))
    assert np.all(curve.gap == 0.0) and np.all(curve.ci_hi == 0.0)


def test_confidence_intervals_contain_the_estimates():
    ou = _ou()
    curve = two_start_gap(ou, [3.0], [-1.0], [0.5, 1.0, 2.0], SimConfig(dt=0.05, n_paths=4000, seed=1))
    assert np.all(curve.ci_lo <= curve.gap) and np.all(curve.gap <= curve.ci_hi)
    assert curve.strictly_decreasing()


# -- equilibrium ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def ou_reference():
    return pi_reference(_ou(), [0.0], SimConfig(dt=0.05, n_paths=8000, seed=2), burn_in=5.0)


def test_reference_passes_its_self_test_and_has_the_stationary_variance(ou_reference):
    s = ou_reference.samples[:, 0]
    assert ou_reference.meta["self_test_p"] >= 0.01
    assert abs(s.var() - 0.5) <= 3 * 0.5 * math.sqrt(2 / s.size) + 0.02   # Euler bias at dt = 0.05


def test_starting_from_the_reference_gives_zero_gap(ou_reference):
    curve = equilibrium_gap(_ou(), ou_reference, [0.0], ou_reference,
                            SimConfig(dt=0.05, n_paths=len(ou_reference), seed=5))
    assert curve.gap[0] == 0.0


def test_nonstationary_reference_is_rejected():
    drifting = limit_1d(drift=lambda x: np.ones_like(x), sigma=0.1)
    with pytest.raises(NonStationaryError):
        pi_reference(drifting, [0.0], SimConfig(dt=0.1, n_paths=2000), burn_in=4.0)


def test_equilibrium_gap_decays_and_is_stable_under_longer_burn_in(ou_reference):
    ou = _ou()
    cfg = SimConfig(dt=0.05, n_paths=8000, seed=7)
    curve = equilibrium_gap(ou, [4.0], [0.5, 1.0, 2.0], ou_reference, cfg)
    assert curve.strictly_decreasing()
    assert curve.meta["decay_exponent"] > 0
    longer = pi_reference(ou, [0.0], SimConfig(dt=0.05, n_paths=8000, seed=9), burn_in=10.0)
    again = equilibrium_gap(ou, [4.0], [0.5, 1.0, 2.0], longer, cfg)
    width = (curve.ci_hi - curve.ci_lo) + (again.ci_hi - again.ci_lo)
    assert np.all(np.abs(curve.gap - again.gap) <= width)


def test_dictionary_estimator_for_equilibrium(ou_reference):
    curve = equilibrium_gap(_ou(), [2.0], [0.5, 2.0], ou_reference, SimConfig(dt=0.05, n_paths=4000, seed=3),
                            estimator="dF", dictionary=make_dictionary(1, ([-2.0], [3.0]), size=16))
    assert curve.estimator == "dF_dictionary"
    assert curve.gap[0] > curve.gap[1]


def test_observation_times_must_sit_on_the_grid(ou_reference):
    with pytest.raises(ValueError, match="multiples"):
        equilibrium_gap(_ou(), [1.0], [0.33], ou_reference, SimConfig(dt=0.05, n_paths=200))


# -- mean field ------------------------------------------------------------------------


def test_mean_field_curve_is_indexed_by_N():
    p = HawkesParams(c=5.0, alpha=0.5, b=3.0)
    systems = [make_hawkes_system(HawkesParams(N=n, c=5.0, alpha=0.5, b=3.0)) for n in (10, 40)]
    curve = mean_field_gap(systems, make_hawkes_limit(p), [0.5, 1.0], T=1.0, n_paths=2000, dt=0.01, seed=1)
    assert curve.x.tolist() == [10.0, 40.0]
    assert np.all(curve.gap >= 0)
