import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdjump import InhomogeneousModel, Layer, SimConfig, build_layered_measure, simulate_limit
from pdjump.diagnostics import dF_estimate, tv_estimate
from pdjump.generator import Quadrature, make_dictionary, regime_functionals
from pdjump.models import CirParams, Logistic, cir_band_layers, make_cir_models
from pdjump.rng import chunk_rng

from conftest import col

FAST = settings(max_examples=25, deadline=None)
_CIR = make_cir_models(CirParams(r=0.5))
DICT = make_dictionary(1, ([-3.0], [3.0]), size=32, seed=0)

floats = st.floats(-3.0, 3.0, allow_nan=False)
samples = arrays(float, st.integers(100, 300), elements=floats)


@FAST
@given(samples, samples)
def test_tv_lies_in_the_unit_interval_and_is_symmetric(a, b):
    ab, ba = tv_estimate(a, b, n_boot=20), tv_estimate(b, a, n_boot=20)
    assert 0.0 <= ab.value <= 1.0
    assert math.isclose(ab.value, ba.value, abs_tol=1e-12)


@FAST
@given(samples, samples)
def test_dictionary_distance_is_nonnegative_and_symmetric(a, b):
    ab, ba = dF_estimate(a, b, DICT, n_boot=20), dF_estimate(b, a, DICT, n_boot=20)
    assert ab.value >= 0.0
    assert math.isclose(ab.value, ba.value, abs_tol=1e-12)


@FAST
@given(st.floats(-2.0, 2.0), st.floats(1e-6, 1.0))
def test_point_masses_are_within_their_distance(x, h):
    est = dF_estimate(np.full(10, x), np.full(10, x + h), DICT, n_boot=10)
    assert est.value <= h * (1 + 1e-9)


@FAST
@given(st.floats(0.0, 4.0), st.floats(0.05, 1.0), st.floats(-1.0, 1.0))
def test_cir_bands_partition_their_support(t, r, u):
    p = CirParams(r=r)
    e = math.exp(2 * r * t)
    z = col([u * 2 * e - e])  # uniform over (-3E, E)
    hits = [bool(layer.contains(z, 0.0)[0]) for layer in cir_band_layers(p, t).layers]
    assert sum(hits) == 1


@FAST
@given(st.floats(0.0, 3.0), st.floats(-1.0, 1.0, exclude_min=True, exclude_max=True))
def test_inhomogeneous_cir_layers_partition_their_support(t, u):
    inh = _CIR[0]
    e = math.exp(2 * 0.5 * t)
    z = col([-3 * e + (u + 1) * 2 * e])  # inside (-3E, E)
    hits = [bool(layer.contains(z, t)[0]) for layer in inh.measure.layers]
    assert sum(hits) == 1


@FAST
@given(arrays(float, 4, elements=st.floats(-2.0, 2.0)), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_fast_regime_covariance_is_positive_semidefinite(coef, x1, x2):
    u, v = coef[:2], coef[2:]

    def amplitude(t, z, x):
        return z[:, :1] * u * x[:, :1] + v * x[:, 1:2]

    model = InhomogeneousModel(2, 1, lambda t, x: np.zeros_like(x), amplitude,
                               lambda t, z, x: np.full(z.shape[0], 0.5),
                               build_layered_measure([Layer(lo=-1.0, hi=1.0)], 0.5),
                               regime=lambda t, z: np.ones(z.shape[0], dtype=int))
    a = regime_functionals(model, 0.0, [x1, x2], quad=Quadrature(order=8, panels=2)).a
    np.testing.assert_allclose(a, a.T, atol=1e-12)
    assert np.linalg.eigvalsh(a).min() >= -1e-10


@FAST
@given(st.floats(-50.0, 50.0), st.floats(0.01, 1.0), st.floats(1.0, 5.0))
def test_logistic_stays_within_its_bounds(u, lo, width):
    f = Logistic(lo, lo + width)
    assert lo <= float(f(u)) <= lo + width


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 64))
def test_seeded_runs_reproduce(seed, chunk):
    lim = _CIR[1]
    cfg = SimConfig(dt=0.05, horizon=0.5, n_paths=20, seed=seed, chunk_size=chunk)
    a = simulate_limit(lim, [1.0], cfg).states
    b = simulate_limit(lim, [1.0], cfg).states
    np.testing.assert_array_equal(a, b)


@FAST
@given(st.integers(0, 10_000), st.integers(0, 100))
def test_chunk_streams_are_addressable(seed, chunk):
    np.testing.assert_array_equal(chunk_rng(seed, chunk).uniform(size=4), chunk_rng(seed, chunk).uniform(size=4))

