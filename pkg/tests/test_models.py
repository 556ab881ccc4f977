import math

import numpy as np
import pytest
from scipy import integrate, stats

from pdjump import ModelError, SimConfig, simulate_limit
from pdjump.models import (CirParams, HawkesParams, Logistic, hawkes_x2_equilibrium, make_cir_models,
                           make_hawkes_limit, make_hawkes_system, simulate_hawkes_particles)
from pdjump.rng import chunk_rng

import oracles
from conftest import col

# f1 must stay positive, so "no resets" is emulated by a rate that fires with probability ~1e-12
NO_RESET = Logistic(1e-12, 1e-12)


# -- parameters ---------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=-1.0), dict(b=0.0), dict(c=-1.0),
                                dict(f1=Logistic(0.0, 1.0)), dict(eps=-0.1)])
def test_invalid_hawkes_parameters_are_rejected(kw):
    with pytest.raises(ModelError):
        HawkesParams(**kw)


def test_system_needs_two_particles():
    with pytest.raises(ModelError, match="N >= 2"):
        make_hawkes_system(HawkesParams(N=1))


@pytest.mark.parametrize("kw", [dict(a=0.0), dict(r=-0.5), dict(f=Logistic(0.0, 1.0)), dict(M=0.0),
                                dict(layer_ratio=1.0), dict(limit_variance="other")])
def test_invalid_cir_parameters_are_rejected(kw):
    with pytest.raises(ModelError):
        CirParams(**kw)


def test_reset_random_needs_positive_spread():
    with pytest.raises(ModelError):
        make_hawkes_limit(HawkesParams(), "reset_random")
    with pytest.raises(ModelError):
        make_hawkes_limit(HawkesParams(), "bogus")


def test_logistic_derivative_matches_central_difference():
    f = Logistic(0.1, 1.0, shift=0.3, scale=0.7)
    u = np.linspace(-4, 4, 17)
    fd = (f(u + 1e-6) - f(u - 1e-6)) / 2e-6
    np.testing.assert_allclose(f.derivative(u), fd, atol=1e-8)
    assert f.inf == 0.1 and f.sup == 1.0


# -- Hawkes summary chain ------------------------------------------------------------


def test_dominating_rate():
    p = HawkesParams(N=7, f1=Logistic(0.1, 0.4), f2=Logistic(0.2, 0.9))
    assert make_hawkes_system(p).dominating_rate == pytest.approx(6 * 0.9 + 0.4)


def test_flow_between_events_solves_the_linear_ode():
    sysm = make_hawkes_system(HawkesParams(alpha=0.7, b=2.0))
    x = np.array([[0.5, -1.0]])
    out = sysm.flow(x, np.array([1.3]))
    assert out[0, 0] == pytest.approx(oracles.linear_flow(0.5, 0.7, 0.0, 1.3))
    assert out[0, 1] == pytest.approx(oracles.linear_flow(-1.0, 0.7, 2.0, 1.3))


def test_means_without_resets_follow_the_moment_ode():
    p = HawkesParams(N=1000, alpha=1.0, b=1.0, c=1.0, f1=NO_RESET)
    x0, T = [0.2, 0.5], 1.0
    xs = make_hawkes_system(p).simulate(x0, T, n_paths=4000, seed=3)
    ref = oracles.hawkes_no_reset_means(x0, T, p.alpha, p.b, p.c, p.f2)
    se = xs.std(axis=0, ddof=1) / math.sqrt(xs.shape[0])
    assert np.all(np.abs(xs.mean(axis=0) - ref) <= 3 * se)


def test_constant_mean_field_rate_gives_exact_linear_means():
    # constant f2: the mean ODE is linear, so it holds for every N
    p = HawkesParams(N=5, alpha=0.5, b=1.0, c=2.0, f1=NO_RESET, f2=Logistic(0.6, 0.6))
    xs = make_hawkes_system(p).simulate([1.0, 0.0], 2.0, n_paths=20_000, seed=4)
    ref = [oracles.linear_flow(1.0, 0.5, 0.6, 2.0), oracles.linear_flow(0.0, 0.5, 1.0 - 2.0 * 0.6, 2.0)]
    se = xs.std(axis=0, ddof=1) / math.sqrt(xs.shape[0])
    assert np.all(np.abs(xs.mean(axis=0) - ref) <= 3 * se)


def test_summary_chain_matches_per_particle_simulation():
    p = HawkesParams(N=10, c=2.0)
    x0, T, n = [0.5, 1.0], 1.0, 2000
    chain = make_hawkes_system(p).simulate(x0, T, n_paths=n, seed=11)
    rng = chunk_rng(12)
    particles = np.array([simulate_hawkes_particles(p, x0, T, rng) for _ in range(n)])
    for k in range(2):
        assert stats.ks_2samp(chain[:, k], particles[:, k]).pvalue > 0.01


def test_resets_send_the_first_coordinate_to_zero():
    # f1 large and f2 tiny: essentially every event is a reset
    p = HawkesParams(N=3, f1=Logistic(50.0, 50.0), f2=Logistic(1e-12, 1e-12))
    xs = make_hawkes_system(p).simulate([3.0, 0.0], 1.0, n_paths=200, seed=5)
    # after the last reset x1 only decays from 0
    assert np.all(xs[:, 0] == 0.0)


def test_system_simulation_is_seed_deterministic():
    sysm = make_hawkes_system(HawkesParams(N=20))
    a = sysm.simulate([0.0, 0.0], 1.0, n_paths=50, seed=9, chunk_size=16)
    b = sysm.simulate([0.0, 0.0], 1.0, n_paths=50, seed=9, chunk_size=16)
    np.testing.assert_array_equal(a, b)


# -- Hawkes limit --------------------------------------------------------------------


def test_x2_equilibrium_matches_brent():
    p = HawkesParams(alpha=0.5, b=3.0, c=5.0)
    assert hawkes_x2_equilibrium(p) == pytest.approx(oracles.hawkes_x2_root(p.alpha, p.b, p.c, p.f2), abs=1e-10)


def test_simulated_x2_settles_at_the_root():
    p = HawkesParams(alpha=0.5, b=3.0, c=5.0)
    lim = make_hawkes_limit(p)
    path = simulate_limit(lim, [0.0, 4.0], SimConfig(dt=0.01, horizon=40.0, n_paths=1, seed=0))
    root = oracles.hawkes_x2_root(p.alpha, p.b, p.c, p.f2)
    assert path.terminal[0, 1] == pytest.approx(root, abs=1e-4)


def test_limit_reset_to_zero_is_exact():
    p = HawkesParams(f1=Logistic(5.0, 5.0))
    batch = simulate_limit(make_hawkes_limit(p), [2.0, 1.0],
                           SimConfig(dt=0.01, horizon=1.0, n_paths=100, seed=1, record_events=True))
    post = batch.events["post"][batch.events["accepted"]]
    assert post.shape[0] > 100
    assert np.all(post[:, 0] == 0.0)


def test_limit_reset_random_is_uniform_on_the_spread():
    eps = 0.4
    p = HawkesParams(f1=Logistic(5.0, 5.0), eps=eps)
    batch = simulate_limit(make_hawkes_limit(p, "reset_random"), [2.0, 1.0],
                           SimConfig(dt=0.01, horizon=2.0, n_paths=300, seed=2, record_events=True))
    post = batch.events["post"][batch.events["accepted"]][:, 0]
    assert post.size > 1000
    assert stats.kstest(post, stats.uniform(0.0, eps).cdf).pvalue > 0.01


def test_limit_mark_inverse_recovers_the_mark():
    lim = make_hawkes_limit(HawkesParams(eps=0.4), "reset_random")
    x = np.array([[0.7, 0.0], [0.1, 2.0]])
    z = col([1.25, 1.9])
    v = lim.amplitude(z, x)[:, :1]
    np.testing.assert_allclose(lim.mark_inverse(v, x), z)


# -- CIR -------------------------------------------------------------------------------


@pytest.mark.parametrize("t", [0.0, 0.7, 3.0])
def test_fast_band_first_moment_vanishes(cir, t):
    p, inh, _ = cir
    x = col(np.linspace(-2, 3, 11))
    up, down = inh.measure.layers[1], inh.measure.layers[2]
    np.testing.assert_allclose(up.drift(t, x) + down.drift(t, x), 0.0, atol=1e-10)
    # direct integral of amplitude * rate over the whole centered band
    e = math.exp(2 * p.r * t)
    for xi in x[:, 0]:
        def integrand(z):
            zz, xx = col([z]), col([xi])
            return float(inh.amplitude(t, zz, xx)[0, 0] * inh.rate(t, zz, xx)[0])
        total = sum(integrate.quad(integrand, lo, hi)[0] for lo, hi in [(-3 * e, -2 * e), (-2 * e, -e)])
        assert abs(total) < 1e-10


@pytest.mark.parametrize("t0", [0.5, 2.0, 5.0])
def test_slow_tail_drift_is_the_closed_form_tail(cir, t0):
    p, inh, _ = cir
    x = col([0.0, 1.0])
    e = math.exp(2 * p.r * t0)
    tail = inh.measure.layers[4].drift(t0, x)[:, 0]
    ref = oracles.slow_tail_integral(p.d, p.M, e) * p.f(x[:, 0])
    np.testing.assert_allclose(tail, ref, rtol=1e-12)
    # beyond the first edge the remainder vanishes like d/(1 + e^{2 r t0})
    beyond = oracles.slow_tail_integral(p.d, e) * p.f.sup
    assert beyond == pytest.approx(p.f.sup * p.d / (1 + e))


def test_cir_limit_layers_and_compensator(cir):
    p, _, lim = cir
    edges = p.limit_edges()
    assert [float(layer.hi) for layer in lim.measure.layers] == pytest.approx(edges.tolist())
    assert float(lim.measure.layers[0].hi) == p.M
    x = col([0.3])
    for level in range(len(edges) + 1):
        edge = 0.0 if level == 0 else edges[level - 1]
        ref = oracles.slow_tail_integral(p.d, edge) * p.f(0.3)
        assert lim.compensator(level, x)[0, 0] == pytest.approx(ref, rel=1e-12)


def test_cir_limit_diffusion_uses_the_band_variance(cir):
    p, _, lim = cir
    x = col([0.0, 1.5])
    np.testing.assert_allclose(lim.covariance(x)[:, 0, 0], p.sigma ** 2 * p.f(x[:, 0]) / 2, rtol=1e-12)
    _, lim_full = make_cir_models(CirParams(r=0.5, limit_variance="full"))
    np.testing.assert_allclose(lim_full.covariance(x)[:, 0, 0], p.sigma ** 2 * p.f(x[:, 0]), rtol=1e-12)
