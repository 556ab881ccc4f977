import math

import numpy as np
import pytest
from scipy import stats

from pdjump import (ControlSkeletonInput, ExplosionError, InhomogeneousModel, Layer, PiecewiseControl, SimConfig,
                    build_layered_measure, simulate_inhomogeneous, simulate_limit, simulate_small_jump,
                    simulate_truncated, skeleton_path)
from pdjump.generator import alpha_tail
from pdjump.models import CirParams, Logistic, make_cir_models
from pdjump.rng import chunk_rng
from pdjump.simulate import sample_real_shock, skeleton_flow, truncation_error_bound

import oracles
from conftest import col, limit_1d


def test_pure_drift_is_exact_on_the_grid():
    beta = 0.7
    meas = build_layered_measure([Layer(lo=0.0, hi=1.0)], 1.0)
    model = InhomogeneousModel(1, 1, lambda t, x: np.full_like(x, beta), lambda t, z, x: np.zeros_like(x),
                               lambda t, z, x: np.zeros(z.shape[0]), meas)
    batch = simulate_inhomogeneous(model, [1.0], 2.0, SimConfig(dt=0.1, horizon=1.5, n_paths=3, record_every=1))
    expected = 1.0 + beta * (batch.times - 2.0)
    np.testing.assert_allclose(batch.states[:, :, 0], np.broadcast_to(expected, (3, expected.size)), atol=1e-12)


def test_accepted_counts_are_poisson_with_the_exact_rate():
    gamma, T, n = 2.0, 1.5, 10_000
    model = limit_1d(rate=lambda z, x: np.full(z.shape[0], gamma), gamma=gamma)
    counts = simulate_limit(model, [0.0], SimConfig(dt=0.1, horizon=T, n_paths=n, seed=4,
                                                    record_events=True)).accepted_counts()
    lam = gamma * T
    assert abs(counts.mean() - lam) <= 3 * math.sqrt(lam / n)
    kmax = 8
    obs = np.array([np.sum(counts == k) for k in range(kmax)] + [np.sum(counts >= kmax)])
    probs = np.append(stats.poisson.pmf(np.arange(kmax), lam), stats.poisson.sf(kmax - 1, lam))
    assert stats.chisquare(obs, probs * n).pvalue > 0.01


def test_cir_inhomogeneous_mean_follows_moment_ode(cir_const):
    p, inh, _ = cir_const
    n, T = 20_000, 2.0
    batch = simulate_inhomogeneous(inh, [1.0], 0.0, SimConfig(dt=0.01, horizon=T, n_paths=n, seed=11, level=1,
                                                              tail_mode="aggregate"))
    x = batch.terminal[:, 0]
    ref = oracles.cir_const_rate_mean(1.0, 0.0, T, p.a, p.b, p.d, p.r)
    assert abs(x.mean() - ref) <= 3 * x.std() / math.sqrt(n)


def test_moving_exact_bands_keep_the_mean(cir_const):
    # every layer exact: marks proposed on the extents at the step end must
    # be judged by region membership at the event time
    p, inh, _ = cir_const
    n, t0, T = 4000, 4.0, 0.5
    x = simulate_inhomogeneous(inh, [1.0], t0, SimConfig(dt=0.01, horizon=T, n_paths=n, seed=2)).terminal[:, 0]
    ref = oracles.cir_const_rate_mean(1.0, t0, T, p.a, p.b, p.d, p.r)
    assert abs(x.mean() - ref) <= 3 * x.std() / math.sqrt(n)


def test_linear_ode_limit_within_euler_tolerance():
    model = limit_1d(drift=lambda x: -x)
    errs = []
    for dt in (0.02, 0.01):
        xT = simulate_limit(model, [1.0], SimConfig(dt=dt, horizon=1.0)).terminal[0, 0]
        errs.append(abs(xT - math.exp(-1.0)))
    assert errs[0] <= 0.02 and errs[1] <= 0.01
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)


def test_gaussian_limit_variance():
    sigma, T, n = 0.7, 2.0, 20_000
    x = simulate_limit(limit_1d(sigma=sigma), [0.0], SimConfig(dt=0.05, horizon=T, n_paths=n, seed=3)).terminal[:, 0]
    v = sigma ** 2 * T
    assert abs(x.var(ddof=1) - v) <= 3 * v * math.sqrt(2 / (n - 1))


def test_cir_limit_stationary_mean(cir_const):
    p, _, lim = cir_const
    n = 10_000
    x = simulate_limit(lim, [0.5], SimConfig(dt=0.01, horizon=10.0, n_paths=n, seed=8, level=1)).terminal[:, 0]
    assert abs(x.mean() - (p.b + p.d) / p.a) <= 3 * x.std() / math.sqrt(n)


def test_weak_euler_error_halves_with_the_step():
    p = CirParams(a=2.0, b=0.1, d=0.2, sigma=0.3, f=Logistic(1.0, 1.0), M=1.0, extra_layers=0)
    _, lim = make_cir_models(p)
    c = p.b + p.d
    x0, T, n = 3.0, 1.0, 200_000
    exact = c / p.a + (x0 - c / p.a) * math.exp(-p.a * T)
    errs, ses = [], []
    for dt in (0.2, 0.1):
        x = simulate_limit(lim, [x0], SimConfig(dt=dt, horizon=T, n_paths=n, seed=5, level=1)).terminal[:, 0]
        errs.append(abs(x.mean() - exact))
        ses.append(x.std() / math.sqrt(n))
    assert errs[1] > 5 * ses[1]
    assert 1.6 < errs[0] / errs[1] < 2.6


def test_small_jump_process_with_single_layer_is_diffusion_only():
    model = limit_1d(drift=lambda x: -x, amplitude=lambda z, x: col(z[:, 0]), rate=lambda z, x: np.ones(z.shape[0]),
                     sigma=0.4)
    cfg = SimConfig(dt=0.05, horizon=1.0, n_paths=50, seed=12, record_every=1)
    a = simulate_small_jump(model, [1.0], level=1, config=cfg)
    b = simulate_limit(model, [1.0], cfg.replace(level=0, tail_mode="drop"))
    np.testing.assert_array_equal(a.states, b.states)


def test_small_jump_events_come_from_outer_layers_only():
    gamma = 1.0
    model = limit_1d(amplitude=lambda z, x: col(0.01 * z[:, 0]), rate=lambda z, x: np.full(z.shape[0], gamma),
                     layers=((0.0, 1.0), (1.0, 3.0)), gamma=gamma)
    n, T = 4000, 1.0
    batch = simulate_small_jump(model, [0.0], 1, SimConfig(dt=0.1, horizon=T, n_paths=n, seed=1, record_events=True))
    assert set(np.unique(batch.events["layer"])) == {1}
    counts = batch.accepted_counts()
    lam = 2.0 * gamma * T   # mu(G_2 \ G_1) * Gamma * T
    assert abs(counts.mean() - lam) <= 3 * math.sqrt(lam / n)


def test_truncation_at_full_support_reproduces_the_limit_path():
    model = limit_1d(drift=lambda x: -x, amplitude=lambda z, x: col(z[:, 0] - 0.5),
                     rate=lambda z, x: 0.5 + 0.5 * np.tanh(x[:, 0]) ** 2, sigma=0.3, layers=((0.0, 1.0), (1.0, 2.0)))
    cfg = SimConfig(dt=0.05, horizon=2.0, n_paths=100, seed=21, record_every=2)
    np.testing.assert_array_equal(simulate_truncated(model, [0.3], None, cfg).states,
                                  simulate_limit(model, [0.3], cfg).states)


def test_truncation_bound_vanishes_without_a_tail():
    model = limit_1d(drift=lambda x: -x, amplitude=lambda z, x: col(z[:, 0]), rate=lambda z, x: np.ones(z.shape[0]))
    assert truncation_error_bound(model, 1, rho=0.1, T=1.0) == 0.0
    batch = simulate_truncated(model, [0.0], 1, SimConfig(dt=0.1, horizon=1.0, n_paths=2), rho=0.1)
    assert batch.meta["truncation_bound"] == 0.0


def test_cir_tail_mass_beyond_M(cir_const):
    p, _, lim = cir_const
    assert alpha_tail(lim, 1) == pytest.approx(p.d / (1 + p.M), rel=1e-6)
    assert alpha_tail(lim, 1) == pytest.approx(oracles.slow_tail_integral(p.d, p.M), rel=1e-6)


def test_truncation_bound_decreases_as_G_grows(cir):
    _, _, lim = cir
    bounds = [truncation_error_bound(lim, n, rho=0.5, T=1.0, box=([0.0], [2.0]), grid_points=5)
              for n in range(1, len(lim.measure.layers) + 1)]
    assert all(a >= b for a, b in zip(bounds, bounds[1:]))


def test_real_shock_null_probabilities():
    rng = chunk_rng(6)
    full = limit_1d(rate=lambda z, x: np.ones(z.shape[0]), gamma=1.0)
    _, null = sample_real_shock(full, 1, np.zeros((5000, 1)), rng)
    assert not null.any()
    half = limit_1d(rate=lambda z, x: np.full(z.shape[0], 0.5), gamma=1.0)
    n = 20_000
    _, null = sample_real_shock(half, 1, np.zeros((n, 1)), rng)
    assert abs(null.mean() - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_real_shock_marks_follow_rate_weighted_density():
    model = limit_1d(rate=lambda z, x: z[:, 0], gamma=1.0)
    z, null = sample_real_shock(model, 1, np.zeros((40_000, 1)), chunk_rng(7))
    acc = z[~null, 0]
    edges = np.linspace(0, 1, 21)
    obs, _ = np.histogram(acc, edges)
    expected = np.diff(edges ** 2) * acc.size   # density 2z on (0, 1)
    assert stats.chisquare(obs, expected).pvalue > 0.01


def test_skeleton_flows():
    decay = limit_1d(drift=lambda x: -x, sigma=1.0)
    _, path = skeleton_flow(decay, [2.0], PiecewiseControl.zero(1))
    assert path[-1, 0] == pytest.approx(2.0 * math.exp(-1.0), abs=1e-9)
    lam = 0.8
    pushed = limit_1d(sigma=1.0)
    _, path = skeleton_flow(pushed, [2.0], PiecewiseControl.constant([lam]))
    assert path[-1, 0] == pytest.approx(2.0 + lam, abs=1e-12)
    _, path = skeleton_flow(decay, [2.0], PiecewiseControl.constant([lam]))
    assert path[-1, 0] == pytest.approx(oracles.linear_flow(2.0, 1.0, lam, 1.0), abs=1e-9)


def test_skeleton_path_cases(cir):
    decay = limit_1d(drift=lambda x: -x, sigma=1.0)
    none = ControlSkeletonInput([], np.zeros((0, 1)), (PiecewiseControl.constant([0.3]),))
    _, flow = skeleton_flow(decay, [1.5], PiecewiseControl.constant([0.3]))
    assert skeleton_path(decay, [1.5], none)[0] == pytest.approx(flow[-1, 0], abs=1e-12)

    reset = limit_1d(amplitude=lambda z, x: -x, sigma=1.0)
    inp = ControlSkeletonInput([0.4], [[0.5]], (PiecewiseControl.zero(1),))
    assert skeleton_path(reset, [3.0], inp)[0] == 0.0

    p, _, lim = cir
    z = 0.6
    inp = ControlSkeletonInput([0.5], [[z]], (PiecewiseControl.zero(1),))
    mid = p.b / p.a + (2.0 - p.b / p.a) * math.exp(-p.a / 2)
    post = mid + p.d / (1 + z) ** 2
    expected = p.b / p.a + (post - p.b / p.a) * math.exp(-p.a / 2)
    assert skeleton_path(lim, [2.0], inp)[0] == pytest.approx(expected, abs=1e-9)


def test_skeleton_marks_must_lie_in_G(cir):
    _, _, lim = cir
    inp = ControlSkeletonInput([0.5], [[5.0]], (PiecewiseControl.zero(1),))
    with pytest.raises(Exception, match="in G"):
        skeleton_path(lim, [1.0], inp, level=1)


def test_seed_and_thread_determinism(cir):
    _, _, lim = cir
    cfg = SimConfig(dt=0.05, horizon=1.0, n_paths=300, seed=17, chunk_size=64, record_every=5)
    a = simulate_limit(lim, [1.0], cfg)
    b = simulate_limit(lim, [1.0], cfg.replace(threads=3))
    np.testing.assert_array_equal(a.states, b.states)
    c = simulate_limit(lim, [1.0], cfg.replace(seed=18))
    assert not np.array_equal(a.states, c.states)


def test_explosion_guard_names_the_time():
    model = limit_1d(drift=lambda x: x)
    with pytest.raises(ExplosionError) as err:
        simulate_limit(model, [1.0], SimConfig(dt=0.01, horizon=10.0, safety_bound=100.0))
    assert math.log(100.0) - 0.1 < err.value.time < math.log(100.0) + 0.1
    assert "t=" in str(err.value)
