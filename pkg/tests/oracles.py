"""Independent reference computations used by the tests.

Everything here goes through scipy (quadrature, ODE solvers, distributions)
rather than through pdjump, so agreement is a genuine cross-check.  Numbers
that tests freeze as literals were produced by these functions.
"""
import math

import numpy as np
from scipy import integrate, optimize


def cir_const_rate_mean(x0, t0, T, a, b, d, r, fval=1.0):
    """Mean of the inhomogeneous CIR example with constant rate ``fval``.

    ``m' = b - a m + d fval (1 - 1/(1 + e^{2rt}))``: the slow band integrates
    ``d/(1+z)^2`` over ``(0, e^{2rt})``; centered bands cancel, the drift band
    gives ``-a m``.
    """
    rhs = lambda t, m: b - a * m + d * fval * (1.0 - 1.0 / (1.0 + math.exp(2 * r * t)))  # noqa: E731
    sol = integrate.solve_ivp(rhs, (t0, t0 + T), [x0], rtol=1e-11, atol=1e-12)
    return float(sol.y[0, -1])


def cir_third_moment(sigma, r, t, fx):
    """``int |c|^3 gamma`` over the centered band (both halves, mass e^{2rt} each)."""
    E = math.exp(2 * r * t)
    amp = 0.5 * sigma * math.exp(-r * t)
    return 2 * integrate.quad(lambda z: amp ** 3 * fx, 0.0, E)[0]


def cir_band_variance(sigma, r, t, fx):
    E = math.exp(2 * r * t)
    amp = 0.5 * sigma * math.exp(-r * t)
    return 2 * integrate.quad(lambda z: amp ** 2 * fx, 0.0, E)[0]


def slow_tail_integral(d, lo, hi=np.inf):
    return integrate.quad(lambda z: d / (1 + z) ** 2, lo, hi)[0]


def cir_limit_generator_x2(x, a, b, d, sigma, fx, kappa=1.0):
    """``L x^2`` for the CIR limit with diffusion variance ``kappa sigma^2 f``."""
    jump = integrate.quad(lambda z: ((x + d / (1 + z) ** 2) ** 2 - x * x) * fx, 0, np.inf)[0]
    return 2 * x * (b - a * x) + kappa * sigma ** 2 * fx + jump


def hawkes_x2_root(alpha, b, c, f2):
    return optimize.brentq(lambda x: -alpha * x - c * f2(x) + b, -1e3, 1e3, xtol=1e-14)


def hawkes_no_reset_means(x0, T, alpha, b, c, f2):
    """``(E X^1_T, E X^2_T)`` when ``f1 = 0``: X^2 is then deterministic to first order.

    Solves ``m1' = -alpha m1 + f2(m2)``, ``m2' = -alpha m2 - c f2(m2) + b``.
    """
    def rhs(t, m):
        return [-alpha * m[0] + f2(m[1]), -alpha * m[1] - c * f2(m[1]) + b]

    sol = integrate.solve_ivp(rhs, (0, T), list(x0), rtol=1e-11, atol=1e-12)
    return sol.y[:, -1]


def linear_flow(x, a_rate, lam, t):
    """Solution of ``phi' = -phi + lam`` (scaled by ``a_rate``) at time ``t``."""
    return x * math.exp(-a_rate * t) + lam / a_rate * (1 - math.exp(-a_rate * t))


def gaussian_tv(mu_shift):
    """TV distance between N(0,1) and N(mu,1)."""
    from scipy.stats import norm

    return 2 * norm.cdf(abs(mu_shift) / 2) - 1
