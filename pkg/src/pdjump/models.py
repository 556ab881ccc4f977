"""The two worked examples: the CIR-type jump process and mean-field Hawkes systems."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.random import Generator

from .core import (
    InhomogeneousModel,
    Layer,
    LayeredMeasure,
    LimitModel,
    ModelError,
    TailMoments,
    build_layered_measure,
)
from .rng import chunk_rng, run_chunks


@dataclass(frozen=True)
class Logistic:
    """``u -> lo + (hi - lo) / (1 + exp(-(u - shift) / scale))``."""

    lo: float = 0.1
    hi: float = 1.0
    shift: float = 0.0
    scale: float = 1.0

    def _sigmoid(self, u):
        return 1.0 / (1.0 + np.exp(np.clip(-(np.asarray(u) - self.shift) / self.scale, -700.0, 700.0)))

    def __call__(self, u):
        return self.lo + (self.hi - self.lo) * self._sigmoid(u)

    def derivative(self, u):
        s = self._sigmoid(u)
        return (self.hi - self.lo) * s * (1.0 - s) / self.scale

    @property
    def inf(self) -> float:
        return self.lo

    @property
    def sup(self) -> float:
        return self.hi


# ---------------------------------------------------------------------------
# CIR-type example


@dataclass(frozen=True)
class CirParams:
    """Parameters of the CIR-type example.

    ``M`` is the upper edge of the first (big-jump) slow layer; the limit
    measure continues with ``extra_layers`` layers growing by ``layer_ratio``.
    ``limit_variance`` selects the limit diffusion: ``"band"`` uses the
    variance ``sigma^2 f / 2`` produced by the centered bands, ``"full"``
    the variance ``sigma^2 f``.
    """

    sigma: float = 1.0
    d: float = 1.0
    a: float = 1.0
    b: float = 1.0
    r: float = 0.5
    f: Logistic = field(default_factory=Logistic)
    M: float = 1.0
    extra_layers: int = 3
    layer_ratio: float = 4.0
    limit_variance: str = "band"

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.r > 0):
            raise ModelError("CIR example needs a, b, r > 0")
        if not self.f.inf > 0:
            raise ModelError("rate function needs inf f > 0")
        if not self.M > 0 or self.layer_ratio <= 1:
            raise ModelError("layer edges must be positive and increasing")
        if self.limit_variance not in ("band", "full"):
            raise ModelError("limit_variance must be 'band' or 'full'")

    @property
    def variance_factor(self) -> float:
        return 0.5 if self.limit_variance == "band" else 1.0

    def limit_edges(self) -> np.ndarray:
        return self.M * self.layer_ratio ** np.arange(self.extra_layers + 1)


def _col(v):
    return np.asarray(v, dtype=float).reshape(-1, 1)


def _poisson_sum_small(rng: Generator, counts: np.ndarray, lo: float, hi: float, d: float,
                       exact_max: int = 32) -> np.ndarray:
    """Sum of ``counts`` i.i.d. jumps ``d/(1+z)^2`` with ``z ~ U(lo, hi)``.

    Rows with at most ``exact_max`` jumps are summed exactly; larger counts
    use the normal approximation with matching mean and variance.
    """
    out = np.zeros(counts.shape[0])
    if hi <= lo:
        return out
    few = counts <= exact_max
    if np.any(few):
        k = int(counts[few].max()) if np.any(counts[few]) else 0
        if k:
            z = rng.uniform(lo, hi, size=(int(few.sum()), k))
            mask = np.arange(k)[None, :] < counts[few][:, None]
            out[few] = np.sum(np.where(mask, d / (1.0 + z) ** 2, 0.0), axis=1)
    many = ~few
    if np.any(many):
        w = hi - lo
        m1 = d * (1.0 / (1.0 + lo) - 1.0 / (1.0 + hi)) / w
        m2 = d * d * (1.0 / (1.0 + lo) ** 3 - 1.0 / (1.0 + hi) ** 3) / (3.0 * w)
        n = counts[many].astype(float)
        out[many] = n * m1 + np.sqrt(n * max(m2 - m1 * m1, 0.0)) * rng.standard_normal(n.size)
    return out


def make_cir_models(p: CirParams = CirParams()) -> tuple[InhomogeneousModel, LimitModel]:
    """Time-inhomogeneous CIR-type model and its limit.

    Inhomogeneous layers: ``0`` the slow band ``(0, min(M, e^{2rt})]`` (big
    jumps, exact), ``1``/``2`` the two halves of the centered band, ``3`` the
    drift band ``(-e^{2rt}, 0)``, ``4`` the slow remainder
    ``(M, e^{2rt})``.  Layers 1-4 carry aggregated step samplers.
    """
    sigma, dd, a, b, r, f, M = p.sigma, p.d, p.a, p.b, p.r, p.f, p.M

    def E(t):
        return np.exp(2.0 * r * np.asarray(t, dtype=float))

    def band_mass(t, h):
        # integral of e^{2rs} over [t, t+h]
        return (E(np.asarray(t) + h) - E(t)) / (2.0 * r)

    def drift(t, x):
        return np.full_like(x, b)

    def amplitude(t, z, x):
        t = np.broadcast_to(np.asarray(t, dtype=float), (z.shape[0],))
        zz, xx, e = z[:, 0], x[:, 0], E(t)
        up = (zz > -3 * e) & (zz < -2 * e)
        down = (zz >= -2 * e) & (zz < -e)
        mid = (zz >= -e) & (zz <= 0)
        slow = (zz > 0) & (zz < e)
        s = 0.5 * sigma * np.exp(-r * t)
        out = np.where(up, s, 0.0) - np.where(down, s, 0.0)
        out = out + np.where(mid, -a * xx / e, 0.0) + np.where(slow, dd / (1.0 + zz) ** 2, 0.0)
        return out[:, None]

    def rate(t, z, x):
        t = np.broadcast_to(np.asarray(t, dtype=float), (z.shape[0],))
        zz, e = z[:, 0], E(t)
        fx = f(x[:, 0])
        return np.where((zz > -3 * e) & (zz < -e), fx, 0.0) + np.where((zz >= -e) & (zz <= 0), 1.0, 0.0) \
            + np.where((zz > 0) & (zz < e), fx, 0.0)

    def regime(t, z):
        t = np.broadcast_to(np.asarray(t, dtype=float), (z.shape[0],))
        zz, e = z[:, 0], E(t)
        return np.where((zz > -3 * e) & (zz < -e), 1, np.where(zz > 0, 3, 2))

    def fast_step(sign):
        def inc(t, h, x, rng):
            lam = f(x[:, 0]) * band_mass(t, h)
            n = rng.poisson(lam)
            return _col(sign * 0.5 * sigma * np.exp(-r * np.asarray(t)) * n)
        return inc

    def drift_step(t, h, x, rng):
        n = rng.poisson(band_mass(t, h) * np.ones(x.shape[0]))
        factor = (1.0 - a / E(t)) ** n
        return x * (factor - 1.0)[:, None]

    def slow_tail_step(t, h, x, rng):
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        e = float(np.min(E(t)))
        if e <= M:
            return np.zeros_like(x)
        width = np.maximum(E(t) - M, 0.0)
        n = rng.poisson(f(x[:, 0]) * width * h)
        return _col(_poisson_sum_small(rng, n, M, e, dd))

    layers = [
        Layer(lo=0.0, hi=lambda t: np.minimum(M, E(t)), name="slow_big",
              drift=lambda t, x: _col(dd * f(x[:, 0]) * (1 - 1 / (1 + np.minimum(M, E(t)))))),
        Layer(lo=lambda t: -3 * E(t), hi=lambda t: -2 * E(t), name="fast_up", mass=lambda t: E(t),
              step_increment=fast_step(+1.0), drift=lambda t, x: _col(0.5 * sigma * np.exp(-r * np.asarray(t)) * E(t) * f(x[:, 0]))),
        Layer(lo=lambda t: -2 * E(t), hi=lambda t: -E(t), name="fast_down", mass=lambda t: E(t),
              step_increment=fast_step(-1.0), drift=lambda t, x: _col(-0.5 * sigma * np.exp(-r * np.asarray(t)) * E(t) * f(x[:, 0]))),
        Layer(lo=lambda t: -E(t), hi=0.0, name="drift_band", mass=lambda t: E(t), step_increment=drift_step,
              drift=lambda t, x: -a * x),
        Layer(lo=M, hi=lambda t: np.maximum(M, E(t)), name="slow_tail", mass=lambda t: np.maximum(E(t) - M, 0.0),
              step_increment=slow_tail_step,
              drift=lambda t, x: _col(dd * f(x[:, 0]) * (1 / (1 + M) - 1 / (1 + np.maximum(M, E(t)))))),
    ]
    gamma_in = max(f.sup, 1.0)
    measure_in = LayeredMeasure(tuple(layers), gamma_in)
    inhom = InhomogeneousModel(1, 1, drift, amplitude, rate, measure_in, regime=regime, name="cir")

    # limit model
    edges = p.limit_edges()
    lows = np.concatenate([[0.0], edges[:-1]])
    limit_layers = [Layer(lo=lo, hi=hi, name=f"slow_{i}") for i, (lo, hi) in enumerate(zip(lows, edges))]
    top = float(edges[-1])
    kappa = p.variance_factor

    def g(x):
        return b - a * x

    def diffusion(x):
        return (sigma * np.sqrt(kappa * f(x[:, 0])))[:, None, None]

    def l_amp(z, x):
        return np.where(z[:, :1] > 0, dd / (1.0 + z[:, :1]) ** 2, 0.0) * np.ones_like(x)

    def l_rate(z, x):
        return np.where(z[:, 0] > 0, f(x[:, 0]), 0.0)

    tail = TailMoments(
        first=lambda x: _col(dd * f(x[:, 0]) / (1 + top)),
        second=lambda x: (dd * dd * f(x[:, 0]) / (3 * (1 + top) ** 3))[:, None, None],
        abs_first=lambda x: abs(dd) * f(x[:, 0]) / (1 + top),
    )

    def compensator(level, x):
        edge = 0.0 if level <= 0 else float(edges[min(level, len(edges)) - 1])
        return _col(dd * f(x[:, 0]) / (1 + edge))

    def mark_inverse(v, x):
        return np.sqrt(dd / np.asarray(v)) - 1.0

    measure_lim = build_layered_measure(limit_layers, f.sup, tail=tail)
    limit = LimitModel(1, 1, g, l_amp, l_rate, measure_lim, diffusion=diffusion, compensator=compensator,
                       mark_inverse=mark_inverse, regime=lambda z: np.full(z.shape[0], 3), name="cir_limit")
    return inhom, limit


def cir_band_layers(p: CirParams, t: float) -> LayeredMeasure:
    """The three CIR mark bands frozen at time ``t``, as a layered measure.

    Centered band ``(-3E, -E)`` (mass ``2E``), drift band ``(-E, 0]`` and
    slow band ``(0, E)`` (mass ``E`` each), with ``E = e^{2rt}``.
    """
    e = math.exp(2.0 * p.r * t)
    layers = [Layer(lo=-3 * e, hi=-e, name="centered"), Layer(lo=-e, hi=0.0, name="drift_band"),
              Layer(lo=0.0, hi=e, name="slow_band")]
    return build_layered_measure(layers, max(p.f.sup, 1.0))


def cir_stationary_mean_const_rate(p: CirParams, fval: float) -> float:
    """Stationary mean for constant rate ``f = fval``: ``(b + d fval) / a``."""
    return (p.b + p.d * fval) / p.a


# ---------------------------------------------------------------------------
# mean-field Hawkes


@dataclass(frozen=True)
class HawkesParams:
    N: int = 100
    alpha: float = 1.0
    b: float = 1.0
    c: float = 1.0
    f1: Logistic = field(default_factory=Logistic)
    f2: Logistic = field(default_factory=Logistic)
    eps: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or self.b <= 0 or self.c <= 0:
            raise ModelError("Hawkes system needs alpha, b, c > 0")
        if not (self.f1.inf > 0 and self.f2.inf > 0):
            raise ModelError("rate functions need inf f_i > 0")
        if self.eps < 0:
            raise ModelError("reset spread eps must be nonnegative")


class HawkesSystem:
    """Event-driven simulator of the 2-d summary chain ``(X^1, X^2)`` for ``N`` particles.

    Between events the flow is exact: ``x^1 e^{-alpha s}`` and
    ``b/alpha + (x^2 - b/alpha) e^{-alpha s}``.  Candidates arrive at rate
    ``(N-1) sup f2 + sup f1`` and are thinned into mean-field jumps
    ``(1, -c)/(N-1)`` and resets of ``x^1`` (to 0, or to ``eps * U`` when
    ``eps > 0``).
    """

    def __init__(self, params: HawkesParams):
        if params.N < 2:
            raise ModelError("the Hawkes system needs N >= 2")
        self.p = params

    @property
    def dominating_rate(self) -> float:
        p = self.p
        return (p.N - 1) * p.f2.sup + p.f1.sup

    def flow(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        p = self.p
        e = np.exp(-p.alpha * s)
        out = np.empty_like(x)
        out[:, 0] = x[:, 0] * e
        out[:, 1] = p.b / p.alpha + (x[:, 1] - p.b / p.alpha) * e
        return out

    def _run(self, x: np.ndarray, T: float, rng: Generator) -> np.ndarray:
        p = self.p
        lam = self.dominating_rate
        n = x.shape[0]
        t = np.zeros(n)
        alive = np.arange(n)
        while alive.size:
            w = rng.exponential(1.0 / lam, size=alive.size)
            tn = t[alive] + w
            done = tn >= T
            if np.any(done):
                idx = alive[done]
                x[idx] = self.flow(x[idx], T - t[idx])
            alive = alive[~done]
            tn = tn[~done]
            if not alive.size:
                break
            xa = self.flow(x[alive], tn - t[alive])
            t[alive] = tn
            u = rng.uniform(size=alive.size) * lam
            r2 = (p.N - 1) * p.f2(xa[:, 1])
            r1 = p.f1(xa[:, 0])
            mf = u <= r2
            rs = (~mf) & (u <= r2 + r1)
            xa[mf, 0] += 1.0 / (p.N - 1)
            xa[mf, 1] -= p.c / (p.N - 1)
            if np.any(rs):
                xa[rs, 0] = p.eps * rng.uniform(size=int(rs.sum())) if p.eps > 0 else 0.0
            x[alive] = xa
        return x

    def simulate(self, x0, T: float, n_paths: int, seed: int = 0, chunk_size: int = 4096,
                 threads: int = 1) -> np.ndarray:
        """Terminal states ``X^{[N]}_T`` of ``n_paths`` independent systems."""
        x0 = np.asarray(x0, dtype=float)

        def chunk(ci, sl):
            rng = chunk_rng(seed, ci)
            n = sl.stop - sl.start
            x = np.array(np.broadcast_to(x0 if x0.ndim == 1 else x0[sl], (n, 2)), dtype=float)
            return self._run(x, T, rng)

        return np.concatenate(run_chunks(chunk, n_paths, chunk_size, threads), axis=0)

    def model(self) -> InhomogeneousModel:
        """The system as a jump model with marks ``(0,1]`` (mean field) and ``(1,2]`` (reset)."""
        return hawkes_inhomogeneous(self.p, lambda t: float(self.p.N))


def hawkes_inhomogeneous(p: HawkesParams, n_of_t: Callable) -> InhomogeneousModel:
    """Jump model of the summary chain with particle count ``N = n_of_t(t)``."""
    alpha, b, c, eps = p.alpha, p.b, p.c, p.eps

    def nm1(t, n):
        return np.broadcast_to(np.asarray(n_of_t(np.asarray(t, dtype=float)), dtype=float) - 1.0, (n,))

    def drift(t, x):
        return -alpha * x + np.array([0.0, b])

    def amplitude(t, z, x):
        zz = z[:, 0]
        k = nm1(t, z.shape[0])
        mid = (zz > 0) & (zz <= 1)
        slow = (zz > 1) & (zz <= 2)
        out = np.zeros_like(x)
        out[:, 0] = np.where(mid, 1.0 / k, 0.0) + np.where(slow, -x[:, 0] + eps * (zz - 1), 0.0)
        out[:, 1] = np.where(mid, -c / k, 0.0)
        return out

    def rate(t, z, x):
        zz = z[:, 0]
        k = nm1(t, z.shape[0])
        return np.where((zz > 0) & (zz <= 1), k * p.f2(x[:, 1]), 0.0) + np.where((zz > 1) & (zz <= 2), p.f1(x[:, 0]), 0.0)

    def regime(t, z):
        return np.where(z[:, 0] > 1, 3, 2)

    n_max = float(n_of_t(0.0))
    layers = (Layer(lo=0.0, hi=1.0, name="mean_field"), Layer(lo=1.0, hi=2.0, name="reset"))
    gamma = max((n_max - 1) * p.f2.sup, p.f1.sup)
    return InhomogeneousModel(2, 1, drift, amplitude, rate, LayeredMeasure(layers, gamma), regime=regime,
                              name="hawkes_system")


def make_hawkes_system(params: HawkesParams) -> HawkesSystem:
    return HawkesSystem(params)


def make_hawkes_limit(params: HawkesParams, variant: str = "reset_zero") -> LimitModel:
    """Limit PDMP: deterministic ``X^2`` and ``X^1`` with resets at rate ``f1(X^1)``.

    ``variant`` is ``"reset_zero"`` or ``"reset_random"`` (reset to
    ``eps * (z - 1)`` with ``z ~ U(1, 2)``, requiring ``eps > 0``).
    """
    p = params
    if p.alpha <= 0:
        raise ModelError("alpha must be positive for the X^2 equation to have an equilibrium")
    if variant not in ("reset_zero", "reset_random"):
        raise ModelError("variant must be 'reset_zero' or 'reset_random'")
    eps = p.eps if variant == "reset_random" else 0.0
    if variant == "reset_random" and eps <= 0:
        raise ModelError("reset_random needs eps > 0")

    def g(x):
        out = np.empty_like(x)
        f2 = p.f2(x[:, 1])
        out[:, 0] = -p.alpha * x[:, 0] + f2
        out[:, 1] = -p.alpha * x[:, 1] - p.c * f2 + p.b
        return out

    def amplitude(z, x):
        out = np.zeros_like(x)
        inside = (z[:, 0] > 1) & (z[:, 0] <= 2)
        out[:, 0] = np.where(inside, -x[:, 0] + eps * (z[:, 0] - 1.0), 0.0)
        return out

    def rate(z, x):
        return np.where((z[:, 0] > 1) & (z[:, 0] <= 2), p.f1(x[:, 0]), 0.0)

    def mark_inverse(v, x):
        v = np.atleast_2d(v)
        return (1.0 + (v[:, :1] + x[:, :1]) / eps) if eps > 0 else None

    measure = build_layered_measure([Layer(lo=1.0, hi=2.0, name="reset")], p.f1.sup)
    return LimitModel(2, 1, g, amplitude, rate, measure, mark_inverse=mark_inverse if eps > 0 else None,
                      regime=lambda z: np.full(z.shape[0], 3), name=f"hawkes_limit_{variant}")


def hawkes_x2_equilibrium(p: HawkesParams, lo: float = -1e3, hi: float = 1e3) -> float:
    """Root of ``-alpha x - c f2(x) + b`` by bisection (the function is decreasing)."""
    fn = lambda x: -p.alpha * x - p.c * float(p.f2(x)) + p.b  # noqa: E731
    a, bnd = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + bnd)
        if fn(mid) > 0:
            a = mid
        else:
            bnd = mid
    return 0.5 * (a + bnd)


def simulate_hawkes_particles(p: HawkesParams, x0, T: float, rng: Generator) -> np.ndarray:
    """Per-particle Ogata thinning of the ``N`` interacting Hawkes processes.

    Intensities are recomputed from the stored event history through the
    exponential kernel sums (no Markov reduction); the initial summary state
    enters as a decaying history contribution.  Returns ``(X^1_T, X^2_T)``
    evaluated from the history.  Test oracle only.
    """
    N, alpha, b, c = p.N, p.alpha, p.b, p.c
    x10, x20 = float(x0[0]), float(x0[1])
    others: list[float] = []
    last_reset = [None]
    reset_value = [0.0]
    lam = (N - 1) * p.f2.sup + p.f1.sup

    def state(t):
        ev = np.asarray(others)
        ker = np.exp(-alpha * (t - ev)) if ev.size else np.zeros(0)
        if last_reset[0] is None:
            x1 = x10 * math.exp(-alpha * t) + ker.sum() / (N - 1)
        else:
            L = last_reset[0]
            x1 = reset_value[0] * math.exp(-alpha * (t - L)) + ker[ev > L].sum() / (N - 1)
        x2 = b / alpha + (x20 - b / alpha) * math.exp(-alpha * t) - c * ker.sum() / (N - 1)
        return x1, x2

    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam)
        if t >= T:
            break
        x1, x2 = state(t)
        intens = np.empty(N)
        intens[0] = p.f1(x1)
        intens[1:] = p.f2(x2)
        u = rng.uniform() * lam
        cum = np.cumsum(intens)
        j = int(np.searchsorted(cum, u, side="right"))
        if j >= N:
            continue
        if j == 0:
            last_reset[0] = t
            reset_value[0] = p.eps * rng.uniform() if p.eps > 0 else 0.0
        else:
            others.append(t)
    return np.array(state(T))
