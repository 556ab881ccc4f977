"""Generators on test functions, regime functionals, Lyapunov checks and seminorms.

Mark integrals are computed layer by layer, either with composite
Gauss-Legendre rules (error estimated by comparing two orders) or by Monte
Carlo (error = standard error).  Suprema over the state space are grid
maxima over a declared box; they are estimates, not certified bounds.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import (
    BoxSet,
    InhomogeneousModel,
    LimitModel,
    LyapunovSpec,
    ModelError,
    inhomogeneous_from_limit,
)
from .rng import chunk_rng

Model = Union[InhomogeneousModel, LimitModel]


class QuadratureError(RuntimeError):
    """A mark integral's error estimate exceeded the requested threshold."""


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float = 0.0

    def __float__(self) -> float:
        return float(self.value)


# ---------------------------------------------------------------------------
# finite differences

_STENCILS = {
    0: (np.array([0]), np.array([1.0])),
    1: (np.array([-1, 1]), np.array([-0.5, 0.5])),
    2: (np.array([-1, 0, 1]), np.array([1.0, -2.0, 1.0])),
    3: (np.array([-2, -1, 1, 2]), np.array([-0.5, 1.0, -1.0, 0.5])),
}


def partial_derivative(fn: Callable, x: np.ndarray, alpha: Sequence[int], h: float = 1e-3) -> np.ndarray:
    """``d^alpha fn`` at each row of ``x`` by tensor-product central differences.

    ``fn`` maps ``(n, d)`` states to arrays with leading axis ``n``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = tuple(int(a) for a in alpha)
    if any(a > 3 for a in alpha):
        raise ValueError("derivatives above order 3 are not supported")
    axes = [list(zip(*_STENCILS[a])) for a in alpha]
    out = None
    for combo in itertools.product(*axes):
        shift = np.array([o for o, _ in combo], dtype=float) * h
        w = float(np.prod([c for _, c in combo]))
        val = w * np.asarray(fn(x + shift), dtype=float)
        out = val if out is None else out + val
    return out / h ** sum(alpha)


def multi_indices(d: int, order: int) -> list[tuple[int, ...]]:
    """All multi-indices with ``|alpha| == order``."""
    return [a for a in itertools.product(range(order + 1), repeat=d) if sum(a) == order]


def _step(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(x))


def fd_gradient(f: Callable, x: np.ndarray, rel: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar test function at one point."""
    x = np.asarray(x, dtype=float).ravel()
    h = _step(x, rel)
    eye = np.diag(h)
    pts = np.concatenate([x + eye, x - eye])
    v = np.asarray(f(pts), dtype=float)
    d = x.size
    return (v[:d] - v[d:]) / (2 * h)


def _second_differences(f, x, h):
    d = x.size
    H = np.empty((d, d))
    f0 = float(np.asarray(f(x[None, :]))[0])
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        vals = np.asarray(f(np.stack([x + ei, x - ei])), dtype=float)
        H[i, i] = (vals[0] - 2 * f0 + vals[1]) / h[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h[j]
            v = np.asarray(f(np.stack([x + ei + ej, x + ei - ej, x - ei + ej, x - ei - ej])), dtype=float)
            H[i, j] = H[j, i] = (v[0] - v[1] - v[2] + v[3]) / (4 * h[i] * h[j])
    return H


def fd_hessian(f: Callable, x: np.ndarray, rel: float = 1e-4) -> np.ndarray:
    """Central second differences with one Richardson step (error ``O(h^4)``)."""
    x = np.asarray(x, dtype=float).ravel()
    h = _step(x, rel) * 10.0  # second differences need a larger step
    return (4.0 * _second_differences(f, x, h / 2) - _second_differences(f, x, h)) / 3.0


def _derivs(f, x, grad=None, hess=None):
    g = np.asarray(grad(x[None, :]), dtype=float).ravel() if grad is not None else fd_gradient(f, x)
    H = np.asarray(hess(x[None, :]), dtype=float).reshape(x.size, x.size) if hess is not None else fd_hessian(f, x)
    return g, H


# ---------------------------------------------------------------------------
# mark integrals


@dataclass(frozen=True)
class Quadrature:
    """How mark integrals are computed.

    ``method="gauss"`` uses a composite rule of ``order`` nodes per panel and
    reports ``|Q_order - Q_{order/2}|`` as the error; ``method="mc"`` draws
    ``n_mc`` marks per layer from the layer sampler.
    """

    method: str = "gauss"
    order: int = 16
    panels: int = 40
    n_mc: int = 20_000
    seed: int = 0
    max_se: Optional[float] = None

    def __post_init__(self):
        if self.method not in ("gauss", "mc"):
            raise ValueError("quadrature method must be 'gauss' or 'mc'")


def _as_inhomogeneous(model: Model) -> InhomogeneousModel:
    return inhomogeneous_from_limit(model) if isinstance(model, LimitModel) else model


def layer_integral(model: Model, layer_index: int, t: float, integrand: Callable,
                   quad: Quadrature = Quadrature()) -> tuple[np.ndarray, np.ndarray]:
    """``int_layer integrand(z) mu(dz)`` with an error estimate.

    ``integrand(z)`` maps ``(k, m)`` marks to ``(k, ...)`` values.
    """
    layer = model.measure.layers[layer_index]
    if quad.method == "mc":
        rng = chunk_rng(quad.seed, layer_index)
        z = layer.sample(rng, quad.n_mc, t)
        mass = layer.mass_at(t)
        vals = np.asarray(integrand(z), dtype=float) * mass
        return vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(quad.n_mc)
    nodes, w = layer.quadrature(t, order=quad.order, panels=quad.panels)
    if not len(w):
        return 0.0, 0.0
    vals = np.asarray(integrand(nodes), dtype=float)
    hi = np.tensordot(w, vals, axes=(0, 0))
    nodes2, w2 = layer.quadrature(t, order=max(quad.order // 2, 2), panels=quad.panels)
    lo = np.tensordot(w2, np.asarray(integrand(nodes2), dtype=float), axes=(0, 0))
    return hi, np.abs(hi - lo)


def _check_se(se, quad: Quadrature):
    if quad.max_se is not None and float(np.max(se)) > quad.max_se:
        raise QuadratureError(f"mark-integral error estimate {float(np.max(se)):.3g} above {quad.max_se:.3g}")


# ---------------------------------------------------------------------------
# generators


def _jump_part(inh: InhomogeneousModel, f: Callable, t: float, x: np.ndarray, quad: Quadrature):
    val = 0.0
    var = 0.0
    for i in range(len(inh.measure.layers)):
        def integrand(z, i=i):
            k = z.shape[0]
            X = np.broadcast_to(x, (k, x.size))
            tt = np.full(k, t)
            c = inh.amplitude(tt, z, X)
            g = inh.rate(tt, z, X)
            return g * (np.asarray(f(X + c), dtype=float) - np.asarray(f(X), dtype=float))
        v, s = layer_integral(inh, i, t, integrand, quad)
        val += float(v)
        var += float(s) ** 2
    return val, math.sqrt(var)


def apply_generator(model: InhomogeneousModel, f: Callable, t: float, x, quad: Quadrature = Quadrature(),
                    grad: Optional[Callable] = None, hess: Optional[Callable] = None) -> Estimate:
    """``L_t f(x) = b . grad f + int [f(x + c) - f(x)] gamma dmu`` (plus a diffusion term if present)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    inh = _as_inhomogeneous(model)
    g, H = _derivs(f, x, grad, hess)
    tt = np.array([t], dtype=float)
    val = float(inh.drift(tt, x[None, :])[0] @ g)
    if inh.diffusion is not None:
        s = inh.diffusion(tt, x[None, :])[0]
        val += 0.5 * float(np.sum((s @ s.T) * H))
    jv, se = _jump_part(inh, f, t, x, quad)
    val += jv
    tail = inh.measure.tail
    if tail is not None:
        val += float(tail.first(x[None, :])[0] @ g) + 0.5 * float(np.sum(tail.second(x[None, :])[0] * H))
    _check_se(se, quad)
    return Estimate(val, se)


def apply_limit_generator(model: LimitModel, f: Callable, x, quad: Quadrature = Quadrature(),
                          grad: Optional[Callable] = None, hess: Optional[Callable] = None) -> Estimate:
    """``L f(x)``: drift, ``1/2 a : hess f`` and the jump integral.

    Mass beyond the last layer enters through the second-order Taylor
    expansion using the measure's tail moments.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g, H = _derivs(f, x, grad, hess)
    val = float(model.drift(x[None, :])[0] @ g)
    val += 0.5 * float(np.sum(model.covariance(x[None, :])[0] * H))
    jv, se = _jump_part(inhomogeneous_from_limit(model), f, 0.0, x, quad)
    val += jv
    tail = model.measure.tail
    if tail is not None:
        val += float(tail.first(x[None, :])[0] @ g) + 0.5 * float(np.sum(tail.second(x[None, :])[0] * H))
    _check_se(se, quad)
    return Estimate(val, se)


def generator_values(model: Model, f: Callable, xs: np.ndarray, t: Optional[float] = None,
                     quad: Quadrature = Quadrature(), grad=None, hess=None) -> tuple[np.ndarray, np.ndarray]:
    """Generator at every row of ``xs``; returns ``(values, se)``."""
    vals, ses = [], []
    for x in np.atleast_2d(xs):
        if isinstance(model, LimitModel):
            e = apply_limit_generator(model, f, x, quad, grad, hess)
        else:
            e = apply_generator(model, f, 0.0 if t is None else t, x, quad, grad, hess)
        vals.append(e.value)
        ses.append(e.se)
    return np.array(vals), np.array(ses)


# ---------------------------------------------------------------------------
# regime functionals


@dataclass(frozen=True)
class RegimeFunctionals:
    """Regime integrals at one ``(t, x)``; ``se`` holds error estimates by field name."""

    a: np.ndarray
    b_tilde: np.ndarray
    third_moment: float
    second_moment_mid: float
    centering: np.ndarray
    slow_gap: float
    eps: float
    se: dict = field(default_factory=dict)


def _regime_nodes(inh: InhomogeneousModel, t: float, quad: Quadrature):
    """Quadrature nodes of all layers with weights and regime labels."""
    if inh.regime is None:
        raise ModelError("regime functionals need a regime classifier on the model")
    parts = []
    for i, layer in enumerate(inh.measure.layers):
        nodes, w = layer.quadrature(t, order=quad.order, panels=quad.panels)
        nodes2, w2 = layer.quadrature(t, order=max(quad.order // 2, 2), panels=quad.panels)
        if len(w):
            parts.append((nodes, w, nodes2, w2))
    return parts


def _integrate_nodes(parts, fn):
    """Sum of ``fn(z)`` against every layer rule, with the two-order error."""
    hi = lo = 0.0
    for nodes, w, nodes2, w2 in parts:
        hi = hi + np.tensordot(w, fn(nodes), axes=(0, 0))
        lo = lo + np.tensordot(w2, fn(nodes2), axes=(0, 0))
    return hi, np.abs(np.asarray(hi) - np.asarray(lo))


def regime_functionals(model: InhomogeneousModel, t: float, x, limit: Optional[LimitModel] = None,
                       quad: Quadrature = Quadrature()) -> RegimeFunctionals:
    """Fast-regime covariance ``a(t,x)``, intermediate drift ``b~(t,x)`` and the remainders.

    ``slow_gap`` compares the slow regime with the limit's jump part: on the
    part of the limit support covered by the time-``t`` layers it integrates
    ``|gamma_t - gamma| + gamma |c_t - c|``, and outside it ``gamma |c|``.  ``eps`` is the sum of
    ``third_moment``, ``second_moment_mid``, ``|a(t,x) - a(x)|``,
    ``|b + b~ - g|`` and ``slow_gap``; it needs ``limit``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    parts = _regime_nodes(model, t, quad)

    def coeffs(z):
        k = z.shape[0]
        X = np.broadcast_to(x, (k, d))
        tt = np.full(k, t)
        return model.amplitude(tt, z, X), model.rate(tt, z, X), model.regime(tt, z), X

    def with_regime(r, kind):
        def fn(z):
            c, g, reg, _ = coeffs(z)
            w = g * (reg == r)
            if kind == "outer":
                return w[:, None, None] * np.einsum("ki,kj->kij", c, c)
            if kind == "first":
                return w[:, None] * c
            norm = np.linalg.norm(c, axis=1)
            return w * norm ** (3 if kind == "cube" else 2)
        return fn

    a, a_se = _integrate_nodes(parts, with_regime(1, "outer"))
    cen, cen_se = _integrate_nodes(parts, with_regime(1, "first"))
    third, third_se = _integrate_nodes(parts, with_regime(1, "cube"))
    bt, bt_se = _integrate_nodes(parts, with_regime(2, "first"))
    mid, mid_se = _integrate_nodes(parts, with_regime(2, "square"))
    a = np.broadcast_to(np.asarray(a, dtype=float), (d, d)).copy()
    bt = np.broadcast_to(np.asarray(bt, dtype=float), (d,)).copy()
    cen = np.broadcast_to(np.asarray(cen, dtype=float), (d,)).copy()
    se = {"a": float(np.max(a_se)), "centering": float(np.max(cen_se)), "third_moment": float(third_se),
          "b_tilde": float(np.max(bt_se)), "second_moment_mid": float(mid_se)}

    slow_gap = float("nan")
    eps = float("nan")
    if limit is not None:
        slow_gap, se["slow_gap"] = _slow_gap(model, limit, t, x, quad, parts)
        a_lim = limit.covariance(x[None, :])[0]
        drift_gap = model.drift(np.array([t]), x[None, :])[0] + bt - limit.drift(x[None, :])[0]
        eps = float(third) + float(mid) + float(np.linalg.norm(a - a_lim, 2)) \
            + float(np.linalg.norm(drift_gap)) + slow_gap
    return RegimeFunctionals(a=a, b_tilde=bt, third_moment=float(third), second_moment_mid=float(mid),
                             centering=cen, slow_gap=slow_gap, eps=eps, se=se)


def _slow_gap(model, limit, t, x, quad, parts):
    d = x.size

    def covered(z):
        k = z.shape[0]
        return model.measure.layer_of(z, t) >= 0 if k else np.zeros(0, dtype=bool)

    def inside(z):
        k = z.shape[0]
        X = np.broadcast_to(x, (k, d))
        tt = np.full(k, t)
        reg = model.regime(tt, z) == 3
        ct, gt = model.amplitude(tt, z, X), model.rate(tt, z, X)
        c, g = limit.amplitude(z, X), limit.rate(z, X)
        return reg * (np.abs(gt - g) + g * np.linalg.norm(ct - c, axis=1))

    v1, s1 = _integrate_nodes(parts, inside)
    v2 = s2 = 0.0
    lim_inh = inhomogeneous_from_limit(limit)
    for i in range(len(limit.measure.layers)):
        def outside(z):
            k = z.shape[0]
            X = np.broadcast_to(x, (k, d))
            g = limit.rate(z, X)
            c = limit.amplitude(z, X)
            return (~covered(z)) * g * np.linalg.norm(c, axis=1)
        v, s = layer_integral(lim_inh, i, 0.0, outside, quad)
        v2 += float(v)
        s2 += float(s)
    if limit.measure.tail is not None:
        t_val, t_se = _uncovered_tail(model, limit, t, x, quad, covered)
        v2 += t_val
        s2 += t_se
    return float(v1) + v2, float(s1) + s2


def _uncovered_tail(model, limit, t, x, quad, covered):
    """Part of the limit's tail moment ``int |c| gamma`` not covered by the time-``t`` layers.

    For scalar marks, the stretch of the tail lying under the model's layers
    is integrated with the limit's own coefficients on geometric panels and
    only the rest is counted; otherwise the whole tail counts as uncovered.
    """
    full = float(limit.measure.tail.abs_first(x[None, :])[0])
    if limit.dim_mark != 1 or not limit.measure.layers:
        return full, 0.0
    top = float(limit.measure.layers[-1].bounds(0.0)[1][0])
    reach = max(float(layer.bounds(t)[1][0]) for layer in model.measure.layers)
    if not reach > top:
        return full, 0.0

    def rule(order):
        edges = np.geomspace(1.0 + top, 1.0 + reach, quad.panels + 1) - 1.0
        g, w = np.polynomial.legendre.leggauss(order)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        return (mid[:, None] + half[:, None] * g[None, :]).ravel()[:, None], (half[:, None] * w[None, :]).ravel()

    def parts(order):
        z, w = rule(order)
        X = np.broadcast_to(x, (z.shape[0], x.size))
        mass = limit.rate(z, X) * np.linalg.norm(limit.amplitude(z, X), axis=1) * w
        return float(np.sum(mass)), float(np.sum(mass * ~covered(z)))

    hi_all, hi_unc = parts(quad.order)
    lo_all, lo_unc = parts(max(quad.order // 2, 2))
    beyond = max(full - hi_all, 0.0)
    return beyond + hi_unc, abs(hi_all - lo_all) + abs(hi_unc - lo_unc)


@dataclass
class EpsilonFit:
    """Fitted ``eps(x, t0) <= C (1 + |x|) e^{-r t0}`` plus the raw table.

    ``eps[i, j]`` is ``sup_{t >= t0_j} eps_t(x_i)`` over the evaluated grid;
    ``decaying`` is False when the fitted rate is not positive.
    """

    t_grid: np.ndarray
    x_grid: np.ndarray
    eps: np.ndarray
    slope: float
    rate: float
    constant: float
    residuals: np.ndarray
    decaying: bool
    generator_ratio: Optional[float] = None


def epsilon_decay(model_at: Union[InhomogeneousModel, Callable], limit: LimitModel, x_grid, t_grid,
                  quad: Quadrature = Quadrature(), dictionary: Optional["Dictionary"] = None) -> EpsilonFit:
    """Fit the exponential decay of ``eps(x, t0)`` in ``t0``.

    ``model_at`` is a model, or a callable ``t -> model`` for families whose
    coefficients are rebuilt per time.  With a ``dictionary``, the ratio
    ``|L f - L_t f| / (C e^{-rt} (1+|x|))`` is also reported (its maximum over
    functions, points and times); values at most 1 agree with the fitted
    envelope.
    """
    xs = np.atleast_2d(np.asarray(x_grid, dtype=float))
    if xs.shape[0] == 1 and limit.dim_state == 1 and np.asarray(x_grid).ndim == 1:
        xs = xs.T
    ts = np.sort(np.asarray(t_grid, dtype=float))
    get = model_at if callable(model_at) and not isinstance(model_at, InhomogeneousModel) else (lambda t: model_at)
    raw = np.array([[regime_functionals(get(t), t, x, limit, quad).eps for t in ts] for x in xs])
    env = np.maximum.accumulate(raw[:, ::-1], axis=1)[:, ::-1]
    weight = 1.0 + np.linalg.norm(xs, axis=1)
    pooled = np.max(env / weight[:, None], axis=0)
    positive = pooled > 0
    if positive.sum() < 2:
        return EpsilonFit(ts, xs, env, 0.0, 0.0, float(np.max(pooled, initial=0.0)), np.zeros(0),
                          decaying=bool(np.all(pooled == 0)))
    slope, intercept = np.polyfit(ts[positive], np.log(pooled[positive]), 1)
    resid = np.log(pooled[positive]) - (intercept + slope * ts[positive])
    C = float(np.exp(intercept + np.max(resid)))
    ratio = None
    if dictionary is not None:
        worst = 0.0
        for t in ts:
            m = get(t)
            for x, w in zip(xs, weight):
                for fn in dictionary.functions:
                    lt = apply_generator(m, fn, t, x, quad, fn.grad, fn.hess).value
                    lb = apply_limit_generator(limit, fn, x, quad, fn.grad, fn.hess).value
                    worst = max(worst, abs(lt - lb) / (C * math.exp(slope * t) * w))
        ratio = worst
    return EpsilonFit(ts, xs, env, float(slope), float(-slope), C, resid, bool(slope < 0), ratio)


# ---------------------------------------------------------------------------
# Lyapunov drift condition


@dataclass
class LyapunovResult:
    verified: bool
    b: float
    c: float
    violations: np.ndarray
    LV: np.ndarray
    grid: np.ndarray

    def feasible(self, b: float, c: float, tol: float = 1e-9) -> bool:
        """Whether ``LV <= -b V + c 1_K`` holds at every grid point."""
        return bool(self._feasible(b, c, tol))

    def _feasible(self, b, c, tol):
        return np.all(self.LV <= -b * self._V + c * self._K + tol)


def lyapunov_check(model: Model, spec: LyapunovSpec, grid, t_grid: Optional[Sequence[float]] = None,
                   quad: Quadrature = Quadrature(), grad=None, hess=None) -> LyapunovResult:
    """Largest ``b`` and smallest ``c`` with ``LV <= -b V + c 1_K`` on the grid.

    For an inhomogeneous model ``L_t V`` is maximized over ``t_grid``.
    ``verified`` requires ``b > 0`` and ``V >= 1`` on the grid; violation
    points are grid points outside ``K`` with ``LV >= 0``.
    """
    xs = np.atleast_2d(np.asarray(grid, dtype=float))
    if xs.shape[0] == 1 and model.dim_state == 1:
        xs = xs.T
    V = np.asarray(spec.V(xs), dtype=float)
    if isinstance(model, LimitModel):
        LV, _ = generator_values(model, spec.V, xs, quad=quad, grad=grad, hess=hess)
    else:
        ts = [0.0] if t_grid is None else list(t_grid)
        LV = np.max([generator_values(model, spec.V, xs, t=t, quad=quad, grad=grad, hess=hess)[0] for t in ts], axis=0)
    inK = spec.in_K(xs)
    out = ~inK
    b = float(np.min(-LV[out] / V[out])) if np.any(out) else float("inf")
    c = float(max(0.0, np.max(LV[inK] + b * V[inK]))) if np.any(inK) and np.isfinite(b) else 0.0
    violations = xs[out & (LV >= 0)]
    verified = bool(b > 0 and np.all(V >= 1.0) and np.isfinite(c))
    res = LyapunovResult(verified, b, c, violations, LV, xs)
    res._V, res._K = V, inK.astype(float)
    return res


# ---------------------------------------------------------------------------
# seminorms and bounds


def _box(model, box) -> BoxSet:
    if box is None:
        return BoxSet(-5.0 * np.ones(model.dim_state), 5.0 * np.ones(model.dim_state))
    return box if isinstance(box, BoxSet) else BoxSet(*box)


def _grid(model, box, grid_points):
    return _box(model, box).grid(grid_points)


def _jac_norm(fn, xs, h=1e-4):
    """Frobenius norm of the ``x``-Jacobian of ``fn`` at every row of ``xs``."""
    d = xs.shape[1]
    tot = 0.0
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        diff = (np.asarray(fn(xs + e)) - np.asarray(fn(xs - e))) / (2 * h)
        tot = tot + diff.reshape(xs.shape[0], -1) ** 2 if np.ndim(tot) else diff.reshape(xs.shape[0], -1) ** 2
    return np.sqrt(np.sum(tot, axis=1))


def lipschitz_drift_diffusion(model: LimitModel, box=None, grid_points: int = 33) -> tuple[float, float]:
    """Grid sup of ``|grad g|`` and of ``sum_l |grad sigma_l|``."""
    xs = _grid(model, box, grid_points)
    lg = float(np.max(_jac_norm(model.drift, xs)))
    if model.diffusion is None:
        return lg, 0.0
    k = model.n_brownian
    ls = sum(float(np.max(_jac_norm(lambda y, l=l: model.diffusion(y)[:, :, l], xs))) for l in range(k))
    return lg, ls


def _all_nodes(model: Model, t: float, quad: Quadrature, start: int = 0):
    nodes, weights, layer_idx = [], [], []
    for i, layer in enumerate(model.measure.layers[start:], start=start):
        z, w = layer.quadrature(t, order=quad.order, panels=quad.panels)
        nodes.append(z)
        weights.append(w)
        layer_idx.append(np.full(len(w), i))
    if not nodes:
        return np.zeros((0, model.dim_mark)), np.zeros(0), np.zeros(0, dtype=int)
    return np.concatenate(nodes), np.concatenate(weights), np.concatenate(layer_idx)


def _pair(z, xs):
    """All (mark, state) pairs: returns ``(Z, X)`` of length ``len(z) * len(xs)``, state-major."""
    return np.tile(z, (xs.shape[0], 1)), np.repeat(xs, z.shape[0], axis=0)


_SEMI_QUAD = Quadrature(order=8, panels=24)


def alpha_tail(model: LimitModel, level: int, box=None, grid_points: int = 33,
               quad: Quadrature = _SEMI_QUAD) -> float:
    """``sup_x int_{G_level^c} |c| gamma dmu`` (finite layers beyond ``level`` plus the tail)."""
    xs = _grid(model, box, grid_points)
    z, w, _ = _all_nodes(model, 0.0, quad, start=level)
    total = np.zeros(xs.shape[0])
    if len(w):
        Z, X = _pair(z, xs)
        vals = model.rate(Z, X) * np.linalg.norm(model.amplitude(Z, X), axis=1)
        total += (vals.reshape(xs.shape[0], -1) * w[None, :]).sum(axis=1)
    if model.measure.tail is not None:
        total += model.measure.tail.abs_first(xs)
    return float(np.max(total))


def c_mu(model: LimitModel, box=None, grid_points: int = 33, quad: Quadrature = _SEMI_QUAD,
         h: float = 1e-4) -> float:
    """``sup_x int (L_c(z) gamma + L_gamma(z) |c|) dmu``.

    ``L_c`` and ``L_gamma`` are grid sups over ``x`` of the ``x``-gradients.
    The tail beyond the last layer contributes the grid sup of the gradient
    of its ``int |c| gamma`` moment.
    """
    xs = _grid(model, box, grid_points)
    z, w, _ = _all_nodes(model, 0.0, quad)
    n, k = xs.shape[0], z.shape[0]
    total = 0.0
    if k:
        Z, X = _pair(z, xs)
        Lc = _jac_norm(lambda y: model.amplitude(Z, y), X, h).reshape(n, k).max(axis=0)
        Lg = _jac_norm(lambda y: model.rate(Z, y)[:, None], X, h).reshape(n, k).max(axis=0)
        g = model.rate(Z, X).reshape(n, k)
        c = np.linalg.norm(model.amplitude(Z, X), axis=1).reshape(n, k)
        total = float(np.max(((Lc[None, :] * g + Lg[None, :] * c) * w[None, :]).sum(axis=1)))
    if model.measure.tail is not None:
        total += float(np.max(_jac_norm(lambda y: model.measure.tail.abs_first(y)[:, None], xs, h)))
    return total


@dataclass
class SeminormReport:
    """Grid estimates of the mark-integral norms and derived constants.

    ``divergent`` names the terms whose integral is flagged as infinite (the
    last layer carries more than 10% of a term while the measure has an
    unbounded tail).
    """

    norms: dict
    theta: float
    alpha_p: float
    alpha_qp: float
    gamma_q: float
    q3: float
    c_t0: float
    c_mu: float
    alpha_tail: float
    constant: float
    p: int
    q: int
    T: float
    t0: float
    divergent: list = field(default_factory=list)
    q3_growth: Optional[float] = None

    def pseudotrajectory_bound(self, t0: float, T: float, x, r: float, C: Optional[float] = None) -> float:
        """``C Q_3 (1 + |x|) max(t - t0, 1) int_{t0}^{t0+T} e^{-rs} ds`` at ``t = t0 + T``."""
        C = self.constant if C is None else C
        x = np.atleast_1d(np.asarray(x, dtype=float))
        integral = (math.exp(-r * t0) - math.exp(-r * (t0 + T))) / r
        return float(C * self.q3 * (1 + np.linalg.norm(x)) * max(T, 1.0) * integral)


class _MarkNorms:
    """Per-layer integrals ``int |F(z, x)|^p gamma(z, x) dmu`` on a state grid."""

    def __init__(self, model: LimitModel, xs: np.ndarray, quad: Quadrature):
        self.model, self.xs = model, xs
        z, w, lay = _all_nodes(model, 0.0, quad)
        self.z, self.w, self.lay = z, w, lay
        self.Z, self.X = _pair(z, xs)
        self.gamma = model.rate(self.Z, self.X) if len(w) else np.zeros(0)
        self.n, self.k = xs.shape[0], z.shape[0]
        self.last = len(model.measure.layers) - 1
        self.infinite_tail = model.measure.tail is not None

    def integral(self, values: np.ndarray, p: float):
        """``sup_x int |values|^p gamma dmu``; also the share of the last layer."""
        if not self.k:
            return 0.0, 0.0
        v = (np.abs(values) ** p * self.gamma).reshape(self.n, self.k) * self.w[None, :]
        tot = v.sum(axis=1)
        i = int(np.argmax(tot))
        last = v[i, self.lay == self.last].sum()
        return float(tot[i]), float(last / tot[i]) if tot[i] > 0 else 0.0

    def bracket(self, values: np.ndarray, p: int):
        """``[F]_p = max_{1 <= p' <= p} |F|_{p'}`` and the worst last-layer share."""
        best, share = 0.0, 0.0
        for pp in range(1, p + 1):
            v, s = self.integral(values, pp)
            best = max(best, v ** (1.0 / pp))
            share = max(share, s)
        return best, share


def _sup_derivs(fn, xs, q, h=1e-3):
    """``sum_{|alpha| <= q} sup |d^alpha fn|`` with Frobenius norms of the values."""
    d = xs.shape[1]
    tot = 0.0
    for order in range(q + 1):
        for alpha in multi_indices(d, order):
            v = partial_derivative(fn, xs, alpha, h)
            tot += float(np.max(np.linalg.norm(np.asarray(v).reshape(xs.shape[0], -1), axis=1)))
    return tot


def _log_rate(model, Z):
    def fn(y):
        g = model.rate(Z, y)
        with np.errstate(divide="ignore"):
            return np.where(g > 0, np.log(np.maximum(g, 1e-300)), 0.0)
    return fn


def c_t0(model_at, t_grid: Sequence[float], box=None, grid_points: int = 9,
         quad: Quadrature = _SEMI_QUAD, h: float = 1e-4) -> np.ndarray:
    """``C_{t0}`` for every ``t0`` in ``t_grid`` (sup over the later grid times).

    ``model_at`` is an inhomogeneous model or ``t -> model``.
    """
    get = model_at if callable(model_at) and not isinstance(model_at, InhomogeneousModel) else (lambda t: model_at)
    ts = np.sort(np.asarray(t_grid, dtype=float))
    vals = []
    for t in ts:
        m = get(t)
        if m.regime is None:
            raise ModelError("C_t0 needs a regime classifier")
        xs = _grid(m, box, grid_points)
        z, w, _ = _all_nodes(m, float(t), quad)
        n, k = xs.shape[0], z.shape[0]
        Z, X = _pair(z, xs)
        tt = np.full(Z.shape[0], t)
        c = m.amplitude(tt, Z, X)
        g = m.rate(tt, Z, X)
        cn = np.linalg.norm(c, axis=1)
        dg = _jac_norm(lambda y: m.rate(tt, Z, y)[:, None], X, h)
        dc = _jac_norm(lambda y: m.amplitude(tt, Z, y), X, h)
        reg = m.regime(tt, Z)
        phi1 = (dg * cn ** 2 + (dc ** 2 + cn ** 2) * g) * (reg == 1)
        phi2 = (dg * cn + (dc * cn + dc) * g) * (reg != 1)
        tot = ((phi1 + phi2).reshape(n, k) * w[None, :]).sum(axis=1)
        vals.append(float(np.max(tot)))
    vals = np.array(vals)
    return np.maximum.accumulate(vals[::-1])[::-1]


def seminorm_report(limit: LimitModel, model_at=None, T: float = 1.0, t0: float = 0.0,
                    box=None, grid_points: int = 9, t_grid: Optional[Sequence[float]] = None,
                    constant: float = 1.0, p: int = 12, q: int = 3, quad: Quadrature = _SEMI_QUAD,
                    T_grid: Optional[Sequence[float]] = None) -> SeminormReport:
    """All regularity constants entering the pseudotrajectory bound.

    ``constant`` is the unspecified generic constant ``C``.  With
    ``T_grid``, the exponential growth rate of ``Q_3`` in ``T`` is fitted
    and stored as ``q3_growth``.
    """
    xs = _grid(limit, box, grid_points)
    mn = _MarkNorms(limit, xs, quad)
    d = limit.dim_state
    divergent = []
    norms = {}

    def flag(name, share):
        if mn.infinite_tail and share > 0.1:
            divergent.append(name)

    sigma_fn = (lambda y: limit.diffusion(y)) if limit.diffusion is not None else (lambda y: np.zeros((y.shape[0], d, 1)))
    sig = _sup_derivs(sigma_fn, xs, 2)
    gnorm = _sup_derivs(limit.drift, xs, 2)
    norms["sigma_2"] = sig
    norms["g_2"] = gnorm

    amp = lambda y: limit.amplitude(mn.Z, y)  # noqa: E731
    c_terms = 0.0
    if mn.k:
        for order in range(2, q + 1):
            for alpha in multi_indices(d, order):
                vals = np.linalg.norm(np.asarray(partial_derivative(amp, mn.X, alpha, 1e-3)).reshape(mn.X.shape[0], -1), axis=1)
                v, share = mn.bracket(vals, p)
                c_terms += v
                flag(f"[d^{alpha} c]_{p}", share)
    theta = 1.0 + sig + gnorm + c_terms
    norms["c_higher"] = c_terms

    lg, ls = lipschitz_drift_diffusion(limit, box, grid_points)
    sig_grad_sq = 0.0
    if limit.diffusion is not None:
        sig_grad_sq = float(np.max(_jac_norm(lambda y: limit.diffusion(y).reshape(y.shape[0], -1), xs))) ** 2

    def alpha_of(pp):
        if not mn.k:
            return sig_grad_sq + lg, 0.0
        dc = _jac_norm(amp, mn.X)
        v, share = mn.bracket(dc, pp)
        return sig_grad_sq + lg + v ** pp, share

    a_p, share = alpha_of(p)
    flag(f"[grad c]_{p}", share)
    a_pq, share = alpha_of(p * q)
    flag(f"[grad c]_{p * q}", share)

    def alpha_qp(TT):
        return constant * theta ** q * math.exp(constant * TT * q * sum(1.0 / n for n in range(1, q + 1)) * a_pq)

    # log-rate derivative integrals
    gam_q = 0.0
    log_terms = 0.0
    if mn.k:
        lr = _log_rate(limit, mn.Z)
        dl = {}
        for order in range(1, q + 1):
            for alpha in multi_indices(d, order):
                dl[alpha] = np.abs(np.asarray(partial_derivative(lr, mn.X, alpha, 1e-3)))
        per_x = np.zeros(mn.n)
        for l in range(1, q + 1):
            for alpha, vals in dl.items():
                if sum(alpha) > l:
                    continue
                v = (np.abs(vals) ** (l / sum(alpha)) * mn.gamma).reshape(mn.n, mn.k) * mn.w[None, :]
                per_x += v.sum(axis=1) ** (q / l)
                tot = v.sum(axis=1)
                i = int(np.argmax(tot))
                if tot[i] > 0:
                    flag(f"Gamma_{q}", v[i, mn.lay == mn.last].sum() / tot[i])
        gam_q = float(np.max(per_x))
        base = np.abs(lr(mn.X))
        v, share = mn.bracket(base, p)
        log_terms += v
        flag(f"[ln gamma]_{p}", share)
        for alpha, vals in dl.items():
            v, share = mn.bracket(vals, p)
            log_terms += v
            flag(f"[d^{alpha} ln gamma]_{p}", share)

    def q3_of(TT):
        return alpha_qp(TT) ** 6 * (1.0 + gam_q + log_terms) ** 3

    q3 = q3_of(T)
    growth = None
    if T_grid is not None:
        Ts = np.asarray(T_grid, dtype=float)
        growth = float(np.polyfit(Ts, np.log([q3_of(tt) for tt in Ts]), 1)[0])

    ct = float("nan")
    if model_at is not None:
        ts = [t0] if t_grid is None else [t for t in t_grid if t >= t0] or [t0]
        ct = float(c_t0(model_at, ts, box, grid_points, quad)[0])
    report = SeminormReport(
        norms=norms, theta=theta, alpha_p=a_p, alpha_qp=alpha_qp(T), gamma_q=gam_q, q3=q3, c_t0=ct,
        c_mu=c_mu(limit, box, grid_points, quad), alpha_tail=alpha_tail(limit, len(limit.measure.layers), box, grid_points, quad),
        constant=constant, p=p, q=q, T=T, t0=t0, divergent=sorted(set(divergent)), q3_growth=growth,
    )
    if report.divergent:
        report.q3 = float("inf") if any("gamma" in name.lower() or "c]" in name for name in report.divergent) else report.q3
    return report


# ---------------------------------------------------------------------------
# test-function dictionary


def _bump_derivs(v):
    e = np.exp(-0.5 * v * v)
    return [e, -v * e, (v * v - 1) * e, (3 * v - v ** 3) * e]


def _sigmoid_derivs(v):
    s = 1.0 / (1.0 + np.exp(-v))
    s1 = s * (1 - s)
    return [s, s1, s1 * (1 - 2 * s), s1 * (1 - 6 * s + 6 * s * s)]


_V3 = math.sqrt(3 - math.sqrt(6))
_SUPS = {
    "bump": (1.0, math.exp(-0.5), 1.0, abs((3 * _V3 - _V3 ** 3) * math.exp(-0.5 * _V3 ** 2))),
    "sigmoid": (1.0, 0.25, 1.0 / (6 * math.sqrt(3)), 0.125),
}


@dataclass(frozen=True)
class TestFunction:
    """Normalized product ``prod_i phi_i((x_i - center_i) / scale_i) / norm``.

    ``norm`` is the exact sum over ``|alpha| <= 3`` of the sup of
    ``d^alpha`` of the unnormalized product, so ``||f||_{3,inf} = 1``.
    """

    __test__ = False  # not a pytest class

    centers: np.ndarray
    scales: np.ndarray
    kinds: tuple

    @property
    def norm(self) -> float:
        d = len(self.kinds)
        tot = 0.0
        for order in range(4):
            for alpha in multi_indices(d, order):
                tot += float(np.prod([_SUPS[k][a] / s ** a for k, a, s in zip(self.kinds, alpha, self.scales)]))
        return tot

    def _factors(self, x):
        x = np.atleast_2d(x)
        out = []
        for i, kind in enumerate(self.kinds):
            v = (x[:, i] - self.centers[i]) / self.scales[i]
            ds = _bump_derivs(v) if kind == "bump" else _sigmoid_derivs(v)
            out.append([ds[k] / self.scales[i] ** k for k in range(4)])
        return out

    def partial(self, x, alpha) -> np.ndarray:
        fac = self._factors(x)
        val = np.ones(np.atleast_2d(x).shape[0])
        for i, a in enumerate(alpha):
            val = val * fac[i][a]
        return val / self.norm

    def __call__(self, x):
        return self.partial(x, (0,) * len(self.kinds))

    def grad(self, x):
        d = len(self.kinds)
        return np.stack([self.partial(x, tuple(int(j == i) for j in range(d))) for i in range(d)], axis=1)

    def hess(self, x):
        d = len(self.kinds)
        n = np.atleast_2d(x).shape[0]
        H = np.empty((n, d, d))
        for i in range(d):
            for j in range(d):
                a = [0] * d
                a[i] += 1
                a[j] += 1
                H[:, i, j] = self.partial(x, tuple(a))
        return H


@dataclass(frozen=True)
class Dictionary:
    functions: tuple

    def __len__(self) -> int:
        return len(self.functions)

    def values(self, x) -> np.ndarray:
        """``(n, len(self))`` matrix of all functions at the rows of ``x``."""
        return np.stack([f(x) for f in self.functions], axis=1)


def make_dictionary(dim: int, box, size: int = 64, seed: int = 0, scale_range=(0.1, 0.5)) -> Dictionary:
    """Random products of Gaussian bumps and sigmoids over ``box``.

    Centers are uniform on the box; scales are log-uniform in
    ``scale_range`` times the box width along each coordinate.
    """
    box = box if isinstance(box, BoxSet) else BoxSet(*box)
    if box.dim != dim:
        raise ValueError("box dimension does not match")
    rng = chunk_rng(seed, 7)
    width = np.maximum(box.hi - box.lo, 1e-12)
    funcs = []
    for _ in range(size):
        centers = box.lo + width * rng.uniform(size=dim)
        lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
        scales = width * np.exp(rng.uniform(lo, hi, size=dim))
        kinds = tuple("bump" if k else "sigmoid" for k in rng.integers(0, 2, size=dim))
        funcs.append(TestFunction(centers, scales, kinds))
    return Dictionary(tuple(funcs))


# ---------------------------------------------------------------------------
# semigroup consistency


@dataclass
class ConsistencyResult:
    x: np.ndarray
    generator: np.ndarray
    generator_se: np.ndarray
    richardson: np.ndarray
    richardson_se: np.ndarray
    z_scores: np.ndarray
    passed: bool


def semigroup_consistency(limit: LimitModel, f: Callable, xs, hs=(0.02, 0.01, 0.005), n_paths: int = 100_000,
                          steps_per_h: int = 4, seed: int = 0, quad: Quadrature = Quadrature(),
                          grad=None, hess=None, z_max: float = 3.0) -> ConsistencyResult:
    """Compare ``(E f(X_h) - f(x)) / h`` extrapolated to ``h -> 0`` with ``L f(x)``.

    Second-order Richardson extrapolation over three halving steps removes
    the ``O(h)`` and ``O(h^2)`` terms; the check passes when every point
    agrees within ``z_max`` combined standard errors.
    """
    from .simulate import SimConfig, simulate_limit

    hs = np.asarray(hs, dtype=float)
    if hs.size != 3 or not np.allclose(hs[1:] / hs[:-1], 0.5):
        raise ValueError("three halving step sizes are required")
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[0] == 1 and limit.dim_state == 1:
        xs = xs.T
    coef = np.array([1.0, -6.0, 8.0]) / 3.0
    gen, gse, rich, rse = [], [], [], []
    for i, x in enumerate(xs):
        e = apply_limit_generator(limit, f, x, quad, grad, hess)
        gen.append(e.value)
        gse.append(e.se)
        D, V = [], []
        for j, h in enumerate(hs):
            cfg = SimConfig(dt=h / steps_per_h, horizon=h, n_paths=n_paths, seed=seed * 1000 + i * 10 + j)
            term = simulate_limit(limit, x, cfg).terminal
            diff = (np.asarray(f(term), dtype=float) - float(np.asarray(f(x[None, :]))[0])) / h
            D.append(diff.mean())
            V.append(diff.var(ddof=1) / n_paths)
        rich.append(float(coef @ np.array(D)))
        rse.append(float(math.sqrt(coef ** 2 @ np.array(V))))
    gen, gse, rich, rse = map(np.array, (gen, gse, rich, rse))
    z = np.abs(rich - gen) / np.sqrt(rse ** 2 + gse ** 2)
    return ConsistencyResult(xs, gen, gse, rich, rse, z, bool(np.all(z <= z_max)))
