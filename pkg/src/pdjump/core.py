"""Domain types: layered jump measures, model coefficient bundles, sets and paths.

Array conventions used throughout the package: states are ``(n, d)`` arrays,
marks are ``(n, m)`` arrays, and every coefficient callable is evaluated
row-wise on paired batches, returning ``(n, d)`` for vector fields and
``(n,)`` for rates.
"""
from __future__ import annotations

import csv
import math
from functools import cached_property
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.random import Generator

ArrayFn = Callable[..., np.ndarray]


class ModelError(ValueError):
    """Invalid model, measure or parameter set."""


class RateBoundError(RuntimeError):
    """A jump rate exceeded its declared dominating bound."""


class ExplosionError(RuntimeError):
    """A simulated state left the configured safety box."""

    def __init__(self, time: float, bound: float):
        super().__init__(f"state left the safety box |x| <= {bound:g} at t={time:.6g}")
        self.time = time


def _as_bounds(value, t: float) -> np.ndarray:
    v = value(t) if callable(value) else value
    return np.atleast_1d(np.asarray(v, dtype=float))


# ---------------------------------------------------------------------------
# sets


@dataclass(frozen=True)
class BallSet:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))
        if not self.radius > 0:
            raise ModelError("ball radius must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def contains(self, x: np.ndarray, closed: bool = False) -> np.ndarray:
        dist = np.linalg.norm(np.atleast_2d(x) - self.center, axis=1)
        return dist <= self.radius if closed else dist < self.radius

    def volume(self) -> float:
        d = self.dim
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius**d

    def sample(self, rng: Generator, size: int) -> np.ndarray:
        d = self.dim
        if d == 1:
            return self.center + self.radius * rng.uniform(-1.0, 1.0, size=(size, 1))
        g = rng.standard_normal((size, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(size, 1)) ** (1.0 / d)
        return self.center + r * g

    def grid(self, points_per_dim: int) -> np.ndarray:
        """Tensor grid over the bounding box, restricted to the closed ball."""
        axes = [np.linspace(c - self.radius, c + self.radius, points_per_dim) for c in self.center]
        pts = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        return pts[self.contains(pts, closed=True) | (self.dim == 1)]


@dataclass(frozen=True)
class BoxSet:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ModelError("box needs matching bounds with lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def grid(self, points_per_dim: int = 33) -> np.ndarray:
        axes = [np.linspace(a, b, points_per_dim) for a, b in zip(self.lo, self.hi)]
        return np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)


# ---------------------------------------------------------------------------
# layered measure


def _gauss_legendre_box(lo: np.ndarray, hi: np.ndarray, order: int, panels: int):
    """Composite Gauss-Legendre nodes on a box.

    One-dimensional boxes get dyadic panels refined towards ``lo`` so that
    long intervals with mass concentrated near their left end (the typical
    ``(0, L)`` jump band) are integrated accurately.
    """
    g, w = np.polynomial.legendre.leggauss(order)
    if lo.size == 1:
        a, b = float(lo[0]), float(hi[0])
        width = b - a
        if width <= 0:
            return np.zeros((0, 1)), np.zeros(0)
        fr = np.concatenate([[0.0], 2.0 ** -np.arange(panels - 1, -1, -1.0)])
        edges = a + width * fr
        left, right = edges[:-1], edges[1:]
        half = 0.5 * (right - left)
        nodes = (0.5 * (left + right))[:, None] + half[:, None] * g[None, :]
        weights = half[:, None] * w[None, :]
        return nodes.reshape(-1, 1), weights.ravel()
    axes, wts = [], []
    for a, b in zip(lo, hi):
        half = 0.5 * (b - a)
        axes.append(0.5 * (a + b) + half * g)
        wts.append(half * w)
    mesh = np.meshgrid(*axes, indexing="ij")
    wmesh = np.meshgrid(*wts, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    weights = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    return nodes, weights


@dataclass(frozen=True)
class Layer:
    """One shell ``G_n \\ G_{n-1}`` of the jump measure.

    ``lo``/``hi`` may be arrays or callables of time (time-varying bands).
    ``density`` is the Lebesgue density ``h`` of the measure on the box
    (``None`` means Lebesgue itself); ``density_max`` bounds it for rejection
    sampling.  ``sampler(rng, size, t)`` overrides the default box sampler and
    ``contains(z, t)`` the default box membership.

    ``step_increment(t, dt, x, rng)`` optionally gives the aggregated jump
    increment of this layer over ``[t, t+dt]`` with the state frozen; it is
    used for high-activity layers that are not simulated event by event.
    ``drift(t, x)`` optionally gives ``int c gamma dmu`` over the layer in
    closed form.
    """

    lo: object
    hi: object
    density: Optional[ArrayFn] = None
    density_max: Optional[float] = None
    mass: object = None
    sampler: Optional[Callable] = None
    contains_fn: Optional[Callable] = None
    step_increment: Optional[Callable] = None
    drift: Optional[Callable] = None
    name: str = ""
    mass_increasing: bool = True

    def bounds(self, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        return _as_bounds(self.lo, t), _as_bounds(self.hi, t)

    @cached_property
    def dim(self) -> int:
        return self.bounds(0.0)[0].shape[0]

    @cached_property
    def time_dependent(self) -> bool:
        return callable(self.lo) or callable(self.hi) or callable(self.mass)

    def mass_at(self, t: float = 0.0) -> float:
        if self.mass is not None:
            return float(self.mass(t)) if callable(self.mass) else float(self.mass)
        lo, hi = self.bounds(t)
        vol = float(np.prod(hi - lo))
        if self.density is None:
            return vol
        nodes, w = self.quadrature(t, order=16)
        return float(np.sum(w))

    def contains(self, z: np.ndarray, t: float = 0.0) -> np.ndarray:
        z = np.atleast_2d(z)
        if self.contains_fn is not None:
            return np.asarray(self.contains_fn(z, t), dtype=bool)
        lo, hi = self.bounds(t)
        return np.all((z > lo) & (z <= hi), axis=1)

    def sample(self, rng: Generator, size: int, t: float = 0.0) -> np.ndarray:
        if self.sampler is not None:
            return np.asarray(self.sampler(rng, size, t), dtype=float).reshape(size, -1)
        lo, hi = self.bounds(t)
        if self.density is None:
            return lo + (hi - lo) * rng.uniform(size=(size, lo.shape[0]))
        if self.density_max is None:
            raise ModelError(f"layer {self.name!r}: non-uniform density needs density_max or a sampler")
        out = np.empty((size, lo.shape[0]))
        filled = 0
        while filled < size:
            k = max(2 * (size - filled), 16)
            cand = lo + (hi - lo) * rng.uniform(size=(k, lo.shape[0]))
            keep = cand[rng.uniform(size=k) * self.density_max <= self.density(cand)]
            take = min(keep.shape[0], size - filled)
            out[filled : filled + take] = keep[:take]
            filled += take
        return out

    def quadrature(self, t: float = 0.0, order: int = 16, panels: int = 40):
        """Nodes and weights (density included) integrating against the layer."""
        lo, hi = self.bounds(t)
        nodes, w = _gauss_legendre_box(lo, hi, order, panels)
        if self.density is not None and len(w):
            w = w * self.density(nodes)
        elif self.mass is not None and len(w):
            # declared mass on a uniform layer with custom sampler: rescale
            vol = float(np.prod(hi - lo))
            m = self.mass_at(t)
            if vol > 0 and not np.isclose(m, vol):
                w = w * (m / vol)
        return nodes, w


@dataclass(frozen=True)
class TailMoments:
    """Closed-form moments of the jump measure beyond the last layer.

    ``first(x)`` is ``int c gamma dmu`` (``(n, d)``), ``second(x)`` is
    ``int c c^T gamma dmu`` (``(n, d, d)``) and ``abs_first(x)`` is
    ``int |c| gamma dmu`` (``(n,)``).
    """

    first: ArrayFn
    second: ArrayFn
    abs_first: ArrayFn


@dataclass(frozen=True)
class LayeredMeasure:
    layers: tuple
    gamma_bound: float
    rate_bounds: Optional[tuple] = None
    tail: Optional[TailMoments] = None

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.layers[0].dim if self.layers else 0

    def masses(self, t: float = 0.0) -> np.ndarray:
        return np.array([layer.mass_at(t) for layer in self.layers])

    def cumulative_mass(self, n: int, t: float = 0.0) -> float:
        return float(np.sum(self.masses(t)[:n]))

    def rate_bound(self, n: int, t: float = 0.0) -> float:
        """Dominating rate ``Gamma_n`` of the first ``n`` layers."""
        if n <= 0:
            return 0.0
        if self.rate_bounds is not None:
            return float(self.rate_bounds[n - 1])
        return self.gamma_bound * self.cumulative_mass(n, t)

    def layer_of(self, z: np.ndarray, t: float = 0.0) -> np.ndarray:
        """Index of the layer containing each mark, -1 outside all layers."""
        z = np.atleast_2d(z)
        out = np.full(z.shape[0], -1)
        for i, layer in enumerate(self.layers):
            hit = (out < 0) & layer.contains(z, t)
            out[hit] = i
        return out

    def mass_report(self, rng: Generator, n_samples: int = 100_000, t: float = 0.0) -> list[dict]:
        """Monte Carlo check of declared layer masses against the density.

        The estimate integrates ``h`` (1 if absent) over the layer box using
        uniform points; ``ok`` means agreement within three standard errors.
        """
        rows = []
        for i, layer in enumerate(self.layers):
            lo, hi = layer.bounds(t)
            vol = float(np.prod(hi - lo))
            pts = lo + (hi - lo) * rng.uniform(size=(n_samples, lo.shape[0]))
            if layer.contains_fn is not None:
                inside = layer.contains(pts, t).astype(float)
            else:
                inside = np.ones(n_samples)
            h = layer.density(pts) if layer.density is not None else np.ones(n_samples)
            vals = vol * h * inside
            est = float(vals.mean())
            se = float(vals.std(ddof=1) / math.sqrt(n_samples))
            declared = layer.mass_at(t)
            ok = abs(est - declared) <= 3 * se + 1e-12 * max(1.0, declared)
            rows.append({"layer": i, "declared": declared, "estimate": est, "se": se, "ok": ok})
        return rows


def build_layered_measure(
    layer_descriptors: Sequence,
    gamma_bound: float,
    rate_bounds: Optional[Sequence[float]] = None,
    tail: Optional[TailMoments] = None,
    t: float = 0.0,
    verify_mass: Optional[Generator] = None,
    mass_samples: int = 100_000,
) -> LayeredMeasure:
    """Validate layer descriptors and assemble a :class:`LayeredMeasure`.

    Descriptors are :class:`Layer` objects or dicts of their fields.  When
    ``rate_bounds`` is omitted the bounds are ``gamma_bound * mu(G_n)``.  If
    an RNG is passed as ``verify_mass`` the declared masses are checked
    against a Monte Carlo integral of the density and a mismatch raises.
    """
    layers = tuple(d if isinstance(d, Layer) else Layer(**d) for d in layer_descriptors)
    if not layers:
        raise ModelError("a layered measure needs at least one layer")
    if not gamma_bound >= 0:
        raise ModelError("gamma_bound must be nonnegative")
    dims = {layer.dim for layer in layers}
    if len(dims) != 1:
        raise ModelError("all layers must share the mark dimension")
    masses = np.array([layer.mass_at(t) for layer in layers])
    if np.any(~np.isfinite(masses)) or np.any(masses <= 0):
        bad = int(np.flatnonzero(~(masses > 0) | ~np.isfinite(masses))[0])
        raise ModelError(f"layer {bad} has nonpositive or infinite mass {masses[bad]!r}")
    if rate_bounds is not None:
        rb = np.asarray(rate_bounds, dtype=float)
        if rb.shape != (len(layers),):
            raise ModelError("one rate bound per layer is required")
        if np.any(np.diff(rb) <= 0):
            raise ModelError("rate bounds Gamma_n must be strictly increasing")
        rate_bounds = tuple(float(v) for v in rb)
    measure = LayeredMeasure(layers, float(gamma_bound), rate_bounds, tail)
    if rate_bounds is None and gamma_bound > 0:
        rb = np.array([measure.rate_bound(n, t) for n in range(1, len(layers) + 1)])
        if np.any(np.diff(rb) <= 0):
            raise ModelError("rate bounds Gamma_n must be strictly increasing")
    if verify_mass is not None:
        bad = [r for r in measure.mass_report(verify_mass, mass_samples, t) if not r["ok"]]
        if bad:
            r = bad[0]
            raise ModelError(
                f"layer {r['layer']}: declared mass {r['declared']:g} but density integrates "
                f"to {r['estimate']:.4g} +/- {r['se']:.2g}"
            )
    return measure


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class InhomogeneousModel:
    """Coefficients ``b(t,x)``, ``c(t,z,x)``, ``gamma(t,z,x)`` and the noise measure.

    ``diffusion`` is an optional ``(t, x) -> (n, d, k)`` column matrix; the
    time-inhomogeneous equation has none, but allowing it lets a limit model
    be replayed through the same machinery.
    """

    dim_state: int
    dim_mark: int
    drift: ArrayFn
    amplitude: ArrayFn
    rate: ArrayFn
    measure: LayeredMeasure
    regime: Optional[ArrayFn] = None
    diffusion: Optional[ArrayFn] = None
    name: str = "inhomogeneous"

    @property
    def gamma_bound(self) -> float:
        return self.measure.gamma_bound


@dataclass(frozen=True)
class LimitModel:
    """Time-homogeneous jump diffusion ``g``, ``sigma_l``, ``c(z,x)``, ``gamma(z,x)``.

    ``diffusion(x)`` returns the ``(n, d, k)`` matrix of columns ``sigma_l``
    (``None`` for no Brownian part).  ``compensator(n, x)`` optionally gives
    ``int_{G_n^c} c gamma dmu`` in closed form.  ``mark_inverse(v, x)``
    optionally solves ``c(z, x) = v`` for ``z``.
    """

    dim_state: int
    dim_mark: int
    drift: ArrayFn
    amplitude: ArrayFn
    rate: ArrayFn
    measure: LayeredMeasure
    diffusion: Optional[ArrayFn] = None
    compensator: Optional[Callable] = None
    mark_inverse: Optional[Callable] = None
    regime: Optional[ArrayFn] = None
    name: str = "limit"

    @property
    def gamma_bound(self) -> float:
        return self.measure.gamma_bound

    @property
    def n_brownian(self) -> int:
        if self.diffusion is None:
            return 0
        return int(self.diffusion(np.zeros((1, self.dim_state))).shape[2])

    def covariance(self, x: np.ndarray) -> np.ndarray:
        """``a(x) = sum_l sigma_l sigma_l^T`` as an ``(n, d, d)`` array."""
        x = np.atleast_2d(x)
        if self.diffusion is None:
            return np.zeros((x.shape[0], self.dim_state, self.dim_state))
        s = self.diffusion(x)
        return np.einsum("nik,njk->nij", s, s)

    def with_measure(self, measure: LayeredMeasure) -> "LimitModel":
        return replace(self, measure=measure)


def inhomogeneous_from_limit(model: LimitModel) -> InhomogeneousModel:
    """View a limit model as a (trivially) time-dependent model."""
    diff = model.diffusion
    return InhomogeneousModel(
        dim_state=model.dim_state,
        dim_mark=model.dim_mark,
        drift=lambda t, x: model.drift(x),
        amplitude=lambda t, z, x: model.amplitude(z, x),
        rate=lambda t, z, x: model.rate(z, x),
        measure=model.measure,
        regime=(lambda t, z: model.regime(z)) if model.regime is not None else None,
        diffusion=(lambda t, x: diff(x)) if diff is not None else None,
        name=model.name,
    )


@dataclass(frozen=True)
class LyapunovSpec:
    V: ArrayFn
    b: float = 1.0
    c: float = 1.0
    K: object = None

    def in_K(self, x: np.ndarray) -> np.ndarray:
        if self.K is None:
            return np.zeros(np.atleast_2d(x).shape[0], dtype=bool)
        if isinstance(self.K, (BallSet,)):
            return self.K.contains(x, closed=True)
        return self.K.contains(x)


# ---------------------------------------------------------------------------
# paths


@dataclass
class PathRecord:
    """Grid states plus every jump candidate of one simulated path.

    ``event_u`` is the thinning coordinate on ``[0, Gamma]``; a candidate was
    accepted iff ``u <= gamma`` at the recorded pre-jump state.
    """

    times: np.ndarray
    states: np.ndarray
    event_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    event_layers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    event_marks: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    event_u: np.ndarray = field(default_factory=lambda: np.zeros(0))
    event_accepted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    event_pre_states: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    event_post_states: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    seed: Optional[int] = None

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("path times must be strictly increasing")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n_accepted(self) -> int:
        return int(np.sum(self.event_accepted))

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        m = self.event_marks.shape[1] if self.event_marks.ndim == 2 else 1
        header = ["t"] + [f"x_{i + 1}" for i in range(d)] + ["event_layer"]
        header += [f"z_{j + 1}" for j in range(m)] + ["u", "accepted"]
        rows = []
        for t, x in zip(self.times, self.states):
            rows.append((float(t), 0, [repr(float(v)) for v in x] + [""] * (m + 3)))
        for k in range(len(self.event_times)):
            rows.append(
                (
                    float(self.event_times[k]),
                    1,
                    [repr(float(v)) for v in self.event_post_states[k]]
                    + [str(int(self.event_layers[k]) + 1)]
                    + [repr(float(v)) for v in self.event_marks[k]]
                    + [repr(float(self.event_u[k])), str(int(bool(self.event_accepted[k])))],
                )
            )
        rows.sort(key=lambda r: (r[0], r[1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, _, rest in rows:
                w.writerow([repr(t)] + rest)
