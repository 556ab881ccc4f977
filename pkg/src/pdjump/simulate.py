"""Thinning-based path simulation.

Jumps driven by the layers selected as *exact* are simulated event by event:
candidates arrive at the dominating rate ``Gamma * sum_l mu(G_l)``, receive a
layer, a mark ``z`` and a thinning coordinate ``u ~ U(0, Gamma)``, and fire iff
``u <= gamma``.  Drift and diffusion are integrated by Euler steps that are
split at every candidate time.  Layers outside the exact set are either
dropped, replaced by their compensating drift, or advanced with an
aggregated per-step increment (``Layer.step_increment``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.random import Generator

from .core import (
    ExplosionError,
    InhomogeneousModel,
    LimitModel,
    ModelError,
    PathRecord,
    RateBoundError,
    inhomogeneous_from_limit,
)
from .rng import chunk_rng, run_chunks

TAIL_MODES = ("drop", "drift", "aggregate")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon: float = 1.0
    level: Optional[int] = None
    seed: int = 0
    n_paths: int = 1
    tail_mode: str = "drift"
    record_every: int = 0
    record_events: bool = False
    safety_bound: float = 1e6
    chunk_size: int = 4096
    threads: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.tail_mode not in TAIL_MODES:
            raise ValueError(f"tail_mode must be one of {TAIL_MODES}")

    def replace(self, **kw) -> "SimConfig":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass
class PathBatch:
    """Result of a batch simulation.

    ``states`` has shape ``(n_paths, len(times), d)``; with ``record_every=0``
    only the start and terminal states are kept.  Event arrays are flat with
    ``event_path`` holding the path index.
    """

    times: np.ndarray
    states: np.ndarray
    seed: int
    events: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def accepted_counts(self) -> np.ndarray:
        n = self.states.shape[0]
        if not self.events:
            return np.zeros(n, dtype=int)
        idx = self.events["path"][self.events["accepted"]]
        return np.bincount(idx, minlength=n)

    def record(self, i: int = 0) -> PathRecord:
        ev = self.events
        if ev:
            sel = ev["path"] == i
            return PathRecord(
                times=self.times,
                states=self.states[i],
                event_times=ev["time"][sel],
                event_layers=ev["layer"][sel],
                event_marks=ev["mark"][sel],
                event_u=ev["u"][sel],
                event_accepted=ev["accepted"][sel],
                event_pre_states=ev["pre"][sel],
                event_post_states=ev["post"][sel],
                seed=self.seed,
            )
        return PathRecord(times=self.times, states=self.states[i], seed=self.seed)


# ---------------------------------------------------------------------------
# dynamics assembly


class _Dynamics:
    """Coefficients plus the split of the measure into exact and tail parts."""

    def __init__(self, model: InhomogeneousModel, exact: Sequence[int], tail_mode: str,
                 tail_layers: Sequence[int], include_tail: bool, compensator: Optional[Callable] = None):
        self.model = model
        self.d = model.dim_state
        self.m = model.dim_mark
        self.measure = model.measure
        self.gamma = model.measure.gamma_bound
        self.exact = list(exact)
        self.layers = [model.measure.layers[i] for i in self.exact]
        self.tail_fns: list[Callable] = []
        if tail_mode == "drop":
            return
        if compensator is not None and tail_mode == "drift":
            self.tail_fns.append(lambda t, h, x, rng: compensator(t, x) * h[:, None])
            return
        for i in tail_layers:
            layer = model.measure.layers[i]
            if tail_mode == "aggregate" and layer.step_increment is not None:
                self.tail_fns.append(layer.step_increment)
            else:
                self.tail_fns.append(_layer_drift_fn(model, i))
        tail = model.measure.tail
        if include_tail and tail is not None:
            self.tail_fns.append(lambda t, h, x, rng: tail.first(x) * h[:, None])

    def masses(self, t_ref: np.ndarray) -> np.ndarray:
        """Per-row masses of the exact layers at ``t_ref``, shape ``(n, L)``."""
        out = np.empty((t_ref.shape[0], len(self.layers)))
        for j, layer in enumerate(self.layers):
            if not layer.time_dependent:
                out[:, j] = layer.mass_at(0.0)
            elif callable(layer.mass):
                out[:, j] = np.broadcast_to(layer.mass(t_ref), t_ref.shape)
            elif layer.density is None:
                lo, hi = _bounds_rows(layer, t_ref)
                out[:, j] = np.prod(hi - lo, axis=1)
            else:
                raise ModelError("time-dependent layers with a density need a mass callable")
        return out


def _bounds_rows(layer, t: np.ndarray):
    lo = np.asarray(layer.lo(t) if callable(layer.lo) else layer.lo, dtype=float)
    hi = np.asarray(layer.hi(t) if callable(layer.hi) else layer.hi, dtype=float)
    n = t.shape[0]
    lo = np.broadcast_to(lo.reshape(n, -1) if lo.size == n * layer.dim else lo.reshape(1, -1), (n, layer.dim))
    hi = np.broadcast_to(hi.reshape(n, -1) if hi.size == n * layer.dim else hi.reshape(1, -1), (n, layer.dim))
    return lo, hi


def _contains_rows(layer, z: np.ndarray, t: np.ndarray) -> np.ndarray:
    if layer.contains_fn is not None:
        return np.asarray(layer.contains_fn(z, t), dtype=bool)
    lo, hi = _bounds_rows(layer, t)
    return np.all((z > lo) & (z <= hi), axis=1)


def _layer_drift_fn(model: InhomogeneousModel, i: int) -> Callable:
    layer = model.measure.layers[i]
    if layer.drift is not None:
        return lambda t, h, x, rng: layer.drift(t, x) * h[:, None]

    def fn(t, h, x, rng):
        nodes, w = layer.quadrature(float(np.min(t)), order=8, panels=24)
        n, k = x.shape[0], nodes.shape[0]
        xr = np.repeat(x, k, axis=0)
        zr = np.tile(nodes, (n, 1))
        tr = np.repeat(t, k)
        c = model.amplitude(tr, zr, xr)
        g = model.rate(tr, zr, xr)
        mean = np.einsum("nk,nkd->nd", (w[None, :] * g.reshape(n, k)), c.reshape(n, k, -1))
        return mean * h[:, None]

    return fn


def make_dynamics(model: Union[InhomogeneousModel, LimitModel], exact: Sequence[int],
                  tail_mode: str = "drift", tail_layers: Optional[Sequence[int]] = None,
                  include_tail: bool = True, use_compensator: bool = False) -> _Dynamics:
    comp = None
    if isinstance(model, LimitModel):
        if use_compensator and model.compensator is not None:
            level = len(exact)
            comp_fn = model.compensator
            comp = lambda t, x: comp_fn(level, x)  # noqa: E731
        model = inhomogeneous_from_limit(model)
    n_layers = len(model.measure.layers)
    if tail_layers is None:
        tail_layers = [i for i in range(n_layers) if i not in set(exact)]
    return _Dynamics(model, exact, tail_mode, tail_layers, include_tail, comp)


# ---------------------------------------------------------------------------
# the stepping kernel


class _EventLog:
    def __init__(self, d: int, m: int):
        self.parts: list[tuple] = []
        self.d, self.m = d, m

    def add(self, path, time, layer, mark, u, accepted, pre, post):
        self.parts.append((path.copy(), time.copy(), layer.copy(), mark.copy(), u.copy(),
                           accepted.copy(), pre.copy(), post.copy()))

    def arrays(self, offset: int = 0) -> dict:
        if not self.parts:
            return {
                "path": np.zeros(0, dtype=int), "time": np.zeros(0), "layer": np.zeros(0, dtype=int),
                "mark": np.zeros((0, self.m)), "u": np.zeros(0), "accepted": np.zeros(0, dtype=bool),
                "pre": np.zeros((0, self.d)), "post": np.zeros((0, self.d)),
            }
        cols = list(zip(*self.parts))
        out = {
            "path": np.concatenate(cols[0]) + offset,
            "time": np.concatenate(cols[1]),
            "layer": np.concatenate(cols[2]),
            "mark": np.concatenate(cols[3]).reshape(-1, self.m),
            "u": np.concatenate(cols[4]),
            "accepted": np.concatenate(cols[5]),
            "pre": np.concatenate(cols[6]).reshape(-1, self.d),
            "post": np.concatenate(cols[7]).reshape(-1, self.d),
        }
        order = np.lexsort((out["time"], out["path"]))
        return {k: v[order] for k, v in out.items()}


def euler_increment(dyn: _Dynamics, x: np.ndarray, t: np.ndarray, h: np.ndarray, rng: Generator) -> np.ndarray:
    """Drift, diffusion and tail increments over per-row durations ``h``."""
    model = dyn.model
    inc = model.drift(t, x) * h[:, None]
    if model.diffusion is not None:
        s = model.diffusion(t, x)
        dw = rng.standard_normal((x.shape[0], s.shape[2])) * np.sqrt(h)[:, None]
        inc = inc + np.einsum("ndk,nk->nd", s, dw)
    for fn in dyn.tail_fns:
        inc = inc + fn(t, h, x, rng)
    return inc


def propose_marks(dyn: _Dynamics, t_ref: np.ndarray, masses: np.ndarray, rng: Generator):
    """Layer choice and mark for one candidate per row.

    Marks of time-varying layers are drawn on the layer's extent at the
    per-row reference time ``t_ref`` (the time its mass was evaluated at);
    the caller discards candidates outside the extent at the event time.
    Returns ``(layer, z)`` with ``layer`` indexing ``dyn.exact``.
    """
    n = t_ref.shape[0]
    total = masses.sum(axis=1)
    pick = rng.uniform(size=n) * total
    cum = np.cumsum(masses, axis=1)
    layer = np.minimum((pick[:, None] >= cum).sum(axis=1), len(dyn.layers) - 1)
    z = np.empty((n, dyn.m))
    for j, lay in enumerate(dyn.layers):
        sel = np.flatnonzero(layer == j)
        if sel.size == 0:
            continue
        if not lay.time_dependent:
            z[sel] = lay.sample(rng, sel.size, 0.0)
        elif lay.sampler is not None:
            z[sel] = np.asarray(lay.sampler(rng, sel.size, t_ref[sel]), dtype=float).reshape(sel.size, -1)
        elif lay.density is None:
            lo, hi = _bounds_rows(lay, t_ref[sel])
            z[sel] = lo + (hi - lo) * rng.uniform(size=(sel.size, dyn.m))
        else:
            raise ModelError("time-dependent layers with a density need a sampler")
    return layer, z


def advance(dyn: _Dynamics, x: np.ndarray, t0: np.ndarray, h: np.ndarray, rng: Generator,
            log: Optional[_EventLog] = None, path_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Advance every row of ``x`` from ``t0`` by ``h`` (both per row).

    Candidate events of the exact layers are placed exactly; Euler sub-steps
    fill the gaps.  Returns the new states (the input is not modified).
    """
    x = x.copy()
    n = x.shape[0]
    if not dyn.layers or dyn.gamma <= 0:
        return x + euler_increment(dyn, x, t0, h, rng)
    t1 = t0 + h
    inc_layers = [lay.mass_increasing for lay in dyn.layers]
    t_ref = t1 if all(inc_layers) else t0
    masses = dyn.masses(t_ref)
    lam = dyn.gamma * masses.sum(axis=1)
    counts = rng.poisson(lam * h)
    K = int(counts.max()) if n else 0
    if K == 0:
        return x + euler_increment(dyn, x, t0, h, rng)
    frac = np.sort(rng.uniform(size=(n, K)), axis=1)
    times = t0[:, None] + frac * h[:, None]
    tcur = t0.copy()
    for k in range(K):
        act = np.flatnonzero(counts > k)
        tau = times[act, k]
        xa = x[act]
        xa = xa + euler_increment(dyn, xa, tcur[act], tau - tcur[act], rng)
        tcur[act] = tau
        lay, z = propose_marks(dyn, t_ref[act], masses[act], rng)
        u = rng.uniform(size=act.size) * dyn.gamma
        # moving layers may trade marks between them: validity is membership
        # of the exact region at the event time, whichever layer proposed it
        if any(layer.time_dependent for layer in dyn.layers):
            valid = np.zeros(act.size, dtype=bool)
            for layer in dyn.layers:
                valid |= _contains_rows(layer, z, tau)
        else:
            valid = np.ones(act.size, dtype=bool)
        g = dyn.model.rate(tau, z, xa)
        if np.any(g > dyn.gamma * (1 + 1e-12)):
            bad = int(np.argmax(g))
            raise RateBoundError(f"jump rate {g[bad]:.6g} exceeds declared bound {dyn.gamma:.6g}")
        acc = valid & (u <= g)
        pre = xa.copy()
        if np.any(acc):
            xa[acc] = xa[acc] + dyn.model.amplitude(tau[acc], z[acc], xa[acc])
        x[act] = xa
        if log is not None:
            ids = act if path_ids is None else path_ids[act]
            layer_idx = np.where(valid, np.asarray(dyn.exact)[lay], -1)
            log.add(ids, tau, layer_idx, z, u, acc, pre, xa)
    return x + euler_increment(dyn, x, tcur, t1 - tcur, rng)


def _time_grid(t_start: float, horizon: float, dt: float) -> np.ndarray:
    n = int(np.ceil(horizon / dt - 1e-9))
    grid = t_start + dt * np.arange(n + 1)
    grid[-1] = t_start + horizon
    return grid


def run_batch(dyn: _Dynamics, x0, t_start: float, config: SimConfig) -> PathBatch:
    """Simulate ``config.n_paths`` paths in seed-addressed chunks."""
    d = dyn.d
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0.reshape(1, d), (config.n_paths, d))
    if x0.shape != (config.n_paths, d):
        raise ValueError(f"x0 must have shape ({d},) or ({config.n_paths}, {d})")
    grid = _time_grid(t_start, config.horizon, config.dt)
    nsteps = len(grid) - 1
    if config.record_every > 0:
        keep = sorted(set(range(0, nsteps + 1, config.record_every)) | {nsteps})
    else:
        keep = [0, nsteps]
    keep_pos = {s: i for i, s in enumerate(keep)}
    bound = config.safety_bound

    def chunk(ci: int, sl: slice):
        rng = chunk_rng(config.seed, ci)
        x = np.array(x0[sl], dtype=float)
        n = x.shape[0]
        out = np.empty((n, len(keep), d))
        out[:, 0] = x
        log = _EventLog(d, dyn.m) if config.record_events else None
        for s in range(nsteps):
            t0 = np.full(n, grid[s])
            h = np.full(n, grid[s + 1] - grid[s])
            x = advance(dyn, x, t0, h, rng, log)
            if not np.all(np.isfinite(x)) or np.any(np.abs(x) > bound):
                raise ExplosionError(float(grid[s + 1]), bound)
            if s + 1 in keep_pos:
                out[:, keep_pos[s + 1]] = x
        return out, (log.arrays(sl.start) if log is not None else None)

    parts = run_chunks(chunk, config.n_paths, config.chunk_size, config.threads)
    states = np.concatenate([p[0] for p in parts], axis=0)
    events = {}
    if config.record_events:
        evs = [p[1] for p in parts]
        events = {k: np.concatenate([e[k] for e in evs]) for k in evs[0]}
    return PathBatch(times=grid[keep], states=states, seed=config.seed, events=events)


# ---------------------------------------------------------------------------
# public simulators


def _level(model, config: SimConfig) -> int:
    n_layers = len(model.measure.layers)
    level = n_layers if config.level is None else int(config.level)
    if not 0 <= level <= n_layers:
        raise ModelError(f"truncation level {level} outside 0..{n_layers}")
    return level


def simulate_inhomogeneous(model: InhomogeneousModel, x0, t_start: float = 0.0,
                           config: SimConfig = SimConfig()) -> PathBatch:
    """Paths of the time-inhomogeneous equation from ``t_start`` to ``t_start + horizon``.

    Layers below ``config.level`` are simulated by exact thinning; the rest
    follow ``config.tail_mode`` (``aggregate`` uses each layer's step
    increment where one is provided).
    """
    level = _level(model, config)
    dyn = make_dynamics(model, list(range(level)), config.tail_mode)
    return run_batch(dyn, x0, t_start, config)


def simulate_limit(model: LimitModel, x0, config: SimConfig = SimConfig(), t_start: float = 0.0) -> PathBatch:
    """Paths of the limit jump diffusion (Euler-Maruyama between exact events)."""
    level = _level(model, config)
    dyn = make_dynamics(model, list(range(level)), config.tail_mode, use_compensator=True)
    return run_batch(dyn, x0, t_start, config)


def simulate_small_jump(model: LimitModel, x0, level: int, config: SimConfig = SimConfig(),
                        tail_mode: str = "drop") -> PathBatch:
    """The small-jump process: only marks outside ``G_level`` act.

    Finite layers beyond ``level`` are simulated exactly; the measure's tail
    beyond the last layer follows ``tail_mode``.
    """
    n_layers = len(model.measure.layers)
    if not 0 <= level <= n_layers:
        raise ModelError(f"level {level} outside 0..{n_layers}")
    dyn = make_dynamics(model, list(range(level, n_layers)), tail_mode, tail_layers=[])
    return run_batch(dyn, x0, 0.0, config)


def simulate_truncated(model: LimitModel, x0, level: Optional[int], config: SimConfig = SimConfig(),
                       rho: Optional[float] = None, bound_constant: float = 1.0) -> PathBatch:
    """The finite-activity process driven by marks in ``G = G_level`` only.

    ``level=None`` means the full support.  With ``rho`` given, the
    probability bound on ``sup_t |X^G_t - X_t| >= rho`` over the horizon is
    stored in ``batch.meta['truncation_bound']``.
    """
    n_layers = len(model.measure.layers)
    level = n_layers if level is None else int(level)
    dyn = make_dynamics(model, list(range(level)), "drop")
    batch = run_batch(dyn, x0, 0.0, config)
    if rho is not None:
        batch.meta["truncation_bound"] = truncation_error_bound(model, level, rho, config.horizon, bound_constant)
    return batch


def truncation_error_bound(model: LimitModel, level: int, rho: float, T: float, C: float = 1.0,
                           box=None, grid_points: int = 33) -> float:
    """Right-hand side of the finite-activity approximation bound.

    ``(T e / rho) exp(C T [sum_l |grad sigma_l| + |grad g| + C_mu]^2) alpha(G^c)``
    with the sup-norms and integrals estimated on ``box`` (default ``[-5,5]^d``).
    """
    from .generator import alpha_tail, c_mu, lipschitz_drift_diffusion

    a = alpha_tail(model, level, box=box, grid_points=grid_points)
    if a == 0.0:
        return 0.0
    lg, ls = lipschitz_drift_diffusion(model, box=box, grid_points=grid_points)
    cm = c_mu(model, box=box, grid_points=grid_points)
    return float(T * np.e / rho * np.exp(C * T * (ls + lg + cm) ** 2) * a)


# ---------------------------------------------------------------------------
# real-shocks kernel and control skeletons


def sample_real_shock(model: LimitModel, level: int, y: np.ndarray, rng: Generator):
    """One draw from ``q_G(z, y) mu*(dz)`` per row of ``y``.

    Returns ``(z, is_null)``; null rows (the mark ``z*`` outside ``G``) carry
    NaN marks.  Proposal ``mu|_G / mu(G)``, acceptance ``gamma(z, y)/Gamma``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    dyn = make_dynamics(model, list(range(level)), "drop")
    n = y.shape[0]
    masses = dyn.masses(np.zeros(n))
    _, z = propose_marks(dyn, np.zeros(n), masses, rng)
    g = model.rate(z, y)
    if np.any(g > model.gamma_bound * (1 + 1e-12)):
        raise RateBoundError("acceptance probability above one: rate exceeds Gamma")
    accept = rng.uniform(size=n) * model.gamma_bound <= g
    z = np.where(accept[:, None], z, np.nan)
    return z, ~accept


@dataclass(frozen=True)
class PiecewiseControl:
    """Cameron-Martin control with piecewise-constant derivative.

    ``breaks`` are the left ends of the pieces (first is 0) and ``rates`` the
    ``(n_pieces, k)`` table of ``h'`` values.
    """

    breaks: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.breaks, dtype=float))
        r = np.asarray(self.rates, dtype=float)
        if r.ndim == 1:
            r = r.reshape(-1, 1) if b.size > 1 or r.size == 1 else r.reshape(1, -1)
        if r.shape[0] != b.size or not np.all(np.isfinite(r)):
            raise ValueError("one finite derivative row per piece is required")
        if b[0] != 0 or np.any(np.diff(b) <= 0):
            raise ValueError("breaks must start at 0 and increase")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "rates", r)

    @classmethod
    def constant(cls, rate) -> "PiecewiseControl":
        return cls(np.array([0.0]), np.atleast_2d(np.asarray(rate, dtype=float)))

    @classmethod
    def zero(cls, k: int) -> "PiecewiseControl":
        return cls.constant(np.zeros(k))

    def __call__(self, s: float) -> np.ndarray:
        i = int(np.searchsorted(self.breaks, s, side="right") - 1)
        return self.rates[max(i, 0)]


@dataclass(frozen=True)
class ControlSkeletonInput:
    times: np.ndarray
    marks: np.ndarray
    controls: tuple

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        if t.size and (t[0] <= 0 or t[-1] >= 1 or np.any(np.diff(t) <= 0)):
            raise ValueError("jump times must increase strictly inside (0, 1)")
        object.__setattr__(self, "times", t)
        marks = np.asarray(self.marks, dtype=float)
        if marks.ndim != 2:
            marks = marks.reshape(t.size, -1) if t.size else marks.reshape(0, 0)
        if marks.shape[0] != t.size:
            raise ValueError("need one mark per jump time")
        object.__setattr__(self, "marks", marks)
        ctl = tuple(self.controls)
        if len(ctl) not in (1, t.size, t.size + 1):
            raise ValueError("need one control, one per jump, or one per segment")
        object.__setattr__(self, "controls", ctl)

    def segment_control(self, k: int) -> PiecewiseControl:
        """Control driving the segment after the ``k``-th jump (``k=0``: before the first)."""
        n = self.times.size
        if len(self.controls) == 1:
            return self.controls[0]
        if len(self.controls) == n + 1:
            return self.controls[k]
        return self.controls[max(k - 1, 0)]


def skeleton_flow(model: LimitModel, x, control: PiecewiseControl, interval=(0.0, 1.0),
                  dt: float = 1e-3, blowup: float = 1e8):
    """Solve ``phi' = g(phi) + sum_l sigma_l(phi) h'_l`` with fixed-step RK4.

    Control time is measured from the start of ``interval``.  Returns
    ``(times, states)``.
    """
    s, e = interval
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    grid = _time_grid(s, e - s, dt) if e > s else np.array([s])
    k = model.n_brownian

    def rhs(u, y):
        v = model.drift(y)
        if k:
            v = v + np.einsum("ndk,k->nd", model.diffusion(y), control(u - s))
        return v

    out = [x[0].copy()]
    y = x
    for a, b in zip(grid[:-1], grid[1:]):
        h = b - a
        # piece value taken at the left end so steps never straddle a break
        k1 = rhs(a, y)
        k2 = rhs(a, y + 0.5 * h * k1)
        k3 = rhs(a, y + 0.5 * h * k2)
        k4 = rhs(a, y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.any(np.abs(y) > blowup):
            raise ExplosionError(float(b), blowup)
        out.append(y[0].copy())
    return grid, np.array(out)


def skeleton_path(model: LimitModel, x, inp: ControlSkeletonInput, level: Optional[int] = None,
                  dt: float = 1e-3) -> np.ndarray:
    """Terminal value ``x_1(x, t, z, h)`` of the control skeleton on ``[0, 1]``."""
    n_layers = len(model.measure.layers)
    level = n_layers if level is None else level
    if inp.times.size:
        where = model.measure.layer_of(inp.marks)
        if np.any((where < 0) | (where >= level)):
            raise ModelError("skeleton marks must lie in G")
    edges = np.concatenate([[0.0], inp.times, [1.0]])
    y = np.atleast_1d(np.asarray(x, dtype=float))
    for k in range(len(edges) - 1):
        ctl = inp.segment_control(k)
        a, b = edges[k], edges[k + 1]
        if b > a:
            _, path = skeleton_flow(model, y, ctl, (a, b), dt=min(dt, b - a))
            y = path[-1]
        if k < inp.times.size:
            z = inp.marks[k : k + 1]
            y = y + model.amplitude(z, y.reshape(1, -1))[0]
    return y
