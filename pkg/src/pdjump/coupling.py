"""Regeneration coupling of two copies of a limit jump diffusion.

Jumps with marks in ``G_n`` (the first ``n`` layers) are *big jumps*.  Their
candidates arrive on a clock of rate ``Gamma_n = Gamma mu(G_n)`` shared by
both copies; between candidates each copy runs its own small-jump dynamics.
At every candidate time the pair moves by the split kernel: when both
copies sit in the small set ``C`` a color ``U <= beta`` sends both to the
same ``nu``-distributed point (regeneration); otherwise each copy moves by
its residual kernel, or, outside ``C x C``, both use shared noise.  Every
branch keeps each copy's marginal law equal to the uncoupled one.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.random import Generator

from .core import BallSet, ExplosionError, LimitModel, ModelError, RateBoundError
from .rng import chunk_rng, run_chunks
from .simulate import SimConfig, _time_grid, advance, make_dynamics, simulate_truncated


class CertificateError(RuntimeError):
    """The minorization certificate is inconsistent with the kernel."""


class NoCouplingError(RuntimeError):
    """No pair coupled before the horizon."""


# ---------------------------------------------------------------------------
# big-jump kernel


def _level_layers(model: LimitModel, level: int):
    n_layers = len(model.measure.layers)
    if not 1 <= level <= n_layers:
        raise ModelError(f"level {level} outside 1..{n_layers}")
    return model.measure.layers[:level]


def propose_big_jump(model: LimitModel, level: int, n: int, rng: Generator):
    """Candidate marks ``z ~ mu|_{G_n} / mu(G_n)`` and thinning coordinates ``u ~ U(0, Gamma)``."""
    layers = _level_layers(model, level)
    masses = np.array([lay.mass_at(0.0) for lay in layers])
    pick = rng.uniform(size=n) * masses.sum()
    which = np.minimum(np.searchsorted(np.cumsum(masses), pick, side="right"), len(layers) - 1)
    z = np.empty((n, model.dim_mark))
    for j, lay in enumerate(layers):
        sel = np.flatnonzero(which == j)
        if sel.size:
            z[sel] = lay.sample(rng, sel.size, 0.0)
    u = rng.uniform(size=n) * model.gamma_bound
    return z, u


def _apply(model: LimitModel, x: np.ndarray, z: np.ndarray, u: np.ndarray):
    g = model.rate(z, x)
    if np.any(g > model.gamma_bound * (1 + 1e-12)):
        raise RateBoundError(f"jump rate {float(np.max(g)):.6g} exceeds declared bound {model.gamma_bound:.6g}")
    acc = u <= g
    y = x.copy()
    if np.any(acc):
        y[acc] = x[acc] + model.amplitude(z[acc], x[acc])
    return y, acc


def sample_jump_kernel(model: LimitModel, level: int, x, rng: Generator) -> np.ndarray:
    """One draw from the big-jump kernel ``Pi(x, .)`` per row of ``x``.

    The no-jump atom ``x`` has mass ``1 - gamma_bar_n(x) / Gamma_n``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z, u = propose_big_jump(model, level, x.shape[0], rng)
    return _apply(model, x, z, u)[0]


# ---------------------------------------------------------------------------
# minorization certificate


@dataclass(frozen=True)
class MinorizationCertificate:
    """``Pi(x, .) >= beta nu`` for ``x`` in the ball ``C``, with ``nu`` uniform on a ball ``B``.

    ``beta_raw`` is the grid minimum of the kernel density over ``C x B``
    times the volume of ``B``; ``beta = safety * beta_raw``.  Marks are
    restricted to the ball ``K_z = {|z - mark_center| <= mark_radius}``.
    """

    level: int
    center: np.ndarray
    eta: float
    beta: float
    nu_center: np.ndarray
    nu_radius: float
    mark_center: np.ndarray
    mark_radius: float
    rate_bound: float
    beta_raw: float = float("nan")
    grid_min_density: float = float("nan")
    safety: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise CertificateError(f"beta must lie in (0, 1], got {self.beta!r}")

    @property
    def C(self) -> BallSet:
        return BallSet(self.center, self.eta)

    @property
    def B(self) -> BallSet:
        return BallSet(self.nu_center, self.nu_radius)

    def in_C(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if not np.isfinite(self.eta):
            return np.ones(x.shape[0], dtype=bool)
        return self.C.contains(x)

    def nu_density(self, y) -> np.ndarray:
        return self.B.contains(y, closed=True) / self.B.volume()

    def nu_sample(self, rng: Generator, size: int) -> np.ndarray:
        return self.B.sample(rng, size)


def _mark_density(model: LimitModel, level: int, z: np.ndarray) -> np.ndarray:
    """Lebesgue density ``h`` of ``mu`` on ``G_n`` (0 outside)."""
    where = model.measure.layer_of(z)
    h = np.zeros(z.shape[0])
    for j, lay in enumerate(model.measure.layers[:level]):
        sel = where == j
        if np.any(sel):
            h[sel] = lay.density(z[sel]) if lay.density is not None else 1.0
    return h


def _jac_z(model: LimitModel, z: np.ndarray, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    m = z.shape[1]
    cols = []
    for j in range(m):
        e = np.zeros(m)
        step = h * np.maximum(1.0, np.abs(z[:, j]))
        e[j] = 1.0
        zp = z + step[:, None] * e
        zm = z - step[:, None] * e
        cols.append((model.amplitude(zp, x) - model.amplitude(zm, x)) / (2 * step[:, None]))
    return np.stack(cols, axis=2)


def invert_marks(model: LimitModel, v: np.ndarray, x: np.ndarray, z0: np.ndarray, iters: int = 60) -> np.ndarray:
    """Solve ``c(z, x) = v`` for ``z`` near ``z0`` row-wise; NaN where it fails.

    Uses the model's ``mark_inverse`` when available, else Newton's method
    with finite-difference Jacobians started at ``z0``.
    """
    v = np.atleast_2d(v)
    x = np.atleast_2d(x)
    if model.mark_inverse is not None:
        with np.errstate(invalid="ignore", divide="ignore"):
            z = np.asarray(model.mark_inverse(v, x), dtype=float).reshape(v.shape[0], -1)
        ok = np.all(np.isfinite(z), axis=1)
        if np.any(ok):
            resid = np.linalg.norm(model.amplitude(np.where(ok[:, None], z, z0), x) - v, axis=1)
            ok &= resid <= 1e-8 * (1 + np.linalg.norm(v, axis=1))
        z[~ok] = np.nan
        return z
    z = np.broadcast_to(np.asarray(z0, dtype=float), (v.shape[0], model.dim_mark)).copy()
    for _ in range(iters):
        F = model.amplitude(z, x) - v
        if np.all(np.linalg.norm(F, axis=1) <= 1e-12 * (1 + np.linalg.norm(v, axis=1))):
            break
        J = _jac_z(model, z, x)
        try:
            step = np.linalg.solve(J, F[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J.reshape(-1, J.shape[2]), F.ravel(), rcond=None)[0].reshape(F.shape)
        z = z - step
    resid = np.linalg.norm(model.amplitude(z, x) - v, axis=1)
    z[~(resid <= 1e-8 * (1 + np.linalg.norm(v, axis=1)))] = np.nan
    return z


def kernel_density(model: LimitModel, cert: MinorizationCertificate, x, y) -> np.ndarray:
    """Density of the part of ``Pi(x, .)`` coming from marks in ``K_z``, at ``y`` (paired rows)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    z = invert_marks(model, y - x, x, cert.mark_center)
    return _density_at_marks(model, cert.level, cert.mark_center, cert.mark_radius, cert.rate_bound, z, x)


def _density_at_marks(model, level, z0, R, rate_bound, z, x):
    out = np.zeros(x.shape[0])
    ok = np.all(np.isfinite(z), axis=1)
    if not np.any(ok):
        return out
    zz, xx = z[ok], x[ok]
    # membership and density are read just inside K_z so that closed-ball
    # grid points on a half-open layer edge count as in G_n
    probe = z0 + (zz - z0) * (1 - 1e-9)
    where = model.measure.layer_of(probe)
    inside = (np.linalg.norm(zz - z0, axis=1) <= R * (1 + 1e-12)) & (where >= 0) & (where < level)
    det = np.abs(np.linalg.det(_jac_z(model, zz, xx)))
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = model.rate(zz, xx) * _mark_density(model, level, probe) / det / rate_bound
    out[ok] = np.where(inside & (det > 0), dens, 0.0)
    return out


def _sphere(center: np.ndarray, radius: float, n: int) -> np.ndarray:
    m = center.size
    if m == 1:
        return center + radius * np.array([[-1.0], [1.0]])
    g = np.random.default_rng(0).standard_normal((n, m))
    return center + radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def estimate_minorization(model: LimitModel, level: int, x0, z0, r: float, R: float,
                          points_per_dim: int = 9, safety: float = 0.9, n_rho: int = 8,
                          min_eta: float = 1e-3, rank_tol: float = 1e-10) -> MinorizationCertificate:
    """Find ``C = B(x0, eta)``, ``nu = U(B(y*, rho))`` and ``beta`` with ``Pi >= beta nu`` on ``C``.

    Starting from ``eta = r`` the radius halves until the grid-minimized
    density is positive.  For each ``eta``, ``rho`` ranges over
    ``k / n_rho`` of the distance from ``y* = x0 + c(z0, x0)`` to the image
    of the boundary of ``K_z = B(z0, R) & G_n``; the ``rho`` with the largest
    ``beta`` wins.  Requires equal state and mark dimensions.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    d, m = model.dim_state, model.dim_mark
    if d != m:
        raise ModelError(f"minorization by change of variables needs dim_mark == dim_state (got {m} vs {d})")
    _level_layers(model, level)
    if model.measure.layer_of(z0[None, :])[0] not in range(level):
        raise ModelError("z0 must lie in G_n")
    J = _jac_z(model, z0[None, :], x0[None, :])[0]
    if np.linalg.matrix_rank(J, tol=rank_tol) < d or abs(np.linalg.det(J)) <= rank_tol:
        raise ModelError("amplitude Jacobian in z is rank deficient at (z0, x0): full-rank condition fails")
    # shrink the mark ball into G_n
    for _ in range(200):
        pts = z0 + (_sphere(z0, R, 64 * m) - z0) * (1 - 1e-9)
        where = model.measure.layer_of(pts)
        if np.all((where >= 0) & (where < level)):
            break
        R *= 0.95
    rate_bound = model.measure.rate_bound(level)
    y_star = x0 + model.amplitude(z0[None, :], x0[None, :])[0]
    edge = x0 + model.amplitude(_sphere(z0, R, 256 * m), np.broadcast_to(x0, (256 * m if m > 1 else 2, d)))
    rho_max = float(np.min(np.linalg.norm(edge - y_star, axis=1)))
    eta = float(r)
    while eta >= min_eta:
        xs = BallSet(x0, eta).grid(points_per_dim)
        best = (0.0, None, 0.0)
        for k in range(n_rho - 1, 0, -1):
            rho = rho_max * k / n_rho
            ball = BallSet(y_star, rho)
            ys = ball.grid(points_per_dim)
            X = np.repeat(xs, ys.shape[0], axis=0)
            Y = np.tile(ys, (xs.shape[0], 1))
            z = invert_marks(model, Y - X, X, z0)
            dens = _density_at_marks(model, level, z0, R, rate_bound, z, X)
            dmin = float(np.min(dens))
            beta_raw = ball.volume() * dmin
            if beta_raw > best[0]:
                best = (beta_raw, rho, dmin)
        if best[0] > 0:
            beta_raw, rho, dmin = best
            beta = min(safety * beta_raw, 1.0)
            return MinorizationCertificate(level, x0, eta, beta, y_star, rho, z0, R, rate_bound,
                                           beta_raw=beta_raw, grid_min_density=dmin, safety=safety)
        eta /= 2
    raise CertificateError("no positive beta found down to the minimum radius")


def verify_certificate(model: LimitModel, cert: MinorizationCertificate, points_per_dim: int = 33) -> dict:
    """Re-check ``density >= beta / vol(B)`` on a finer ``C x B`` grid."""
    xs = cert.C.grid(points_per_dim)
    ys = cert.B.grid(points_per_dim)
    X = np.repeat(xs, ys.shape[0], axis=0)
    Y = np.tile(ys, (xs.shape[0], 1))
    dens = kernel_density(model, cert, X, Y)
    need = cert.beta / cert.B.volume()
    bad = dens < need * (1 - 1e-12)
    return {"n_points": int(dens.size), "violations": int(bad.sum()),
            "min_ratio": float(np.min(dens) / need), "worst": (X[np.argmin(dens)].tolist(), Y[np.argmin(dens)].tolist())}


# ---------------------------------------------------------------------------
# split kernel


def _residual_accept(model, cert, x, z, y, jumped, v):
    """Acceptance of residual proposals: ``1 - beta nu(y) / p(y)`` for ``K_z`` marks landing in ``B``."""
    acc = np.ones(x.shape[0], dtype=bool)
    cand = jumped & (np.linalg.norm(z - cert.mark_center, axis=1) <= cert.mark_radius) & cert.B.contains(y, closed=True)
    if np.any(cand):
        p = _density_at_marks(model, cert.level, cert.mark_center, cert.mark_radius, cert.rate_bound,
                              z[cand], x[cand])
        with np.errstate(divide="ignore"):
            prob = 1.0 - cert.beta / (cert.B.volume() * p)
        if np.any(prob < -1e-9) or np.any(prob > 1 + 1e-12):
            raise CertificateError(f"residual acceptance probability {float(np.min(prob)):.4g} outside [0, 1]: "
                                   "beta nu exceeds the kernel density")
        acc[cand] = v[cand] <= prob
    return acc


def _residual(model, cert, x, rng, z, u, v):
    """Residual draws for every row of ``x``; first proposal given, later ones independent."""
    y, jumped = _apply(model, x, z, u)
    ok = _residual_accept(model, cert, x, z, y, jumped, v)
    todo = np.flatnonzero(~ok)
    while todo.size:
        zz, uu = propose_big_jump(model, cert.level, todo.size, rng)
        yy, jj = _apply(model, x[todo], zz, uu)
        acc = _residual_accept(model, cert, x[todo], zz, yy, jj, rng.uniform(size=todo.size))
        y[todo[acc]] = yy[acc]
        todo = todo[~acc]
    return y


def sample_split_kernel(cert: MinorizationCertificate, model: LimitModel, level: int, x, xp, u, rng: Generator):
    """One step of the split kernel for paired rows ``(x, x')`` with colors ``u``.

    Returns ``(y, y', branch)`` where ``branch`` is 1 (regeneration), 2
    (residual) or 3 (synchronous).
    """
    if level != cert.level:
        raise CertificateError("certificate was built for another level")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    u = np.broadcast_to(np.asarray(u, dtype=float), (x.shape[0],))
    n = x.shape[0]
    both = cert.in_C(x) & cert.in_C(xp)
    branch = np.where(both, np.where(u <= cert.beta, 1, 2), 3)
    y, yp = x.copy(), xp.copy()
    z, ut = propose_big_jump(model, level, n, rng)
    v = rng.uniform(size=n)
    s3 = branch == 3
    if np.any(s3):
        y[s3] = _apply(model, x[s3], z[s3], ut[s3])[0]
        yp[s3] = _apply(model, xp[s3], z[s3], ut[s3])[0]
    s2 = branch == 2
    if np.any(s2):
        y[s2] = _residual(model, cert, x[s2], rng, z[s2], ut[s2], v[s2])
        # identical inputs reuse the whole residual draw, later proposals included
        same = s2 & np.all(x == xp, axis=1)
        other = s2 & ~same
        yp[same] = y[same]
        if np.any(other):
            yp[other] = _residual(model, cert, xp[other], rng, z[other], ut[other], v[other])
    s1 = branch == 1
    if np.any(s1):
        y[s1] = cert.nu_sample(rng, int(s1.sum()))
        yp[s1] = y[s1]
    return y, yp, branch


# ---------------------------------------------------------------------------
# coupled simulation


@dataclass
class CouplingResult:
    """Coupled pairs: terminal states, coupling times and the big-jump log.

    ``tau`` is ``inf`` for pairs not coupled by the horizon (censored).
    ``events`` (when recorded) holds flat arrays ``pair, k, T, U, in_C_both,
    regenerated``.  ``states_x``/``states_y`` are ``(n, len(times), d)``.
    """

    times: np.ndarray
    states_x: np.ndarray
    states_y: np.ndarray
    tau: np.ndarray
    horizon: float
    seed: int
    events: dict = field(default_factory=dict)

    @property
    def x_terminal(self) -> np.ndarray:
        return self.states_x[:, -1]

    @property
    def y_terminal(self) -> np.ndarray:
        return self.states_y[:, -1]

    @property
    def coupled(self) -> np.ndarray:
        return np.isfinite(self.tau)

    def to_csv(self, path, pair: Optional[int] = None) -> None:
        """Big-jump log as ``k,T_k,U_k,in_C_both,regenerated,tau_c``.

        With ``pair=None`` all pairs are written with a leading ``pair`` column.
        """
        ev = self.events
        if not ev:
            raise ValueError("run coupled_simulate with record_events=True to export the big-jump log")
        sel = np.ones(ev["pair"].size, dtype=bool) if pair is None else ev["pair"] == pair
        header = ["k", "T_k", "U_k", "in_C_both", "regenerated", "tau_c"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow((["pair"] if pair is None else []) + header)
            for i in np.flatnonzero(sel):
                p = int(ev["pair"][i])
                tau = self.tau[p]
                row = [int(ev["k"][i]), repr(float(ev["T"][i])), repr(float(ev["U"][i])),
                       int(bool(ev["in_C_both"][i])), int(bool(ev["regenerated"][i])),
                       repr(float(tau)) if np.isfinite(tau) else "inf"]
                w.writerow(([p] if pair is None else []) + row)


def coupled_simulate(model: LimitModel, level: int, cert: MinorizationCertificate, x, y,
                     config: SimConfig = SimConfig(), stop_at_coupling: bool = False) -> CouplingResult:
    """Simulate ``config.n_paths`` coupled pairs started at ``(x, y)``.

    Small jumps (marks outside ``G_n``) are simulated independently for the
    two copies; the measure tail beyond the last layer enters as drift.
    After the coupling time the pair is merged.  ``stop_at_coupling`` stops
    simulating a pair once it couples (terminal states then hold the
    coupling-time state), which is all that coupling-time statistics need.
    """
    if level != cert.level:
        raise CertificateError("certificate was built for another level")
    n_layers = len(model.measure.layers)
    small = make_dynamics(model, list(range(level, n_layers)), "drift", tail_layers=[])
    Gn = model.measure.rate_bound(level)
    d = model.dim_state
    x = np.asarray(x, dtype=float).reshape(-1, d)
    y = np.asarray(y, dtype=float).reshape(-1, d)
    grid = _time_grid(0.0, config.horizon, config.dt)
    nsteps = len(grid) - 1
    keep = sorted(set(range(0, nsteps + 1, config.record_every)) | {nsteps}) if config.record_every > 0 else [0, nsteps]
    keep_pos = {s: i for i, s in enumerate(keep)}

    def chunk(ci: int, sl: slice):
        rng = chunk_rng(config.seed, ci)
        n = sl.stop - sl.start
        X = np.array(np.broadcast_to(x if x.shape[0] == 1 else x[sl], (n, d)))
        Y = np.array(np.broadcast_to(y if y.shape[0] == 1 else y[sl], (n, d)))
        out_x = np.empty((n, len(keep), d))
        out_y = np.empty((n, len(keep), d))
        out_x[:, 0], out_y[:, 0] = X, Y
        tcur = np.zeros(n)
        tnext = rng.exponential(1.0 / Gn, size=n)
        kcount = np.zeros(n, dtype=int)
        tau = np.full(n, np.inf)
        done = np.zeros(n, dtype=bool)
        log = [] if config.record_events else None

        def move(rows, t_to):
            """Small-jump dynamics of both copies from ``tcur`` to ``t_to`` (per row)."""
            fin = np.isfinite(tau[rows])
            sep, mer = rows[~fin], rows[fin]
            if sep.size:
                h = t_to[~fin] - tcur[sep]
                X[sep] = advance(small, X[sep], tcur[sep], h, rng)
                Y[sep] = advance(small, Y[sep], tcur[sep], h, rng)
            if mer.size:
                X[mer] = advance(small, X[mer], tcur[mer], t_to[fin] - tcur[mer], rng)
                Y[mer] = X[mer]
            tcur[rows] = t_to

        for s in range(nsteps):
            t_end = grid[s + 1]
            while True:
                due = np.flatnonzero(~done & (tnext <= t_end))
                if not due.size:
                    break
                move(due, tnext[due])
                kcount[due] += 1
                sep = due[~np.isfinite(tau[due])]
                mer = due[np.isfinite(tau[due])]
                if mer.size:
                    X[mer] = sample_jump_kernel(model, level, X[mer], rng)
                    Y[mer] = X[mer]
                if sep.size:
                    U = rng.uniform(size=sep.size)
                    inC = cert.in_C(X[sep]) & cert.in_C(Y[sep])
                    X[sep], Y[sep], br = sample_split_kernel(cert, model, level, X[sep], Y[sep], U, rng)
                    reg = br == 1
                    tau[sep[reg]] = tnext[sep[reg]]
                    if log is not None:
                        log.append((sep + sl.start, kcount[sep].copy(), tnext[sep].copy(), U, inC, reg))
                    if stop_at_coupling:
                        done[sep[reg]] = True
                tnext[due] += rng.exponential(1.0 / Gn, size=due.size)
            act = np.flatnonzero(~done)
            if act.size:
                move(act, np.full(act.size, t_end))
            if not np.all(np.isfinite(X[act])) or np.any(np.abs(X[act]) > config.safety_bound):
                raise ExplosionError(float(t_end), config.safety_bound)
            if s + 1 in keep_pos:
                out_x[:, keep_pos[s + 1]] = X
                out_y[:, keep_pos[s + 1]] = Y
        ev = None
        if log is not None:
            if log:
                cols = list(zip(*log))
                ev = {k: np.concatenate(c) for k, c in zip(("pair", "k", "T", "U", "in_C_both", "regenerated"), cols)}
            else:
                ev = {"pair": np.zeros(0, int), "k": np.zeros(0, int), "T": np.zeros(0), "U": np.zeros(0),
                      "in_C_both": np.zeros(0, bool), "regenerated": np.zeros(0, bool)}
        return out_x, out_y, tau, ev

    parts = run_chunks(chunk, config.n_paths, config.chunk_size, config.threads)
    events = {}
    if config.record_events:
        events = {k: np.concatenate([p[3][k] for p in parts]) for k in parts[0][3]}
        order = np.lexsort((events["k"], events["pair"]))
        events = {k: v[order] for k, v in events.items()}
    return CouplingResult(
        times=grid[keep],
        states_x=np.concatenate([p[0] for p in parts]),
        states_y=np.concatenate([p[1] for p in parts]),
        tau=np.concatenate([p[2] for p in parts]),
        horizon=config.horizon,
        seed=config.seed,
        events=events,
    )


# ---------------------------------------------------------------------------
# coupling-time statistics


@dataclass
class CouplingMoments:
    """``E tau^p`` with bootstrap percentile intervals, the survival curve and tail fit.

    Moments use the coupled pairs only; ``n_censored`` pairs had not
    coupled by the horizon.  ``tail_exponent`` is the slope ``-kappa`` of
    ``log S(t)`` against ``log t`` over the upper half of the sample.
    """

    moments: dict
    survival_t: np.ndarray
    survival: np.ndarray
    n: int
    n_censored: int
    tail_exponent: float
    exp_rate: float

    def ci_width(self, p: float) -> float:
        est, lo, hi = self.moments[p]
        return (hi - lo) / est if est else float("inf")


def coupling_time_moments(tau, p_list: Sequence[float] = (1, 2), n_boot: int = 1000, seed: int = 0,
                          level: float = 0.95) -> CouplingMoments:
    tau = np.asarray(tau, dtype=float)
    finite = tau[np.isfinite(tau)]
    if finite.size == 0:
        raise NoCouplingError("no pair coupled before the horizon")
    rng = chunk_rng(seed, 11)
    idx = rng.integers(0, finite.size, size=(n_boot, finite.size))
    moments = {}
    a = (1 - level) / 2
    for p in p_list:
        vals = finite ** p
        boot = vals[idx].mean(axis=1)
        moments[p] = (float(vals.mean()), float(np.quantile(boot, a)), float(np.quantile(boot, 1 - a)))
    ts = np.sort(finite)
    surv = 1.0 - np.arange(1, ts.size + 1) / tau.size
    upper = (ts >= np.quantile(ts, 0.5)) & (surv > 0) & (ts > 0)
    kappa = float("nan")
    rate = float("nan")
    if upper.sum() >= 3 and np.unique(ts[upper]).size >= 2:
        kappa = float(np.polyfit(np.log(ts[upper]), np.log(surv[upper]), 1)[0])
        rate = float(-np.polyfit(ts[upper], np.log(surv[upper]), 1)[0])
    return CouplingMoments(moments, ts, surv, int(tau.size), int(tau.size - finite.size), kappa, rate)


def survival(tau, t) -> np.ndarray:
    """Empirical ``P(tau > t)`` (censored pairs count as surviving)."""
    tau = np.asarray(tau, dtype=float)
    return np.array([np.mean(tau > s) for s in np.atleast_1d(t)])


# ---------------------------------------------------------------------------
# control probability and exit times


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


@dataclass
class ControlResult:
    points: np.ndarray
    estimates: np.ndarray
    minimum: float
    ci: tuple
    argmin: np.ndarray


def control_probability(model: LimitModel, level: Optional[int], K_points, x0, eta: float,
                        config: SimConfig = SimConfig(dt=0.01, horizon=1.0, n_paths=10_000)) -> ControlResult:
    """``min_{x in K} P_x(|X^G_1 - x0| <= eta / 4)`` over the grid ``K_points``."""
    pts = np.atleast_2d(np.asarray(K_points, dtype=float))
    if pts.shape[0] == 1 and model.dim_state == 1:
        pts = pts.T
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    cfg = config.replace(horizon=1.0)
    est, counts = [], []
    for i, x in enumerate(pts):
        term = simulate_truncated(model, x, level, cfg.replace(seed=config.seed * 100_003 + i)).terminal
        k = int(np.sum(np.linalg.norm(term - x0, axis=1) <= eta / 4))
        counts.append(k)
        est.append(k / cfg.n_paths)
    est = np.array(est)
    j = int(np.argmin(est))
    return ControlResult(pts, est, float(est[j]), wilson_interval(counts[j], cfg.n_paths), pts[j])


def exit_time_check(model: LimitModel, cert: MinorizationCertificate, levels: Optional[Sequence[int]] = None,
                    n_pairs: int = 2000, dt: float = 0.005, seed: int = 0) -> dict:
    """Probability that two copies started in ``C' = B(x0, eta/2)`` stay in ``C`` until the first big jump.

    Levels double from 1 (or follow ``levels``); the threshold is the first
    ``Gamma_n`` where the probability reaches 1/2.
    """
    n_layers = len(model.measure.layers)
    if levels is None:
        levels, n = [], 1
        while n <= n_layers:
            levels.append(n)
            n *= 2
    rows = []
    threshold = None
    inner = BallSet(cert.center, cert.eta / 2)
    for lv in levels:
        rng = chunk_rng(seed, lv)
        small = make_dynamics(model, list(range(lv, n_layers)), "drift", tail_layers=[])
        Gn = model.measure.rate_bound(lv)
        T1 = rng.exponential(1.0 / Gn, size=n_pairs)
        X = inner.sample(rng, n_pairs)
        Y = inner.sample(rng, n_pairs)
        t = np.zeros(n_pairs)
        alive = np.ones(n_pairs, dtype=bool)
        while True:
            act = np.flatnonzero(alive & (t < T1))
            if not act.size:
                break
            h = np.minimum(dt, T1[act] - t[act])
            X[act] = advance(small, X[act], t[act], h, rng)
            Y[act] = advance(small, Y[act], t[act], h, rng)
            t[act] += h
            alive[act] = cert.in_C(X[act]) & cert.in_C(Y[act])
        prob = float(alive.mean())
        rows.append({"level": lv, "rate_bound": Gn, "probability": prob})
        if threshold is None and prob >= 0.5:
            threshold = Gn
    return {"rows": rows, "threshold": threshold}
