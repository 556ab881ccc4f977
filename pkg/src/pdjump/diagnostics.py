"""Distances between sampled laws and the convergence experiments built on them.

Two estimators are provided.  ``tv_estimate`` bins both samples on
equal-mass cells of the pooled sample and reports half the L1 distance of
the cell frequencies.  ``dF_estimate`` maximizes ``|mean f(A) - mean f(B)|``
over a fixed dictionary of smooth test functions, which is a lower bound for
the distance over the whole smooth class.  Confidence intervals are
basic (reverse-percentile) bootstrap intervals, which also remove most of
the upward small-sample bias of both statistics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .core import BoxSet, InhomogeneousModel, LimitModel
from .generator import Dictionary, make_dictionary
from .rng import chunk_rng
from .simulate import SimConfig, simulate_inhomogeneous, simulate_limit


class SampleSizeError(ValueError):
    """Too few samples for a distance estimate."""


class NonStationaryError(RuntimeError):
    """The reference sample failed its stationarity self-test."""


@dataclass
class EmpiricalLaw:
    samples: np.ndarray
    weights: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        self.samples = s.reshape(-1, 1) if s.ndim == 1 else s
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.samples.shape[0],) or np.any(w < 0):
                raise ValueError("weights must be nonnegative, one per sample")
            self.weights = w / w.sum()

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _law(x) -> EmpiricalLaw:
    return x if isinstance(x, EmpiricalLaw) else EmpiricalLaw(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class DistanceEstimate:
    value: float
    ci_lo: float
    ci_hi: float
    se: float
    estimator: str
    per_function_se: Optional[np.ndarray] = None

    def __float__(self) -> float:
        return self.value


def _basic_interval(value: float, boot: np.ndarray, level: float, lo: float = 0.0, hi: float = math.inf):
    a = (1 - level) / 2
    q_lo, q_hi = np.quantile(boot, [a, 1 - a])
    ci_lo = float(np.clip(2 * value - q_hi, lo, hi))
    ci_hi = float(np.clip(2 * value - q_lo, lo, hi))
    return min(ci_lo, value), max(ci_hi, value)


# ---------------------------------------------------------------------------
# total variation


def _cells(pooled: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Interior edges of equal-mass bins along each coordinate (ties merged)."""
    qs = np.linspace(0, 1, n_bins + 1)[1:-1]
    return [np.unique(np.quantile(pooled[:, j], qs)) for j in range(pooled.shape[1])]


def _cell_index(x: np.ndarray, edges: list[np.ndarray]) -> tuple[np.ndarray, int]:
    idx = np.zeros(x.shape[0], dtype=np.int64)
    size = 1
    for j, e in enumerate(edges):
        idx = idx * (e.size + 1) + np.searchsorted(e, x[:, j], side="right")
        size *= e.size + 1
    return idx, size


def default_bins(n: int) -> int:
    return int(min(32, math.ceil(n ** (1.0 / 3.0))))


def tv_estimate(a, b, bins: Optional[int] = None, n_boot: int = 200, seed: int = 0,
                level: float = 0.95) -> DistanceEstimate:
    """Binned total-variation distance with a basic bootstrap interval.

    Bins are equal-mass along each coordinate of the pooled sample;
    ``bins`` defaults to ``ceil(N^(1/3))`` per coordinate, capped at 32,
    with ``N`` the smaller sample size.
    """
    A, B = _law(a), _law(b)
    if min(len(A), len(B)) < 100:
        raise SampleSizeError("total variation needs at least 100 samples per law")
    if A.dim != B.dim:
        raise ValueError("laws live in different dimensions")
    k = bins or default_bins(min(len(A), len(B)))
    edges = _cells(np.concatenate([A.samples, B.samples]), k)
    ia, size = _cell_index(A.samples, edges)
    ib, _ = _cell_index(B.samples, edges)
    wa = A.weights if A.weights is not None else np.full(len(A), 1.0 / len(A))
    wb = B.weights if B.weights is not None else np.full(len(B), 1.0 / len(B))

    def stat(ia_, wa_, ib_, wb_):
        pa = np.bincount(ia_, weights=wa_, minlength=size)
        pb = np.bincount(ib_, weights=wb_, minlength=size)
        return 0.5 * float(np.abs(pa / pa.sum() - pb / pb.sum()).sum())

    value = stat(ia, wa, ib, wb)
    rng = chunk_rng(seed, 21)
    boot = np.empty(n_boot)
    for r in range(n_boot):
        ra = rng.integers(0, len(A), len(A))
        rb = rng.integers(0, len(B), len(B))
        boot[r] = stat(ia[ra], wa[ra], ib[rb], wb[rb])
    lo, hi = _basic_interval(value, boot, level, 0.0, 1.0)
    return DistanceEstimate(value, lo, hi, float(boot.std(ddof=1)), "tv_binned")


# ---------------------------------------------------------------------------
# dictionary distance


def _dictionary_for(samples: Sequence[np.ndarray], size: int = 64, seed: int = 0) -> Dictionary:
    pooled = np.concatenate([np.asarray(s).reshape(len(s), -1) for s in samples])
    lo = np.quantile(pooled, 0.005, axis=0)
    hi = np.quantile(pooled, 0.995, axis=0)
    thin = hi - lo < 1e-6 * (1.0 + np.abs(lo))
    lo, hi = np.where(thin, lo - 0.5, lo), np.where(thin, hi + 0.5, hi)
    return make_dictionary(pooled.shape[1], BoxSet(lo, hi), size=size, seed=seed)


def dF_estimate(a, b, dictionary: Optional[Dictionary] = None, paired: bool = False, n_boot: int = 200,
                seed: int = 0, level: float = 0.95) -> DistanceEstimate:
    """``max_f |mean f(A) - mean f(B)|`` over the dictionary, with bootstrap interval.

    With ``paired=True`` row ``i`` of ``A`` and ``B`` come from the same
    path, and rows are resampled jointly.  Without a dictionary one is drawn
    over the central 99% box of the pooled samples.
    """
    A, B = _law(a), _law(b)
    if dictionary is None:
        dictionary = _dictionary_for([A.samples, B.samples], seed=seed)
    FA = dictionary.values(A.samples)
    FB = dictionary.values(B.samples)
    rng = chunk_rng(seed, 22)
    if paired:
        if len(A) != len(B):
            raise ValueError("paired estimates need equal sample sizes")
        D = FA - FB
        diff = D.mean(axis=0)
        se_f = D.std(axis=0, ddof=1) / math.sqrt(len(A))
        boot = np.empty(n_boot)
        for r in range(n_boot):
            boot[r] = np.max(np.abs(D[rng.integers(0, len(A), len(A))].mean(axis=0)))
    else:
        diff = FA.mean(axis=0) - FB.mean(axis=0)
        se_f = np.sqrt(FA.var(axis=0, ddof=1) / len(A) + FB.var(axis=0, ddof=1) / len(B))
        boot = np.empty(n_boot)
        for r in range(n_boot):
            ra = rng.integers(0, len(A), len(A))
            rb = rng.integers(0, len(B), len(B))
            boot[r] = np.max(np.abs(FA[ra].mean(axis=0) - FB[rb].mean(axis=0)))
    value = float(np.max(np.abs(diff)))
    lo, hi = _basic_interval(value, boot, level)
    return DistanceEstimate(value, lo, hi, float(boot.std(ddof=1)), "dF_dictionary", se_f)


# ---------------------------------------------------------------------------
# gap curves


@dataclass
class GapCurve:
    x: np.ndarray
    gap: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    estimator: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x, self.gap, self.ci_lo, self.ci_hi = (np.asarray(v, dtype=float) for v in (self.x, self.gap, self.ci_lo, self.ci_hi))

    def strictly_decreasing(self) -> bool:
        """Each CI lies entirely above the next one."""
        return bool(np.all(self.ci_lo[:-1] > self.ci_hi[1:]))

    def decay_exponent(self) -> float:
        """``-slope`` of ``log gap`` against ``log x`` (positive gaps only)."""
        ok = (self.gap > 0) & (self.x > 0)
        if ok.sum() < 2:
            return float("nan")
        return float(-np.polyfit(np.log(self.x[ok]), np.log(self.gap[ok]), 1)[0])

    def envelope_constant(self, r: float, T: float) -> float:
        """Smallest ``C`` with ``gap(t) <= C int_t^{t+T} e^{-rs} ds`` on the curve."""
        shape = (np.exp(-r * self.x) - np.exp(-r * (self.x + T))) / r
        return float(np.max(self.gap / shape))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "gap", "ci_lo", "ci_hi", "estimator"])
            for row in zip(self.x, self.gap, self.ci_lo, self.ci_hi):
                w.writerow([repr(float(v)) for v in row] + [self.estimator])


def _curve(xs, estimates: list[DistanceEstimate], estimator: str, **meta) -> GapCurve:
    return GapCurve(np.asarray(xs, dtype=float), [e.value for e in estimates], [e.ci_lo for e in estimates],
                    [e.ci_hi for e in estimates], estimator, dict(meta))


def _record_every(dt: float, times: Sequence[float]) -> tuple[int, list[int]]:
    """Recording stride and grid indices for times that are multiples of ``dt``."""
    steps = [int(round(t / dt)) for t in times]
    if any(abs(s * dt - t) > 1e-9 * max(1.0, t) for s, t in zip(steps, times)):
        raise ValueError("observation times must be multiples of dt")
    stride = math.gcd(*steps) or 1
    return stride, [s // stride for s in steps]


def pseudotrajectory_gap(model: InhomogeneousModel, limit: LimitModel, x0, t_list: Sequence[float], T: float,
                         s_grid: Optional[Sequence[float]] = None, config: SimConfig = SimConfig(),
                         dictionary: Optional[Dictionary] = None, n_boot: int = 200,
                         limit_overrides: Optional[dict] = None) -> GapCurve:
    """``max_{s in s_grid} d_F(mu_{t+s}, mu_t P_s)`` for every ``t``.

    ``mu_t`` is sampled by inhomogeneous paths from ``x0`` at time 0.  Each
    path then branches into the inhomogeneous dynamics and the limit
    dynamics, both driven by the same seed.  ``limit_overrides`` replaces
    config fields for the limit branch only (e.g. its own ``level``).  The dictionary statistic is
    paired by path; the bootstrap resamples paths and takes the max over
    ``s`` inside every replicate.
    """
    s_grid = [T] if s_grid is None else list(s_grid)
    dt = config.dt
    stride, pos = _record_every(dt, s_grid)
    estimates = []
    for i, t in enumerate(t_list):
        base = config.replace(horizon=t, seed=config.seed * 1000 + i, record_every=0, record_events=False)
        xt = simulate_inhomogeneous(model, x0, 0.0, base).terminal if t > 0 else \
            np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (config.n_paths, model.dim_state)).copy()
        branch = config.replace(horizon=max(s_grid), seed=config.seed * 1000 + 500 + i, record_every=stride,
                                record_events=False)
        pa = simulate_inhomogeneous(model, xt, t, branch).states
        pb = simulate_limit(limit, xt, branch.replace(**(limit_overrides or {})), t_start=t).states
        A = [pa[:, p] for p in pos]
        B = [pb[:, p] for p in pos]
        dic = dictionary if dictionary is not None else _dictionary_for(A + B, seed=config.seed)
        D = [dic.values(a) - dic.values(b) for a, b in zip(A, B)]
        value = max(float(np.max(np.abs(d.mean(axis=0)))) for d in D)
        rng = chunk_rng(config.seed, 31, i)
        n = config.n_paths
        boot = np.empty(n_boot)
        for r in range(n_boot):
            idx = rng.integers(0, n, n)
            boot[r] = max(float(np.max(np.abs(d[idx].mean(axis=0)))) for d in D)
        lo, hi = _basic_interval(value, boot, 0.95)
        estimates.append(DistanceEstimate(value, lo, hi, float(boot.std(ddof=1)), "dF_dictionary"))
    return _curve(t_list, estimates, "dF_dictionary", T=T, s_grid=s_grid)


# ---------------------------------------------------------------------------
# equilibrium


def permutation_tv_test(a, b, n_perm: int = 200, seed: int = 0, bins: Optional[int] = None) -> float:
    """Permutation p-value of the binned TV between two samples."""
    A, B = _law(a), _law(b)
    pooled = np.concatenate([A.samples, B.samples])
    k = bins or default_bins(min(len(A), len(B)))
    edges = _cells(pooled, k)
    idx, size = _cell_index(pooled, edges)
    na = len(A)

    def stat(labels):
        pa = np.bincount(idx[labels[:na]], minlength=size) / na
        pb = np.bincount(idx[labels[na:]], minlength=size) / (len(pooled) - na)
        return 0.5 * np.abs(pa - pb).sum()

    ident = np.arange(len(pooled))
    obs = stat(ident)
    rng = chunk_rng(seed, 41)
    count = sum(stat(rng.permutation(len(pooled))) >= obs for _ in range(n_perm))
    return (1 + count) / (1 + n_perm)


def pi_reference(limit: LimitModel, x0, config: SimConfig, burn_in: float = 50.0, span: Optional[float] = None,
                 alpha: float = 0.01, n_perm: int = 200) -> EmpiricalLaw:
    """Stationary reference sample from ``config.n_paths`` long runs.

    Half of the chains are read at ``burn_in`` and half at ``burn_in + span``
    (default ``span = burn_in / 2``).  If a permutation test rejects equality
    of the two halves at level ``alpha`` the reference is rejected.
    """
    span = burn_in / 2 if span is None else span
    stride, pos = _record_every(config.dt, [burn_in, burn_in + span])
    batch = simulate_limit(limit, x0, config.replace(horizon=burn_in + span, record_every=stride))
    n = config.n_paths
    first = batch.states[: n // 2, pos[0]]
    second = batch.states[n // 2:, pos[1]]
    p = permutation_tv_test(first, second, n_perm=n_perm, seed=config.seed)
    if p < alpha:
        raise NonStationaryError(f"reference halves differ (permutation p = {p:.3g}); increase burn_in")
    return EmpiricalLaw(np.concatenate([first, second]),
                        meta={"model": limit.name, "burn_in": burn_in, "span": span, "seed": config.seed,
                              "self_test_p": p})


def _start_law(start, n: int, d: int) -> np.ndarray:
    if isinstance(start, EmpiricalLaw):
        s = start.samples
        reps = int(math.ceil(n / len(s)))
        return np.tile(s, (reps, 1))[:n]
    s = np.asarray(start, dtype=float)
    if s.ndim == 2 and s.shape[0] > 1:
        return s[:n]
    return np.broadcast_to(s.reshape(1, d), (n, d)).copy()


def equilibrium_gap(limit: LimitModel, start, t_list: Sequence[float], reference: EmpiricalLaw,
                    config: SimConfig, estimator: str = "tv", dictionary: Optional[Dictionary] = None,
                    n_boot: int = 200) -> GapCurve:
    """Distance between the law at each ``t`` (from ``start``) and the reference.

    ``start`` is a point, an ``(n, d)`` array of starting points, or an
    :class:`EmpiricalLaw` (recycled to ``config.n_paths`` rows).  All times
    come from one batch recorded at ``t_list``.
    """
    stride, pos = _record_every(config.dt, t_list)
    x0 = _start_law(start, config.n_paths, limit.dim_state)
    if max(t_list) > 0:
        states = simulate_limit(limit, x0, config.replace(horizon=max(t_list), record_every=stride)).states
    else:
        states = x0[:, None, :]
    estimates = []
    for i, p in enumerate(pos):
        sample = states[:, p]
        if estimator == "tv":
            estimates.append(tv_estimate(sample, reference, n_boot=n_boot, seed=config.seed + i))
        else:
            estimates.append(dF_estimate(sample, reference, dictionary, n_boot=n_boot, seed=config.seed + i))
    curve = _curve(t_list, estimates, estimates[0].estimator)
    curve.meta["decay_exponent"] = curve.decay_exponent()
    return curve


def two_start_gap(limit: LimitModel, x, y, t_list: Sequence[float], config: SimConfig,
                  estimator: str = "tv", dictionary: Optional[Dictionary] = None, n_boot: int = 200) -> GapCurve:
    """Distance between the laws at time ``t`` of the chains started at ``x`` and at ``y``."""
    stride, pos = _record_every(config.dt, t_list)
    cfg = config.replace(horizon=max(t_list), record_every=stride)
    bx = simulate_limit(limit, x, cfg).states
    by = simulate_limit(limit, y, cfg.replace(seed=config.seed + 7919)).states
    est = []
    for i, p in enumerate(pos):
        if estimator == "tv":
            est.append(tv_estimate(bx[:, p], by[:, p], n_boot=n_boot, seed=config.seed + i))
        else:
            est.append(dF_estimate(bx[:, p], by[:, p], dictionary, n_boot=n_boot, seed=config.seed + i))
    curve = _curve(t_list, est, est[0].estimator)
    curve.meta["decay_exponent"] = curve.decay_exponent()
    return curve


def mean_field_gap(systems: Sequence, limit: LimitModel, x0, T: float, n_paths: int, dt: float = 0.01,
                   seed: int = 0, dictionary: Optional[Dictionary] = None, n_boot: int = 200) -> GapCurve:
    """``d_F`` between ``X^{[N]}_T`` of each Hawkes system and the limit law at ``T``.

    One dictionary, drawn over the pooled samples, serves every ``N``.
    """
    lim = simulate_limit(limit, x0, SimConfig(dt=dt, horizon=T, n_paths=n_paths, seed=seed)).terminal
    samples = [sys.simulate(x0, T, n_paths, seed=seed + 101 * (i + 1)) for i, sys in enumerate(systems)]
    dic = dictionary if dictionary is not None else _dictionary_for(samples + [lim], seed=seed)
    est = [dF_estimate(xs, lim, dic, n_boot=n_boot, seed=seed + i) for i, xs in enumerate(samples)]
    return _curve([s.p.N for s in systems], est, "dF_dictionary", T=T)
