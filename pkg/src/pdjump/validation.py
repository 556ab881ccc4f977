"""Grid checks of the standing assumptions on a model's coefficients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .core import BoxSet, InhomogeneousModel, LimitModel, inhomogeneous_from_limit
from .generator import _SEMI_QUAD, Quadrature, _all_nodes, _jac_norm, _pair, alpha_tail, c_mu

Model = Union[InhomogeneousModel, LimitModel]


@dataclass
class ValidationReport:
    """Empirical constants and one pass/fail entry per checked assumption.

    ``checks`` maps a check name to ``(passed, message)``; a failing rate
    bound names the offending ``(t, z, x)`` point in its message.
    """

    lipschitz: dict
    sup_gamma: float
    c_mu: Optional[float]
    alpha_tail: Optional[float]
    layer_first_moments: list
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def failures(self) -> list[str]:
        return [f"{name}: {msg}" for name, (ok, msg) in self.checks.items() if not ok]


def validate_model(model: Model, box=None, grid_points: int = 33, t_grid: Sequence[float] = (0.0,),
                   tol: float = 1e-6, quad: Quadrature = _SEMI_QUAD, level: Optional[int] = None,
                   partition_samples: int = 2000, seed: int = 0) -> ValidationReport:
    """Evaluate Lipschitz constants, ``sup gamma``, ``C_mu`` and ``alpha(G^c)`` on a grid.

    ``box`` defaults to ``[-5, 5]^d``; marks are the quadrature nodes of
    every layer.  The integrability of ``|c| gamma`` is checked layer by
    layer.  ``C_mu`` and ``alpha(G^c)`` (with ``G`` the first ``level``
    layers, default all) are computed for limit models only.
    """
    d = model.dim_state
    box = BoxSet(-5.0 * np.ones(d), 5.0 * np.ones(d)) if box is None else (box if isinstance(box, BoxSet) else BoxSet(*box))
    xs = box.grid(grid_points)
    inh = inhomogeneous_from_limit(model) if isinstance(model, LimitModel) else model
    is_limit = isinstance(model, LimitModel)
    ts = [0.0] if is_limit else list(t_grid)
    checks: dict = {}
    lip = {"drift": 0.0, "diffusion": 0.0, "amplitude": 0.0, "rate": 0.0}
    sup_gamma = 0.0
    moments = []
    for t in ts:
        tt = np.full(xs.shape[0], t)
        lip["drift"] = max(lip["drift"], float(np.max(_jac_norm(lambda y: inh.drift(tt, y), xs))))
        if inh.diffusion is not None:
            lip["diffusion"] = max(lip["diffusion"], float(np.max(
                _jac_norm(lambda y: inh.diffusion(tt, y).reshape(y.shape[0], -1), xs))))
        z, w, lay = _all_nodes(inh, t, quad)
        if not len(w):
            continue
        Z, X = _pair(z, xs)
        T = np.full(Z.shape[0], t)
        g = inh.rate(T, Z, X)
        c = inh.amplitude(T, Z, X)
        lip["amplitude"] = max(lip["amplitude"], float(np.max(_jac_norm(lambda y: inh.amplitude(T, Z, y), X))))
        lip["rate"] = max(lip["rate"], float(np.max(_jac_norm(lambda y: inh.rate(T, Z, y)[:, None], X))))
        sup_gamma = max(sup_gamma, float(np.max(g)))
        bad = np.flatnonzero(g > inh.gamma_bound * (1 + 1e-12) + tol)
        if bad.size and "rate_bound" not in checks:
            i = int(bad[np.argmax(g[bad])])
            checks["rate_bound"] = (False, f"gamma={g[i]:.6g} > Gamma={inh.gamma_bound:.6g} at t={t:g}, "
                                           f"z={Z[i].tolist()}, x={X[i].tolist()}")
        if np.any(g < -tol):
            checks["rate_nonnegative"] = (False, "negative jump rate on the grid")
        per = (g * np.linalg.norm(c, axis=1)).reshape(xs.shape[0], -1) * w[None, :]
        for i in range(len(inh.measure.layers)):
            v = float(np.max(per[:, lay == i].sum(axis=1)))
            moments.append({"t": t, "layer": i, "sup_abs_first_moment": v})
            if not np.isfinite(v):
                checks[f"layer_{i}_integrable"] = (False, f"sup_x int |c| gamma over layer {i} is not finite")
    checks.setdefault("rate_bound", (True, f"sup gamma = {sup_gamma:.6g} <= Gamma = {inh.gamma_bound:.6g}"))
    checks.setdefault("rate_nonnegative", (True, "ok"))
    checks["lipschitz_finite"] = (all(np.isfinite(v) for v in lip.values()), str(lip))

    if inh.regime is not None:
        rng = np.random.default_rng(seed)
        for t in ts:
            zs = []
            for layer in inh.measure.layers:
                if layer.mass_at(t) > 0:
                    zs.append(layer.sample(rng, partition_samples // len(inh.measure.layers) + 1, t))
            zs = np.concatenate(zs)
            r = np.asarray(inh.regime(np.full(zs.shape[0], t), zs))
            ok = bool(np.all(np.isin(r, (1, 2, 3))))
            if not ok:
                checks["regime_partition"] = (False, f"classifier returned labels outside {{1,2,3}} at t={t:g}")
                break
        checks.setdefault("regime_partition", (True, "ok"))

    cm = at = None
    if is_limit:
        cov = model.covariance(xs)
        eig = np.linalg.eigvalsh(0.5 * (cov + np.transpose(cov, (0, 2, 1))))
        sym = np.allclose(cov, np.transpose(cov, (0, 2, 1)), atol=tol)
        checks["covariance_psd"] = (bool(sym and np.all(eig >= -tol)), f"min eigenvalue {float(eig.min()):.3g}")
        cm = c_mu(model, box, grid_points, quad)
        at = alpha_tail(model, len(model.measure.layers) if level is None else level, box, grid_points, quad)
        checks["c_mu_finite"] = (bool(np.isfinite(cm)), f"C_mu ~ {cm:.6g}")
        checks["alpha_tail_finite"] = (bool(np.isfinite(at)), f"alpha(G^c) ~ {at:.6g}")
    return ValidationReport(lip, sup_gamma, cm, at, moments, checks)
