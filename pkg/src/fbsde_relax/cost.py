"""Monte Carlo evaluation of the Bolza cost and the Bolza-to-Mayer augmentation.

The cost of a (relaxed) control is

    J = E[ psi(X_T) + g(Y_0) + int_0^T int_K l(t, X_t, Y_t, u) q_t(du) dt ].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError, StateError
from .fbsde import (
    COUPLED,
    CoefficientSet,
    PathEnsemble,
    _backward,
    control_average,
    eval_g,
    eval_l,
    eval_psi,
)
from .regression import RegressionSpec

__version__ = "0.1.0"

QUADRATURES = ("left", "simpson")


@dataclass(frozen=True)
class CostReport:
    estimate: float
    std_error: float
    components: dict
    n_paths: int
    seed: int
    quadrature: str = "left"
    scenario_hash: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ParameterError("std_error must be nonnegative")

    def with_hash(self, scenario_hash):
        return CostReport(self.estimate, self.std_error, dict(self.components), self.n_paths, self.seed,
                          self.quadrature, scenario_hash, dict(self.meta))

    def to_dict(self):
        return {
            "scenario_hash": self.scenario_hash,
            "estimate": float(self.estimate),
            "std_error": float(self.std_error),
            "components": {k: float(v) for k, v in self.components.items()},
            "n_paths": int(self.n_paths),
            "seed": int(self.seed),
            "quadrature": self.quadrature,
            "meta": self.meta,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(
            estimate=float(d["estimate"]),
            std_error=float(d["std_error"]),
            components={k: float(v) for k, v in d["components"].items()},
            n_paths=int(d["n_paths"]),
            seed=int(d["seed"]),
            quadrature=d.get("quadrature", "left"),
            scenario_hash=d.get("scenario_hash"),
            meta=dict(d.get("meta", {})),
        )


def _running(c, ens, control, quadrature):
    """Per-path running cost sum_i (averaged l) dt_i."""
    cmap = ens.cell_map if ens.cell_map is not None else control.grid.cell_map(ens.grid)
    n = ens.n_paths
    t_left, t_b, dts = ens.grid.left, ens.grid.boundaries, ens.grid.dt
    acc = np.zeros(n)
    for i in range(ens.N):
        cell, dt = int(cmap[i]), float(dts[i])
        x0, y0 = ens.X[:, i], ens.Y[:, i]

        def lbar(t, x, y):
            return control_average(control, cell, lambda uu: eval_l(c, t, x, y, uu), n)

        if quadrature == "left":
            acc = acc + lbar(float(t_left[i]), x0, y0) * dt
        else:
            x1, y1 = ens.X[:, i + 1], ens.Y[:, i + 1]
            tm = 0.5 * (float(t_b[i]) + float(t_b[i + 1]))
            val = (lbar(float(t_b[i]), x0, y0)
                   + 4.0 * lbar(tm, 0.5 * (x0 + x1), 0.5 * (y0 + y1))
                   + lbar(float(t_b[i + 1]), x1, y1)) / 6.0
            acc = acc + val * dt
    return acc


def _bootstrap_total(c, ens, control, reg, pathwise, n_bootstrap):
    """Standard deviation of the total estimate over path resamples (Y re-solved each time)."""
    rng = np.random.default_rng([int(ens.seed) & 0xFFFFFFFF, 0xB0075])
    n = ens.n_paths
    reps = np.empty(n_bootstrap)
    for r in range(n_bootstrap):
        rows = rng.integers(0, n, size=n)
        sub = _backward(c, ens.take(rows), control, reg)
        reps[r] = pathwise[rows].mean() + eval_g(c, sub.Y[:, 0]).mean()
    return float(reps.std(ddof=1)) if n_bootstrap > 1 else 0.0


def evaluate_cost(
    c: CoefficientSet,
    ens: PathEnsemble,
    control,
    quadrature: str = "left",
    n_bootstrap: int = 50,
    reg: Optional[RegressionSpec] = None,
) -> CostReport:
    """Cost estimate with standard error.

    The running integral uses left endpoints by default (the Euler
    convention); ``quadrature="simpson"`` applies Simpson's rule per step
    with the midpoint state taken as the average of the two endpoints, which
    is exact for piecewise-linear paths and quadratic ``l``.

    The standard error is the pathwise sample error when ``g`` is trivial.
    Otherwise ``Y_0`` is a regression output shared by all paths, so the
    error of the total is estimated by ``n_bootstrap`` path resamples with
    the backward pass re-run on each.
    """
    if ens.Y is None:
        raise StateError("cost evaluation needs Y; run the backward solver first")
    if quadrature not in QUADRATURES:
        raise ParameterError(f"quadrature must be one of {QUADRATURES}")
    n = ens.n_paths
    psi = eval_psi(c, ens.X[:, -1])
    run = _running(c, ens, control, quadrature)
    gy = eval_g(c, ens.Y[:, 0])
    comp = {"psi": float(psi.mean()), "g": float(gy.mean()), "running": float(run.mean())}
    estimate = comp["psi"] + comp["g"] + comp["running"]
    pathwise = psi + run
    se = float(pathwise.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    meta = {"se_method": "pathwise"}
    if not c.g_is_trivial and n_bootstrap and n_bootstrap > 1:
        if reg is None:
            reg = RegressionSpec.from_dict(ens.meta.get("regression", RegressionSpec().to_dict()))
        se = _bootstrap_total(c, ens, control, reg, pathwise, int(n_bootstrap))
        meta = {"se_method": "bootstrap", "n_bootstrap": int(n_bootstrap)}
    return CostReport(estimate, se, comp, n, int(ens.seed), quadrature, meta=meta)


def bolza_to_mayer(c: CoefficientSet) -> CoefficientSet:
    """Move the running and terminal costs into an extra backward component.

    The augmented system has ``k + 1`` backward components with driver
    ``h^{k+1} = l`` and terminal value ``phi^{k+1} = psi``; its cost is the
    pure initial-value cost ``g(y_{1..k}) + y_{k+1}``.
    """
    k = c.k
    b0, s0, h0, p0, l0, psi0, g0 = c.b, c.sigma, c.h, c.phi, c.l, c.psi, c.g
    coupled = c.coupling == COUPLED

    def head(y):
        return None if y is None else y[:, :k]

    def b(t, x, y, u):
        return b0(t, x, head(y) if coupled else None, u)

    def sigma(t, x, y, u):
        return s0(t, x, head(y) if coupled else None, u)

    def h(t, x, y, u):
        n = x.shape[0]
        hv = np.asarray(h0(t, x, head(y), u), dtype=np.float64).reshape(n, k)
        lv = np.asarray(l0(t, x, head(y), u), dtype=np.float64).reshape(n, 1)
        return np.concatenate([hv, lv], axis=1)

    def phi(x):
        n = x.shape[0]
        pv = np.asarray(p0(x), dtype=np.float64).reshape(n, k)
        return np.concatenate([pv, np.asarray(psi0(x), dtype=np.float64).reshape(n, 1)], axis=1)

    def g(y):
        return np.asarray(g0(y[:, :k]), dtype=np.float64).reshape(-1) + y[:, k]

    def zero_running(t, x, y, u):
        return np.zeros(x.shape[0])

    def zero_terminal(x):
        return np.zeros(x.shape[0])

    return c.with_(b=b, sigma=sigma, h=h, phi=phi, l=zero_running, psi=zero_terminal, g=g,
                   k=k + 1, name=f"{c.name}+mayer")
