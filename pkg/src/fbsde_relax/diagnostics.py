"""Tightness statistics for families of FBSDE solutions.

Conditional variation, up-crossing counts, moment statistics across grid
refinements and the orthogonal remainder after removing the drift and the
Brownian integral from Y. Conditional expectations are regressions on the
forward state at the conditioning time.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .controls import TimeGrid, as_relaxed, regrid
from .errors import ConfigurationError, FBSDEError, ParameterError, SolverFailure, StateError
from .fbsde import COUPLED, PicardConfig, control_average, eval_h, solve
from .regression import RegressionSpec, fit, residual_variance

__version__ = "0.1.0"

CONDITIONING_NOTE = "conditional expectations given the forward state X at the left partition point"

STAT_COLUMNS = ("cv", "sup_E_abs_Y", "sup_E_abs_ZdW", "E_sup_X2", "E_sup_Y2", "E_int_Z2")


@dataclass(frozen=True)
class CVEstimate:
    value: float
    noise_floor: float
    per_partition: list = field(default_factory=list)
    conditioning: str = CONDITIONING_NOTE

    def __float__(self):
        return float(self.value)


def dyadic_partitions(N):
    """Full grid plus its dyadic coarsenings, as lists of grid indices."""
    parts, stride = [], 1
    while stride <= N:
        idx = list(range(0, N, stride)) + [N]
        parts.append(idx)
        if stride == N:
            break
        stride *= 2
    if parts[-1] != [0, N]:
        parts.append([0, N])
    return parts


def _norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


def conditional_variation(ens, reg: RegressionSpec = RegressionSpec(), partitions: Optional[Sequence] = None):
    """Sum over a partition of E|E[Y_{t_{j+1}} - Y_{t_j} | X_{t_j}]|, maximised over partitions.

    The noise floor of each partition is ``3 * sum_j sqrt(p_j * r_j / n)``
    with ``p_j`` the number of regression parameters and ``r_j`` the residual
    variance; the reported floor is the one of the maximising partition.
    """
    if ens.Y is None:
        raise StateError("conditional variation needs Y")
    if partitions is None:
        partitions = dyadic_partitions(ens.N)
    partitions = [list(p) for p in partitions]
    if not partitions:
        raise ParameterError("need at least one partition")
    n = ens.n_paths
    rows = []
    for part in partitions:
        idx = np.asarray(part)
        if idx.size < 2 or np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] > ens.N:
            raise ParameterError(f"partition {part!r} is not an increasing list of grid indices")
        total, floor = 0.0, 0.0
        for a, b in zip(idx[:-1], idx[1:]):
            inc = ens.Y[:, b] - ens.Y[:, a]
            surf, fitted = fit(ens.X[:, a], inc, reg)
            total += float(np.mean(_norm(fitted)))
            rv = float(np.sum(residual_variance(inc, fitted)))
            floor += 3.0 * np.sqrt(surf.n_params * rv / n)
        rows.append({"indices": [int(i) for i in idx], "value": total, "noise_floor": float(floor)})
    best = max(range(len(rows)), key=lambda j: rows[j]["value"])
    return CVEstimate(rows[best]["value"], rows[best]["noise_floor"], rows)


def cv_bound(c, ens, control):
    """E sum_i int_K |h(t_i, X_i, Y_i, u)| q(du) dt_i."""
    if ens.Y is None:
        raise StateError("the CV bound needs Y")
    cmap = ens.cell_map if ens.cell_map is not None else control.grid.cell_map(ens.grid)
    n = ens.n_paths
    acc = np.zeros(n)
    for i in range(ens.N):
        t, dt = float(ens.grid.left[i]), float(ens.grid.dt[i])
        x, y = ens.X[:, i], ens.Y[:, i]
        hb = control_average(control, int(cmap[i]), lambda uu: _norm(eval_h(c, t, x, y, uu))[:, None], n)
        acc += hb[:, 0] * dt
    return float(acc.mean())


def upcrossings(path, a, b):
    """Completed passages from strictly below ``a`` to strictly above ``b``.

    ``path`` is one grid path (1-d) or a batch of paths (one per row).
    """
    if not a < b:
        raise ParameterError(f"need a < b, got a={a!r}, b={b!r}")
    arr = np.asarray(path, dtype=np.float64)
    counts = _kernels.upcross_counts(np.atleast_2d(arr), float(a), float(b))
    return int(counts[0]) if arr.ndim == 1 else counts


def default_ladder(y, pairs=8):
    """``pairs`` adjacent (a, b) bands on equispaced levels across the range of ``y``."""
    lo, hi = float(np.min(y)), float(np.max(y))
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, pairs + 1)
    return [(float(edges[j]), float(edges[j + 1])) for j in range(pairs)]


def _ito_integral(ens):
    """Running sums sum_{j<i} Z_j dW_j for the first backward component, shape (n, N+1)."""
    n, N, m = ens.n_paths, ens.N, ens.m
    z = ens.Z[:, :, :m]
    incr = np.sum(z * ens.dW, axis=2)
    out = np.zeros((n, N + 1))
    np.cumsum(incr, axis=1, out=out[:, 1:])
    return out


def _z_energy(ens, reg: RegressionSpec = RegressionSpec()):
    """E int |Z|^2 and its regression-aware standard error.

    Three variance terms: the pathwise spread, the noise of each fitted Z
    level, and the fit error e_j of Y_j, which reaches every earlier Z. To
    first order the latter shifts the estimate by ``2 sum_j mean(e_j M_j)``
    with ``M_j`` the running Ito integral, so its variance is
    ``4 / n^2 sum_j sum_p r_jp^2 (P_j M_j)_p^2`` (``P_j`` the hat projection).
    """
    n, N, k, m = ens.n_paths, ens.N, ens.k, ens.m
    dt = ens.grid.dt
    z2 = np.sum(ens.Z ** 2, axis=2)
    per_path = z2 @ dt
    value = float(per_path.mean())
    var = float(per_path.var(ddof=1)) / n if n > 1 else 0.0
    rv = ens.meta.get("resid_var")
    if rv is not None:
        zbar = ens.Z.mean(axis=0)
        # each fitted Z_i level carries error sqrt(r_i / n) / dt; first-order effect on the integral
        var += float(np.sum(4.0 * zbar ** 2 * rv[:, k:] / n))
    if n > 1:
        zdw = np.einsum("nikm,nim->nik", ens.Z.reshape(n, N, k, m), ens.dW)
        M = np.zeros((n, k))
        for j in range(1, N):
            M += zdw[:, j - 1]
            _, pred = fit(ens.X[:, j], ens.Y[:, j + 1], reg)
            _, pm = fit(ens.X[:, j], M, reg)
            var += 4.0 * float(np.sum((ens.Y[:, j + 1] - pred) ** 2 * pm ** 2)) / n ** 2
    return value, float(np.sqrt(var))


def moment_row(ens, reg: RegressionSpec = RegressionSpec()):
    """Moment statistics of one solved ensemble (first backward component for the Ito integral)."""
    n = ens.n_paths
    y_abs = _norm(ens.Y)
    e_abs_y = y_abs.mean(axis=0)
    ito = np.abs(_ito_integral(ens))
    e_ito = ito.mean(axis=0)
    sup_x2 = np.max(np.sum(ens.X ** 2, axis=2), axis=1)
    sup_y2 = np.max(y_abs ** 2, axis=1)
    z_val, z_se = _z_energy(ens, reg)
    iy, iz = int(np.argmax(e_abs_y)), int(np.argmax(e_ito))
    sq = np.sqrt(n)
    return {
        "sup_E_abs_Y": float(e_abs_y[iy]),
        "sup_E_abs_Y_se": float(y_abs[:, iy].std() / sq),
        "sup_E_abs_ZdW": float(e_ito[iz]),
        "sup_E_abs_ZdW_se": float(ito[:, iz].std() / sq),
        "E_sup_X2": float(sup_x2.mean()),
        "E_sup_X2_se": float(sup_x2.std() / sq),
        "E_sup_Y2": float(sup_y2.mean()),
        "E_sup_Y2_se": float(sup_y2.std() / sq),
        "E_int_Z2": z_val,
        "E_int_Z2_se": z_se,
    }


@dataclass
class TightnessReport:
    rows: list
    ladder: list
    upcross_p99: list
    flags: dict
    upcross_bounded: bool
    slack: dict
    conditioning: str = CONDITIONING_NOTE
    scenario_hash: Optional[str] = None

    @property
    def all_bounded(self):
        return all(self.flags.values())

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_dict(self):
        return {
            "scenario_hash": self.scenario_hash,
            "rows": self.rows,
            "ladder": [list(p) for p in self.ladder],
            "upcross_p99": self.upcross_p99,
            "flags": self.flags,
            "upcross_bounded": self.upcross_bounded,
            "slack": self.slack,
            "conditioning": self.conditioning,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        stats = ["N", "cv", "cv_floor"]
        for col in STAT_COLUMNS[1:]:
            stats += [col, col + "_se"]
        ladder = [f"upcross_p99[a={a!r};b={b!r}]" for a, b in self.ladder]
        w.writerow(["scenario_hash"] + stats + ladder)
        for row, ups in zip(self.rows, self.upcross_p99):
            vals = [repr(float(row[s])) if s != "N" else str(row["N"]) for s in stats]
            w.writerow([self.scenario_hash or ""] + vals + [repr(float(v)) for v in ups])
        return buf.getvalue()


def _align(control, grid):
    q = as_relaxed(control)
    try:
        q.grid.cell_map(grid)
        return q
    except ConfigurationError:
        return regrid(q, grid)


def meyer_zheng_table(
    N_list,
    c,
    control,
    reg: RegressionSpec = RegressionSpec(),
    n_paths: int = 10000,
    seed: int = 0,
    x0=0.0,
    pc: PicardConfig = PicardConfig(),
    T: Optional[float] = None,
    relaxation: str = "auto",
    pairs: int = 8,
    abs_slack: float = 0.05,
) -> TightnessReport:
    """Solve on uniform grids with N steps for every N in ``N_list`` and tabulate the statistics.

    A column is flagged bounded when its largest value over the family is at
    most ``1.1 *`` (value at the smallest N) plus a slack of three standard
    errors (the CV noise floor for the CV column) and ``abs_slack``.
    """
    N_list = sorted(int(v) for v in N_list)
    if not N_list:
        raise ParameterError("N_list must be nonempty")
    T = float(as_relaxed(control).grid.T if T is None else T)
    rows, ups, ladder = [], [], None
    for N in N_list:
        grid = TimeGrid.uniform(T, N)
        try:
            q = _align(control, grid)
            ens = solve(c, q, grid, x0, n_paths, seed, reg, pc, relaxation=relaxation)
        except FBSDEError as exc:
            raise SolverFailure(f"solve failed at refinement N={N}: {exc}", level=N) from exc
        cv = conditional_variation(ens, reg)
        row = {"N": N, "cv": cv.value, "cv_floor": cv.noise_floor}
        row.update(moment_row(ens, reg))
        rows.append(row)
        y = ens.Y[:, :, 0]
        if ladder is None:
            ladder = default_ladder(y, pairs)
        ups.append([float(np.percentile(upcrossings(y, a, b), 99)) for a, b in ladder])
    ref = rows[0]
    flags, slack = {}, {}
    for col in STAT_COLUMNS:
        err = max(r["cv_floor"] if col == "cv" else 3.0 * r[col + "_se"] for r in rows)
        slack[col] = float(err + abs_slack)
        flags[col] = bool(max(r[col] for r in rows) <= 1.1 * ref[col] + slack[col])
    up = np.asarray(ups)
    up_bounded = bool(np.all(up.max(axis=0) <= 1.1 * up[0] + 2.0))
    return TightnessReport(rows, ladder, ups, flags, up_bounded, slack)


def orthogonal_remainder(ens, reg: RegressionSpec = RegressionSpec(), control=None, c=None):
    """E sup_i |Y_i - Y_0 + sum_{j<i} hbar_j dt - sum_{j<i} Z_j dW_j|^2 and its noise floor.

    ``c`` and ``control`` supply the driver; without them the driver term is
    omitted (h = 0). The floor is ``4 * sum_i (v^Y_i + v^Z_i / dt)`` where
    ``v`` are the leverage-weighted sampling variances of the backward fits
    recorded by the solver (Doob's factor 4 for the sup). It reflects the
    solve itself, so perturbing ``ens.Z`` afterwards leaves it unchanged.
    """
    if ens.Y is None or ens.Z is None:
        raise StateError("orthogonal remainder needs Y and Z")
    n, N, k, m = ens.n_paths, ens.N, ens.k, ens.m
    cmap = None
    if control is not None:
        cmap = ens.cell_map if ens.cell_map is not None else control.grid.cell_map(ens.grid)
    R = np.zeros((n, k))
    sup = np.zeros(n)
    for i in range(N):
        dt = float(ens.grid.dt[i])
        step = ens.Y[:, i + 1] - ens.Y[:, i]
        if c is not None and control is not None:
            t, x, y = float(ens.grid.left[i]), ens.X[:, i], ens.Y[:, i]
            step = step + control_average(control, int(cmap[i]), lambda uu: eval_h(c, t, x, y, uu), n) * dt
        zdw = np.einsum("nkm,nm->nk", ens.Z[:, i].reshape(n, k, m), ens.dW[:, i])
        R += step - zdw
        sup = np.maximum(sup, np.sum(R * R, axis=1))
    value = float(sup.mean())
    fv = ens.meta.get("fit_var")
    floor = 0.0
    if fv is not None:
        dts = ens.grid.dt
        floor = float(4.0 * np.sum(fv[:, :k].sum(axis=1) + fv[:, k:].sum(axis=1) / dts))
    return value, floor
