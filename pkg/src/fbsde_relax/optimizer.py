"""Minimizing sequences over relaxed controls and strictification of relaxed optima.

The search is cyclic coordinate descent over the cells of a relaxed control.
Every cost evaluation in a run uses the same seed (common random numbers),
so comparisons between candidates are not drowned by Monte Carlo noise and
the accepted costs form a nonincreasing sequence.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controls import ActionSpace, RelaxedControl, StrictControl, TimeGrid, as_relaxed, regrid
from .cost import CostReport, evaluate_cost
from .errors import FBSDEError, ParameterError, SolverFailure
from .fbsde import (
    CoefficientSet,
    PathEnsemble,
    PicardConfig,
    control_average,
    eval_b,
    eval_h,
    eval_l,
    eval_sigma,
    solve,
)
from .regression import RegressionSpec

__version__ = "0.1.0"

STEP_RULES = ("exhaustive-vertex", "projected-gradient")


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for :func:`minimize_relaxed`.

    ``start_cells`` switches on grid doubling: the search starts with that
    many control cells and doubles after each level until ``cells`` is
    reached. ``init`` is ``"dirac:<j>"`` or ``"uniform"``.
    """

    max_sweeps: int = 50
    step_rule: str = "projected-gradient"
    step: float = 0.5
    shrink: float = 0.5
    max_backtracks: int = 8
    fd_eps: float = 1e-3
    tol: float = 1e-9
    seed: int = 0
    n_paths: int = 1000
    cells: Optional[int] = None
    start_cells: Optional[int] = None
    sweeps_per_level: int = 10
    init: str = "dirac:0"
    quadrature: str = "left"
    relaxation: str = "auto"

    def __post_init__(self):
        if int(self.max_sweeps) < 1:
            raise ParameterError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise ParameterError("tol must be > 0")
        if self.step_rule not in STEP_RULES:
            raise ParameterError(f"step_rule must be one of {STEP_RULES}")
        if not (self.step > 0 and 0 < self.shrink < 1 and self.fd_eps > 0):
            raise ParameterError("need step > 0, 0 < shrink < 1 and fd_eps > 0")
        if int(self.n_paths) < 1:
            raise ParameterError("n_paths must be >= 1")
        for name in ("cells", "start_cells"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if not (self.init == "uniform" or self.init.startswith("dirac:")):
            raise ParameterError("init must be 'uniform' or 'dirac:<index>'")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class TraceEntry:
    sweep: int
    cells: int
    q_hash: str
    J: float
    std_error: float


@dataclass
class MinimizingTrace:
    entries: list = field(default_factory=list)
    evaluations: int = 0

    def append(self, entry: TraceEntry):
        if self.entries and entry.J > self.entries[-1].J:
            raise AssertionError(f"trace must be nonincreasing: {entry.J!r} after {self.entries[-1].J!r}")
        self.entries.append(entry)

    @property
    def J(self):
        return np.array([e.J for e in self.entries])

    def __len__(self):
        return len(self.entries)

    def to_dict(self):
        return {"entries": [e.__dict__ for e in self.entries], "evaluations": int(self.evaluations)}

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sweep", "cells", "q_hash", "J", "std_error"])
        for e in self.entries:
            w.writerow([e.sweep, e.cells, e.q_hash, repr(float(e.J)), repr(float(e.std_error))])
        return buf.getvalue()

    def table(self):
        rows = [f"{'sweep':>5} {'cells':>5} {'q_hash':<16} {'J':>14} {'se':>11}"]
        for e in self.entries:
            rows.append(f"{e.sweep:>5} {e.cells:>5} {e.q_hash:<16} {e.J:>14.6e} {e.std_error:>11.3e}")
        return "\n".join(rows)


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    w = np.maximum(v - css[rho] / (rho + 1), 0.0)
    return w / w.sum()


def _subgrid(grid: TimeGrid, cells: int) -> TimeGrid:
    if grid.N % cells:
        raise ParameterError(f"control cells ({cells}) must divide the simulation steps ({grid.N})")
    return TimeGrid(grid.boundaries[:: grid.N // cells])


def _initial(space, grid, init):
    if init == "uniform":
        return RelaxedControl.uniform(space, grid)
    j = int(init.split(":", 1)[1])
    if not 0 <= j < space.m:
        raise ParameterError(f"init atom {j} outside the action space")
    row = np.zeros(space.m)
    row[j] = 1.0
    return RelaxedControl.constant(space, grid, row)


def _levels(cfg, final):
    if cfg.start_cells is None:
        return [final]
    levels, c = [], int(cfg.start_cells)
    while c < final:
        if final % c == 0:
            levels.append(c)
        c *= 2
    levels.append(final)
    return levels


class _Objective:
    def __init__(self, c, grid, x0, cfg, reg, pc):
        self.c, self.grid, self.x0, self.cfg, self.reg, self.pc = c, grid, x0, cfg, reg, pc
        self.evaluations = 0

    def __call__(self, q) -> CostReport:
        self.evaluations += 1
        try:
            ens = solve(self.c, q, self.grid, self.x0, self.cfg.n_paths, self.cfg.seed, self.reg, self.pc,
                        relaxation=self.cfg.relaxation)
            return evaluate_cost(self.c, ens, q, quadrature=self.cfg.quadrature, n_bootstrap=0, reg=self.reg)
        except FBSDEError as exc:
            raise SolverFailure(f"evaluation failed for candidate {q.digest()}: {exc}", candidate=q) from exc


def _with_row(q, cell, row):
    w = np.array(q.weights)
    w[cell] = row
    return RelaxedControl(q.space, q.grid, w)


def _vertex_candidates(q, cell):
    m = q.space.m
    for j in range(m):
        row = np.zeros(m)
        row[j] = 1.0
        if not np.array_equal(row, q.weights[cell]):
            yield _with_row(q, cell, row)


def _gradient_candidates(q, cell, J0, objective, cfg):
    """FD directional slopes towards each vertex, then a backtracked projected step."""
    w = q.weights[cell]
    m = q.space.m
    grad = np.zeros(m)
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        trial = (1.0 - cfg.fd_eps) * w + cfg.fd_eps * e
        trial /= trial.sum()
        grad[j] = (objective(_with_row(q, cell, trial)).estimate - J0) / cfg.fd_eps
    if not np.any(np.abs(grad - grad.mean()) > 0):
        return
    step = cfg.step
    for _ in range(int(cfg.max_backtracks)):
        row = project_simplex(w - step * grad)
        if not np.allclose(row, w, rtol=0, atol=1e-15):
            yield _with_row(q, cell, row)
        step *= cfg.shrink


def minimize_relaxed(
    c: CoefficientSet,
    grid: TimeGrid,
    x0,
    space: ActionSpace,
    cfg: OptimizerConfig = OptimizerConfig(),
    reg: RegressionSpec = RegressionSpec(),
    pc: PicardConfig = PicardConfig(),
    init: Optional[RelaxedControl] = None,
):
    """Coordinate descent over per-cell weight vectors.

    ``grid`` is the simulation grid; the control lives on ``cfg.cells``
    uniform-index cells of it (default: one per step). Cells are swept in
    order; per cell the step rule proposes candidates, the first one that
    lowers J is accepted. A sweep that improves J by less than ``cfg.tol``
    ends the current level (or the run).

    Returns ``(q, trace)``.
    """
    final = int(cfg.cells or grid.N)
    objective = _Objective(c, grid, x0, cfg, reg, pc)
    levels = _levels(cfg, final)
    if init is not None:
        q = regrid(as_relaxed(init), _subgrid(grid, levels[0]))
    else:
        q = _initial(space, _subgrid(grid, levels[0]), cfg.init)
    best = objective(q)
    trace = MinimizingTrace()
    trace.append(TraceEntry(0, q.grid.N, q.digest(), best.estimate, best.std_error))
    sweep = 0
    for li, cells in enumerate(levels):
        if q.grid.N != cells:
            q = regrid(q, _subgrid(grid, cells))
            best = objective(q)
        budget = cfg.max_sweeps - sweep if li == len(levels) - 1 else min(cfg.sweeps_per_level, cfg.max_sweeps - sweep)
        for _ in range(max(budget, 0)):
            sweep += 1
            start = best.estimate
            for cell in range(q.grid.N):
                if cfg.step_rule == "exhaustive-vertex":
                    cands = _vertex_candidates(q, cell)
                    scored = [(objective(cand), cand) for cand in cands]
                    scored = [s for s in scored if s[0].estimate < best.estimate]
                    if scored:
                        rep, cand = min(scored, key=lambda s: s[0].estimate)
                        q, best = cand, rep
                        trace.append(TraceEntry(sweep, cells, q.digest(), best.estimate, best.std_error))
                else:
                    for cand in _gradient_candidates(q, cell, best.estimate, objective, cfg):
                        rep = objective(cand)
                        if rep.estimate < best.estimate:
                            q, best = cand, rep
                            trace.append(TraceEntry(sweep, cells, q.digest(), best.estimate, best.std_error))
                            break
            if start - best.estimate < cfg.tol:
                break
        if sweep >= cfg.max_sweeps:
            break
    if q.grid.N != final:
        # budget ran out on a coarse level; refining does not change the control
        q = regrid(q, _subgrid(grid, final))
    trace.evaluations = objective.evaluations
    return q, trace


def vertex_search(c, grid, x0, space, cfg: OptimizerConfig = OptimizerConfig(), reg=RegressionSpec(),
                  pc=PicardConfig()):
    """Coordinate descent restricted to Dirac rows (strict controls only)."""
    cfg = OptimizerConfig(**{**cfg.to_dict(), "step_rule": "exhaustive-vertex",
                             "init": cfg.init if cfg.init != "uniform" else "dirac:0"})
    return minimize_relaxed(c, grid, x0, space, cfg, reg, pc)


# ---------------------------------------------------------------------------
# strictification
# ---------------------------------------------------------------------------

@dataclass
class StrictificationReport:
    strict: StrictControl
    cell_gaps: np.ndarray
    realization_gap: float
    cost_relaxed: CostReport
    cost_strict: CostReport
    cost_gap: float
    combined_se: float
    fresh_seed: int
    tuple_fields: list
    scenario_hash: Optional[str] = None

    def to_dict(self):
        return {
            "scenario_hash": self.scenario_hash,
            "strict": self.strict.to_dict(),
            "cell_gaps": [float(v) for v in self.cell_gaps],
            "realization_gap": float(self.realization_gap),
            "cost_relaxed": self.cost_relaxed.to_dict(),
            "cost_strict": self.cost_strict.to_dict(),
            "cost_gap": float(self.cost_gap),
            "combined_se": float(self.combined_se),
            "fresh_seed": int(self.fresh_seed),
            "tuple_fields": list(self.tuple_fields),
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def table(self):
        atoms = self.strict.space.atoms
        rows = [f"{'cell':>4} {'atom':>12} {'gap':>11}"]
        for i, (j, gap) in enumerate(zip(self.strict.cell_atom, self.cell_gaps)):
            rows.append(f"{i:>4} {np.array2string(atoms[j], precision=4):>12} {gap:>11.3e}")
        rows.append(f"realization gap {self.realization_gap:.3e}; cost gap {self.cost_gap:.3e} "
                    f"(combined se {self.combined_se:.3e})")
        return "\n".join(rows)


def _tuple(c, t, x, y, u, n):
    """Stacked coefficients (b, [sigma sigma^T], h, l) for n states at control value u."""
    uu = np.broadcast_to(u, (n, u.size))
    yb = y if c.coupling == "coupled" else None
    parts = [eval_b(c, t, x, yb, uu)]
    if c.sigma_controlled:
        s = eval_sigma(c, t, x, yb, uu)
        parts.append(np.einsum("ndm,nem->nde", s, s).reshape(n, -1))
    parts.append(eval_h(c, t, x, y, uu))
    parts.append(eval_l(c, t, x, y, uu).reshape(n, 1))
    return np.concatenate(parts, axis=1)


def _tuple_fields(c):
    names = [f"b{i}" for i in range(c.d)]
    if c.sigma_controlled:
        names += [f"a{i}{j}" for i in range(c.d) for j in range(c.d)]
    return names + [f"h{i}" for i in range(c.k)] + ["l"]


def _select(tuples, target):
    dist = np.sqrt(np.sum((tuples - target) ** 2, axis=1))
    lo = dist.min()
    return int(np.flatnonzero(dist <= lo + 1e-12 * max(1.0, lo))[0])


def strictify(
    c: CoefficientSet,
    q_hat,
    ens: PathEnsemble,
    x0=None,
    n_paths: Optional[int] = None,
    fresh_seed: Optional[int] = None,
    reg: RegressionSpec = RegressionSpec(),
    pc: PicardConfig = PicardConfig(),
    n_sample: int = 256,
    quadrature: str = "left",
    n_bootstrap: int = 0,
) -> StrictificationReport:
    """Nearest-atom selection of the averaged coefficient tuple, cell by cell.

    For every control cell the tuple (b, a, h, l), with ``a = sigma sigma^T``
    only when the diffusion is controlled, is averaged against ``q_hat`` at
    the representative state (median over paths and the cell's steps of X
    and Y) and matched to the nearest atom, ties to the lowest index. The
    realization gap is the largest tuple distance over a sample of
    (path, cell) states; the cost gap compares both controls on a fresh seed.
    """
    q = as_relaxed(q_hat)
    if ens.Y is None:
        raise ParameterError("strictify needs an ensemble solved under q_hat")
    cmap = q.grid.cell_map(ens.grid)
    space = q.space
    n = ens.n_paths
    rows = np.unique(np.linspace(0, n - 1, min(n_sample, n)).astype(np.int64))
    atom_idx = np.empty(q.grid.N, dtype=np.int64)
    gaps = np.zeros(q.grid.N)
    for cell in range(q.grid.N):
        steps = np.flatnonzero(cmap == cell)
        t_rep = float(q.grid.midpoints[cell])
        x_rep = np.median(ens.X[:, steps].reshape(-1, ens.d), axis=0)[None, :]
        y_rep = np.median(ens.Y[:, steps].reshape(-1, ens.k), axis=0)[None, :]
        avg = control_average(q, cell, lambda uu: _tuple(c, t_rep, x_rep, y_rep, uu[0], 1), 1)[0]
        per_atom = np.stack([_tuple(c, t_rep, x_rep, y_rep, space.atoms[j], 1)[0] for j in range(space.m)])
        j = _select(per_atom, avg)
        atom_idx[cell] = j
        s0 = int(steps[0])
        t0 = float(ens.grid.left[s0])
        xs, ys = ens.X[rows, s0], ens.Y[rows, s0]
        avg_s = control_average(q, cell, lambda uu: _tuple(c, t0, xs, ys, uu[0], rows.size), rows.size)
        sel_s = _tuple(c, t0, xs, ys, space.atoms[j], rows.size)
        gaps[cell] = float(np.max(np.sqrt(np.sum((avg_s - sel_s) ** 2, axis=1))))
    strict = StrictControl(space, q.grid, atom_idx)

    x0 = ens.x0 if x0 is None else x0
    n_paths = n if n_paths is None else int(n_paths)
    fresh_seed = int(ens.seed) + 1 if fresh_seed is None else int(fresh_seed)
    relax = ens.meta.get("relaxation", "auto")
    relax = "auto" if relax == "strict" else relax
    e_q = solve(c, q, ens.grid, x0, n_paths, fresh_seed, reg, pc, relaxation=relax)
    e_s = solve(c, strict, ens.grid, x0, n_paths, fresh_seed, reg, pc)
    r_q = evaluate_cost(c, e_q, q, quadrature=quadrature, n_bootstrap=n_bootstrap, reg=reg)
    r_s = evaluate_cost(c, e_s, strict, quadrature=quadrature, n_bootstrap=n_bootstrap, reg=reg)
    return StrictificationReport(
        strict=strict,
        cell_gaps=gaps,
        realization_gap=float(gaps.max()),
        cost_relaxed=r_q,
        cost_strict=r_s,
        cost_gap=abs(r_s.estimate - r_q.estimate),
        combined_se=float(np.hypot(r_q.std_error, r_s.std_error)),
        fresh_seed=fresh_seed,
        tuple_fields=_tuple_fields(c),
    )
