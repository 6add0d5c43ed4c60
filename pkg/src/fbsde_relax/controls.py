"""Strict and relaxed controls on a finite action space.

A relaxed control is stored as a row-stochastic matrix: one probability
vector over the action atoms for every cell of a time grid, i.e. the
measure ``dt * q_t(du)`` with ``q_t`` constant on cells. Strict controls are
piecewise-constant atom indices and embed as Dirac rows.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, EvaluationError, ParameterError

__version__ = "0.1.0"

ROW_TOL = 1e-12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ActionSpace:
    """Finite set of distinct atoms in R^p standing in for the compact set K."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2 or atoms.shape[0] < 1 or atoms.shape[1] < 1:
            raise ParameterError("action space needs at least one atom with p >= 1 coordinates")
        if not np.all(np.isfinite(atoms)):
            raise ParameterError("atoms must be finite")
        if len({tuple(r) for r in atoms.tolist()}) != atoms.shape[0]:
            raise ParameterError("atoms must be pairwise distinct")
        object.__setattr__(self, "atoms", _frozen(atoms))

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def p(self) -> int:
        return self.atoms.shape[1]

    def atom(self, i):
        """Atom ``i`` as a float when p == 1, else as a length-p array."""
        return float(self.atoms[i, 0]) if self.p == 1 else self.atoms[i].copy()

    def __eq__(self, other):
        return isinstance(other, ActionSpace) and np.array_equal(self.atoms, other.atoms)

    def __hash__(self):
        return hash(self.atoms.tobytes())

    def to_dict(self):
        return {"atoms": self.atoms.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["atoms"], dtype=np.float64))

    @classmethod
    def equispaced(cls, lo, hi, count):
        """``count`` atoms from lo to hi; interior points are computed as lo + k*step rounded exactly where possible."""
        if count < 1:
            raise ParameterError("count must be >= 1")
        if count == 1:
            return cls([lo])
        k = np.arange(count, dtype=np.float64)
        atoms = (lo * (count - 1 - k) + hi * k) / (count - 1)
        return cls(atoms)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64).reshape(-1)
        if b.size < 2:
            raise ParameterError("time grid needs N >= 1 cells")
        if b[0] != 0.0:
            raise ParameterError("time grid must start at 0")
        if not np.all(np.diff(b) > 0) or not np.isfinite(b[-1]):
            raise ParameterError("time grid boundaries must be strictly increasing and finite")
        object.__setattr__(self, "boundaries", _frozen(b))

    @classmethod
    def uniform(cls, T, N):
        if not T > 0:
            raise ParameterError("horizon T must be positive")
        if int(N) < 1:
            raise ParameterError("N must be >= 1")
        N = int(N)
        b = np.arange(N + 1, dtype=np.float64) * (T / N)
        b[-1] = T
        return cls(b)

    @property
    def T(self) -> float:
        return float(self.boundaries[-1])

    @property
    def N(self) -> int:
        return self.boundaries.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def left(self) -> np.ndarray:
        return self.boundaries[:-1]

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.boundaries[:-1] + self.boundaries[1:])

    def refine(self, n):
        """Split every cell into ``n`` equal subcells."""
        if int(n) < 1:
            raise ParameterError("refinement factor must be >= 1")
        n = int(n)
        frac = np.arange(n, dtype=np.float64) / n
        left = self.boundaries[:-1, None]
        width = self.dt[:, None]
        inner = (left + frac[None, :] * width).reshape(-1)
        return TimeGrid(np.append(inner, self.T))

    def cell_map(self, fine: "TimeGrid", rtol=1e-12):
        """Index of the cell of ``self`` containing each cell of ``fine``.

        Raises ConfigurationError unless ``fine`` refines ``self`` (every
        boundary of ``self`` is a boundary of ``fine``, same horizon).
        """
        tol = rtol * max(self.T, 1.0)
        if abs(fine.T - self.T) > tol:
            raise ConfigurationError(f"grid horizons differ: {self.T!r} vs {fine.T!r}")
        pos = np.searchsorted(fine.boundaries, self.boundaries)
        pos = np.clip(pos, 0, fine.N)
        lo = np.clip(pos - 1, 0, fine.N)
        near = np.where(
            np.abs(fine.boundaries[pos] - self.boundaries) <= np.abs(fine.boundaries[lo] - self.boundaries),
            pos,
            lo,
        )
        if np.any(np.abs(fine.boundaries[near] - self.boundaries) > tol) or np.any(np.diff(near) <= 0):
            raise ConfigurationError("control grid is not a coarsening of the simulation grid")
        cells = np.searchsorted(near, np.arange(fine.N), side="right") - 1
        return cells.astype(np.int64)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.boundaries, other.boundaries)

    def __hash__(self):
        return hash(self.boundaries.tobytes())

    def to_dict(self):
        return {"boundaries": self.boundaries.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["boundaries"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class StrictControl:
    """Piecewise-constant K-valued control: one atom index per grid cell."""

    space: ActionSpace
    grid: TimeGrid
    cell_atom: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.cell_atom).reshape(-1)
        if idx.size != self.grid.N:
            raise DimensionError(f"need one atom index per cell ({self.grid.N}), got {idx.size}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.space.m):
            raise ParameterError("atom index out of range for the action space")
        object.__setattr__(self, "cell_atom", _frozen(idx, np.int64))

    def values(self):
        """Control path as an (N, p) array of atom coordinates."""
        return self.space.atoms[self.cell_atom]

    def to_dict(self):
        return {
            "kind": "strict",
            "space": self.space.to_dict(),
            "grid": self.grid.to_dict(),
            "cell_atom": self.cell_atom.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Per-cell probability vectors over the atoms of ``space``."""

    space: ActionSpace
    grid: TimeGrid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.grid.N, self.space.m):
            raise DimensionError(f"weights must be ({self.grid.N}, {self.space.m}), got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ParameterError("weights must be finite and nonnegative")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > ROW_TOL):
            raise ParameterError("every weight row must sum to 1 within 1e-12")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def uniform(cls, space, grid):
        return cls(space, grid, np.full((grid.N, space.m), 1.0 / space.m))

    @classmethod
    def constant(cls, space, grid, row):
        row = np.asarray(row, dtype=np.float64)
        return cls(space, grid, np.tile(row, (grid.N, 1)))

    def support(self, cell):
        """Indices and weights of the atoms charged in ``cell``."""
        row = self.weights[cell]
        nz = np.flatnonzero(row > 0)
        return nz, row[nz]

    def digest(self):
        h = hashlib.sha256()
        h.update(self.grid.boundaries.tobytes())
        h.update(self.space.atoms.tobytes())
        h.update(self.weights.tobytes())
        return h.hexdigest()[:16]

    def to_dict(self):
        return {
            "kind": "relaxed",
            "space": self.space.to_dict(),
            "grid": self.grid.to_dict(),
            "weights": self.weights.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())


def control_from_dict(d):
    space = ActionSpace.from_dict(d["space"])
    grid = TimeGrid.from_dict(d["grid"])
    if d.get("kind") == "strict":
        return StrictControl(space, grid, np.asarray(d["cell_atom"], dtype=np.int64))
    if d.get("kind") == "relaxed":
        return RelaxedControl(space, grid, np.asarray(d["weights"], dtype=np.float64))
    raise ParameterError(f"unknown control kind {d.get('kind')!r}")


def control_from_json(text):
    return control_from_dict(json.loads(text))


@dataclass(frozen=True)
class TestFunction:
    """phi(t, u) -> real with a declared sup-norm bound.

    ``fn`` receives an array of times and one atom (float when p == 1).
    """

    __test__ = False  # keep pytest from collecting this class

    fn: Callable
    bound: float
    name: str = "phi"

    def __post_init__(self):
        if not np.isfinite(self.bound):
            raise ParameterError(f"test function {self.name!r} needs a finite bound")


@dataclass(frozen=True)
class TestFunctionFamily:
    __test__ = False

    functions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        fns = tuple(self.functions)
        if not fns:
            raise ParameterError("test function family must be nonempty")
        object.__setattr__(self, "functions", fns)

    @property
    def names(self):
        return [f.name for f in self.functions]

    def __iter__(self):
        return iter(self.functions)


def _first(u):
    return u if np.ndim(u) == 0 else u[0]


def polynomial_family(T=1.0, radius=1.0):
    """The family {u, u^2, t*u} on the first control coordinate."""
    return TestFunctionFamily((
        TestFunction(lambda t, u: _first(u), radius, "u"),
        TestFunction(lambda t, u: _first(u) ** 2, radius ** 2, "u^2"),
        TestFunction(lambda t, u: t * _first(u), T * radius, "t*u"),
    ))


def dirac_embed(u: StrictControl) -> RelaxedControl:
    w = np.zeros((u.grid.N, u.space.m))
    w[np.arange(u.grid.N), u.cell_atom] = 1.0
    return RelaxedControl(u.space, u.grid, w)


def as_relaxed(control) -> RelaxedControl:
    if isinstance(control, StrictControl):
        return dirac_embed(control)
    if isinstance(control, RelaxedControl):
        return control
    raise ParameterError(f"expected a StrictControl or RelaxedControl, got {type(control).__name__}")


def _eval_test_function(phi, t, atom):
    try:
        val = phi.fn(t, atom)
        val = np.broadcast_to(np.asarray(val, dtype=np.float64), t.shape)
    except Exception as exc:  # user callback
        raise EvaluationError(f"test function {phi.name!r} failed at atom {atom!r}: {exc}") from exc
    if not np.all(np.isfinite(val)):
        raise EvaluationError(f"test function {phi.name!r} returned non-finite values at atom {atom!r}")
    return val


def pair(q, phi: TestFunction) -> float:
    """Integral of phi against dt*q_t(du), midpoint rule in t on every cell."""
    q = as_relaxed(q)
    t = q.grid.midpoints
    dt = q.grid.dt
    total = np.zeros(q.grid.N)
    for j in range(q.space.m):
        w = q.weights[:, j]
        if not np.any(w > 0):
            continue
        total += w * _eval_test_function(phi, t, q.space.atom(j))
    return float(np.sum(total * dt))


def stable_distance(q1, q2, family: TestFunctionFamily) -> float:
    """max over the family of |<q1, phi> - <q2, phi>|; grids may differ."""
    q1, q2 = as_relaxed(q1), as_relaxed(q2)
    if q1.space != q2.space:
        raise DimensionError("controls live on different action spaces")
    return max(abs(pair(q1, phi) - pair(q2, phi)) for phi in family)


def largest_remainder(weights, n):
    """Integer counts summing to n, proportional to ``weights``; ties go to the lower index."""
    w = np.asarray(weights, dtype=np.float64)
    scaled = w * n
    counts = np.floor(scaled + 1e-12).astype(np.int64)
    counts = np.minimum(counts, n)
    short = n - int(counts.sum())
    if short > 0:
        rema = scaled - counts
        order = np.lexsort((np.arange(w.size), -rema))
        counts[order[:short]] += 1
    elif short < 0:
        # only reachable through the 1e-12 slack; trim the largest counts
        order = np.lexsort((np.arange(w.size), -counts))
        for j in order[: -short]:
            counts[j] -= 1
    return counts


def _round_robin(counts):
    remaining = counts.copy()
    seq = []
    while remaining.sum() > 0:
        for j in range(remaining.size):
            if remaining[j] > 0:
                seq.append(j)
                remaining[j] -= 1
    return seq


def chattering_approximation(q: RelaxedControl, n: int) -> StrictControl:
    """Strict control on ``q.grid.refine(n)`` mimicking ``q`` by fast switching.

    In each original cell the dwell counts are the weights quantised to
    multiples of 1/n (largest remainder) and the atoms are visited
    round-robin in index order.
    """
    if int(n) != n or n < 1:
        raise ParameterError("n must be a positive integer")
    n = int(n)
    q = as_relaxed(q)
    idx = np.empty(q.grid.N * n, dtype=np.int64)
    for c in range(q.grid.N):
        idx[c * n:(c + 1) * n] = _round_robin(largest_remainder(q.weights[c], n))
    return StrictControl(q.space, q.grid.refine(n), idx)


def averaged_coefficient(q, cell: int, f: Callable) -> np.ndarray:
    """Sum over the atoms charged in ``cell`` of weight * f(atom)."""
    q = as_relaxed(q)
    if not 0 <= int(cell) < q.grid.N:
        raise ParameterError(f"cell index {cell} outside 0..{q.grid.N - 1}")
    nz, w = q.support(int(cell))
    acc = None
    for j, wj in zip(nz, w):
        try:
            val = np.asarray(f(q.space.atoms[j].copy()), dtype=np.float64)
        except Exception as exc:
            raise EvaluationError(f"coefficient evaluation failed at atom {j}: {exc}") from exc
        acc = wj * val if acc is None else acc + wj * val
    return np.atleast_1d(acc)


def regrid(q, grid: TimeGrid) -> RelaxedControl:
    """Project ``q`` onto another grid by time-weighted averaging over cell overlaps.

    Exact when ``grid`` refines ``q.grid``; pairings against test functions
    constant in t on the new cells are preserved.
    """
    q = as_relaxed(q)
    if abs(grid.T - q.grid.T) > 1e-12 * max(1.0, q.grid.T):
        raise ConfigurationError("cannot regrid onto a different horizon")
    try:
        cmap = q.grid.cell_map(grid)
        return RelaxedControl(q.space, grid, q.weights[cmap])
    except ConfigurationError:
        pass
    a, b = q.grid.boundaries, grid.boundaries
    w = np.zeros((grid.N, q.space.m))
    for i in range(grid.N):
        lo, hi = b[i], b[i + 1]
        overlap = np.clip(np.minimum(a[1:], hi) - np.maximum(a[:-1], lo), 0.0, None)
        w[i] = overlap @ q.weights / (hi - lo)
    w /= w.sum(axis=1, keepdims=True)
    return RelaxedControl(q.space, grid, w)


def strict_from_pattern(space: ActionSpace, grid: TimeGrid, pattern: Sequence[int]) -> StrictControl:
    return StrictControl(space, grid, np.asarray(pattern, dtype=np.int64))
