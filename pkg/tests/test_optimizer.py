import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import drift_u
from fbsde_relax import (
    ActionSpace,
    OptimizerConfig,
    RelaxedControl,
    StrictControl,
    TimeGrid,
    dirac_embed,
    evaluate_cost,
    minimize_relaxed,
    solve,
    strictify,
)
from fbsde_relax.builtins import get_builtin
from fbsde_relax.errors import ParameterError, SolverFailure
from fbsde_relax.optimizer import MinimizingTrace, TraceEntry, project_simplex, vertex_search

CHAT_CFG = OptimizerConfig(start_cells=1, n_paths=1, max_sweeps=50, quadrature="simpson")


@pytest.fixture(scope="module")
def chattering_runs(chattering):
    c, space, _, _ = chattering
    g = TimeGrid.uniform(1.0, 32)
    full = minimize_relaxed(c, g, 0.0, space, CHAT_CFG)
    vert = vertex_search(c, g, 0.0, space, CHAT_CFG)
    return full, vert


def test_chattering_reaches_half_half(chattering_runs):
    (q, trace), _ = chattering_runs
    assert trace.J[-1] <= 1e-3
    assert q.grid.N == 32
    assert np.max(np.abs(q.weights - 0.5)) <= 0.1


def test_relaxation_gap_witness(chattering_runs):
    (_, full), (qv, vert) = chattering_runs
    assert np.all(np.isin(qv.weights, [0.0, 1.0]))
    assert full.J[-1] <= vert.J[-1] + 1e-12
    assert vert.J[-1] >= 10 * full.J[-1]


@pytest.mark.parametrize("runs", [0, 1])
def test_trace_nonincreasing(chattering_runs, runs):
    trace = chattering_runs[runs][1]
    assert np.all(np.diff(trace.J) <= 0)
    assert trace.evaluations >= len(trace)


def test_trace_rejects_increase():
    tr = MinimizingTrace()
    tr.append(TraceEntry(0, 1, "a", 1.0, 0.0))
    with pytest.raises(AssertionError):
        tr.append(TraceEntry(1, 1, "b", 1.5, 0.0))


@pytest.mark.parametrize("rule", ["exhaustive-vertex", "projected-gradient"])
@pytest.mark.parametrize("target", [0, 2])
def test_pointwise_cost_picks_the_atom(rule, target):
    space = ActionSpace([-1.0, 0.0, 1.0])
    a = float(space.atoms[target, 0])
    c = drift_u(sigma=0.0, b=lambda t, x, y, u: np.zeros((x.shape[0], 1)),
                l=lambda t, x, y, u: (u[:, 0] - a) ** 2)
    g = TimeGrid.uniform(1.0, 4)
    start = 2 - target
    cfg = OptimizerConfig(step_rule=rule, step=4.0, n_paths=1, max_sweeps=30, init=f"dirac:{start}")
    q, trace = minimize_relaxed(c, g, 0.0, space, cfg)
    assert trace.J[-1] == pytest.approx(0.0, abs=1e-8)
    assert np.allclose(q.weights[:, target], 1.0, atol=1e-8)


def test_two_cell_toy_matches_brute_force():
    space = ActionSpace([-1.0, 1.0])
    c = drift_u(sigma=1.0, psi=lambda x: (x[:, 0] - 0.5) ** 2)
    g = TimeGrid.uniform(1.0, 2)
    cfg = OptimizerConfig(n_paths=4000, seed=3, max_sweeps=20, init="dirac:0")
    q, trace = minimize_relaxed(c, g, 0.0, space, cfg)
    grid_J = {}
    for w in itertools.product([0.0, 0.5, 1.0], repeat=2):
        r = RelaxedControl(space, g, [[1 - w[0], w[0]], [1 - w[1], w[1]]])
        grid_J[w] = evaluate_cost(c, solve(c, r, g, 0.0, 4000, 3), r)
    best = min(grid_J.values(), key=lambda rep: rep.estimate)
    assert abs(trace.J[-1] - best.estimate) <= 3 * best.std_error
    assert trace.J[-1] <= best.estimate + 1e-9


def test_grid_doubling_reaches_final_cells():
    c = drift_u(sigma=0.0, l=lambda t, x, y, u: x[:, 0] ** 2)
    g = TimeGrid.uniform(1.0, 8)
    space = ActionSpace([-1.0, 1.0])
    q, trace = minimize_relaxed(c, g, 0.0, space, OptimizerConfig(start_cells=2, n_paths=1, max_sweeps=12))
    assert q.grid.N == 8
    assert sorted({e.cells for e in trace.entries}) <= [2, 4, 8]


def test_solver_failure_carries_candidate():
    def b(t, x, y, u):
        return np.where(u[:, :1] > 0, np.inf, 0.0)

    c = drift_u(sigma=0.0, b=b, l=lambda t, x, y, u: u[:, 0])
    g = TimeGrid.uniform(1.0, 2)
    space = ActionSpace([1.0, -1.0])
    with pytest.raises(SolverFailure) as exc:
        minimize_relaxed(c, g, 0.0, space, OptimizerConfig(step_rule="exhaustive-vertex", n_paths=1, init="dirac:1"))
    cand = exc.value.candidate
    assert isinstance(cand, RelaxedControl) and cand.weights[:, 0].max() == 1.0
    assert cand.digest() in str(exc.value)


@pytest.mark.parametrize("kw", [dict(max_sweeps=0), dict(tol=0.0), dict(step_rule="newton"), dict(shrink=1.0),
                                dict(n_paths=0), dict(cells=0), dict(init="random")])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        OptimizerConfig(**kw)


def test_config_and_trace_serialize(chattering_runs):
    cfg = OptimizerConfig(step_rule="exhaustive-vertex", start_cells=2)
    assert OptimizerConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    trace = chattering_runs[0][1]
    d = json.loads(trace.to_json())
    assert len(d["entries"]) == len(trace)
    assert trace.to_csv().splitlines()[0] == "sweep,cells,q_hash,J,std_error"
    assert len(trace.table().splitlines()) == len(trace) + 1


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5)))
def test_project_simplex(v):
    w = project_simplex(v)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)
    # projection is idempotent and no feasible point is closer
    assert np.allclose(project_simplex(w), w, atol=1e-12)
    e = np.eye(v.size)
    assert np.linalg.norm(v - w) <= np.linalg.norm(v - e, axis=1).min() + 1e-9


# -- strictification -----------------------------------------------------------

@pytest.fixture(scope="module")
def convex():
    return get_builtin("convex-range").make()


@given(st.lists(st.integers(0, 20), min_size=4, max_size=4))
def test_strictify_identity_on_dirac(convex, atoms):
    c, space, _, _ = convex
    g = TimeGrid.uniform(1.0, 4)
    u = StrictControl(space, g, atoms)
    ens = solve(c, dirac_embed(u), g, 0.0, 64, 0)
    rep = strictify(c, dirac_embed(u), ens)
    assert np.array_equal(rep.strict.cell_atom, u.cell_atom)
    assert rep.realization_gap == 0.0 and np.all(rep.cell_gaps >= 0)


def test_strictify_convex_range(convex):
    c, space, control, _ = convex
    g = TimeGrid.uniform(1.0, 16)
    q = control(g)
    rep = strictify(c, q, solve(c, q, g, 0.0, 10_000, 0))
    assert np.all(space.atoms[rep.strict.cell_atom, 0] == 0.0)
    assert rep.realization_gap <= 0.1 + 1e-12
    assert rep.cost_gap <= 3 * rep.combined_se
    assert rep.tuple_fields == ["b0", "h0", "l"]


def test_strictify_nonconvex_range():
    c, space, control, _ = get_builtin("nonconvex-range").make()
    g = TimeGrid.uniform(1.0, 16)
    q = control(g)
    rep = strictify(c, q, solve(c, q, g, 0.0, 2000, 0))
    assert rep.realization_gap > 0
    assert rep.realization_gap == pytest.approx(1.0, abs=1e-9)
    assert np.all(rep.strict.cell_atom == 0)  # tie between +-1 goes to the lowest index
    d = json.loads(rep.to_json())
    assert d["realization_gap"] == rep.realization_gap and len(d["cell_gaps"]) == 16


@pytest.mark.parametrize("scale", [0.5, 3.0, 100.0])
def test_selection_invariant_under_scaling_l(convex, scale):
    c, space, control, _ = convex
    g = TimeGrid.uniform(1.0, 8)
    rng = np.random.default_rng(int(scale * 10))
    # half-half on two atoms of equal index parity: the barycenter is itself an atom
    lo = rng.integers(0, 11, size=8)
    hi = lo + 2 * rng.integers(0, (21 - lo) // 2)
    w = np.zeros((8, space.m))
    np.add.at(w, (np.arange(8), lo), 0.5)
    np.add.at(w, (np.arange(8), hi), 0.5)
    q = RelaxedControl(space, g, w)
    l0 = c.l
    cs = c.with_(l=lambda t, x, y, u: scale * l0(t, x, y, u))
    r1 = strictify(c, q, solve(c, q, g, 0.0, 500, 1), n_paths=200)
    r2 = strictify(cs, q, solve(cs, q, g, 0.0, 500, 1), n_paths=200)
    assert np.array_equal(r1.strict.cell_atom, r2.strict.cell_atom)
    assert np.array_equal(r1.strict.cell_atom, (lo + hi) // 2)
