import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsde_relax import (
    ActionSpace,
    RelaxedControl,
    StrictControl,
    TestFunction,
    TestFunctionFamily,
    TimeGrid,
    averaged_coefficient,
    chattering_approximation,
    dirac_embed,
    pair,
    polynomial_family,
    stable_distance,
)
from fbsde_relax.controls import control_from_json, largest_remainder, regrid
from fbsde_relax.errors import (
    ConfigurationError,
    DimensionError,
    EvaluationError,
    ParameterError,
)

PM = ActionSpace([-1.0, 1.0])
U_ONLY = TestFunctionFamily((TestFunction(lambda t, u: u, 1.0, "u"),))


def half_half(T=1.0, cells=1):
    return RelaxedControl.constant(PM, TimeGrid.uniform(T, cells), [0.5, 0.5])


@st.composite
def relaxed_controls(draw, space=PM, max_cells=6, grid=None):
    if grid is None:
        grid = TimeGrid.uniform(1.0, draw(st.integers(1, max_cells)))
    raw = draw(st.lists(st.lists(st.floats(0.0, 1.0), min_size=space.m, max_size=space.m),
                        min_size=grid.N, max_size=grid.N))
    w = np.asarray(raw) + 1e-3
    return RelaxedControl(space, grid, w / w.sum(axis=1, keepdims=True))


# -- types ------------------------------------------------------------------

class TestTypes:
    @pytest.mark.parametrize("atoms", [[], [[1.0, 2.0], [1.0, 2.0]], [1.0, 1.0], [[np.nan]]])
    def test_action_space_rejects(self, atoms):
        with pytest.raises(ParameterError):
            ActionSpace(atoms)

    def test_action_space_shapes(self):
        sp = ActionSpace([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
        assert (sp.m, sp.p) == (3, 2)
        assert PM.atom(1) == 1.0

    def test_equispaced_exact_endpoints(self):
        sp = ActionSpace.equispaced(-1.0, 1.0, 21)
        assert sp.atoms[0, 0] == -1.0 and sp.atoms[-1, 0] == 1.0 and sp.atoms[10, 0] == 0.0

    @pytest.mark.parametrize("b", [[0.0], [0.1, 0.2], [0.0, 0.5, 0.4], [0.0, np.inf]])
    def test_time_grid_rejects(self, b):
        with pytest.raises(ParameterError):
            TimeGrid(b)

    def test_uniform_grid_ends_exactly_at_T(self):
        g = TimeGrid.uniform(0.7, 7)
        assert g.boundaries[0] == 0.0 and g.boundaries[-1] == 0.7 and g.N == 7

    def test_strict_control_validates_indices(self):
        g = TimeGrid.uniform(1.0, 2)
        with pytest.raises(ParameterError):
            StrictControl(PM, g, [0, 2])
        with pytest.raises(DimensionError):
            StrictControl(PM, g, [0])

    @pytest.mark.parametrize("w", [[[0.5, 0.6]], [[-0.1, 1.1]], [[1.0]]])
    def test_relaxed_control_row_stochastic(self, w):
        with pytest.raises((ParameterError, DimensionError)):
            RelaxedControl(PM, TimeGrid.uniform(1.0, 1), w)

    def test_row_tolerance_is_1e_12(self):
        g = TimeGrid.uniform(1.0, 1)
        RelaxedControl(PM, g, [[0.5, 0.5 + 5e-13]])
        with pytest.raises(ParameterError):
            RelaxedControl(PM, g, [[0.5, 0.5 + 5e-12]])

    def test_controls_are_immutable(self):
        q = half_half()
        with pytest.raises(ValueError):
            q.weights[0, 0] = 1.0

    def test_empty_family_rejected(self):
        with pytest.raises(ParameterError):
            TestFunctionFamily(())
        with pytest.raises(ParameterError):
            TestFunction(lambda t, u: u, np.inf)


# -- dirac_embed -------------------------------------------------------------

def test_dirac_single_cell():
    q = dirac_embed(StrictControl(PM, TimeGrid.uniform(1.0, 1), [0]))
    assert q.weights.tolist() == [[1.0, 0.0]]


@pytest.mark.parametrize("j", [0, 1])
def test_dirac_constant(j):
    g = TimeGrid.uniform(1.0, 5)
    q = dirac_embed(StrictControl(PM, g, [j] * 5))
    assert np.array_equal(q.weights, np.tile(np.eye(2)[j], (5, 1)))
    assert q.grid == g


def test_dirac_of_chattering_alternates():
    u = chattering_approximation(half_half(), 6)
    w = dirac_embed(u).weights
    assert np.array_equal(w[::2], np.tile([1.0, 0.0], (3, 1)))
    assert np.array_equal(w[1::2], np.tile([0.0, 1.0], (3, 1)))


# -- pair / stable_distance --------------------------------------------------

@given(relaxed_controls())
def test_pair_constant_one_is_T(q):
    assert pair(q, TestFunction(lambda t, u: 1.0, 1.0)) == pytest.approx(q.grid.T, abs=1e-12)


def test_pair_half_half_against_u_is_zero():
    assert pair(half_half(cells=4), U_ONLY.functions[0]) == 0.0


@pytest.mark.parametrize("ustar", [-1.0, 1.0])
def test_pair_dirac_constant(ustar):
    g = TimeGrid.uniform(2.0, 3)
    q = dirac_embed(StrictControl(PM, g, [int(ustar > 0)] * 3))
    assert pair(q, U_ONLY.functions[0]) == pytest.approx(2.0 * ustar, abs=1e-15)


def test_pair_of_dirac_is_exact_integral():
    g = TimeGrid([0.0, 0.25, 0.75, 1.0])
    u = StrictControl(PM, g, [1, 0, 1])
    phi = TestFunction(lambda t, a: np.where(t < 0.5, 2.0, -1.0) * a, 2.0)
    exact = 0.25 * 2.0 * 1 + 0.5 * (-1.0) * (-1) + 0.25 * (-1.0) * 1
    assert pair(dirac_embed(u), phi) == pytest.approx(exact, abs=1e-15)


def test_pair_wraps_failures():
    def bad(t, u):
        raise RuntimeError("boom")

    with pytest.raises(EvaluationError):
        pair(half_half(), TestFunction(bad, 1.0))
    with pytest.raises(EvaluationError):
        pair(half_half(), TestFunction(lambda t, u: np.nan * t, 1.0))


def test_stable_distance_identical_is_zero():
    q = half_half(cells=3)
    assert stable_distance(q, q, polynomial_family()) == 0.0


@pytest.mark.parametrize("a,b", [(0, 1), (1, 0)])
def test_stable_distance_two_diracs(a, b):
    g = TimeGrid.uniform(1.5, 2)
    qa = dirac_embed(StrictControl(PM, g, [a, a]))
    qb = dirac_embed(StrictControl(PM, g, [b, b]))
    assert stable_distance(qa, qb, U_ONLY) == pytest.approx(1.5 * 2.0)


def test_stable_distance_mismatched_spaces():
    other = RelaxedControl.uniform(ActionSpace([0.0, 1.0]), TimeGrid.uniform(1.0, 1))
    with pytest.raises(DimensionError):
        stable_distance(half_half(), other, U_ONLY)


@given(relaxed_controls(), relaxed_controls(), relaxed_controls())
def test_stable_distance_is_pseudometric(q1, q2, q3):
    F = polynomial_family()
    d12, d21 = stable_distance(q1, q2, F), stable_distance(q2, q1, F)
    d13, d23 = stable_distance(q1, q3, F), stable_distance(q2, q3, F)
    assert d12 >= 0 and d12 == d21
    assert d13 <= d12 + d23 + 1e-12


def test_chattering_sequence_distance_envelope():
    """Distance to the half-half limit with F = {u} stays under T/n and tends to 0."""
    q = half_half(T=1.0)
    dists = []
    for n in range(2, 65, 2):
        dists.append(stable_distance(dirac_embed(chattering_approximation(q, n)), q, U_ONLY))
        assert dists[-1] <= 1.0 / n + 1e-12
    F = polynomial_family()
    far = stable_distance(dirac_embed(chattering_approximation(q, 2)), q, F)
    near = stable_distance(dirac_embed(chattering_approximation(q, 64)), q, F)
    assert near < far and near <= 1.0 / 64 + 1e-12


# -- chattering_approximation ------------------------------------------------

@pytest.mark.parametrize("n", [1, 3, 10])
def test_chattering_of_dirac_is_constant(n):
    q = RelaxedControl.constant(PM, TimeGrid.uniform(1.0, 2), [0.0, 1.0])
    assert set(chattering_approximation(q, n).cell_atom.tolist()) == {1}


@pytest.mark.parametrize("k", [1, 2, 5])
def test_chattering_half_half_is_alternating(k):
    u = chattering_approximation(half_half(), 2 * k)
    assert np.array_equal(u.values()[:, 0], np.array([(-1.0) ** j for j in range(2 * k)]) * -1.0)
    assert np.allclose(u.grid.dt, 1.0 / (2 * k))


def test_chattering_dwell_counts():
    q = RelaxedControl.constant(PM, TimeGrid.uniform(1.0, 2), [0.3, 0.7])
    u = chattering_approximation(q, 10)
    for cell in range(2):
        assert np.bincount(u.cell_atom[cell * 10:(cell + 1) * 10], minlength=2).tolist() == [3, 7]


@pytest.mark.parametrize("n", [0, -1, 2.5])
def test_chattering_rejects_bad_n(n):
    with pytest.raises(ParameterError):
        chattering_approximation(half_half(), n)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6), st.integers(1, 50))
def test_largest_remainder_sums_to_n(w, n):
    w = np.asarray(w) + 1e-9
    counts = largest_remainder(w / w.sum(), n)
    assert counts.sum() == n and np.all(counts >= 0)
    assert np.all(np.abs(counts - n * w / w.sum()) < 1.0 + 1e-9)


# -- averaged_coefficient ----------------------------------------------------

def test_averaged_dirac_row():
    q = RelaxedControl.constant(ActionSpace([0.0, 2.0]), TimeGrid.uniform(1.0, 1), [0.0, 1.0])
    assert averaged_coefficient(q, 0, lambda u: u ** 2).tolist() == [4.0]


def test_averaged_half_half_u_is_zero():
    assert averaged_coefficient(half_half(), 0, lambda u: u).tolist() == [0.0]


def test_averaged_by_hand():
    q = RelaxedControl.constant(ActionSpace([0.0, 2.0]), TimeGrid.uniform(1.0, 1), [0.25, 0.75])
    assert averaged_coefficient(q, 0, lambda u: u ** 2)[0] == pytest.approx(3.0)


def test_averaged_errors():
    with pytest.raises(ParameterError):
        averaged_coefficient(half_half(), 3, lambda u: u)

    def bad(u):
        raise KeyError(u)

    with pytest.raises(EvaluationError):
        averaged_coefficient(half_half(), 0, bad)


# -- grids and serialization ------------------------------------------------

def test_cell_map_and_misalignment():
    coarse, fine = TimeGrid.uniform(1.0, 2), TimeGrid.uniform(1.0, 6)
    assert coarse.cell_map(fine).tolist() == [0, 0, 0, 1, 1, 1]
    with pytest.raises(ConfigurationError):
        TimeGrid.uniform(1.0, 3).cell_map(TimeGrid.uniform(1.0, 4))


@given(relaxed_controls(grid=TimeGrid.uniform(1.0, 3)))
def test_regrid_refinement_preserves_pairing(q):
    fine = regrid(q, TimeGrid.uniform(1.0, 12))
    for phi in polynomial_family():
        assert pair(fine, phi) == pytest.approx(pair(q, phi), abs=1e-12)
    assert np.allclose(fine.weights.sum(axis=1), 1.0, atol=1e-12)


@given(relaxed_controls(grid=TimeGrid.uniform(1.0, 4)))
def test_regrid_coarsening_is_row_stochastic(q):
    coarse = regrid(q, TimeGrid.uniform(1.0, 3))
    assert np.all(np.abs(coarse.weights.sum(axis=1) - 1.0) <= 1e-12)


@given(relaxed_controls())
def test_relaxed_json_round_trip(q):
    back = control_from_json(q.to_json())
    assert np.array_equal(back.weights, q.weights) and back.grid == q.grid and back.space == q.space


def test_strict_json_round_trip():
    u = StrictControl(PM, TimeGrid([0.0, 0.1, 1 / 3, 1.0]), [1, 0, 1])
    back = control_from_json(u.to_json())
    assert np.array_equal(back.cell_atom, u.cell_atom)
    assert np.array_equal(back.grid.boundaries, u.grid.boundaries)
