import numpy as np
import pytest

from srcid.errors import CoefficientError, MeshError
from srcid.services.assembly import (
    CoefficientSet,
    SpaceTimeField,
    TimeGrid,
    assemble_boundary_load,
    assemble_boundary_mass,
    assemble_load,
    assemble_mass,
    assemble_operator,
    element_load,
    interpolate_nodal,
    slab_average,
    spacetime_inner,
    spacetime_norm,
)
from srcid.services.expressions import ScalarField
from srcid.services.mesh import build_rect_mesh, refine, tag_boundary
from srcid.services.scenarios import SQUARE, TIME_VARIANTS, standard_coefficients
from srcid.tests.oracles import dense_edge_mass, dense_mass, dense_operator


def test_reference_element_mass(reference_triangle):
    M = assemble_mass(reference_triangle).toarray()
    expected = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0
    np.testing.assert_allclose(M, expected, rtol=1e-14)
    np.testing.assert_allclose(M, dense_mass(reference_triangle), rtol=1e-12)


def test_reference_element_stiffness(reference_triangle):
    coeffs = CoefficientSet(A=1.0, b=0.0, sigma=0.0, a_lower=0.5)
    K = assemble_operator(reference_triangle, coeffs, 0.0).toarray()
    expected = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])
    np.testing.assert_allclose(K, expected, atol=1e-15)


def test_mass_sums_to_area(unit_square):
    M = assemble_mass(unit_square)
    assert M.shape == (4, 4)
    assert M.sum() == pytest.approx(1.0, rel=1e-14)
    big = build_rect_mesh(SQUARE, 7)
    assert assemble_mass(big).sum() == pytest.approx(4.0, rel=1e-13)


def test_pure_diffusion_kills_constants():
    mesh = tag_boundary(build_rect_mesh(SQUARE, 5), "all")
    K = assemble_operator(mesh, CoefficientSet(A=[[3.0, 1.0], [1.0, 2.0]], a_lower=1.0), 0.0)
    np.testing.assert_allclose(K @ np.ones(mesh.n_nodes), 0.0, atol=1e-13)


@pytest.mark.parametrize("n", [1, 2])
def test_standard_operator_matches_dense_oracle(n, standard):
    mesh = tag_boundary(build_rect_mesh((0.0, 1.0, 0.0, 1.0), n), "all")
    K = assemble_operator(mesh, standard, 0.0).toarray()
    dense = dense_operator(mesh, standard, 0.0)
    np.testing.assert_allclose(K, dense, rtol=1e-12, atol=1e-14 * np.abs(dense).max())


def test_variable_coefficients_match_dense_oracle():
    mesh = tag_boundary(build_rect_mesh(SQUARE, 2), "all")
    coeffs = CoefficientSet(A=[["2 + x^2", "0.5*y"], ["0.5*y", "3 + t"]], b="1 + x*y", sigma="1 + y^2",
                            a_lower=0.5)
    K = assemble_operator(mesh, coeffs, 0.3).toarray()
    dense = dense_operator(mesh, coeffs, 0.3)
    np.testing.assert_allclose(K, dense, rtol=1e-12, atol=1e-14 * np.abs(dense).max())


def test_operator_symmetric_and_coercive(rng, standard):
    mesh = refine(tag_boundary(build_rect_mesh(SQUARE, 3), "all"))
    K = assemble_operator(mesh, standard, 0.0)
    M = assemble_mass(mesh)
    assert abs(K - K.T).max() <= 1e-14 * abs(K).max()
    assert abs(M - M.T).max() <= 1e-14 * abs(M).max()
    # b = 1 gives x^T K x >= x^T M x
    for x in rng.standard_normal((10, mesh.n_nodes)):
        assert x @ (K @ x) >= (x @ (M @ x)) * (1 - 1e-12)


@pytest.mark.parametrize("A, b, sigma", [([[1.0, 2.0], [2.0, 1.0]], 0.0, 0.0),
                                         ([[1.0, 0.5], [0.0, 1.0]], 0.0, 0.0),
                                         (1.0, -1.0, 0.0),
                                         (1.0, 0.0, "x")])
def test_coefficient_sampling_errors(square9, A, b, sigma):
    coeffs = CoefficientSet(A=A, b=b, sigma=sigma, a_lower=0.5)
    with pytest.raises(CoefficientError):
        assemble_operator(square9, coeffs, 0.0)


def test_boundary_mass_single_edge():
    mesh = tag_boundary(build_rect_mesh((0.0, 1.0, 0.0, 1.0), 1), "bottom")
    B = assemble_boundary_mass(mesh).toarray()
    np.testing.assert_allclose(B[:2, :2], [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], rtol=1e-14)
    assert np.count_nonzero(B[2:]) == 0
    assert B.sum() == pytest.approx(1.0)


def test_boundary_mass_totals(unit_square):
    assert assemble_boundary_mass(unit_square).sum() == pytest.approx(4.0, rel=1e-14)
    mesh = tag_boundary(build_rect_mesh(SQUARE, 4), "left, y = 1")
    B = assemble_boundary_mass(mesh)
    assert B.sum() == pytest.approx(mesh.gamma_length, rel=1e-14)
    np.testing.assert_allclose(B.toarray(), dense_edge_mass(mesh, mesh.gamma_edges), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(assemble_boundary_mass(build_rect_mesh(SQUARE, 4), "left, y = 1").toarray(),
                               B.toarray())


def test_empty_gamma_is_an_error():
    with pytest.raises(MeshError):
        assemble_boundary_mass(build_rect_mesh(SQUARE, 2))


def test_loads(unit_square):
    assert not assemble_load(unit_square, np.zeros(4)).any()
    assert assemble_load(unit_square, np.ones(4)).sum() == pytest.approx(1.0)
    assert element_load(unit_square, np.ones(2)).sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        assemble_load(unit_square, np.ones(3))
    mesh = build_rect_mesh(SQUARE, 3)
    assert assemble_boundary_load(mesh, 0.4, 0.0).sum() == pytest.approx(3.2, rel=1e-14)
    assert assemble_boundary_load(mesh, "0.4*t", 0.5).sum() == pytest.approx(1.6, rel=1e-14)


def test_interpolation(unit_square):
    np.testing.assert_array_equal(interpolate_nodal(unit_square, 0.4), [0.4] * 4)
    np.testing.assert_array_equal(interpolate_nodal(unit_square, "x^2"), [0.0, 1.0, 0.0, 1.0])
    # P1 interpolant of x^2 is x on this mesh; the gap is at most 1/4
    xs = np.linspace(0.0, 1.0, 101)
    assert np.max(xs - xs ** 2) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        interpolate_nodal(unit_square, "1/x")


def test_slab_average_linear_and_step(unit_square):
    avg = slab_average("t", TimeGrid(1.0, 2), unit_square)
    np.testing.assert_allclose(avg.values[:, 0], [0.25, 0.75], rtol=1e-14)
    step = slab_average(TIME_VARIANTS["step"](), TimeGrid(1.0, 4), unit_square)
    np.testing.assert_allclose(step.values[:, 0], [0.0, 0.0, 0.5, 0.5], atol=1e-15)
    hat = slab_average(TIME_VARIANTS["hat"](), TimeGrid(1.0, 2), unit_square)
    np.testing.assert_allclose(hat.values[:, 0], [0.25, 0.25], rtol=1e-14)


def test_slab_average_of_steady_and_slabwise_constant(unit_square):
    grid = TimeGrid(1.0, 3)
    steady = slab_average("1 + x*y", grid, unit_square)
    for n in range(1, 4):
        np.testing.assert_array_equal(steady.slab(n), interpolate_nodal(unit_square, "1 + x*y"))
    grid2 = TimeGrid(1.0, 2)
    jump = slab_average("heaviside(t - 0.5)*(1 + x)", grid2, unit_square)
    np.testing.assert_array_equal(jump.slab(1), np.zeros(4))
    np.testing.assert_allclose(jump.slab(2), 1 + unit_square.nodes[:, 0])


def test_time_grid():
    grid = TimeGrid(1.0, 4)
    assert grid.tau == 0.25
    assert grid.levels[-1] == 1.0
    assert grid.slab(2) == (0.25, 0.5)
    assert [grid.slab_containing(t) for t in (0.0, 0.1, 0.5, 0.51, 1.0)] == [1, 1, 2, 3, 4]
    assert grid.refined().M == 8
    assert TimeGrid.from_step(1.0, 0.25 * 0.8).M == 5
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_spacetime_pairing(square9):
    grid = TimeGrid(1.0, 5)
    M = assemble_mass(square9)
    one = SpaceTimeField.from_nodal(np.ones(square9.n_nodes), grid)
    assert spacetime_inner(one, one, M, grid.tau) == pytest.approx(4.0, rel=1e-14)
    assert spacetime_norm(3.0 * one, M, grid.tau) == pytest.approx(6.0, rel=1e-14)
    with pytest.raises(ValueError):
        one + SpaceTimeField.zeros(TimeGrid(1.0, 5), 4)


def test_coefficient_set_defaults():
    c = standard_coefficients()
    assert c.stationary
    assert not standard_coefficients(b="1 + t").stationary
    assert c.g.constant_value == 0.4
    assert isinstance(c.q, ScalarField)
    with pytest.raises(CoefficientError):
        CoefficientSet(a_lower=0.0)
