import math

import numpy as np
import pytest

from srcid.errors import MeshError
from srcid.services.mesh import (
    BoundarySpec,
    Mesh,
    build_rect_mesh,
    closest_node,
    dumps_mesh,
    load_mesh,
    loads_mesh,
    nested_node_map,
    refine,
    save_mesh,
    subdivisions_for_h,
    tag_boundary,
)
from srcid.services.scenarios import SQUARE


def test_unit_square_minimal_split():
    mesh = build_rect_mesh((0.0, 1.0, 0.0, 1.0), 1)
    assert (mesh.n_nodes, mesh.n_triangles, len(mesh.boundary_edges)) == (4, 2, 4)
    assert mesh.h == pytest.approx(math.sqrt(2.0))


@pytest.mark.parametrize("n", [1, 2, 5, 12])
def test_counting_formulas_and_area(n):
    mesh = build_rect_mesh(SQUARE, n)
    assert mesh.n_nodes == (n + 1) ** 2
    assert mesh.n_triangles == 2 * n * n
    assert len(mesh.boundary_edges) == 4 * n
    assert mesh.area == pytest.approx(4.0, rel=1e-12)
    assert np.all(mesh.areas > 0)


def test_h_is_cell_diagonal():
    assert build_rect_mesh(SQUARE, 40).h == pytest.approx(2 * math.sqrt(2) / 40)
    assert build_rect_mesh(SQUARE, 57).h <= 0.05
    assert subdivisions_for_h(SQUARE, 0.05) == 57


@pytest.mark.parametrize("bounds, n", [(SQUARE, 0), (SQUARE, 1.5), ((0, 0, 0, 1), 2), ((1, 0, 0, 1), 2)])
def test_invalid_construction(bounds, n):
    with pytest.raises(MeshError):
        build_rect_mesh(bounds, n)


def test_elongated_rectangle_is_rejected():
    # cell diagonal / short side: sqrt(17) ~ 4.1 passes, sqrt(101) ~ 10.05 does not
    assert build_rect_mesh((0.0, 4.0, 0.0, 1.0), 3).n_nodes == 16
    with pytest.raises(MeshError, match="quasi-uniformity"):
        build_rect_mesh((0.0, 10.0, 0.0, 1.0), 3)


def test_refine_counts_and_nesting():
    coarse = build_rect_mesh((0.0, 1.0, 0.0, 1.0), 1)
    fine = refine(coarse)
    assert (fine.n_nodes, fine.n_triangles) == (9, 8)
    assert fine.h == coarse.h / 2
    np.testing.assert_array_equal(fine.nodes[:coarse.n_nodes], coarse.nodes)
    np.testing.assert_array_equal(nested_node_map(fine, coarse), np.arange(coarse.n_nodes))
    assert fine.area == pytest.approx(coarse.area, rel=1e-14)


def test_three_refinements_divide_h_by_eight():
    mesh = build_rect_mesh(SQUARE, subdivisions_for_h(SQUARE, 0.8))
    h0 = mesh.h
    for _ in range(3):
        mesh = refine(mesh)
    assert mesh.h == h0 / 8
    lo, hi = mesh.edge_length_range()
    assert hi == pytest.approx(mesh.h)


def test_tag_all_and_one_side():
    mesh = build_rect_mesh(SQUARE, 2)
    assert tag_boundary(mesh, "all").gamma.all()
    bottom = tag_boundary(mesh, "y = -1")
    assert bottom.gamma.sum() == 2
    np.testing.assert_array_equal(tag_boundary(mesh, "bottom").gamma, bottom.gamma)
    assert bottom.gamma_length == pytest.approx(2.0)


def test_tagging_is_idempotent_and_stable_under_refine():
    mesh = tag_boundary(build_rect_mesh(SQUARE, 3), "left, top")
    again = tag_boundary(mesh, "left, top")
    np.testing.assert_array_equal(again.gamma, mesh.gamma)
    fine = refine(mesh)
    assert fine.gamma.sum() == 2 * mesh.gamma.sum()
    assert fine.gamma_length == pytest.approx(mesh.gamma_length)
    np.testing.assert_array_equal(fine.gamma, tag_boundary(fine, "left, top").gamma)


def test_empty_or_unknown_selection():
    mesh = build_rect_mesh(SQUARE, 2)
    with pytest.raises(MeshError):
        tag_boundary(mesh, "x = 5")
    with pytest.raises(MeshError):
        BoundarySpec.parse("middle")
    with pytest.raises(MeshError):
        BoundarySpec.parse("")


def _scan(mesh, point):
    best, best_d = 0, math.inf
    for i, (x, y) in enumerate(mesh.nodes.tolist()):
        d = (x - point[0]) ** 2 + (y - point[1]) ** 2
        if d < best_d:
            best, best_d = i, d
    return best


def test_closest_node_examples():
    mesh = build_rect_mesh(SQUARE, 2)
    assert closest_node(mesh, (0.0, 0.0)) == 4
    assert closest_node(mesh, (-0.1, -0.5)) == _scan(mesh, (-0.1, -0.5))
    # (-0.5, 0.5) is equidistant from nodes 3, 4, 6 and 7
    assert closest_node(mesh, (-0.5, 0.5)) == 3


def test_closest_node_matches_linear_scan(rng):
    mesh = refine(build_rect_mesh(SQUARE, 3))
    for point in rng.uniform(-1.2, 1.2, size=(200, 2)):
        assert closest_node(mesh, point) == _scan(mesh, point)


def test_validate_rejects_orphans_and_bad_orientation():
    nodes = [[0, 0], [1, 0], [0, 1], [5, 5]]
    with pytest.raises(MeshError, match="orphan"):
        Mesh(nodes=nodes, triangles=[[0, 1, 2]], boundary_edges=[[0, 1], [1, 2], [2, 0]],
             gamma=[True] * 3, h=1.0).validate()
    with pytest.raises(MeshError, match="signed area"):
        Mesh(nodes=nodes[:3], triangles=[[0, 2, 1]], boundary_edges=[[0, 2], [2, 1], [1, 0]],
             gamma=[True] * 3, h=1.0).validate()
    with pytest.raises(MeshError, match="boundary edges"):
        Mesh(nodes=nodes[:3], triangles=[[0, 1, 2]], boundary_edges=[[0, 1], [1, 2]],
             gamma=[True] * 2, h=1.0).validate()


def test_text_export_import(tmp_path):
    mesh = tag_boundary(refine(build_rect_mesh(SQUARE, 2)), "bottom")
    back = loads_mesh(dumps_mesh(mesh))
    np.testing.assert_array_equal(back.nodes, mesh.nodes)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.gamma, mesh.gamma)
    assert back.h == pytest.approx(mesh.h)

    path = save_mesh(mesh, tmp_path / "mesh.txt")
    assert path.read_text().splitlines()[0] == f"{mesh.n_nodes} {mesh.n_triangles} {len(mesh.boundary_edges)}"
    np.testing.assert_array_equal(load_mesh(path).boundary_edges, mesh.boundary_edges)


def test_truncated_text_is_rejected():
    text = dumps_mesh(build_rect_mesh(SQUARE, 1))
    with pytest.raises(MeshError):
        loads_mesh("\n".join(text.splitlines()[:-2]))
