"""Mesh construction, shape functions, quadrature, and JSON round-trip.

Analytical anchors:
- bilinear shape functions: partition of unity, gradient sums zero
- patch test: linear nodal field reproduces exact gradients at Gauss points
- quadrature: sum of w*detJ equals element area
- notched 4x4 mesh: element count and boundary edges against a brute-force
  edge-adjacency oracle
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifenn.geometry import (
    GAUSS_1D,
    Mesh,
    MeshError,
    build_rect_mesh,
    refine_rect_mesh,
    shape_functions,
)


class TestShapeFunctions:
    def test_center_values(self):
        N, _, _ = shape_functions(0.0, 0.0)
        np.testing.assert_allclose(N, [0.25, 0.25, 0.25, 0.25])

    def test_corner_interpolation(self):
        N, _, _ = shape_functions(-1.0, -1.0)
        np.testing.assert_allclose(N, [1.0, 0.0, 0.0, 0.0])

    @given(
        st.floats(-1.0, 1.0, allow_nan=False),
        st.floats(-1.0, 1.0, allow_nan=False),
    )
    @settings(max_examples=250, deadline=None)
    def test_partition_of_unity(self, xi, eta):
        N, dN_dxi, dN_deta = shape_functions(xi, eta)
        assert abs(N.sum() - 1.0) < 1e-13
        assert abs(dN_dxi.sum()) < 1e-13
        assert abs(dN_deta.sum()) < 1e-13


class TestBuildRectMesh:
    def test_two_by_two_counts(self):
        mesh = build_rect_mesh(1.0, 1.0, 2, 2)
        assert mesh.n_elements == 4
        assert mesh.n_nodes == 9
        assert mesh.n_gauss == 16

    def test_forty_by_forty_counts(self):
        mesh = build_rect_mesh(1.0, 1.0, 40, 40)
        assert mesh.n_elements == 1600
        assert mesh.n_gauss == 6400

    def test_notched_four_by_four(self):
        mesh = build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 1, 1, 1))
        assert mesh.n_elements == 14

    def test_boundary_edges_match_adjacency_oracle(self):
        """Every (element, edge) pair with an unshared node pair, exactly."""
        mesh = build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 1, 1, 1))
        edge_nodes = ((0, 1), (1, 2), (2, 3), (3, 0))
        counts = {}
        for conn in mesh.elements:
            for a, b in edge_nodes:
                counts[frozenset((conn[a], conn[b]))] = (
                    counts.get(frozenset((conn[a], conn[b])), 0) + 1
                )
        expected = set()
        for e, conn in enumerate(mesh.elements):
            for le, (a, b) in enumerate(edge_nodes):
                if counts[frozenset((conn[a], conn[b]))] == 1:
                    expected.add((e, le))
        got = set(zip(mesh.boundary_elem.tolist(), mesh.boundary_edge.tolist()))
        assert got == expected

    def test_slit_face_normals(self):
        """Faces exposed by the slit point into the removed region."""
        mesh = build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 1, 1, 1))
        h = 0.25
        for b in range(mesh.boundary_elem.shape[0]):
            mid = mesh.point_on_edge(b, 0.0)
            n = mesh.boundary_normal[b]
            assert abs(np.linalg.norm(n) - 1.0) < 1e-12
            # Slit spans x in [0, 0.5], y in [0.25, 0.5]; faces on its rim
            # (excluding the domain boundary at x=0) must point inward.
            if abs(mid[1] - 1 * h) < 1e-12 and mid[0] < 2 * h:
                np.testing.assert_allclose(n, [0.0, 1.0], atol=1e-12)
            if abs(mid[1] - 2 * h) < 1e-12 and mid[0] < 2 * h:
                np.testing.assert_allclose(n, [0.0, -1.0], atol=1e-12)
            if abs(mid[0] - 2 * h) < 1e-12 and 1 * h < mid[1] < 2 * h:
                np.testing.assert_allclose(n, [-1.0, 0.0], atol=1e-12)

    def test_full_width_notch_rejected(self):
        with pytest.raises(MeshError):
            build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 3, 1, 1))

    def test_notch_outside_grid_rejected(self):
        with pytest.raises(MeshError):
            build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 4, 1, 1))

    def test_removing_every_element_rejected(self):
        with pytest.raises(MeshError):
            build_rect_mesh(1.0, 1.0, 2, 2, notch=(0, 1, 0, 1))


class TestShapeEval:
    def test_unit_square_center(self):
        mesh = build_rect_mesh(1.0, 1.0, 1, 1)
        N, _, _, detJ = mesh.shape_eval(0, 0.0, 0.0)
        np.testing.assert_allclose(N, [0.25, 0.25, 0.25, 0.25])
        assert detJ == pytest.approx(0.25)

    def test_stretched_element_jacobian(self):
        mesh = build_rect_mesh(2.0, 1.0, 1, 1)
        _, _, _, detJ = mesh.shape_eval(0, 0.0, 0.0)
        assert detJ == pytest.approx(0.5)

    def test_patch_linear_field(self):
        """u = a + b x + c y interpolated at nodes has exact gradients."""
        a, b, c = 0.3, 1.7, -2.2
        mesh = build_rect_mesh(1.3, 0.9, 3, 2)
        u = a + b * mesh.nodes[:, 0] + c * mesh.nodes[:, 1]
        gt = mesh.gauss_points()
        for gp in range(gt.n):
            e = gt.elem[gp]
            conn = mesh.elements[e]
            gx = gt.dN_dx[gp] @ u[conn]
            gy = gt.dN_dy[gp] @ u[conn]
            assert abs(gx - b) < 1e-12
            assert abs(gy - c) < 1e-12

    def test_degenerate_element_rejected(self):
        # Bowtie connectivity flips the Jacobian sign.
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        with pytest.raises(MeshError):
            Mesh(
                nodes,
                np.array([[0, 1, 3, 2]]),
                np.empty(0, dtype=int),
                np.empty(0, dtype=int),
                np.empty((0, 2)),
                {},
                {},
                {},
            )


class TestQuadrature:
    def test_weights_times_detj_equal_element_area(self):
        mesh = build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 1, 1, 1))
        gt = mesh.gauss_points()
        area = np.zeros(mesh.n_elements)
        np.add.at(area, gt.elem, gt.wdetJ)
        np.testing.assert_allclose(area, 1.0 / 16.0, rtol=1e-12)

    def test_total_area_of_notched_mesh(self):
        mesh = build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 1, 1, 1))
        assert mesh.gauss_points().wdetJ.sum() == pytest.approx(14.0 / 16.0)

    def test_four_points_per_element(self):
        mesh = build_rect_mesh(1.0, 1.0, 3, 3)
        gt = mesh.gauss_points()
        assert gt.n == 4 * mesh.n_elements
        assert set(GAUSS_1D) == set(np.unique(gt.xi))


class TestNodeSets:
    def test_named_sets_cover_edges(self):
        mesh = build_rect_mesh(1.0, 1.0, 4, 4)
        assert mesh.node_sets["bottom"].shape[0] == 5
        assert mesh.node_sets["top"].shape[0] == 5
        assert mesh.node_sets["bottom_right"].shape[0] == 1
        np.testing.assert_allclose(mesh.nodes[mesh.node_sets["top"], 1], 1.0)


class TestRoundTrip:
    def test_json_round_trip_bit_exact(self, tmp_path):
        mesh = build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 1, 1, 1))
        path = tmp_path / "mesh.json"
        mesh.save(path)
        back = Mesh.load(path)
        assert np.array_equal(mesh.nodes, back.nodes)
        assert np.array_equal(mesh.elements, back.elements)
        assert np.array_equal(mesh.boundary_normal, back.boundary_normal)
        assert mesh.mesh_id == back.mesh_id

    def test_refine_preserves_notched_area(self):
        mesh = build_rect_mesh(1.0, 1.0, 4, 4, notch=(0, 1, 1, 1))
        fine = refine_rect_mesh(mesh, 2)
        assert fine.n_elements == 4 * mesh.n_elements
        coarse_area = mesh.gauss_points().wdetJ.sum()
        fine_area = fine.gauss_points().wdetJ.sum()
        assert fine_area == pytest.approx(coarse_area, rel=1e-12)
