"""Helmholtz regularization solver and the staggered damage reference.

Analytical anchors:
- uniform source is reproduced exactly (constant solves the PDE)
- g = 0 reduces to the mass projection; nodal-interpolable data round-trips
- manufactured cosine eps_bar = cos(k x) / (1 + g k^2) converges at order 2
- small loads leave the elastic solution undamaged
- damage localizes at the notch tip
"""

import numpy as np
import pytest

from ifenn.defaults import (
    LOAD_SCHEDULE,
    U_PEAK,
    benchmark_bcs,
    benchmark_case,
    benchmark_mesh,
)
from ifenn.elasticity import (
    BoundaryConditions,
    Material,
    assemble_stiffness,
    equivalent_strain_batch,
    solve_displacement,
    strain_at_gps,
)
from ifenn.geometry import build_rect_mesh
from ifenn.nonlocal_ref import (
    HelmholtzSystem,
    NonlocalSolveError,
    Snapshot,
    SnapshotError,
    make_snapshot,
    solve_helmholtz,
    staggered_nonlocal_solve,
)


class TestHelmholtz:
    def test_uniform_field_exact(self):
        mesh = build_rect_mesh(1.0, 1.0, 6, 6)
        nodal, gp = solve_helmholtz(mesh, 0.01, np.full(mesh.n_gauss, 3.7))
        np.testing.assert_allclose(nodal, 3.7, rtol=1e-10)
        np.testing.assert_allclose(gp, 3.7, rtol=1e-10)

    def test_zero_g_projection_identity(self):
        """Nodal-interpolable data is reproduced by the mass projection."""
        mesh = build_rect_mesh(1.0, 1.0, 5, 4)
        gt = mesh.gauss_points()
        f = 2.0 * gt.coords[:, 0] + 0.3
        nodal, gp = solve_helmholtz(mesh, 0.0, f)
        np.testing.assert_allclose(nodal, 2.0 * mesh.nodes[:, 0] + 0.3, rtol=1e-10)
        np.testing.assert_allclose(gp, f, rtol=1e-10)

    def test_cosine_convergence_order(self):
        """L2 error of the 1D modified Helmholtz solution drops at order 2."""
        g = 0.01
        k = np.pi
        errs = []
        for n in (8, 16, 32):
            mesh = build_rect_mesh(1.0, 0.1, n, 1)
            gt = mesh.gauss_points()
            f = np.cos(k * gt.coords[:, 0])
            _, gp = solve_helmholtz(mesh, g, f)
            exact = np.cos(k * gt.coords[:, 0]) / (1.0 + g * k * k)
            errs.append(np.sqrt(np.sum(gt.wdetJ * (gp - exact) ** 2)))
        orders = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert min(orders) >= 1.9

    def test_max_principle_for_positive_g(self):
        rng = np.random.default_rng(3)
        mesh = build_rect_mesh(1.0, 1.0, 12, 12)
        gt = mesh.gauss_points()
        x, y = gt.coords[:, 0], gt.coords[:, 1]
        for _ in range(4):
            a, b = rng.uniform(0.5, 3, 2)
            f = 1.0 + 0.5 * np.sin(a * np.pi * x) * np.cos(b * np.pi * y)
            for g in (0.002, 0.02):
                _, gp = solve_helmholtz(mesh, g, f)
                assert gp.max() <= f.max() + 1e-10
                assert gp.min() >= f.min() - 1e-10

    def test_negative_g_rejected(self):
        mesh = build_rect_mesh(1.0, 1.0, 2, 2)
        with pytest.raises(NonlocalSolveError):
            HelmholtzSystem(mesh, -1e-6)

    def test_wrong_data_length_rejected(self):
        mesh = build_rect_mesh(1.0, 1.0, 2, 2)
        hs = HelmholtzSystem(mesh, 0.01)
        with pytest.raises(NonlocalSolveError):
            hs.solve(np.zeros(3))


class TestStaggered:
    def test_elastic_load_no_damage(self):
        mesh, mat, bcs = benchmark_case(4)
        tiny = BoundaryConditions(
            dirichlet=[(ids, dof, val * 1e-3) for ids, dof, val in bcs.dirichlet]
        )
        recs = staggered_nonlocal_solve(mesh, mat, tiny, [1.0])
        assert recs[0].passes == 1
        np.testing.assert_array_equal(recs[0].d, 0.0)
        K = assemble_stiffness(mesh, mat)
        u_el, _ = solve_displacement(K, tiny, mesh.n_dofs)
        np.testing.assert_allclose(recs[0].u, u_el, rtol=1e-12, atol=1e-18)

    def test_damage_localizes_at_notch_tip(self):
        mesh, mat, bcs = benchmark_case(4)
        recs = staggered_nonlocal_solve(mesh, mat, bcs, [1.0])
        d = recs[-1].d
        assert d.max() > 0.05
        gt = mesh.gauss_points()
        tip_elem = gt.elem[int(np.argmax(d))]
        cx, cy = mesh.nodes[mesh.elements[tip_elem]].mean(axis=0)
        #

        # Notch on the 4x4 benchmark removes the element covering
        # x in [0, 0.25], y in [0.5, 0.75]; its tip-adjacent ring is the
        # set of elements whose centers are within one element of the tip.
        assert abs(cx - 0.375) <= 0.25 + 1e-12
        assert abs(cy - 0.625) <= 0.25 + 1e-12

    def test_kappa_never_decreases(self):
        mesh, mat, bcs = benchmark_case(4)
        recs = staggered_nonlocal_solve(mesh, mat, bcs, list(LOAD_SCHEDULE))
        for a, b in zip(recs, recs[1:]):
            assert np.all(b.kappa >= a.kappa - 1e-18)

    def test_non_increasing_schedule_rejected(self):
        mesh, mat, bcs = benchmark_case(4)
        with pytest.raises(NonlocalSolveError):
            staggered_nonlocal_solve(mesh, mat, bcs, [0.5, 0.5])

    def test_non_convergence_error_names_step(self):
        mesh, mat, bcs = benchmark_case(4)
        with pytest.raises(NonlocalSolveError, match=r"step 0 \(lf=1.0\)"):
            staggered_nonlocal_solve(mesh, mat, bcs, [1.0], max_passes=1)


class TestSnapshot:
    @pytest.fixture(scope="class")
    def run(self):
        mesh, mat, bcs = benchmark_case(4)
        recs = staggered_nonlocal_solve(mesh, mat, bcs, [0.4, 1.0])
        return mesh, mat, recs

    def test_low_lf_equals_pure_helmholtz(self, run):
        mesh, mat, recs = run
        snap = make_snapshot(mesh, mat, recs, 0.4)
        _, gp = solve_helmholtz(mesh, mat.g, recs[0].eps_eq)
        np.testing.assert_allclose(snap.eps_bar_true, gp, rtol=1e-12)

    def test_rows_and_normals(self, run):
        mesh, mat, recs = run
        snap = make_snapshot(mesh, mat, recs, 1.0)
        assert snap.n_interior == mesh.n_gauss
        assert snap.n_boundary == 2 * mesh.boundary_elem.shape[0]
        norms = np.hypot(snap.bnx, snap.bny)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        assert np.all(snap.eps_bar_true >= 0.0)
        assert snap.manifest["lf"] == 1.0
        assert snap.manifest["mean_eps_eq"] == pytest.approx(snap.mean_eps_eq)

    def test_missing_lf_lists_available(self, run):
        mesh, mat, recs = run
        with pytest.raises(SnapshotError, match=r"0\.4.*1\.0"):
            make_snapshot(mesh, mat, recs, 0.82)

    def test_csv_round_trip_bit_exact(self, run, tmp_path):
        mesh, mat, recs = run
        snap = make_snapshot(mesh, mat, recs, 1.0)
        csv = tmp_path / "snap.csv"
        snap.save(csv)
        back = Snapshot.from_csv(csv)
        assert np.array_equal(snap.eps_bar_true, back.eps_bar_true)
        assert np.array_equal(snap.eps_eq, back.eps_eq)
        assert np.array_equal(snap.bnx, back.bnx)
        assert snap.content_hash() == back.content_hash()

    def test_repeat_run_bit_identical(self):
        mesh, mat, bcs = benchmark_case(4)
        hashes = set()
        for _ in range(2):
            recs = staggered_nonlocal_solve(mesh, mat, bcs, [1.0])
            hashes.add(make_snapshot(mesh, mat, recs, 1.0).content_hash())
        assert len(hashes) == 1


class TestBenchmarkCase:
    def test_notch_scales_with_mesh(self):
        for n in (4, 10, 20):
            mesh = benchmark_mesh(n)
            removed = n * n - mesh.n_elements
            assert removed >= 1
            # Removed strip approaches x in [0, 0.3], y in [0.4, 0.5] as the
            # grid refines; at finite n it may shift by one element.
            notch = mesh.meta["notch"]
            i0, i1, j0, j1 = notch
            assert i0 == 0
            assert (i1 + 1) / n <= 0.3 + 1.0 / n
            assert j0 / n >= 0.4 - 1.0 / n
            assert (j1 + 1) / n <= 0.5 + 1.0 / n

    def test_bcs_pull_top_edge(self):
        mesh = benchmark_mesh(4)
        bcs = benchmark_bcs(mesh, U_PEAK)
        fixed, vals, _ = bcs.build(mesh.n_dofs)
        top = mesh.node_sets["top"]
        top_dofs = set((2 * top + 1).tolist())
        assert top_dofs <= set(fixed.tolist())
        assert np.isclose(vals.max(), U_PEAK)
