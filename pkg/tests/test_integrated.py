"""Tests for the Newton solver with a learned strain surrogate."""

import numpy as np
import pytest

from ifenn.defaults import LOAD_SCHEDULE, benchmark_bcs, benchmark_case
from ifenn.elasticity import (
    Material,
    assemble_stiffness,
    equivalent_strain_batch,
    mazars_damage,
    solve_displacement,
    strain_at_gps,
)
from ifenn.geometry import build_rect_mesh
from ifenn.integrated import (
    HelmholtzPredictor,
    IfennDivergenceError,
    IfennError,
    NetworkPredictor,
    field_table,
    ifenn_assemble,
    ifenn_solve,
)
from ifenn.net import IEPS, Network, NetworkShape, Scaling, xavier_init
from ifenn.nonlocal_ref import staggered_nonlocal_solve


class AffineLocal:
    """eps_bar = alpha eps_eq + beta, with the exact local sensitivity."""

    def __init__(self, alpha=1.0, beta=0.0):
        self.alpha = alpha
        self.beta = beta

    def predict(self, x, y, g, eps_eq):
        return self.alpha * eps_eq + self.beta, np.full_like(eps_eq, self.alpha)


class Frozen:
    """Fixed nonlocal strain field with zero sensitivity."""

    def __init__(self, eps_bar):
        self.eps_bar = np.asarray(eps_bar, dtype=float)

    def predict(self, x, y, g, eps_eq):
        return self.eps_bar.copy(), np.zeros_like(self.eps_bar)


def plain_case(u_top):
    mesh = build_rect_mesh(1.0, 1.0, 2, 2)
    mat = Material()
    return mesh, mat, benchmark_bcs(mesh, u_top)


def small_network(seed=0):
    shape = NetworkShape(2, 5)
    sc = Scaling(shift=np.array([0.5, 0.5, 0.0, 0.0]),
                 scale=np.array([0.5, 0.5, 1.0, 1.0]),
                 out_shift=2.5e-4, out_scale=3.0e-5)
    return Network(shape=shape, theta=xavier_init(shape, seed), scaling=sc)


class TestPredictors:
    def test_network_predictor_matches_channels(self):
        net = small_network()
        rng = np.random.default_rng(0)
        x, y = rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)
        eps = rng.uniform(1e-5, 3e-4, 8)
        val, dv = NetworkPredictor(net).predict(x, y, 0.002, eps)
        Z = np.column_stack([x, y, np.full(8, 0.002), eps])
        ch = net.predict_channels(Z, first_dirs=(IEPS,), second_dirs=())
        assert np.array_equal(val, ch.value)
        assert np.array_equal(dv, ch.deps)

    def test_helmholtz_predictor_bound_to_mesh(self):
        mesh, mat, _ = benchmark_case(4)
        pred = HelmholtzPredictor(mesh, mat.g)
        with pytest.raises(IfennError, match="bound to"):
            pred.predict(np.zeros(3), np.zeros(3), mat.g, np.zeros(3))

    def test_bad_predictor_shape_rejected(self):
        class Wrong:
            def predict(self, x, y, g, eps_eq):
                return np.zeros(2), np.zeros(2)

        mesh, mat, bcs = plain_case(1e-5)
        with pytest.raises(IfennError, match="expected"):
            ifenn_solve(mesh, mat, Wrong(), bcs)


class TestElasticLimit:
    def test_single_iteration_below_threshold(self):
        mesh, mat, bcs = plain_case(1.0e-5)
        st = ifenn_solve(mesh, mat, AffineLocal(), bcs)
        assert st.iterations == 1
        assert np.all(st.d == 0.0)
        K = assemble_stiffness(mesh, mat)
        u_el, _ = solve_displacement(K, bcs, mesh.n_dofs)
        assert np.allclose(st.u, u_el, atol=1e-16, rtol=1e-12)

    def test_deterministic(self):
        mesh, mat, bcs = plain_case(3.0e-4)
        a = ifenn_solve(mesh, mat, AffineLocal(1.02, 1e-5), bcs)
        b = ifenn_solve(mesh, mat, AffineLocal(1.02, 1e-5), bcs)
        assert np.array_equal(a.u, b.u)
        assert a.iterations == b.iterations


class TestJacobian:
    @pytest.mark.parametrize("predictor", [
        AffineLocal(1.02, 1.0e-5),
        NetworkPredictor(small_network()),
    ], ids=["affine", "network"])
    def test_matches_finite_differences(self, predictor):
        # Damaged uniform-stretch state on a 4-element mesh; every entry of
        # the consistent Jacobian, softening coupling included, must agree
        # with central differences of the residual.
        mesh, mat, bcs = plain_case(3.0e-4)
        K = assemble_stiffness(mesh, mat)
        u, _ = solve_displacement(K, bcs, mesh.n_dofs)
        commit = np.zeros(mesh.n_gauss)
        J, _, fields = ifenn_assemble(mesh, mat, predictor, u, commit)
        assert np.any(fields["d"] > 0.0)
        J = J.toarray()
        h = 1.0e-8
        J_fd = np.empty_like(J)
        for j in range(mesh.n_dofs):
            up, um = u.copy(), u.copy()
            up[j] += h
            um[j] -= h
            _, Rp, _ = ifenn_assemble(mesh, mat, predictor, up, commit)
            _, Rm, _ = ifenn_assemble(mesh, mat, predictor, um, commit)
            J_fd[:, j] = (Rp - Rm) / (2.0 * h)
        assert np.max(np.abs(J_fd - J)) / np.max(np.abs(J)) < 1e-6

    def test_frozen_predictor_reduces_to_damaged_stiffness(self):
        mesh, mat, _ = plain_case(0.0)
        ebar = np.full(mesh.n_gauss, 2.0e-4)
        d, _ = mazars_damage(ebar, mat)
        rng = np.random.default_rng(3)
        u = 1e-4 * rng.standard_normal(mesh.n_dofs)
        J, _, _ = ifenn_assemble(mesh, mat, Frozen(ebar), u, np.zeros(mesh.n_gauss))
        K = assemble_stiffness(mesh, mat, d_gp=d)
        assert np.allclose(J.toarray(), K.toarray(), rtol=1e-12, atol=1e-12)


class TestSolve:
    def test_oracle_predictor_matches_staggered(self):
        # Driving Newton with the exact discrete nonlocal solve must land
        # on the staggered reference state.
        mesh, mat, bcs = benchmark_case(4)
        recs = staggered_nonlocal_solve(mesh, mat, bcs, list(LOAD_SCHEDULE))
        ref = recs[-1]
        st = ifenn_solve(mesh, mat, HelmholtzPredictor(mesh, mat.g), bcs,
                         tol=1e-8, max_iters=25)
        assert st.iterations <= 25
        assert ref.d.max() > 0.05
        num = np.linalg.norm(st.d - ref.d)
        assert num / np.linalg.norm(ref.d) < 1e-3
        assert np.allclose(st.u, ref.u, rtol=1e-4, atol=1e-12)

    def test_commit_history_freezes_damage(self):
        mesh, mat, bcs = plain_case(1.0e-5)
        commit = np.full(mesh.n_gauss, 5.0e-4)
        st = ifenn_solve(mesh, mat, AffineLocal(), bcs, kappa_commit=commit)
        d_expect, _ = mazars_damage(commit, mat)
        assert np.allclose(st.d, d_expect, rtol=1e-12)
        assert np.array_equal(st.kappa, commit)

    def test_histories_recorded(self):
        mesh, mat, bcs = plain_case(3.0e-4)
        st = ifenn_solve(mesh, mat, AffineLocal(1.02, 1e-5), bcs)
        assert len(st.res_history) >= st.iterations
        assert len(st.step_history) == st.iterations
        assert st.step_history[-1] <= st.step_history[0]

    def test_no_dirichlet_rejected(self):
        mesh, mat, _ = plain_case(0.0)
        from ifenn.elasticity import BoundaryConditions
        with pytest.raises(IfennError, match="Dirichlet"):
            ifenn_solve(mesh, mat, AffineLocal(), BoundaryConditions(dirichlet=[]))

    def test_iteration_budget_exhaustion_carries_histories(self):
        mesh, mat, bcs = plain_case(3.0e-4)
        with pytest.raises(IfennDivergenceError) as err:
            ifenn_solve(mesh, mat, AffineLocal(1.02, 1e-5), bcs, max_iters=1)
        assert err.value.res_history
        assert err.value.step_history

    def test_field_table_layout(self):
        mesh, mat, bcs = plain_case(3.0e-4)
        st = ifenn_solve(mesh, mat, AffineLocal(1.02, 1e-5), bcs)
        tab = field_table(mesh, st)
        assert tab.shape == (mesh.n_gauss, 5)
        gt = mesh.gauss_points()
        assert np.array_equal(tab[:, 0], gt.coords[:, 0])
        assert np.array_equal(tab[:, 2], st.eps_eq)
        assert np.array_equal(tab[:, 4], st.d)
