"""Newton equilibrium solver with a learned nonlocal-strain surrogate.

The displacement field is the only nodal unknown. At every Gauss point a
predictor supplies the nonlocal equivalent strain and its sensitivity to
the local equivalent strain; damage and its consistent tangent follow from
the damage law, and the extra term enters the Jacobian as a rank-one
update per Gauss point.

Any object with a ``predict(x, y, g, eps_eq) -> (eps_bar, deps_bar)``
method works as a predictor. ``NetworkPredictor`` wraps a trained network;
``HelmholtzPredictor`` substitutes the exact discrete nonlocal solve and
exists so the solver can be checked against the staggered reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .elasticity import (
    b_matrix,
    constitutive_matrix,
    element_dofs,
    equivalent_strain_batch,
    mazars_damage,
    strain_at_gps,
    _direct_solve,
)
from .net import IEPS
from .nonlocal_ref import HelmholtzSystem


class IfennError(RuntimeError):
    """Assembly or configuration failure in the embedded solver."""


class IfennDivergenceError(IfennError):
    """Newton iteration failed; carries the recorded histories."""

    def __init__(self, message, res_history, step_history):
        super().__init__(message)
        self.res_history = list(res_history)
        self.step_history = list(step_history)


@dataclass
class IfennState:
    """Converged solver state plus iteration diagnostics.

    ``iterations`` counts displacement updates. ``res_history`` holds the
    free-dof residual norm before each update, ``step_history`` the update
    norms.
    """

    u: np.ndarray
    eps_eq: np.ndarray
    eps_bar: np.ndarray
    d: np.ndarray
    kappa: np.ndarray
    iterations: int
    res_history: list = field(default_factory=list)
    step_history: list = field(default_factory=list)


class NetworkPredictor:
    """Batched network inference over all Gauss points.

    Only the value and the local-strain derivative channel are evaluated;
    the spatial-derivative channels play no role once training is done.
    """

    def __init__(self, network):
        self.network = network

    def predict(self, x, y, g, eps_eq):
        Z = np.column_stack([x, y, np.full_like(x, float(g)), eps_eq])
        ch = self.network.predict_channels(Z, first_dirs=(IEPS,), second_dirs=())
        return ch.value, ch.deps


class HelmholtzPredictor:
    """Exact discrete nonlocal solve in place of a trained network.

    The value is the factorized Helmholtz solution, so the solver driven by
    this predictor must land on the same fixed point as the staggered
    reference. The sensitivity is the diagonal of the dense solution
    operator, an approximation (the true operator is full), which affects
    the iteration path but not the converged state. Intended for small
    meshes; the diagonal is extracted from a dense solve.
    """

    def __init__(self, mesh, g):
        self.mesh = mesh
        self.g = float(g)
        self._helm = HelmholtzSystem(mesh, g)
        M = self._helm._lu.solve(self._helm.project.toarray())
        self._diag = np.asarray(
            self._helm.interp.multiply(M.T).sum(axis=1)
        ).ravel()

    def predict(self, x, y, g, eps_eq):
        if eps_eq.shape[0] != self.mesh.n_gauss:
            raise IfennError(
                f"predictor is bound to {self.mesh.n_gauss} Gauss points, "
                f"got {eps_eq.shape[0]}"
            )
        _, ebar_gp = self._helm.solve(eps_eq)
        return ebar_gp, self._diag.copy()


def ifenn_assemble(mesh, mat, predictor, u, kappa_commit):
    """Residual and consistent Jacobian at displacement state ``u``.

    R = sum_gp w detJ B^T (1 - d) C eps with d = damage(max(kappa, ebar)).
    J adds, at Gauss points on the loading branch (ebar above both the
    committed history and the damage threshold), the softening coupling

        - (B^T C eps) outer (dd/dkappa * debar/deps_eq * s^T B)

    where s is the strain-space gradient of the local equivalent strain.
    J is unsymmetric; R and J omit external loads and constraints, which
    the solve layer applies.

    Returns
    -------
    J : csr_matrix
    R : (n_dofs,) ndarray
    fields : dict with eps_eq, eps_bar, deps_bar, d per Gauss point
    """
    gt = mesh.gauss_points()
    eps = strain_at_gps(mesh, u)
    eps_eq, s = equivalent_strain_batch(eps)
    eps_bar, deps_bar = predictor.predict(
        gt.coords[:, 0], gt.coords[:, 1], mat.g, eps_eq)
    if eps_bar.shape != (gt.n,) or deps_bar.shape != (gt.n,):
        raise IfennError(
            f"predictor returned shapes {eps_bar.shape}, {deps_bar.shape}; "
            f"expected ({gt.n},)"
        )
    kappa_it = np.maximum(kappa_commit, eps_bar)
    d, dd_dkappa = mazars_damage(kappa_it, mat)
    loading = eps_bar > kappa_commit
    dd_du_coef = np.where(loading, dd_dkappa * deps_bar, 0.0)

    C = constitutive_matrix(mat)
    R = np.zeros(mesh.n_dofs)
    rows = np.empty(64 * mesh.n_elements, dtype=np.int64)
    cols = np.empty_like(rows)
    vals = np.empty(64 * mesh.n_elements)
    k = 0
    for e in range(mesh.n_elements):
        Je = np.zeros((8, 8))
        Re = np.zeros(8)
        for gp in range(4 * e, 4 * e + 4):
            B = b_matrix(gt.dN_dx[gp], gt.dN_dy[gp])
            w = gt.wdetJ[gp]
            CB = C @ B
            sigma_eff = C @ eps[gp]
            Re += w * (1.0 - d[gp]) * (B.T @ sigma_eff)
            Je += w * (1.0 - d[gp]) * (B.T @ CB)
            if dd_du_coef[gp] != 0.0:
                Je -= w * np.outer(B.T @ sigma_eff, dd_du_coef[gp] * (s[gp] @ B))
        dofs = element_dofs(mesh, e)
        R[dofs] += Re
        rows[k:k + 64] = np.repeat(dofs, 8)
        cols[k:k + 64] = np.tile(dofs, 8)
        vals[k:k + 64] = Je.ravel()
        k += 64
    J = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_dofs,) * 2).tocsr()
    return J, R, {"eps_eq": eps_eq, "eps_bar": eps_bar, "deps_bar": deps_bar, "d": d}


def ifenn_solve(mesh, mat, predictor, bcs, kappa_commit=None,
                tol=1.0e-6, max_iters=50):
    """Newton iteration to equilibrium under ``bcs``.

    Starts from zero displacement, so the first update is the elastic
    predictor whenever the virgin state is undamaged. Converges when the
    update norm relative to the first update drops to ``tol``, or when the
    free-dof residual drops to ``tol`` relative to the load scale. On
    convergence the history field is committed once.

    Raises
    ------
    IfennDivergenceError
        If the residual grows tenfold over five iterations or the
        iteration budget is exhausted.
    """
    n_dofs = mesh.n_dofs
    if kappa_commit is None:
        kappa_commit = np.zeros(mesh.n_gauss)
    fixed, vals, F_ext = bcs.build(n_dofs)
    if fixed.size == 0:
        raise IfennError("no Dirichlet constraints; system is singular")
    free = np.setdiff1d(np.arange(n_dofs, dtype=np.int64), fixed, assume_unique=True)

    u = np.zeros(n_dofs)
    res_history = []
    step_history = []
    ref_scale = float(np.linalg.norm(F_ext[free]))
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        J, R, fields = ifenn_assemble(mesh, mat, predictor, u, kappa_commit)
        R_full = R - F_ext
        res = float(np.linalg.norm(R_full[free]))
        res_history.append(res)
        if it > 1 and res <= tol * ref_scale:
            converged = True
            break
        if len(res_history) >= 6 and res_history[-6] > 0.0 and res > 10.0 * res_history[-6]:
            raise IfennDivergenceError(
                f"residual grew from {res_history[-6]:.3e} to {res:.3e} "
                f"over 5 iterations", res_history, step_history)
        du = np.zeros(n_dofs)
        du[fixed] = vals - u[fixed]
        Jff = J[free][:, free].tocsc()
        rhs = -R_full[free] - J[free][:, fixed] @ du[fixed]
        du[free] = _direct_solve(Jff, rhs)
        u += du
        iterations = it
        step = float(np.linalg.norm(du))
        step_history.append(step)
        bc_force = float(np.linalg.norm((J[free][:, fixed] @ vals)))
        ref_scale = max(ref_scale, bc_force, res)
        if step_history[0] == 0.0 or step / step_history[0] <= tol:
            converged = True
            fields = None
            break
    if not converged:
        raise IfennDivergenceError(
            f"no convergence in {max_iters} iterations "
            f"(last step ratio {step_history[-1] / step_history[0]:.3e})",
            res_history, step_history)

    if fields is None:
        gt = mesh.gauss_points()
        eps_eq, _ = equivalent_strain_batch(strain_at_gps(mesh, u))
        eps_bar, _ = predictor.predict(
            gt.coords[:, 0], gt.coords[:, 1], mat.g, eps_eq)
        d, _ = mazars_damage(np.maximum(kappa_commit, eps_bar), mat)
        fields = {"eps_eq": eps_eq, "eps_bar": eps_bar, "d": d}
    kappa = np.maximum(kappa_commit, fields["eps_bar"])
    return IfennState(
        u=u, eps_eq=fields["eps_eq"], eps_bar=fields["eps_bar"],
        d=fields["d"], kappa=kappa, iterations=iterations,
        res_history=res_history, step_history=step_history,
    )


def field_table(mesh, state):
    """Per-Gauss-point field table (x, y, eps_eq, eps_bar, d), (n_gauss, 5)."""
    gt = mesh.gauss_points()
    return np.column_stack([gt.coords[:, 0], gt.coords[:, 1],
                            state.eps_eq, state.eps_bar, state.d])
