"""Plane-strain elasticity with scalar isotropic damage.

Small strain, 2D plane strain, bilinear quads. Damage follows the Mazars
exponential law driven by a history variable kappa; the equivalent strain is
the root of the sum of squared positive principal strains. Strain vectors are
engineering Voigt (eps_xx, eps_yy, gamma_xy): the factor 2 on shear enters
exactly once, in the B-matrix.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .geometry import Mesh


class MaterialError(ValueError):
    """Invalid material parameters."""


class SingularSystemError(RuntimeError):
    """Linear system is singular (e.g. no Dirichlet support)."""


# Relative residual allowed after a direct sparse solve.
_SOLVE_RTOL = 1.0e-10


@dataclass(frozen=True)
class MazarsParams:
    """Parameters of the exponential Mazars damage law."""

    kappa0: float = 1.0e-4
    A: float = 0.7
    B: float = 1.0e4

    def __post_init__(self):
        if self.kappa0 <= 0.0:
            raise MaterialError("kappa0 must be positive")
        if not 0.0 < self.A <= 1.0:
            raise MaterialError("A must lie in (0, 1]")
        if self.B <= 0.0:
            raise MaterialError("B must be positive")


@dataclass(frozen=True)
class Material:
    """Elastic constants plus damage law and nonlocal interaction."""

    E: float = 25000.0
    nu: float = 0.2
    mazars: MazarsParams = field(default_factory=MazarsParams)
    g: float = 0.008

    def __post_init__(self):
        if self.E <= 0.0:
            raise MaterialError("E must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise MaterialError("nu must lie in [0, 0.5)")
        if self.g < 0.0:
            raise MaterialError("g must be non-negative")

    def to_dict(self):
        return {
            "E": self.E,
            "nu": self.nu,
            "mazars": {"kappa0": self.mazars.kappa0, "A": self.mazars.A, "B": self.mazars.B},
            "g": self.g,
        }

    @classmethod
    def from_dict(cls, data):
        m = data.get("mazars", {})
        return cls(
            E=float(data["E"]),
            nu=float(data["nu"]),
            mazars=MazarsParams(
                kappa0=float(m.get("kappa0", MazarsParams.kappa0)),
                A=float(m.get("A", MazarsParams.A)),
                B=float(m.get("B", MazarsParams.B)),
            ),
            g=float(data.get("g", 0.0)),
        )


@dataclass
class StrainTensor2D:
    """In-plane strain tensor components, tensorial shear."""

    eps_xx: float
    eps_yy: float
    eps_xy: float

    def to_voigt(self):
        """Engineering Voigt vector (eps_xx, eps_yy, gamma_xy)."""
        return np.array([self.eps_xx, self.eps_yy, 2.0 * self.eps_xy])


def constitutive_matrix(mat):
    """Plane-strain stiffness in engineering Voigt form, (3, 3)."""
    E, nu = mat.E, mat.nu
    c = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    C = np.array(
        [
            [c * (1.0 - nu), c * nu, 0.0],
            [c * nu, c * (1.0 - nu), 0.0],
            [0.0, 0.0, E / (2.0 * (1.0 + nu))],
        ]
    )
    return C


def equivalent_strain_batch(eps_voigt):
    """Equivalent strain and its derivative for a batch of strain states.

    Parameters
    ----------
    eps_voigt : (n, 3) ndarray
        Engineering Voigt strains (eps_xx, eps_yy, gamma_xy).

    Returns
    -------
    eps_eq : (n,) ndarray
        sqrt(sum of squared positive in-plane principal strains).
    deriv : (n, 3) ndarray
        d eps_eq / d (eps_xx, eps_yy, gamma_xy). Zero where eps_eq = 0.
        At coalescent principal strains the symmetric limit is used
        (direction terms set to zero).
    """
    eps_voigt = np.atleast_2d(np.asarray(eps_voigt, dtype=float))
    exx, eyy = eps_voigt[:, 0], eps_voigt[:, 1]
    exy = 0.5 * eps_voigt[:, 2]
    mean = 0.5 * (exx + eyy)
    dev = 0.5 * (exx - eyy)
    rad = np.sqrt(dev * dev + exy * exy)
    e1 = mean + rad
    e2 = mean - rad
    p1 = np.maximum(e1, 0.0)
    p2 = np.maximum(e2, 0.0)
    eps_eq = np.sqrt(p1 * p1 + p2 * p2)

    # Direction of the radial part; symmetric limit (zero) when rad == 0.
    with np.errstate(invalid="ignore", divide="ignore"):
        cdir = np.where(rad > 0.0, dev / rad, 0.0)
        sdir = np.where(rad > 0.0, exy / rad, 0.0)
    a1 = (e1 > 0.0).astype(float)
    a2 = (e2 > 0.0).astype(float)
    # d e1 = (0.5 + cdir/2, 0.5 - cdir/2, sdir/2 per gamma) and e2 flips signs.
    g1 = a1 * e1
    g2 = a2 * e2
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = np.where(eps_eq > 0.0, 1.0 / eps_eq, 0.0)
    d_exx = inv * (g1 * (0.5 + 0.5 * cdir) + g2 * (0.5 - 0.5 * cdir))
    d_eyy = inv * (g1 * (0.5 - 0.5 * cdir) + g2 * (0.5 + 0.5 * cdir))
    # Conjugate to gamma_xy: half the tensorial-shear derivative.
    d_gxy = inv * (g1 * (0.5 * sdir) + g2 * (-0.5 * sdir))
    return eps_eq, np.stack([d_exx, d_eyy, d_gxy], axis=1)


def equivalent_strain(strain):
    """Scalar form of :func:`equivalent_strain_batch` for one tensor state.

    Returns (eps_eq, deriv) with deriv conjugate to engineering Voigt.
    """
    eq, dv = equivalent_strain_batch(strain.to_voigt()[None, :])
    return float(eq[0]), dv[0]


def mazars_damage(kappa, mat):
    """Mazars damage and its kappa-derivative.

    d(kappa) = 1 - kappa0 (1 - A) / kappa - A exp(-B (kappa - kappa0)) for
    kappa > kappa0, zero below. Continuous at kappa0, monotone, d in [0, 1).

    Parameters
    ----------
    kappa : float or ndarray
        History variable, must be non-negative.
    mat : Material

    Returns
    -------
    d, dd_dkappa : same shape as kappa
    """
    p = mat.mazars
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0.0):
        raise MaterialError("kappa must be non-negative")
    scalar = kappa.ndim == 0
    kappa = np.atleast_1d(kappa)
    d = np.zeros_like(kappa)
    dd = np.zeros_like(kappa)
    act = kappa > p.kappa0
    if np.any(act):
        k = kappa[act]
        expo = np.exp(-p.B * (k - p.kappa0))
        d[act] = 1.0 - p.kappa0 * (1.0 - p.A) / k - p.A * expo
        dd[act] = p.kappa0 * (1.0 - p.A) / (k * k) + p.A * p.B * expo
    if scalar:
        return float(d[0]), float(dd[0])
    return d, dd


@dataclass
class BoundaryConditions:
    """Dirichlet constraints and optional nodal point loads.

    ``dirichlet`` entries are (node_ids, dof, value): dof 0 is x, 1 is y.
    Values are the full prescribed displacement; load stepping scales them
    externally. Later entries win on conflicting dofs.
    """

    dirichlet: list = field(default_factory=list)
    point_loads: list = field(default_factory=list)

    def build(self, n_dofs):
        """Flatten to (fixed_dofs, fixed_values, load_vector)."""
        value = {}
        for node_ids, dof, val in self.dirichlet:
            for n in np.atleast_1d(np.asarray(node_ids, dtype=np.int64)):
                value[2 * int(n) + int(dof)] = float(val)
        fixed = np.array(sorted(value), dtype=np.int64)
        vals = np.array([value[d] for d in fixed])
        F = np.zeros(n_dofs)
        for node_ids, dof, val in self.point_loads:
            for n in np.atleast_1d(np.asarray(node_ids, dtype=np.int64)):
                F[2 * int(n) + int(dof)] += float(val)
        return fixed, vals, F

    def scaled(self, factor):
        """Copy with Dirichlet values (not loads) scaled by ``factor``."""
        return BoundaryConditions(
            dirichlet=[(ids, dof, val * factor) for ids, dof, val in self.dirichlet],
            point_loads=list(self.point_loads),
        )


def element_dofs(mesh, e):
    """Global dof ids of element ``e`` in (n0x, n0y, n1x, ...) order."""
    conn = mesh.elements[e]
    dofs = np.empty(8, dtype=np.int64)
    dofs[0::2] = 2 * conn
    dofs[1::2] = 2 * conn + 1
    return dofs


def b_matrix(dN_dx, dN_dy):
    """Strain-displacement matrix, (3, 8), engineering shear row."""
    B = np.zeros((3, 8))
    B[0, 0::2] = dN_dx
    B[1, 1::2] = dN_dy
    B[2, 0::2] = dN_dy
    B[2, 1::2] = dN_dx
    return B


def assemble_stiffness(mesh, mat, d_gp=None):
    """Global stiffness K = sum_e int B^T (1 - d) C B dOmega, CSR format.

    Parameters
    ----------
    mesh : Mesh
    mat : Material
    d_gp : (n_gauss,) ndarray, optional
        Damage per Gauss point; omitted means undamaged.
    """
    gt = mesh.gauss_points()
    if d_gp is None:
        d_gp = np.zeros(gt.n)
    C = constitutive_matrix(mat)
    ndof = mesh.n_dofs
    rows = np.empty(64 * mesh.n_elements, dtype=np.int64)
    cols = np.empty_like(rows)
    vals = np.empty(64 * mesh.n_elements)
    k = 0
    for e in range(mesh.n_elements):
        Ke = np.zeros((8, 8))
        for gp in range(4 * e, 4 * e + 4):
            B = b_matrix(gt.dN_dx[gp], gt.dN_dy[gp])
            Ke += (1.0 - d_gp[gp]) * gt.wdetJ[gp] * (B.T @ C @ B)
        dofs = element_dofs(mesh, e)
        rows[k:k + 64] = np.repeat(dofs, 8)
        cols[k:k + 64] = np.tile(dofs, 8)
        vals[k:k + 64] = Ke.ravel()
        k += 64
    K = sp.coo_matrix((vals, (rows, cols)), shape=(ndof, ndof)).tocsr()
    return K


def solve_displacement(K, bcs, n_dofs):
    """Solve K u = F under Dirichlet elimination.

    Returns
    -------
    u : (n_dofs,) ndarray
        Full displacement vector including prescribed entries.
    reactions : (n_dofs,) ndarray
        K u - F; nonzero only at constrained dofs up to solver residual.
    """
    fixed, vals, F = bcs.build(n_dofs)
    if fixed.size == 0:
        raise SingularSystemError("no Dirichlet constraints; system is singular")
    free = np.setdiff1d(np.arange(n_dofs, dtype=np.int64), fixed, assume_unique=True)
    u = np.zeros(n_dofs)
    u[fixed] = vals
    Kff = K[free][:, free].tocsc()
    rhs = F[free] - K[free][:, fixed] @ vals
    u[free] = _direct_solve(Kff, rhs)
    return u, K @ u - F


def _direct_solve(A, b):
    """Direct sparse solve with a checked relative residual."""
    if b.size == 0:
        return np.zeros(0)
    try:
        x = spsolve(A, b)
    except RuntimeError as err:  # SuperLU signals exact singularity this way
        raise SingularSystemError(str(err)) from err
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("direct solve produced non-finite entries")
    bnorm = np.linalg.norm(b)
    if bnorm > 0.0:
        resid = np.linalg.norm(A @ x - b) / bnorm
        if resid > _SOLVE_RTOL:
            raise SingularSystemError(f"solver residual {resid:.3e} exceeds {_SOLVE_RTOL:.1e}")
    return x


def strain_at_gps(mesh, u):
    """Engineering Voigt strain at every Gauss point, (n_gauss, 3)."""
    gt = mesh.gauss_points()
    eps = np.empty((gt.n, 3))
    for e in range(mesh.n_elements):
        ue = u[element_dofs(mesh, e)]
        for gp in range(4 * e, 4 * e + 4):
            eps[gp] = b_matrix(gt.dN_dx[gp], gt.dN_dy[gp]) @ ue
    return eps


def strain_at_point(mesh, u, elem, xi, eta):
    """Engineering Voigt strain at one parent point of one element."""
    _, dN_dx, dN_dy, _ = mesh.shape_eval(elem, xi, eta)
    ue = u[element_dofs(mesh, elem)]
    return b_matrix(dN_dx, dN_dy) @ ue
