"""Reference nonlocal damage solver and training-data snapshots.

The nonlocal equivalent strain field ebar solves the screened-Poisson
(Helmholtz) problem

    ebar - g * lap(ebar) = eps_eq   in the domain,
    grad(ebar) . n = 0              on the boundary,

discretized with the same bilinear elements as the displacement problem:
(M + g * Kdiff) ebar = M-projected eps_eq. The staggered solver alternates
equilibrium and Helmholtz solves with damage frozen per pass until the damage
field settles, committing the history variable kappa at each load step.

Snapshots freeze one converged load step into per-point rows used as
collocation data: interior rows at the 2x2 volume Gauss points, boundary rows
at 2-point Gauss points of each boundary edge.
"""

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .elasticity import (
    assemble_stiffness,
    equivalent_strain_batch,
    mazars_damage,
    solve_displacement,
    strain_at_point,
    strain_at_gps,
)
from .geometry import GAUSS_1D, Mesh

SNAPSHOT_SCHEMA_VERSION = 1
SNAPSHOT_COLUMNS = ("x", "y", "g", "eps_eq", "eps_bar_true", "is_boundary", "nx", "ny")

# Relative residual allowed on the Helmholtz solve.
_HELMHOLTZ_RTOL = 1.0e-10


class NonlocalSolveError(RuntimeError):
    """Staggered iteration failed to settle or a solve went bad."""


class SnapshotError(ValueError):
    """Malformed snapshot data or a missing load factor."""


class HelmholtzSystem:
    """Factorized Helmholtz operator for one mesh and interaction constant.

    Keeps the LU factors of A = M + g * Kdiff plus the Gauss-point projection
    and interpolation operators, so repeated solves inside the staggered loop
    reuse the factorization.
    """

    def __init__(self, mesh, g):
        if g < 0.0:
            raise NonlocalSolveError("interaction constant g must be non-negative")
        self.mesh = mesh
        self.g = float(g)
        M, Kd, P, E = _helmholtz_operators(mesh)
        self.A = (M + g * Kd).tocsc()
        self.project = P
        self.interp = E
        self._lu = splu(self.A)

    def solve(self, eps_eq_gp):
        """Nodal and Gauss-point nonlocal strain for Gauss-point data.

        Returns (ebar_nodal, ebar_gp). Raises if the checked relative
        residual exceeds the solver contract.
        """
        eps_eq_gp = np.asarray(eps_eq_gp, dtype=float)
        if eps_eq_gp.shape != (self.mesh.n_gauss,):
            raise NonlocalSolveError(
                f"expected {self.mesh.n_gauss} Gauss-point values, got {eps_eq_gp.shape}"
            )
        rhs = self.project @ eps_eq_gp
        ebar = self._lu.solve(rhs)
        bnorm = np.linalg.norm(rhs)
        if bnorm > 0.0:
            resid = np.linalg.norm(self.A @ ebar - rhs) / bnorm
            if resid > _HELMHOLTZ_RTOL:
                raise NonlocalSolveError(
                    f"Helmholtz residual {resid:.3e} exceeds {_HELMHOLTZ_RTOL:.1e}"
                )
        return ebar, self.interp @ ebar


def _helmholtz_operators(mesh):
    """Assemble (M, Kdiff, projection, interpolation) for a mesh."""
    gt = mesh.gauss_points()
    nn = mesh.n_nodes
    n_entries = 16 * mesh.n_elements
    rows = np.empty(n_entries, dtype=np.int64)
    cols = np.empty_like(rows)
    mvals = np.empty(n_entries)
    kvals = np.empty(n_entries)
    k = 0
    for e in range(mesh.n_elements):
        conn = mesh.elements[e]
        Me = np.zeros((4, 4))
        Ke = np.zeros((4, 4))
        for gp in range(4 * e, 4 * e + 4):
            w = gt.wdetJ[gp]
            N = gt.N[gp]
            Me += w * np.outer(N, N)
            Ke += w * (np.outer(gt.dN_dx[gp], gt.dN_dx[gp]) + np.outer(gt.dN_dy[gp], gt.dN_dy[gp]))
        rows[k:k + 16] = np.repeat(conn, 4)
        cols[k:k + 16] = np.tile(conn, 4)
        mvals[k:k + 16] = Me.ravel()
        kvals[k:k + 16] = Ke.ravel()
        k += 16
    M = sp.coo_matrix((mvals, (rows, cols)), shape=(nn, nn)).tocsr()
    Kd = sp.coo_matrix((kvals, (rows, cols)), shape=(nn, nn)).tocsr()

    # Projection of Gauss-point data to the weak-form right-hand side and
    # interpolation of nodal fields back to Gauss points.
    prow = mesh.elements[gt.elem].ravel()
    pcol = np.repeat(np.arange(gt.n, dtype=np.int64), 4)
    pval = (gt.N * gt.wdetJ[:, None]).ravel()
    P = sp.coo_matrix((pval, (prow, pcol)), shape=(nn, gt.n)).tocsr()
    E = sp.coo_matrix((gt.N.ravel(), (pcol, prow)), shape=(gt.n, nn)).tocsr()
    return M, Kd, P, E


def solve_helmholtz(mesh, g, eps_eq_gp):
    """One-shot Helmholtz solve; see :class:`HelmholtzSystem`."""
    return HelmholtzSystem(mesh, g).solve(eps_eq_gp)


@dataclass
class StepRecord:
    """Converged state of one load step of the staggered solver."""

    lf: float
    u: np.ndarray
    eps_eq: np.ndarray
    eps_bar_gp: np.ndarray
    eps_bar_nodal: np.ndarray
    kappa: np.ndarray
    d: np.ndarray
    passes: int


def staggered_nonlocal_solve(mesh, mat, bcs, schedule, tol=1.0e-8,
                             max_passes=150):
    """Run the staggered reference solver over a load schedule.

    Per load factor lf the Dirichlet values are bcs scaled by lf. Each step
    iterates equilibrium -> local strain -> Helmholtz -> damage with the
    damage frozen during the equilibrium solve, until max |d_new - d| < tol.
    kappa is committed (kappa := max(kappa, ebar)) once per converged step
    and never decreases.

    Returns
    -------
    list of StepRecord
    """
    schedule = [float(lf) for lf in schedule]
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise NonlocalSolveError("load schedule must be strictly increasing")
    helm = HelmholtzSystem(mesh, mat.g)
    kappa = np.zeros(mesh.n_gauss)
    d = np.zeros(mesh.n_gauss)
    records = []
    for step, lf in enumerate(schedule):
        step_bcs = bcs.scaled(lf)
        converged = False
        for p in range(max_passes):
            K = assemble_stiffness(mesh, mat, d)
            u, _ = solve_displacement(K, step_bcs, mesh.n_dofs)
            eps_eq, _ = equivalent_strain_batch(strain_at_gps(mesh, u))
            ebar_nodal, ebar_gp = helm.solve(eps_eq)
            kappa_it = np.maximum(kappa, ebar_gp)
            d_new, _ = mazars_damage(kappa_it, mat)
            delta = float(np.max(np.abs(d_new - d)))
            d = d_new
            if delta < tol:
                converged = True
                break
        if not converged:
            raise NonlocalSolveError(
                f"staggered iteration did not settle in {max_passes} passes "
                f"at step {step} (lf={lf}), last max|delta d|={delta:.3e}"
            )
        kappa = kappa_it
        records.append(
            StepRecord(lf=lf, u=u, eps_eq=eps_eq, eps_bar_gp=ebar_gp,
                       eps_bar_nodal=ebar_nodal, kappa=kappa.copy(), d=d.copy(),
                       passes=p + 1)
        )
    return records


@dataclass
class Snapshot:
    """Frozen per-point training data for one converged load step.

    Interior arrays are indexed by volume Gauss point, boundary arrays by
    (boundary edge, edge Gauss point). All strains are physical.
    """

    x: np.ndarray
    y: np.ndarray
    g: np.ndarray
    eps_eq: np.ndarray
    eps_bar_true: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    bg: np.ndarray
    beps_eq: np.ndarray
    beps_bar_true: np.ndarray
    bnx: np.ndarray
    bny: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def n_interior(self):
        return self.x.shape[0]

    @property
    def n_boundary(self):
        return self.bx.shape[0]

    @property
    def mean_eps_eq(self):
        return float(np.mean(self.eps_eq))

    def csv_bytes(self):
        """Canonical CSV encoding, 17-significant-digit decimals."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SNAPSHOT_COLUMNS)
        for i in range(self.n_interior):
            w.writerow([_f17(self.x[i]), _f17(self.y[i]), _f17(self.g[i]),
                        _f17(self.eps_eq[i]), _f17(self.eps_bar_true[i]), 0,
                        _f17(0.0), _f17(0.0)])
        for i in range(self.n_boundary):
            w.writerow([_f17(self.bx[i]), _f17(self.by[i]), _f17(self.bg[i]),
                        _f17(self.beps_eq[i]), _f17(self.beps_bar_true[i]), 1,
                        _f17(self.bnx[i]), _f17(self.bny[i])])
        return buf.getvalue().encode()

    def content_hash(self):
        return hashlib.sha256(self.csv_bytes()).hexdigest()

    def save(self, csv_path, manifest_path=None):
        data = self.csv_bytes()
        with open(csv_path, "wb") as fh:
            fh.write(data)
        if manifest_path is not None:
            manifest = dict(self.manifest)
            manifest["snapshot_hash"] = self.content_hash()
            with open(manifest_path, "w") as fh:
                json.dump(manifest, fh, indent=1, sort_keys=True)

    @classmethod
    def from_csv(cls, csv_path, manifest_path=None):
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != SNAPSHOT_COLUMNS:
                raise SnapshotError(f"bad snapshot header {header!r}")
            rows = [[float(v) for v in row] for row in reader]
        if not rows:
            raise SnapshotError("snapshot has no rows")
        arr = np.array(rows)
        interior = arr[arr[:, 5] == 0.0]
        boundary = arr[arr[:, 5] == 1.0]
        if interior.shape[0] == 0:
            raise SnapshotError("snapshot has no interior rows")
        manifest = {}
        if manifest_path is not None:
            with open(manifest_path) as fh:
                manifest = json.load(fh)
        return cls(
            x=interior[:, 0], y=interior[:, 1], g=interior[:, 2],
            eps_eq=interior[:, 3], eps_bar_true=interior[:, 4],
            bx=boundary[:, 0], by=boundary[:, 1], bg=boundary[:, 2],
            beps_eq=boundary[:, 3], beps_bar_true=boundary[:, 4],
            bnx=boundary[:, 6], bny=boundary[:, 7],
            manifest=manifest,
        )


def _f17(v):
    return format(float(v), ".17g")


def make_snapshot(mesh, mat, records, lf, extra_manifest=None):
    """Extract the collocation snapshot of one load step.

    Parameters
    ----------
    mesh : Mesh
    mat : Material
    records : list of StepRecord
        Output of :func:`staggered_nonlocal_solve`.
    lf : float
        Load factor to freeze; must match a record.

    Returns
    -------
    Snapshot
    """
    rec = None
    for r in records:
        if np.isclose(r.lf, lf, rtol=1e-12, atol=0.0):
            rec = r
            break
    if rec is None:
        avail = [r.lf for r in records]
        raise SnapshotError(f"load factor {lf} not in history; available: {avail}")

    gt = mesh.gauss_points()
    nb = mesh.boundary_elem.shape[0]
    bx = np.empty(2 * nb)
    by = np.empty(2 * nb)
    beq = np.empty(2 * nb)
    bbar = np.empty(2 * nb)
    bnx = np.empty(2 * nb)
    bny = np.empty(2 * nb)
    k = 0
    for bidx in range(nb):
        for s in GAUSS_1D:
            elem, xi, eta = mesh.point_on_edge(bidx, s)
            N, _, _, _ = mesh.shape_eval(elem, xi, eta)
            conn = mesh.elements[elem]
            xy = N @ mesh.nodes[conn]
            eps = strain_at_point(mesh, rec.u, elem, xi, eta)
            eq, _ = equivalent_strain_batch(eps[None, :])
            bx[k], by[k] = xy
            beq[k] = eq[0]
            bbar[k] = N @ rec.eps_bar_nodal[conn]
            bnx[k], bny[k] = mesh.boundary_normal[bidx]
            k += 1

    manifest = {
        "schema_version": SNAPSHOT_SCHEMA_VERSION,
        "kind": "snapshot",
        "lf": float(rec.lf),
        "mesh_id": mesh.mesh_id,
        "mesh_meta": mesh.meta,
        "material": mat.to_dict(),
        "n_interior": int(gt.n),
        "n_boundary": int(2 * nb),
        "mean_eps_eq": float(np.mean(rec.eps_eq)),
        "max_eps_eq": float(np.max(rec.eps_eq)),
        "max_eps_bar": float(np.max(rec.eps_bar_gp)),
        "staggered_passes": int(rec.passes),
    }
    if extra_manifest:
        manifest.update(extra_manifest)

    return Snapshot(
        x=gt.coords[:, 0].copy(), y=gt.coords[:, 1].copy(),
        g=np.full(gt.n, mat.g), eps_eq=rec.eps_eq.copy(),
        eps_bar_true=rec.eps_bar_gp.copy(),
        bx=bx, by=by, bg=np.full(2 * nb, mat.g), beps_eq=beq,
        beps_bar_true=bbar, bnx=bnx, bny=bny,
        manifest=manifest,
    )
