"""Structured quadrilateral meshes with bilinear shape functions.

Meshes are rectangles split into ``nx * ny`` equal quads, optionally with a
rectangular slit of removed elements (an edge notch). Element connectivity is
counter-clockwise, quadrature is the 2x2 Gauss rule, and boundary edges carry
unit outward normals. Meshes round-trip through JSON bit-exactly.
"""

import json

import numpy as np

# 2x2 Gauss rule on [-1, 1]^2: abscissae +-1/sqrt(3), unit weights.
GAUSS_1D = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))

# Local node coordinates, counter-clockwise from (-1, -1).
_LOCAL_NODES = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

# Local edge e joins local nodes e and (e + 1) % 4.
_EDGE_NODES = ((0, 1), (1, 2), (2, 3), (3, 0))

MESH_SCHEMA_VERSION = 1


class MeshError(ValueError):
    """Invalid mesh construction or a degenerate element."""


def shape_functions(xi, eta):
    """Bilinear shape functions and their parent-space gradients.

    Parameters
    ----------
    xi, eta : float
        Parent coordinates in [-1, 1].

    Returns
    -------
    N : (4,) ndarray
    dN_dxi : (4,) ndarray
    dN_deta : (4,) ndarray
    """
    N = 0.25 * np.array(
        [
            (1.0 - xi) * (1.0 - eta),
            (1.0 + xi) * (1.0 - eta),
            (1.0 + xi) * (1.0 + eta),
            (1.0 - xi) * (1.0 + eta),
        ]
    )
    dN_dxi = 0.25 * np.array([-(1.0 - eta), (1.0 - eta), (1.0 + eta), -(1.0 + eta)])
    dN_deta = 0.25 * np.array([-(1.0 - xi), -(1.0 + xi), (1.0 + xi), (1.0 - xi)])
    return N, dN_dxi, dN_deta


class Mesh:
    """Immutable structured quad mesh.

    Attributes
    ----------
    nodes : (n_nodes, 2) float ndarray
    elements : (n_elements, 4) int ndarray
        Counter-clockwise connectivity.
    boundary_elem, boundary_edge : (n_bedges,) int ndarrays
        Owning element and local edge id of each boundary edge.
    boundary_normal : (n_bedges, 2) float ndarray
        Unit outward normals.
    node_sets, edge_sets : dict[str, ndarray]
        Named node ids and indices into the boundary-edge arrays.
    meta : dict
        Generation parameters (width, height, nx, ny, notch) kept for
        provenance and refinement.
    """

    def __init__(self, nodes, elements, boundary_elem, boundary_edge,
                 boundary_normal, node_sets, edge_sets, meta):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.boundary_elem = np.ascontiguousarray(boundary_elem, dtype=np.int64)
        self.boundary_edge = np.ascontiguousarray(boundary_edge, dtype=np.int64)
        self.boundary_normal = np.ascontiguousarray(boundary_normal, dtype=float)
        self.node_sets = {k: np.ascontiguousarray(v, dtype=np.int64) for k, v in node_sets.items()}
        self.edge_sets = {k: np.ascontiguousarray(v, dtype=np.int64) for k, v in edge_sets.items()}
        self.meta = dict(meta)
        for arr in (self.nodes, self.elements, self.boundary_elem,
                    self.boundary_edge, self.boundary_normal):
            arr.setflags(write=False)
        self.validate()
        self._gauss = None

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def n_dofs(self):
        return 2 * self.n_nodes

    @property
    def n_gauss(self):
        return 4 * self.n_elements

    def validate(self):
        """Check connectivity ranges, element orientation and normal lengths."""
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= self.n_nodes):
            raise MeshError("element connectivity references a node out of range")
        if self.n_elements == 0:
            raise MeshError("mesh has no elements")
        used = np.zeros(self.n_nodes, dtype=bool)
        used[self.elements.ravel()] = True
        if not used.all():
            raise MeshError("mesh has unreferenced nodes")
        for e in range(self.n_elements):
            for xi, eta in ((0.0, 0.0),) + tuple((a, b) for a in GAUSS_1D for b in GAUSS_1D):
                _, _, _, detJ = self.shape_eval(e, xi, eta)
                if detJ <= 0.0:
                    raise MeshError(f"element {e} has non-positive Jacobian at ({xi}, {eta})")
        if self.boundary_normal.size:
            lengths = np.linalg.norm(self.boundary_normal, axis=1)
            if not np.allclose(lengths, 1.0, atol=1e-12):
                raise MeshError("boundary normal is not unit length")

    def shape_eval(self, elem, xi, eta):
        """Shape functions and physical gradients at one parent point.

        Returns
        -------
        N : (4,) ndarray
        dN_dx, dN_dy : (4,) ndarrays
            Gradients with respect to physical coordinates.
        detJ : float
        """
        N, dN_dxi, dN_deta = shape_functions(xi, eta)
        xy = self.nodes[self.elements[elem]]
        J = np.empty((2, 2))
        J[0, 0] = dN_dxi @ xy[:, 0]
        J[0, 1] = dN_dxi @ xy[:, 1]
        J[1, 0] = dN_deta @ xy[:, 0]
        J[1, 1] = dN_deta @ xy[:, 1]
        detJ = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
        if detJ <= 0.0:
            raise MeshError(f"element {elem} has non-positive Jacobian at ({xi}, {eta})")
        # Inverse Jacobian applied to parent gradients.
        inv00 = J[1, 1] / detJ
        inv01 = -J[0, 1] / detJ
        inv10 = -J[1, 0] / detJ
        inv11 = J[0, 0] / detJ
        dN_dx = inv00 * dN_dxi + inv01 * dN_deta
        dN_dy = inv10 * dN_dxi + inv11 * dN_deta
        return N, dN_dx, dN_dy, detJ

    def gauss_points(self):
        """Precomputed 2x2 quadrature table, cached per mesh.

        Returns
        -------
        GaussTable
            Arrays over all Gauss points in element-major, fixed local order.
        """
        if self._gauss is None:
            self._gauss = _build_gauss_table(self)
        return self._gauss

    def element_of_gauss(self, gp):
        return gp // 4

    def point_on_edge(self, bidx, s):
        """Parent coordinates of a point on boundary edge ``bidx``.

        ``s`` in [-1, 1] parameterizes the edge. Returns (elem, xi, eta).
        """
        e = int(self.boundary_edge[bidx])
        if e == 0:
            xi, eta = s, -1.0
        elif e == 1:
            xi, eta = 1.0, s
        elif e == 2:
            xi, eta = s, 1.0
        else:
            xi, eta = -1.0, s
        return int(self.boundary_elem[bidx]), xi, eta

    # ---- Serialization ----

    def to_dict(self):
        return {
            "schema_version": MESH_SCHEMA_VERSION,
            "meta": self.meta,
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "boundary": [
                {
                    "element": int(self.boundary_elem[i]),
                    "edge": int(self.boundary_edge[i]),
                    "normal": self.boundary_normal[i].tolist(),
                }
                for i in range(self.boundary_elem.shape[0])
            ],
            "sets": {
                "nodes": {k: v.tolist() for k, v in sorted(self.node_sets.items())},
                "edges": {k: v.tolist() for k, v in sorted(self.edge_sets.items())},
            },
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("schema_version") != MESH_SCHEMA_VERSION:
            raise MeshError(f"unsupported mesh schema version {data.get('schema_version')!r}")
        boundary = data["boundary"]
        return cls(
            nodes=np.array(data["nodes"], dtype=float).reshape(-1, 2),
            elements=np.array(data["elements"], dtype=np.int64).reshape(-1, 4),
            boundary_elem=np.array([b["element"] for b in boundary], dtype=np.int64),
            boundary_edge=np.array([b["edge"] for b in boundary], dtype=np.int64),
            boundary_normal=np.array([b["normal"] for b in boundary], dtype=float).reshape(-1, 2),
            node_sets={k: np.array(v, dtype=np.int64) for k, v in data["sets"]["nodes"].items()},
            edge_sets={k: np.array(v, dtype=np.int64) for k, v in data["sets"]["edges"].items()},
            meta=data.get("meta", {}),
        )

    def save(self, path):
        # json emits shortest-round-trip float text; reload is bit-exact.
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @property
    def mesh_id(self):
        m = self.meta
        tag = f"{m.get('nx', '?')}x{m.get('ny', '?')}"
        if m.get("notch"):
            tag += "n"
        return tag


class GaussTable:
    """Flat per-Gauss-point arrays for a mesh (element-major order)."""

    def __init__(self, elem, xi, eta, weight, coords, N, dN_dx, dN_dy, detJ):
        self.elem = elem
        self.xi = xi
        self.eta = eta
        self.weight = weight
        self.coords = coords
        self.N = N
        self.dN_dx = dN_dx
        self.dN_dy = dN_dy
        self.detJ = detJ

    @property
    def n(self):
        return self.elem.shape[0]

    @property
    def wdetJ(self):
        return self.weight * self.detJ


def _build_gauss_table(mesh):
    # Fixed local order: eta outer, xi inner.
    local = [(xi, eta) for eta in GAUSS_1D for xi in GAUSS_1D]
    n_gp = 4 * mesh.n_elements
    elem = np.repeat(np.arange(mesh.n_elements, dtype=np.int64), 4)
    xi_arr = np.empty(n_gp)
    eta_arr = np.empty(n_gp)
    weight = np.ones(n_gp)
    coords = np.empty((n_gp, 2))
    N_arr = np.empty((n_gp, 4))
    dN_dx = np.empty((n_gp, 4))
    dN_dy = np.empty((n_gp, 4))
    detJ = np.empty(n_gp)
    k = 0
    for e in range(mesh.n_elements):
        xy = mesh.nodes[mesh.elements[e]]
        for xi, eta in local:
            N, dx, dy, dj = mesh.shape_eval(e, xi, eta)
            xi_arr[k] = xi
            eta_arr[k] = eta
            coords[k] = N @ xy
            N_arr[k] = N
            dN_dx[k] = dx
            dN_dy[k] = dy
            detJ[k] = dj
            k += 1
    return GaussTable(elem, xi_arr, eta_arr, weight, coords, N_arr, dN_dx, dN_dy, detJ)


def build_rect_mesh(width, height, nx, ny, notch=None):
    """Build a structured quad mesh of a rectangle, optionally notched.

    Parameters
    ----------
    width, height : float
        Physical extents; the rectangle is [0, width] x [0, height].
    nx, ny : int
        Element counts per direction.
    notch : tuple (i0, i1, j0, j1), optional
        Inclusive element-index ranges of a rectangular slit to remove
        (columns i0..i1, rows j0..j1). The slit must stay inside the grid
        and must not disconnect the remaining elements.

    Returns
    -------
    Mesh
    """
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    if width <= 0.0 or height <= 0.0:
        raise MeshError("width and height must be positive")

    removed = np.zeros((nx, ny), dtype=bool)
    if notch is not None:
        i0, i1, j0, j1 = (int(v) for v in notch)
        if not (0 <= i0 <= i1 < nx and 0 <= j0 <= j1 < ny):
            raise MeshError(f"notch {notch} lies outside the {nx}x{ny} element grid")
        removed[i0:i1 + 1, j0:j1 + 1] = True
        if removed.all():
            raise MeshError("notch removes every element")

    keep = [(i, j) for j in range(ny) for i in range(nx) if not removed[i, j]]
    if notch is not None and not _connected(keep, nx, ny):
        raise MeshError(f"notch {notch} disconnects the mesh")

    def gid(i, j):
        return j * (nx + 1) + i

    grid_nodes = np.empty(((nx + 1) * (ny + 1), 2))
    for j in range(ny + 1):
        for i in range(nx + 1):
            grid_nodes[gid(i, j)] = (width * i / nx, height * j / ny)

    elements_g = np.array(
        [[gid(i, j), gid(i + 1, j), gid(i + 1, j + 1), gid(i, j + 1)] for (i, j) in keep],
        dtype=np.int64,
    )

    # Compact out nodes orphaned by the notch, preserving grid order.
    used = np.zeros(grid_nodes.shape[0], dtype=bool)
    used[elements_g.ravel()] = True
    new_id = np.cumsum(used) - 1
    nodes = grid_nodes[used]
    elements = new_id[elements_g]

    boundary_elem, boundary_edge, boundary_normal = _boundary_edges(nodes, elements)

    tol = 1e-12 * max(width, height)
    x, y = nodes[:, 0], nodes[:, 1]
    node_sets = {
        "bottom": np.flatnonzero(np.abs(y) <= tol),
        "top": np.flatnonzero(np.abs(y - height) <= tol),
        "left": np.flatnonzero(np.abs(x) <= tol),
        "right": np.flatnonzero(np.abs(x - width) <= tol),
        "bottom_right": np.flatnonzero((np.abs(y) <= tol) & (np.abs(x - width) <= tol)),
        "bottom_left": np.flatnonzero((np.abs(y) <= tol) & (np.abs(x) <= tol)),
    }

    edge_sets = _name_edge_sets(nodes, elements, boundary_elem, boundary_edge,
                                width, height, tol)

    meta = {
        "width": float(width),
        "height": float(height),
        "nx": int(nx),
        "ny": int(ny),
        "notch": list(int(v) for v in notch) if notch is not None else None,
    }
    return Mesh(nodes, elements, boundary_elem, boundary_edge, boundary_normal,
                node_sets, edge_sets, meta)


def refine_rect_mesh(mesh, factor=2):
    """Uniformly refined copy of a generated rectangle mesh.

    The notch is scaled in element indices so the removed physical region is
    unchanged. Only meshes built by :func:`build_rect_mesh` carry the needed
    metadata.
    """
    m = mesh.meta
    if "nx" not in m:
        raise MeshError("mesh has no generation metadata; cannot refine")
    notch = m.get("notch")
    if notch is not None:
        i0, i1, j0, j1 = notch
        notch = (factor * i0, factor * (i1 + 1) - 1, factor * j0, factor * (j1 + 1) - 1)
    return build_rect_mesh(m["width"], m["height"], factor * m["nx"], factor * m["ny"], notch)


def _connected(keep, nx, ny):
    """True when the kept element cells form one face-connected component."""
    alive = set(keep)
    if not alive:
        return False
    stack = [next(iter(alive))]
    seen = {stack[0]}
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = (i + di, j + dj)
            if nb in alive and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(alive)


def _boundary_edges(nodes, elements):
    """Boundary edges (owned by exactly one element) with outward normals."""
    count = {}
    owner = {}
    for e in range(elements.shape[0]):
        conn = elements[e]
        for le, (a, b) in enumerate(_EDGE_NODES):
            key = (min(conn[a], conn[b]), max(conn[a], conn[b]))
            count[key] = count.get(key, 0) + 1
            owner.setdefault(key, (e, le))
    belem, bedge, bnorm = [], [], []
    for e in range(elements.shape[0]):
        conn = elements[e]
        for le, (a, b) in enumerate(_EDGE_NODES):
            key = (min(conn[a], conn[b]), max(conn[a], conn[b]))
            if count[key] != 1:
                continue
            p0, p1 = nodes[conn[a]], nodes[conn[b]]
            t = p1 - p0
            length = np.hypot(t[0], t[1])
            if length <= 0.0:
                raise MeshError(f"element {e} edge {le} has zero length")
            # CCW element orientation puts the outward normal at (ty, -tx).
            bnorm.append((t[1] / length, -t[0] / length))
            belem.append(e)
            bedge.append(le)
    return (np.array(belem, dtype=np.int64),
            np.array(bedge, dtype=np.int64),
            np.array(bnorm, dtype=float).reshape(-1, 2))


def _name_edge_sets(nodes, elements, boundary_elem, boundary_edge, width, height, tol):
    sets = {"outer_bottom": [], "outer_top": [], "outer_left": [], "outer_right": [],
            "notch": []}
    for idx in range(boundary_elem.shape[0]):
        conn = elements[boundary_elem[idx]]
        a, b = _EDGE_NODES[boundary_edge[idx]]
        p0, p1 = nodes[conn[a]], nodes[conn[b]]
        if abs(p0[1]) <= tol and abs(p1[1]) <= tol:
            sets["outer_bottom"].append(idx)
        elif abs(p0[1] - height) <= tol and abs(p1[1] - height) <= tol:
            sets["outer_top"].append(idx)
        elif abs(p0[0]) <= tol and abs(p1[0]) <= tol:
            sets["outer_left"].append(idx)
        elif abs(p0[0] - width) <= tol and abs(p1[0] - width) <= tol:
            sets["outer_right"].append(idx)
        else:
            sets["notch"].append(idx)
    return {k: np.array(v, dtype=np.int64) for k, v in sets.items()}
