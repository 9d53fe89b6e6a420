"""Structured bilinear finite elements on a rectangle.

Uniform quadrilateral grid, weighted mass/stiffness/load assembly with the
coefficient sampled per element, Dirichlet elimination that keeps operators
symmetric, and pointwise observation of transient solutions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_GAUSS = 1.0 / np.sqrt(3.0)
# quadrature points on the reference square [-1,1]^2, weights are all 1
_QPTS = np.array([(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS),
                  (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)])

EDGES = ("bottom", "top", "left", "right")


def shape_values(xi, eta):
    """Bilinear shape functions at (xi, eta), corner order SW, SE, NE, NW."""
    return 0.25 * np.array([(1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
                            (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)])


def shape_gradients(xi, eta):
    """Reference-coordinate gradients, rows (d/dxi, d/deta), columns per corner."""
    dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    return np.vstack([dxi, deta])


def element_matrices(hx, hy):
    """Unit-coefficient stiffness and mass matrices of one hx-by-hy rectangle.

    2x2 Gauss quadrature, exact for the bilinear integrands involved.
    Returns (Ke, Me), both 4x4 with corner order SW, SE, NE, NW.
    """
    Ke = np.zeros((4, 4))
    Me = np.zeros((4, 4))
    jac = hx * hy / 4.0
    for xi, eta in _QPTS:
        N = shape_values(xi, eta)
        G = shape_gradients(xi, eta)
        gx = G[0] * (2.0 / hx)
        gy = G[1] * (2.0 / hy)
        Ke += (np.outer(gx, gx) + np.outer(gy, gy)) * jac
        Me += np.outer(N, N) * jac
    return Ke, Me


class StructuredMesh:
    """Uniform rectangular grid of bilinear quadrilaterals.

    Nodes are numbered row-major with y as the outer index:
    node(i, j) = j*(nx+1) + i for i in 0..nx, j in 0..ny.
    """

    def __init__(self, nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0)):
        if nx < 1 or ny < 1:
            raise ValueError("nx and ny must be at least 1")
        x0, x1, y0, y1 = domain
        if not (x1 > x0 and y1 > y0):
            raise ValueError("degenerate domain %r" % (domain,))
        self.nx = int(nx)
        self.ny = int(ny)
        self.domain = (float(x0), float(x1), float(y0), float(y1))
        self.hx = (x1 - x0) / nx
        self.hy = (y1 - y0) / ny
        self.n_nodes = (nx + 1) * (ny + 1)
        self.n_elements = nx * ny

        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        X, Y = np.meshgrid(xs, ys)          # shape (ny+1, nx+1), y-outer
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])

        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
        sw = (jj * (nx + 1) + ii).ravel()
        self.element_nodes = np.column_stack(
            [sw, sw + 1, sw + nx + 2, sw + nx + 1])
        self.element_midpoints = self.nodes[self.element_nodes].mean(axis=1)

    def node_index(self, i, j):
        return j * (self.nx + 1) + i

    def edge_nodes(self, edge: str) -> np.ndarray:
        """Node ids on one boundary edge (corners included)."""
        nx, ny = self.nx, self.ny
        if edge == "bottom":
            return np.arange(nx + 1)
        if edge == "top":
            return ny * (nx + 1) + np.arange(nx + 1)
        if edge == "left":
            return np.arange(ny + 1) * (nx + 1)
        if edge == "right":
            return np.arange(ny + 1) * (nx + 1) + nx
        raise ValueError("unknown edge %r" % edge)

    def __eq__(self, other):
        return (isinstance(other, StructuredMesh) and self.nx == other.nx
                and self.ny == other.ny and self.domain == other.domain)

    def __repr__(self):
        return "StructuredMesh(%d, %d, domain=%r)" % (self.nx, self.ny, self.domain)


class ScalarField:
    """Nodal or per-element values of a scalar function on the fine grid."""

    def __init__(self, mesh: StructuredMesh, values, kind: str = "node"):
        if kind not in ("node", "element"):
            raise ValueError("kind must be 'node' or 'element'")
        values = np.asarray(values, dtype=float)
        expected = mesh.n_nodes if kind == "node" else mesh.n_elements
        if values.shape != (expected,):
            raise ValueError("expected %d %s values, got shape %r"
                             % (expected, kind, values.shape))
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        self.mesh = mesh
        self.values = values
        self.kind = kind

    @classmethod
    def constant(cls, mesh, value, kind="node"):
        n = mesh.n_nodes if kind == "node" else mesh.n_elements
        return cls(mesh, np.full(n, float(value)), kind)

    @classmethod
    def from_function(cls, mesh, fn, kind="node"):
        pts = mesh.nodes if kind == "node" else mesh.element_midpoints
        return cls(mesh, np.asarray(fn(pts[:, 0], pts[:, 1]), dtype=float), kind)

    def element_values(self) -> np.ndarray:
        """Per-element view: midpoint value of the bilinear interpolant."""
        if self.kind == "element":
            return self.values
        return self.values[self.mesh.element_nodes].mean(axis=1)

    def exp(self) -> "ScalarField":
        """Exponentiate a log-scale field to physical scale."""
        return ScalarField(self.mesh, np.exp(self.values), self.kind)

    def __add__(self, other):
        if isinstance(other, ScalarField):
            if other.kind != self.kind:
                raise ValueError("cannot add fields of different kinds")
            other = other.values
        return ScalarField(self.mesh, self.values + other, self.kind)


class BoundaryCondition:
    """Per-edge Dirichlet(value) or zero-Neumann tags with resolved node sets.

    Dirichlet wins at corners; among several Dirichlet edges meeting at a
    corner the later edge in the order bottom, top, left, right sets the value.
    """

    def __init__(self, mesh: StructuredMesh, edges: dict):
        for name in edges:
            if name not in EDGES:
                raise ValueError("unknown edge %r" % name)
        self.mesh = mesh
        self.edges = {name: edges.get(name, ("neumann",)) for name in EDGES}

        value = np.zeros(mesh.n_nodes)
        constrained = np.zeros(mesh.n_nodes, dtype=bool)
        for name in EDGES:
            tag = self.edges[name]
            if tag[0] == "dirichlet":
                ids = mesh.edge_nodes(name)
                constrained[ids] = True
                value[ids] = float(tag[1]) if len(tag) > 1 else 0.0
            elif tag[0] != "neumann":
                raise ValueError("unknown boundary tag %r" % (tag,))
        self.dirichlet_mask = constrained
        self.dirichlet_nodes = np.flatnonzero(constrained)
        self.free_nodes = np.flatnonzero(~constrained)
        self.dirichlet_values = value[constrained]

    @classmethod
    def all_dirichlet(cls, mesh, value=0.0):
        return cls(mesh, {e: ("dirichlet", value) for e in EDGES})

    @classmethod
    def all_neumann(cls, mesh):
        return cls(mesh, {})

    def full_values(self) -> np.ndarray:
        """Full-length vector holding Dirichlet values, zero at free nodes."""
        out = np.zeros(self.mesh.n_nodes)
        out[self.dirichlet_nodes] = self.dirichlet_values
        return out

    def scatter(self, u_free: np.ndarray) -> np.ndarray:
        """Assemble a full nodal vector from free values plus Dirichlet data."""
        out = self.full_values()
        out[self.free_nodes] = u_free
        return out


def _coefficient_per_element(mesh, coef, name, positive):
    if isinstance(coef, ScalarField):
        if coef.mesh != mesh:
            raise ValueError("%s field lives on a different mesh" % name)
        vals = coef.element_values()
    else:
        vals = np.full(mesh.n_elements, float(coef))
    if positive and np.any(vals <= 0.0):
        bad = int(np.argmin(vals))
        raise ValueError("%s must be strictly positive; offending element %d "
                         "at midpoint %s has value %g"
                         % (name, bad, mesh.element_midpoints[bad], vals[bad]))
    return vals


def _assemble(mesh, coef_elem, local):
    conn = mesh.element_nodes
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    data = (coef_elem[:, None, None] * local[None, :, :]).ravel()
    A = sp.coo_matrix((data, (rows, cols)),
                      shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    A.sum_duplicates()
    return A


def assemble_stiffness(mesh, k) -> sp.csr_matrix:
    """Weighted stiffness matrix for the form integral(k grad(u).grad(v)).

    k is a ScalarField (nodal fields are sampled at element midpoints) or a
    scalar; it must be strictly positive.
    """
    ke, _ = element_matrices(mesh.hx, mesh.hy)
    return _assemble(mesh, _coefficient_per_element(mesh, k, "k", True), ke)


def assemble_mass(mesh, q) -> sp.csr_matrix:
    """Weighted mass matrix for the form integral(q u v); q strictly positive."""
    _, me = element_matrices(mesh.hx, mesh.hy)
    return _assemble(mesh, _coefficient_per_element(mesh, q, "q", True), me)


def assemble_load(mesh, f) -> np.ndarray:
    """Load vector integral(f v_n) for nodal, per-element or constant f."""
    if isinstance(f, ScalarField):
        if f.kind == "node":
            _, me = element_matrices(mesh.hx, mesh.hy)
            return _assemble(mesh, np.ones(mesh.n_elements), me) @ f.values
        f_elem = f.values
    else:
        f_elem = np.full(mesh.n_elements, float(f))
    out = np.zeros(mesh.n_nodes)
    cell = f_elem * (mesh.hx * mesh.hy / 4.0)
    np.add.at(out, mesh.element_nodes.ravel(),
              np.repeat(cell, 4))
    return out


def assemble_patch(mesh, element_ids, coef_elem):
    """Stiffness and coef-weighted mass restricted to a set of elements.

    Returns (A, S, local_nodes) where local_nodes maps local to global node
    ids and both matrices are over the local numbering.  Used for the local
    Neumann eigenproblems and partition-of-unity solves of the coarse space.
    """
    element_ids = np.asarray(element_ids)
    conn = mesh.element_nodes[element_ids]
    local_nodes, local_conn = np.unique(conn, return_inverse=True)
    local_conn = local_conn.reshape(conn.shape)
    n = local_nodes.size
    ke, me = element_matrices(mesh.hx, mesh.hy)
    rows = np.repeat(local_conn, 4, axis=1).ravel()
    cols = np.tile(local_conn, (1, 4)).ravel()
    coef = np.asarray(coef_elem)[element_ids]
    A = sp.coo_matrix(((coef[:, None, None] * ke[None]).ravel(), (rows, cols)),
                      shape=(n, n)).tocsr()
    S = sp.coo_matrix(((coef[:, None, None] * me[None]).ravel(), (rows, cols)),
                      shape=(n, n)).tocsr()
    return A, S, local_nodes


def constrain(A, F, bc: BoundaryCondition):
    """Eliminate Dirichlet rows/columns symmetrically.

    Returns (A_ff, F_f) with the right-hand side lifted by the Dirichlet
    data: F_f = F[free] - A[free, constrained] @ values.
    """
    free, con = bc.free_nodes, bc.dirichlet_nodes
    A = A.tocsr()
    A_ff = A[free][:, free]
    F_f = F[free]
    if con.size:
        F_f = F_f - A[free][:, con] @ bc.dirichlet_values
    return A_ff, F_f


class ObservationOperator:
    """Pointwise sensors at fixed locations read at fixed times.

    Spatial readout is bilinear interpolation, temporal readout is linear
    interpolation between stored levels.  Observation vectors are flattened
    time-major: all sensors at the first time, then all sensors at the next.
    """

    def __init__(self, mesh: StructuredMesh, sensors, times):
        sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
        times = np.asarray(times, dtype=float)
        x0, x1, y0, y1 = mesh.domain
        eps = 1e-12 * max(x1 - x0, y1 - y0)
        if np.any(sensors[:, 0] < x0 - eps) or np.any(sensors[:, 0] > x1 + eps) \
                or np.any(sensors[:, 1] < y0 - eps) or np.any(sensors[:, 1] > y1 + eps):
            raise ValueError("sensor outside the computational domain")
        if np.any(times <= 0.0):
            raise ValueError("observation times must be positive")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("observation times must be strictly increasing")
        self.mesh = mesh
        self.sensors = sensors
        self.times = times
        self.matrix = self._interpolation_matrix(mesh, sensors)

    @property
    def n_sensors(self):
        return self.sensors.shape[0]

    @property
    def n_d(self):
        return self.n_sensors * self.times.size

    @staticmethod
    def _interpolation_matrix(mesh, pts):
        x0, _, y0, _ = mesh.domain
        ix = np.clip(((pts[:, 0] - x0) / mesh.hx).astype(int), 0, mesh.nx - 1)
        jy = np.clip(((pts[:, 1] - y0) / mesh.hy).astype(int), 0, mesh.ny - 1)
        xi = 2.0 * (pts[:, 0] - (x0 + ix * mesh.hx)) / mesh.hx - 1.0
        eta = 2.0 * (pts[:, 1] - (y0 + jy * mesh.hy)) / mesh.hy - 1.0
        weights = shape_values(xi, eta).T            # (n_pts, 4)
        conn = mesh.element_nodes[jy * mesh.nx + ix]  # (n_pts, 4)
        n_pts = pts.shape[0]
        rows = np.repeat(np.arange(n_pts), 4)
        return sp.coo_matrix((weights.ravel(), (rows, conn.ravel())),
                             shape=(n_pts, mesh.n_nodes)).tocsr()

    def observe(self, trajectory) -> np.ndarray:
        """Read the sensors from a fine-grid trajectory; length n_d output."""
        return interp_observe(trajectory, self.times, self.matrix)


def interp_observe(trajectory, times, matrix, offset=None) -> np.ndarray:
    """Linear-in-time readout of `matrix @ state` at the requested times.

    Works for fine trajectories (matrix over nodes) and reduced ones
    (matrix over reduced coordinates); `offset` adds a constant per-sensor
    shift such as the Dirichlet contribution excluded from reduced states.
    """
    stored = trajectory.times
    states = trajectory.states
    tol = 1e-9 * max(stored[-1], 1.0)
    if times[-1] > stored[-1] + tol:
        raise ValueError("observation time %g beyond stored horizon %g"
                         % (times[-1], stored[-1]))
    out = []
    for t in times:
        idx = np.searchsorted(stored, t - tol)
        if idx >= stored.size:
            idx = stored.size - 1
        if abs(stored[idx] - t) <= tol:
            state = states[idx]
        else:
            if idx == 0:
                raise ValueError("time %g precedes first stored level" % t)
            t0, t1 = stored[idx - 1], stored[idx]
            w = (t - t0) / (t1 - t0)
            state = (1.0 - w) * states[idx - 1] + w * states[idx]
        vals = matrix @ state
        if offset is not None:
            vals = vals + offset
        out.append(vals)
    return np.concatenate(out)


def save_field(field: ScalarField, csv_path, role: str = "") -> None:
    """Write one value per line (row-major, y-outer) plus a JSON sidecar."""
    csv_path = Path(csv_path)
    np.savetxt(csv_path, field.values)
    meta = {"nx": field.mesh.nx, "ny": field.mesh.ny,
            "domain": list(field.mesh.domain), "kind": field.kind,
            "role": role}
    csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_field(csv_path) -> ScalarField:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    mesh = StructuredMesh(meta["nx"], meta["ny"], tuple(meta["domain"]))
    values = np.loadtxt(csv_path)
    return ScalarField(mesh, values, meta["kind"])
