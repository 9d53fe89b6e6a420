"""Spectral coarse spaces on structured grids.

Per coarse neighborhood the construction is: local Neumann eigenproblems
for a batch of coefficient samples (snapshots), a second eigenproblem in
snapshot coordinates at the sample mean (reduction), multiplication by a
coefficient-adapted partition of unity, and assembly of the global basis
matrix R.  R is offline: it depends on the coarse grid and the coefficient
prior only, never on observed data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import ScalarField, StructuredMesh, assemble_patch


class CoarseGrid:
    """Nested coarse partition with per-node neighborhoods.

    The fine grid must nest exactly (nx divisible by hx_cells, ny by
    hy_cells).  The neighborhood of a coarse node is the union of its
    adjacent coarse elements: 4 for interior nodes, 2 on edges, 1 at
    corners.
    """

    def __init__(self, mesh: StructuredMesh, hx_cells: int, hy_cells: int):
        if mesh.nx % hx_cells or mesh.ny % hy_cells:
            raise ValueError("fine grid %dx%d does not nest in coarse %dx%d"
                             % (mesh.nx, mesh.ny, hx_cells, hy_cells))
        self.mesh = mesh
        self.hx_cells = int(hx_cells)
        self.hy_cells = int(hy_cells)
        self.rx = mesh.nx // hx_cells          # fine cells per coarse cell
        self.ry = mesh.ny // hy_cells
        self.n_nodes = (hx_cells + 1) * (hy_cells + 1)
        x0, x1, y0, y1 = mesh.domain
        self.Hx = (x1 - x0) / hx_cells
        self.Hy = (y1 - y0) / hy_cells
        xs = np.linspace(x0, x1, hx_cells + 1)
        ys = np.linspace(y0, y1, hy_cells + 1)
        X, Y = np.meshgrid(xs, ys)
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])

        self._cell_elements = {}
        for b in range(hy_cells):
            for a in range(hx_cells):
                ii, jj = np.meshgrid(np.arange(a * self.rx, (a + 1) * self.rx),
                                     np.arange(b * self.ry, (b + 1) * self.ry))
                self._cell_elements[(a, b)] = (jj * mesh.nx + ii).ravel()

        self.neighborhood_cells = []
        self.neighborhood_elements = []
        self.neighborhood_nodes = []
        for c in range(self.n_nodes):
            I, J = c % (hx_cells + 1), c // (hx_cells + 1)
            cells = [(a, b) for a in (I - 1, I) for b in (J - 1, J)
                     if 0 <= a < hx_cells and 0 <= b < hy_cells]
            elems = np.sort(np.concatenate(
                [self._cell_elements[ab] for ab in cells]))
            nodes = np.unique(mesh.element_nodes[elems])
            self.neighborhood_cells.append(cells)
            self.neighborhood_elements.append(elems)
            self.neighborhood_nodes.append(nodes)

    def cell_elements(self, a, b):
        return self._cell_elements[(a, b)]

    def hat(self, node_id, x, y):
        """Bilinear coarse hat of one coarse node evaluated at points."""
        cx, cy = self.nodes[node_id]
        return (np.clip(1.0 - np.abs(x - cx) / self.Hx, 0.0, None)
                * np.clip(1.0 - np.abs(y - cy) / self.Hy, 0.0, None))

    def coarse_node_of_cell_corner(self, a, b, corner):
        """Coarse node id of one corner (SW,SE,NE,NW) of coarse cell (a,b)."""
        di, dj = [(0, 0), (1, 0), (1, 1), (0, 1)][corner]
        return (b + dj) * (self.hx_cells + 1) + (a + di)


def _local_eigenmodes(A, S, count, select, rank_tol=1e-10):
    """Generalized symmetric eigenpairs of (A, S) over a snapshot-free patch.

    Returns (values, vectors) of the requested end of the spectrum; S must
    be positive definite (guaranteed for k-weighted mass on a patch).
    """
    n = A.shape[0]
    count = min(count, n)
    if select == "smallest":
        idx = [0, count - 1]
    elif select == "largest":
        idx = [n - count, n - 1]
    else:
        raise ValueError("select must be 'smallest' or 'largest'")
    try:
        lam, vec = sla.eigh(A, S, subset_by_index=idx)
    except sla.LinAlgError as exc:
        raise RuntimeError("local eigensolve failed: %s" % exc) from exc
    if select == "largest":
        lam, vec = lam[::-1], vec[:, ::-1]
    return lam, _fix_mode_signs(vec)


def _fix_mode_signs(vec):
    for j in range(vec.shape[1]):
        col = vec[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            vec[:, j] = -col
    return vec


class SnapshotSpace:
    """Per-neighborhood stacks of sampled local eigenfunctions."""

    def __init__(self, coarse, blocks, draws, modes_per_sample, select):
        self.coarse = coarse
        self.blocks = blocks          # list of (n_local, n_mu*m_snap) arrays
        self.draws = np.asarray(draws, dtype=float)
        self.modes_per_sample = int(modes_per_sample)
        self.select = select

    @property
    def n_mu(self):
        return self.draws.shape[0]

    @property
    def mean_parameter(self):
        return self.draws.mean(axis=0)


def build_snapshots(coarse: CoarseGrid, k_of_z, draws, m_snap,
                    select="smallest") -> SnapshotSpace:
    """Sampled local eigenfunctions on every coarse neighborhood.

    k_of_z maps a parameter vector to the physical (positive) coefficient
    field; `draws` is the (n_mu, dim) array of prior samples.  On each
    neighborhood and sample the generalized problem A phi = lambda S phi is
    solved with the k-weighted stiffness A and k-weighted mass S under zero
    Neumann conditions, keeping m_snap modes per sample.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    k_elem_per_draw = [k_of_z(z).element_values() for z in draws]
    for j, vals in enumerate(k_elem_per_draw):
        if np.any(vals <= 0):
            raise ValueError("sample %d produced a nonpositive coefficient" % j)
    blocks = []
    for elems in coarse.neighborhood_elements:
        cols = []
        for k_elem in k_elem_per_draw:
            A, S, _ = assemble_patch(coarse.mesh, elems, k_elem)
            _, vec = _local_eigenmodes(A.toarray(), S.toarray(), m_snap, select)
            cols.append(vec)
        blocks.append(np.hstack(cols))
    return SnapshotSpace(coarse, blocks, draws, m_snap, select)


def reduce_snapshots(snap: SnapshotSpace, k_of_z, m_modes, select="smallest",
                     rank_tol=1e-10):
    """Spectral reduction of every snapshot block at the sample mean.

    Assembles the mean-coefficient forms, projects them into snapshot
    coordinates, drops numerically null snapshot directions, solves the
    reduced eigenproblem and lifts the kept modes back to fine nodes.
    Returns (modes per neighborhood, eigenvalues per neighborhood,
    dropped direction counts).
    """
    coarse = snap.coarse
    k_elem = k_of_z(snap.mean_parameter).element_values()
    all_modes, all_vals, dropped = [], [], []
    for elems, Rs in zip(coarse.neighborhood_elements, snap.blocks):
        A_bar, S_bar, _ = assemble_patch(coarse.mesh, elems, k_elem)
        A_s = Rs.T @ (A_bar @ Rs)
        S_s = Rs.T @ (S_bar @ Rs)
        gram_val, gram_vec = sla.eigh(0.5 * (S_s + S_s.T))
        keep = gram_val > rank_tol * gram_val[-1]
        dropped.append(int(np.sum(~keep)))
        W = gram_vec[:, keep] / np.sqrt(gram_val[keep])
        A_w = W.T @ (0.5 * (A_s + A_s.T)) @ W
        count = min(m_modes, A_w.shape[0])
        lam, vec = _local_eigenmodes(A_w, np.eye(A_w.shape[0]), count, select)
        modes = Rs @ (W @ vec)
        all_modes.append(_fix_mode_signs(modes))
        all_vals.append(lam)
    return all_modes, all_vals, dropped


def partition_of_unity(coarse: CoarseGrid, k: ScalarField):
    """Coefficient-adapted partition of unity over the coarse neighborhoods.

    On each coarse element the four corner hats are extended inside by the
    discrete k-harmonic solve with the hat trace as Dirichlet data; one
    factorization per element serves all four corners.  Returns one value
    array per coarse node aligned with its neighborhood node list.
    """
    mesh = coarse.mesh
    k_elem = k.element_values()
    if np.any(k_elem <= 0):
        raise ValueError("partition of unity requires a positive coefficient")
    chi = [np.zeros(nodes.size) for nodes in coarse.neighborhood_nodes]
    local_pos = [dict(zip(nodes.tolist(), range(nodes.size)))
                 for nodes in coarse.neighborhood_nodes]
    for b in range(coarse.hy_cells):
        for a in range(coarse.hx_cells):
            elems = coarse.cell_elements(a, b)
            A, _, nodes = assemble_patch(mesh, elems, k_elem)
            pts = mesh.nodes[nodes]
            x0c, x1c = pts[:, 0].min(), pts[:, 0].max()
            y0c, y1c = pts[:, 1].min(), pts[:, 1].max()
            tol = 1e-12 * max(coarse.Hx, coarse.Hy)
            on_bdry = ((np.abs(pts[:, 0] - x0c) < tol)
                       | (np.abs(pts[:, 0] - x1c) < tol)
                       | (np.abs(pts[:, 1] - y0c) < tol)
                       | (np.abs(pts[:, 1] - y1c) < tol))
            interior = np.flatnonzero(~on_bdry)
            bdry = np.flatnonzero(on_bdry)
            A_ii = A[interior][:, interior].tocsc()
            A_ib = A[interior][:, bdry]
            try:
                lu = spla.splu(A_ii)
            except RuntimeError as exc:
                raise RuntimeError("partition-of-unity solve failed on coarse "
                                   "cell (%d, %d): %s" % (a, b, exc)) from exc
            for corner in range(4):
                cnode = coarse.coarse_node_of_cell_corner(a, b, corner)
                vals = np.empty(nodes.size)
                vals[bdry] = coarse.hat(cnode, pts[bdry, 0], pts[bdry, 1])
                vals[interior] = lu.solve(-(A_ib @ vals[bdry])) \
                    if bdry.size else 0.0
                pos = local_pos[cnode]
                tgt = chi[cnode]
                for loc, g in enumerate(nodes):
                    tgt[pos[g]] = vals[loc]
    return chi


class MultiscaleSpace:
    """Global basis matrix R with per-neighborhood column bookkeeping."""

    def __init__(self, coarse, R, counts, meta=None):
        self.coarse = coarse
        self.R = R.tocsc()
        self.counts = list(counts)
        self.meta = dict(meta or {})
        if self.R.shape[1] != sum(self.counts):
            raise ValueError("column count mismatch")

    @property
    def n_columns(self):
        return self.R.shape[1]

    def truncate(self, m: int) -> "MultiscaleSpace":
        """Keep the first m modes of every neighborhood (nested subspace)."""
        keep, at = [], 0
        counts = []
        for c in self.counts:
            take = min(m, c)
            keep.extend(range(at, at + take))
            counts.append(take)
            at += c
        meta = dict(self.meta, truncated_to=m)
        return MultiscaleSpace(self.coarse, self.R[:, keep], counts, meta)

    def restrict_rows(self, rows) -> sp.csc_matrix:
        return self.R[rows]


def assemble_R(coarse: CoarseGrid, pou, modes, meta=None) -> MultiscaleSpace:
    """Stack chi_i * psi_ik columns, neighborhood-major then mode-minor."""
    rows, cols, data = [], [], []
    col = 0
    counts = []
    for nodes, chi, block in zip(coarse.neighborhood_nodes, pou, modes):
        for k in range(block.shape[1]):
            vals = chi * block[:, k]
            rows.append(nodes)
            cols.append(np.full(nodes.size, col))
            data.append(vals)
            col += 1
        counts.append(block.shape[1])
    R = sp.coo_matrix((np.concatenate(data),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(coarse.mesh.n_nodes, col)).tocsc()
    return MultiscaleSpace(coarse, R, counts, meta)


def build_space(coarse: CoarseGrid, k_of_z, prior_dim, n_mu, m_snap, m_modes,
                rng, select="smallest", meta=None) -> MultiscaleSpace:
    """Snapshots, reduction at the sample mean, partition of unity, R."""
    draws = rng.standard_normal((n_mu, prior_dim))
    snap = build_snapshots(coarse, k_of_z, draws, m_snap, select)
    modes, _, dropped = reduce_snapshots(snap, k_of_z, m_modes, select)
    pou = partition_of_unity(coarse, k_of_z(snap.mean_parameter))
    info = dict(meta or {}, n_mu=n_mu, m_snap=m_snap, m_modes=m_modes,
                select=select, dropped_snapshot_directions=sum(dropped))
    return assemble_R(coarse, pou, modes, info)


def project_operators(R, B, K, F):
    """Congruence-project mass/stiffness and the load onto the columns of R.

    Accepts sparse or dense R; returns dense reduced operators.
    """
    def proj(A):
        out = R.T @ (A @ R)
        return np.asarray(out.todense()) if sp.issparse(out) else np.asarray(out)

    F_r = R.T @ F
    if sp.issparse(F_r):
        F_r = np.asarray(F_r.todense()).ravel()
    return proj(B), proj(K), np.asarray(F_r).ravel()


def save_space(space: MultiscaleSpace, out_dir) -> None:
    """Sparse triplet CSV plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    coo = space.R.tocoo()
    np.savetxt(out / "basis_triplets.csv",
               np.column_stack([coo.row, coo.col, coo.data]),
               fmt="%d,%d,%.17g", delimiter=",")
    manifest = {
        "shape": list(space.R.shape),
        "counts": space.counts,
        "coarse": {"hx_cells": space.coarse.hx_cells,
                   "hy_cells": space.coarse.hy_cells},
        "mesh": {"nx": space.coarse.mesh.nx, "ny": space.coarse.mesh.ny,
                 "domain": list(space.coarse.mesh.domain)},
        "meta": space.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_space(out_dir) -> MultiscaleSpace:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    m = manifest["mesh"]
    mesh = StructuredMesh(m["nx"], m["ny"], tuple(m["domain"]))
    coarse = CoarseGrid(mesh, manifest["coarse"]["hx_cells"],
                        manifest["coarse"]["hy_cells"])
    trip = np.loadtxt(out / "basis_triplets.csv", delimiter=",")
    trip = np.atleast_2d(trip)
    R = sp.coo_matrix((trip[:, 2], (trip[:, 0].astype(int),
                                    trip[:, 1].astype(int))),
                      shape=tuple(manifest["shape"])).tocsc()
    return MultiscaleSpace(coarse, R, manifest["counts"], manifest["meta"])
