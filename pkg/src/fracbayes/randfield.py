"""Karhunen-Loeve parameterization of log-scale coefficient fields.

Covariance kernels are discretized node-collocated with mass-matrix
weighting so the eigenvectors come out orthonormal in the discrete L2 inner
product.  Realizations are linear in the coefficient vector z; correlated
pairs and indicator-mixed fields build on the single-field expansion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .fem import ScalarField, StructuredMesh, assemble_mass

KERNEL_FAMILIES = ("gaussian", "exponential")
# exponent normalizations for the exponential family: "half_l2" keeps the
# printed |dx| / (2 l^2) form, "per_l" is the conventional |dx| / l
EXPONENT_FORMS = ("half_l2", "per_l")


@dataclass(frozen=True)
class CovarianceKernel:
    """Separable covariance kernel with per-axis correlation lengths."""

    family: str
    lx: float
    ly: float
    sigma2: float = 1.0
    exponent_form: str = "half_l2"

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError("unknown kernel family %r" % self.family)
        if self.exponent_form not in EXPONENT_FORMS:
            raise ValueError("unknown exponent form %r" % self.exponent_form)
        if min(self.lx, self.ly, self.sigma2) <= 0.0:
            raise ValueError("lx, ly and sigma2 must be positive")

    def axis_factors(self, dx, dy):
        """Per-axis covariance factors; their product times sigma2 is cov."""
        dx, dy = np.abs(dx), np.abs(dy)
        if self.family == "gaussian":
            return np.exp(-dx ** 2 / (2 * self.lx ** 2)), \
                np.exp(-dy ** 2 / (2 * self.ly ** 2))
        if self.exponent_form == "half_l2":
            return np.exp(-dx / (2 * self.lx ** 2)), \
                np.exp(-dy / (2 * self.ly ** 2))
        return np.exp(-dx / self.lx), np.exp(-dy / self.ly)

    def __call__(self, pts_a, pts_b):
        fx, fy = self.axis_factors(pts_a[:, None, 0] - pts_b[None, :, 0],
                                   pts_a[:, None, 1] - pts_b[None, :, 1])
        return self.sigma2 * fx * fy

    def unit_variance(self) -> "CovarianceKernel":
        return CovarianceKernel(self.family, self.lx, self.ly, 1.0,
                                self.exponent_form)

    def to_dict(self):
        return {"family": self.family, "lx": self.lx, "ly": self.ly,
                "sigma2": self.sigma2, "exponent_form": self.exponent_form}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], d["lx"], d["ly"], d.get("sigma2", 1.0),
                   d.get("exponent_form", "half_l2"))


class KLBasis:
    """Truncated eigenpairs of a covariance operator plus a mean field.

    Eigenvalues are sorted descending; eigenvectors are orthonormal under
    the weight-1 FEM mass matrix and sign-fixed so the first component of
    nonnegligible magnitude is positive.
    """

    def __init__(self, mesh, kernel, eigenvalues, modes, mean, energy_ratio):
        self.mesh = mesh
        self.kernel = kernel
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.modes = np.asarray(modes, dtype=float)    # (n_nodes, n_modes)
        self.mean = np.asarray(mean, dtype=float)
        self.energy_ratio = float(energy_ratio)
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be non-increasing")
        if np.any(self.eigenvalues < 0):
            raise ValueError("negative eigenvalue retained")

    @property
    def n_modes(self):
        return self.eigenvalues.size

    def weighted_modes(self) -> np.ndarray:
        """Columns sqrt(lambda_i) e_i, the linear map from z to the field."""
        return self.modes * np.sqrt(self.eigenvalues)


def _fix_signs(modes):
    scale = np.abs(modes).max(axis=0)
    for j in range(modes.shape[1]):
        nz = np.flatnonzero(np.abs(modes[:, j]) > 1e-10 * scale[j])
        if nz.size and modes[nz[0], j] < 0:
            modes[:, j] = -modes[:, j]
    return modes


def build_kl(mesh: StructuredMesh, kernel: CovarianceKernel, n_modes: int,
             mean=0.0) -> KLBasis:
    """Discretize the covariance operator and keep the top n_modes pairs.

    The integral eigenproblem is collocated at the nodes and Galerkin
    weighted with the mass matrix M: solve M C M e = lambda M e, which
    yields M-orthonormal eigenvectors.  The reported energy ratio is
    sum(lambda) / (sigma2 |Omega|).
    """
    if n_modes > mesh.n_nodes:
        raise ValueError("n_modes exceeds node count")
    C = kernel(mesh.nodes, mesh.nodes)
    M = assemble_mass(mesh, 1.0).toarray()
    A = M @ C @ M
    A = 0.5 * (A + A.T)
    lam, vec = sla.eigh(A, M)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    lam_max = max(lam[0], np.finfo(float).tiny)
    if lam[-1] < -1e-10 * lam_max:
        raise ValueError("covariance discretization indefinite: min eigenvalue "
                         "%.3g of max %.3g" % (lam[-1], lam_max))
    lam_kept = np.clip(lam[:n_modes], 0.0, None)
    modes = _fix_signs(vec[:, :n_modes].copy())
    x0, x1, y0, y1 = mesh.domain
    area = (x1 - x0) * (y1 - y0)
    energy = float(lam_kept.sum() / (kernel.sigma2 * area))
    mean_vals = (np.full(mesh.n_nodes, float(mean))
                 if np.ndim(mean) == 0 else np.asarray(mean, dtype=float))
    return KLBasis(mesh, kernel, lam_kept, modes, mean_vals, energy)


def realize_field(basis: KLBasis, z) -> ScalarField:
    """Log-scale realization mean + sum sqrt(lambda_i) e_i z_i."""
    z = np.asarray(z, dtype=float)
    if z.shape != (basis.n_modes,):
        raise ValueError("expected %d coefficients, got shape %r"
                         % (basis.n_modes, z.shape))
    vals = basis.mean + basis.weighted_modes() @ z
    return ScalarField(basis.mesh, vals, "node")


def project_coefficients(basis: KLBasis, field: ScalarField) -> np.ndarray:
    """Invert realize_field via mass-weighted inner products."""
    M = assemble_mass(basis.mesh, 1.0)
    resid = field.values - basis.mean
    return (basis.modes.T @ (M @ resid)) / np.sqrt(basis.eigenvalues)


PAIR_MODES = ("cholesky", "lead_first", "lead_second")


class CorrelatedFieldSet:
    """Cross-correlated log fields sharing one coefficient vector.

    Each member field has its own unit-variance KL basis, standard
    deviation and mean.  Mode "cholesky" assembles field j as
    mean_j + sigma_j * sum_{k<=j} L[j,k] * S_k where S_k is the k-th
    normalized expansion and L the Cholesky factor of the correlation
    matrix.  The two-field modes "lead_first" and "lead_second" spell out
    the same construction with the named field's modes driving the shared
    component, matching the explicit layered / permeability-specific forms.
    """

    def __init__(self, bases, sigmas, rho, mode="cholesky"):
        if mode not in PAIR_MODES:
            raise ValueError("unknown correlation mode %r" % mode)
        if mode != "cholesky" and len(bases) != 2:
            raise ValueError("mode %r needs exactly two fields" % mode)
        self.bases = list(bases)
        self.sigmas = np.asarray(sigmas, dtype=float)
        self.mode = mode
        m = len(self.bases)
        if np.ndim(rho) == 0:
            if m != 2:
                raise ValueError("scalar rho needs exactly two fields")
            rho = np.array([[1.0, float(rho)], [float(rho), 1.0]])
        self.rho = np.asarray(rho, dtype=float)
        if self.rho.shape != (m, m) or not np.allclose(self.rho, self.rho.T):
            raise ValueError("correlation matrix must be symmetric %dx%d" % (m, m))
        if not np.allclose(np.diag(self.rho), 1.0):
            raise ValueError("correlation matrix needs a unit diagonal")
        try:
            self.chol = np.linalg.cholesky(self.rho)
        except np.linalg.LinAlgError as exc:
            raise ValueError("correlation matrix not positive definite") from exc
        self.block_sizes = [b.n_modes for b in self.bases]
        self.n_z = int(sum(self.block_sizes))

    def split(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_z,):
            raise ValueError("expected %d coefficients, got shape %r"
                             % (self.n_z, z.shape))
        out, at = [], 0
        for size in self.block_sizes:
            out.append(z[at:at + size])
            at += size
        return out


def realize_correlated(fset: CorrelatedFieldSet, z):
    """Realize every member field (log scale) from the stacked vector z."""
    blocks = fset.split(z)
    normalized = [b.weighted_modes() @ zb for b, zb in zip(fset.bases, blocks)]
    fields = []
    if fset.mode == "cholesky":
        for j, basis in enumerate(fset.bases):
            acc = np.zeros(basis.mesh.n_nodes)
            for k in range(j + 1):
                acc += fset.chol[j, k] * normalized[k]
            fields.append(basis.mean + fset.sigmas[j] * acc)
    else:
        r = fset.rho[0, 1]
        root = np.sqrt(1.0 - r * r)
        lead = 0 if fset.mode == "lead_first" else 1
        other = 1 - lead
        vals = [None, None]
        vals[lead] = fset.bases[lead].mean + fset.sigmas[lead] * normalized[lead]
        vals[other] = (fset.bases[other].mean
                       + fset.sigmas[other] * (r * normalized[lead]
                                               + root * normalized[other]))
        fields = vals
    return [ScalarField(b.mesh, v, "node") for b, v in zip(fset.bases, fields)]


class MixedFieldSpec:
    """Indicator-stitched field: one subfield per subdomain of a partition.

    Subdomains are unions of axis-aligned boxes; membership is decided at
    element midpoints so the partition is exact whenever box edges align
    with element boundaries.  Every element must land in exactly one
    subdomain.
    """

    def __init__(self, mesh: StructuredMesh, regions, field_set: CorrelatedFieldSet):
        if len(regions) != len(field_set.bases):
            raise ValueError("need one region (box list) per subfield")
        self.mesh = mesh
        self.regions = regions
        self.field_set = field_set
        mids = mesh.element_midpoints
        labels = np.full(mesh.n_elements, -1, dtype=int)
        for idx, boxes in enumerate(regions):
            inside = np.zeros(mesh.n_elements, dtype=bool)
            for x0, x1, y0, y1 in boxes:
                inside |= ((mids[:, 0] >= x0) & (mids[:, 0] <= x1)
                           & (mids[:, 1] >= y0) & (mids[:, 1] <= y1))
            taken = inside & (labels >= 0)
            if np.any(taken):
                raise ValueError("element %d covered by subdomains %d and %d"
                                 % (np.flatnonzero(taken)[0],
                                    labels[np.flatnonzero(taken)[0]], idx))
            labels[inside] = idx
        if np.any(labels < 0):
            bad = int(np.flatnonzero(labels < 0)[0])
            raise ValueError("element %d at midpoint %s not covered by any "
                             "subdomain" % (bad, mids[bad]))
        self.labels = labels

    @property
    def n_z(self):
        return self.field_set.n_z


def realize_mixed(spec: MixedFieldSpec, z) -> ScalarField:
    """Element-valued log field stitched from the subfields by indicator."""
    fields = realize_correlated(spec.field_set, z)
    per_elem = np.vstack([f.element_values() for f in fields])
    vals = per_elem[spec.labels, np.arange(spec.mesh.n_elements)]
    return ScalarField(spec.mesh, vals, "element")


def save_kl_basis(basis: KLBasis, out_dir) -> None:
    """Portable dump: eigenvalue CSV, per-mode CSVs, mean CSV, manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "eigenvalues.csv", basis.eigenvalues)
    np.savetxt(out / "mean.csv", basis.mean)
    for i in range(basis.n_modes):
        np.savetxt(out / ("mode_%03d.csv" % i), basis.modes[:, i])
    manifest = {
        "kernel": basis.kernel.to_dict(),
        "n_modes": basis.n_modes,
        "energy_ratio": basis.energy_ratio,
        "mesh": {"nx": basis.mesh.nx, "ny": basis.mesh.ny,
                 "domain": list(basis.mesh.domain)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_kl_basis(out_dir) -> KLBasis:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    m = manifest["mesh"]
    mesh = StructuredMesh(m["nx"], m["ny"], tuple(m["domain"]))
    lam = np.atleast_1d(np.loadtxt(out / "eigenvalues.csv"))
    modes = np.column_stack([np.loadtxt(out / ("mode_%03d.csv" % i))
                             for i in range(manifest["n_modes"])])
    mean = np.loadtxt(out / "mean.csv")
    return KLBasis(mesh, CovarianceKernel.from_dict(manifest["kernel"]),
                   lam, modes, mean, manifest["energy_ratio"])
