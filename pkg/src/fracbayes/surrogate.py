"""Least-squares polynomial-chaos surrogates of the reduced forward map.

Total-degree multi-index sets, orthonormal Legendre/Hermite tensor bases,
Monte-Carlo training designs drawn from the parameter measure, and a QR
least-squares fit of one coefficient column per observation entry.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import hermite_e as herm
from numpy.polynomial import legendre as leg

from .distributions import StandardGaussian, UniformBox

MAX_BASIS_SIZE = 2_000_000


class MultiIndexSet:
    """All multi-indices of total degree <= N in graded lexicographic order."""

    def __init__(self, degree: int, dim: int):
        if degree < 0 or dim < 1:
            raise ValueError("need degree >= 0 and dim >= 1")
        count = math.comb(degree + dim, dim)
        if count > MAX_BASIS_SIZE:
            raise ValueError("basis size %d exceeds the %d safety cap"
                             % (count, MAX_BASIS_SIZE))
        self.degree = int(degree)
        self.dim = int(dim)
        self.indices = np.array(
            sorted(_compositions_upto(degree, dim),
                   key=lambda idx: (sum(idx), idx)), dtype=int)
        assert self.indices.shape == (count, dim)

    @property
    def size(self):
        return self.indices.shape[0]

    def order_hash(self) -> str:
        return hashlib.sha256(self.indices.tobytes()).hexdigest()


def _compositions_upto(degree, dim):
    if dim == 1:
        for d in range(degree + 1):
            yield (d,)
        return
    for d in range(degree + 1):
        for rest in _compositions_upto(degree - d, dim - 1):
            yield (d,) + rest


def multi_indices(degree, dim) -> MultiIndexSet:
    return MultiIndexSet(degree, dim)


class LegendreFamily:
    """Legendre polynomials on [a, b], unit variance under U(a, b)."""

    name = "legendre"

    def __init__(self, a: float, b: float):
        if not b > a:
            raise ValueError("need b > a")
        self.a, self.b = float(a), float(b)

    def vandermonde(self, z, max_degree):
        xi = (2.0 * np.asarray(z, dtype=float) - self.a - self.b) / (self.b - self.a)
        V = leg.legvander(xi, max_degree)
        return V * np.sqrt(2.0 * np.arange(max_degree + 1) + 1.0)

    def to_dict(self):
        return {"name": self.name, "a": self.a, "b": self.b}


class HermiteFamily:
    """Probabilists' Hermite polynomials, unit variance under N(0, 1)."""

    name = "hermite"

    def vandermonde(self, z, max_degree):
        V = herm.hermevander(np.asarray(z, dtype=float), max_degree)
        norms = np.sqrt([math.factorial(m) for m in range(max_degree + 1)])
        return V / norms

    def to_dict(self):
        return {"name": self.name}


def families_for_measure(measure):
    """One univariate family per dimension matching the training measure."""
    if isinstance(measure, UniformBox):
        return [LegendreFamily(a, b)
                for a, b in zip(measure.lower, measure.upper)]
    if isinstance(measure, StandardGaussian):
        return [HermiteFamily() for _ in range(measure.dim)]
    raise TypeError("no polynomial family for measure %r" % measure)


def basis_matrix(mset: MultiIndexSet, families, Z) -> np.ndarray:
    """Evaluate all P basis functions at the points Z, shape (Q, P)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != mset.dim:
        raise ValueError("points have dimension %d, expected %d"
                         % (Z.shape[1], mset.dim))
    out = np.ones((Z.shape[0], mset.size))
    for d, fam in enumerate(families):
        V = fam.vandermonde(Z[:, d], mset.degree)
        out *= V[:, mset.indices[:, d]]
    return out


def eval_basis(mset, families, z) -> np.ndarray:
    """Basis vector at a single point; warns (does not reject) outside support."""
    z = np.asarray(z, dtype=float)
    for d, fam in enumerate(families):
        if isinstance(fam, LegendreFamily) and not fam.a <= z[d] <= fam.b:
            warnings.warn("coordinate %d = %g outside [%g, %g]; Legendre "
                          "evaluation extrapolates" % (d, z[d], fam.a, fam.b))
    return basis_matrix(mset, families, z[None, :])[0]


@dataclass
class Surrogate:
    """Fitted expansion: outputs(z) = coefficients' Phi(z)."""

    mset: MultiIndexSet
    families: list
    coefficients: np.ndarray     # (P, n_d)
    diagnostics: dict

    @property
    def n_outputs(self):
        return self.coefficients.shape[1]

    def __call__(self, z) -> np.ndarray:
        return basis_matrix(self.mset, self.families, np.asarray(z)[None, :])[0] \
            @ self.coefficients

    def eval_batch(self, Z) -> np.ndarray:
        return basis_matrix(self.mset, self.families, Z) @ self.coefficients


def fit_surrogate(forward, measure, mset: MultiIndexSet, rng,
                  n_train: int | None = None, max_resample: int = 100) -> Surrogate:
    """Draw training nodes, run the forward map, solve least squares via QR.

    n_train defaults to twice the basis size.  Forward failures are skipped
    and replaced by fresh draws from the measure (counted in diagnostics).
    """
    families = families_for_measure(measure)
    q = 2 * mset.size if n_train is None else int(n_train)
    if q < mset.size:
        raise ValueError("need at least %d training points, got %d"
                         % (mset.size, q))
    nodes, values = [], []
    failures = 0
    while len(nodes) < q:
        z = measure.sample(rng, 1)[0]
        try:
            g = np.asarray(forward(z), dtype=float)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite forward output")
        except Exception:
            failures += 1
            if failures > max_resample:
                raise RuntimeError("forward model failed %d times during "
                                   "surrogate training" % failures)
            continue
        nodes.append(z)
        values.append(g)
    Z = np.vstack(nodes)
    b = np.vstack(values)
    A = basis_matrix(mset, families, Z)
    coef, res, rank, svals = np.linalg.lstsq(A, b, rcond=None)
    fitted = A @ coef
    resid = float(np.linalg.norm(fitted - b))
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if rank < mset.size:
        warnings.warn("rank-deficient design matrix (rank %d of %d, condition "
                      "estimate %.3g)" % (rank, mset.size, cond))
    diagnostics = {"n_train": q, "training_residual": resid,
                   "condition_estimate": cond, "rank": int(rank),
                   "forward_failures": failures,
                   "measure": measure.to_dict()}
    return Surrogate(mset, families, coef, diagnostics)


def eval_surrogate(surrogate: Surrogate, z) -> np.ndarray:
    return surrogate(z)


def to_unit_interval(x):
    """Strictly increasing bijection of the real line onto (0, 1)."""
    return 0.5 + np.arctan(x) / np.pi


def from_unit_interval(y):
    """Inverse of to_unit_interval; defined strictly inside (0, 1)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0) or np.any(y >= 1.0):
        raise ValueError("argument must lie strictly inside (0, 1)")
    out = np.tan(np.pi * (y - 0.5))
    return float(out) if out.ndim == 0 else out


def save_surrogate(surrogate: Surrogate, out_dir, seed=None) -> None:
    """Coefficient CSV plus a JSON manifest describing the basis."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "coefficients.csv", surrogate.coefficients, delimiter=",")
    manifest = {
        "degree": surrogate.mset.degree,
        "dim": surrogate.mset.dim,
        "order_hash": surrogate.mset.order_hash(),
        "families": [f.to_dict() for f in surrogate.families],
        "n_outputs": surrogate.n_outputs,
        "diagnostics": surrogate.diagnostics,
        "seed": seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_surrogate(out_dir) -> Surrogate:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    mset = MultiIndexSet(manifest["degree"], manifest["dim"])
    if mset.order_hash() != manifest["order_hash"]:
        raise ValueError("multi-index ordering changed since this surrogate "
                         "was written")
    families = []
    for d in manifest["families"]:
        families.append(LegendreFamily(d["a"], d["b"])
                        if d["name"] == "legendre" else HermiteFamily())
    coef = np.loadtxt(out / "coefficients.csv", delimiter=",")
    coef = coef.reshape(mset.size, manifest["n_outputs"])
    return Surrogate(mset, families, coef, manifest["diagnostics"])
