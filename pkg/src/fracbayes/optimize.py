"""Regularized Levenberg-Marquardt on the coarse reduced model.

The solver iterates z_{k+1} = z_k + (J'J + alpha I)^{-1} J' (d - G(z_k))
with a forward-difference Jacobian and fixed regularization, returns the
best iterate by residual, and feeds the asymptotic least-squares sampling
distribution from which the per-dimension intermediate box is built.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import UniformBox


@dataclass
class LMConfig:
    """Regularization, finite-difference steps and stopping control."""

    alpha: float = 0.01
    step: float | np.ndarray = 0.5
    max_iters: int = 50
    tol: float = 1e-6
    bounds: tuple | None = None      # optional (lower, upper) iterate clamp

    def step_vector(self, n_z):
        h = np.asarray(self.step, dtype=float)
        if h.ndim == 0:
            h = np.full(n_z, float(h))
        if h.shape != (n_z,) or np.any(h <= 0):
            raise ValueError("step must be a positive scalar or length-%d vector" % n_z)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        return h


def fd_jacobian(forward, z, h, base=None):
    """Forward-difference Jacobian, one forward solve per column.

    J[:, j] = (G(z + h_j eta_j) - G(z)) / h_j.  `base` may carry a
    precomputed G(z).
    """
    z = np.asarray(z, dtype=float)
    h = np.asarray(h, dtype=float)
    if h.ndim == 0:
        h = np.full(z.size, float(h))
    if base is None:
        base = forward(z)
    base = np.asarray(base, dtype=float)
    J = np.empty((base.size, z.size))
    for j in range(z.size):
        zp = z.copy()
        zp[j] += h[j]
        J[:, j] = (np.asarray(forward(zp)) - base) / h[j]
    return J


@dataclass
class LMResult:
    z_ols: np.ndarray
    residual_norms: list
    iterates: list
    converged: bool
    diverged: bool
    n_iters: int


def lm_solve(forward, data, z0, cfg: LMConfig) -> LMResult:
    """Run the fixed-regularization iteration, returning the best iterate.

    Stops when the relative residual decrease falls below cfg.tol, after
    cfg.max_iters iterations, or after the residual has grown for five
    consecutive iterations (reported as divergence).
    """
    data = np.asarray(data, dtype=float)
    z = np.asarray(z0, dtype=float).copy()
    h = cfg.step_vector(z.size)
    if data.size < z.size:
        warnings.warn("fewer observations (%d) than parameters (%d); the "
                      "least-squares problem is underdetermined"
                      % (data.size, z.size))

    def residual(zz):
        r = data - np.asarray(forward(zz), dtype=float)
        if not np.all(np.isfinite(r)):
            raise FloatingPointError("non-finite residual at iterate %s" % zz)
        return r

    r = residual(z)
    norms = [float(np.linalg.norm(r))]
    iterates = [z.copy()]
    best_z, best_norm = z.copy(), norms[0]
    grows = 0
    converged = diverged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        J = fd_jacobian(forward, z, h, base=data - r)
        JtJ = J.T @ J
        step = np.linalg.solve(JtJ + cfg.alpha * np.eye(z.size), J.T @ r)
        z = z + step
        if cfg.bounds is not None:
            z = np.clip(z, cfg.bounds[0], cfg.bounds[1])
        r = residual(z)
        norms.append(float(np.linalg.norm(r)))
        iterates.append(z.copy())
        if norms[-1] < best_norm:
            best_z, best_norm = z.copy(), norms[-1]
        if norms[-1] > norms[-2]:
            grows += 1
            if grows >= 5:
                diverged = True
                warnings.warn("residual grew for 5 consecutive iterations; "
                              "stopping at the best iterate")
                break
        else:
            grows = 0
        denom = max(norms[-2], np.finfo(float).tiny)
        if (norms[-2] - norms[-1]) / denom < cfg.tol and norms[-1] <= norms[-2]:
            converged = True
            break
    return LMResult(best_z, norms, iterates, converged, diverged, it)


@dataclass
class SamplingDistribution:
    """Asymptotic law of the least-squares estimator at the optimum."""

    z_ols: np.ndarray
    sigma2_ols: float
    delta: np.ndarray            # diagonal of (J'J)^{-1}
    covariance: np.ndarray       # sigma2_ols * (J'J)^{-1}
    n_d: int

    @property
    def sigma_ols(self):
        return float(np.sqrt(self.sigma2_ols))

    def half_widths(self):
        """The two-sigma interval radii 2 sigma_OLS sqrt(delta_k)."""
        return 2.0 * self.sigma_ols * np.sqrt(self.delta)


def sampling_distribution(forward, z_ols, data, h) -> SamplingDistribution:
    """Residual variance and covariance sigma2 (J'J)^{-1} at z_ols."""
    z_ols = np.asarray(z_ols, dtype=float)
    data = np.asarray(data, dtype=float)
    n_d, n_z = data.size, z_ols.size
    if n_d <= n_z:
        raise ValueError("sigma2_OLS undefined: need more observations (%d) "
                         "than parameters (%d)" % (n_d, n_z))
    r = data - np.asarray(forward(z_ols), dtype=float)
    sigma2 = float(r @ r) / (n_d - n_z)
    J = fd_jacobian(forward, z_ols, h)
    JtJ = J.T @ J
    rank = np.linalg.matrix_rank(JtJ)
    if rank < n_z:
        warnings.warn("Jacobian rank-deficient (%d < %d); using pseudo-inverse"
                      % (rank, n_z))
        inv = np.linalg.pinv(JtJ)
    else:
        inv = np.linalg.inv(JtJ)
    inv = 0.5 * (inv + inv.T)
    return SamplingDistribution(z_ols, sigma2, np.diag(inv).copy(),
                                sigma2 * inv, n_d)


@dataclass
class IntermediateDistribution:
    """Per-dimension uniform box around z_OLS with adjustment provenance."""

    lower: np.ndarray
    upper: np.ndarray
    raw_half_widths: np.ndarray
    floored: np.ndarray          # True where the unit floor replaced 2s*sqrt(d)
    overrides: dict

    def to_box(self) -> UniformBox:
        return UniformBox(self.lower, self.upper)

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "raw_half_widths": self.raw_half_widths.tolist(),
                "floored": self.floored.tolist(),
                "overrides": {str(k): list(v) for k, v in self.overrides.items()}}


def build_intermediate(sd: SamplingDistribution,
                       overrides: dict | None = None) -> IntermediateDistribution:
    """Box z_OLS +- nu with nu = max(1, 2 sigma_OLS sqrt(delta_k)).

    `overrides` maps a dimension index to a fixed (lower, upper) interval
    applied after the adjustment, e.g. {0: (0.0, 1.0)} for a fractional
    order known to live in the unit interval.
    """
    raw = sd.half_widths()
    nu = np.where(raw <= 1.0, 1.0, raw)
    lower = sd.z_ols - nu
    upper = sd.z_ols + nu
    overrides = dict(overrides or {})
    for dim, (lo, hi) in overrides.items():
        lower[dim], upper[dim] = float(lo), float(hi)
    return IntermediateDistribution(lower, upper, raw, raw <= 1.0, overrides)


def save_report(path, result: LMResult, sd: SamplingDistribution,
                inter: IntermediateDistribution, extra=None) -> None:
    """Optimization report: iterate residuals, estimates and the box."""
    report = {
        "residual_norms": result.residual_norms,
        "z_ols": result.z_ols.tolist(),
        "converged": result.converged,
        "diverged": result.diverged,
        "n_iters": result.n_iters,
        "sigma2_ols": sd.sigma2_ols,
        "delta": sd.delta.tolist(),
        "intermediate": inter.to_dict(),
    }
    report.update(extra or {})
    Path(path).write_text(json.dumps(report, indent=2))
