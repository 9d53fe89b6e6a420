"""Caputo-fractional time discretization and transient solve loops.

The fractional derivative of order gamma in (0,1) is discretized with
piecewise-linear history weights; each implicit step solves a system with
the constant operator B + dt^gamma Gamma(2-gamma) K, factored once, and a
right-hand side carrying the full (untruncated) history sum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import ScalarField, assemble_load, assemble_mass, assemble_stiffness, constrain


def caputo_weights(gamma: float, n: int):
    """History weights for the step with n known time levels.

    b_k = (n+1-k)^(1-gamma) - (n-k)^(1-gamma) for k = 1..n, and
    c_k = b_k - b_{k-1} with b_0 = 0.  b_n is exactly 1 for every n.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly in (0, 1)")
    if n < 1:
        raise ValueError("n must be at least 1")
    k = np.arange(1, n + 1, dtype=float)
    e = 1.0 - gamma
    b = (n + 1 - k) ** e - (n - k) ** e
    c = np.diff(b, prepend=0.0)
    return b, c


class FractionalScheme:
    """Fractional order, step size and cached history weights."""

    def __init__(self, gamma: float, dt: float, n_steps: int):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie strictly in (0, 1)")
        if dt <= 0.0 or n_steps < 1:
            raise ValueError("need dt > 0 and n_steps >= 1")
        self.gamma = float(gamma)
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        # j^(1-gamma) for j = 0..n_steps; b at step n is a reversed first
        # difference of this table, so weights cost O(n) per step.
        self._powers = np.arange(n_steps + 1, dtype=float) ** (1.0 - gamma)

    @property
    def lhs_coef(self) -> float:
        """dt^gamma * Gamma(2-gamma), the factor on K and the load."""
        return self.dt ** self.gamma * math.gamma(2.0 - self.gamma)

    def weights(self, n: int):
        """(b_1..b_n, c_1..c_n) for the step with n known levels."""
        if n < 1 or n > self.n_steps:
            raise ValueError("n out of range")
        b = (self._powers[1:n + 1] - self._powers[:n])[::-1]
        c = np.diff(b, prepend=0.0)
        return b, c

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass
class Trajectory:
    """Time stamps and per-level solution vectors (full nodal or reduced)."""

    times: np.ndarray
    states: np.ndarray          # (n_levels, dof)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.times.size != self.states.shape[0]:
            raise ValueError("level count mismatch")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0.0):
            raise ValueError("times must increase strictly from 0")


def step_full(scheme, n, mass, stiffness_solve, history, load):
    """One implicit step given the n known levels in `history`.

    `stiffness_solve` solves with B + dt^gamma Gamma(2-gamma) K; `history`
    is an (n, dof) array ordered oldest first; `load` is the load vector at
    the new time level.  Returns the new solution vector.
    """
    _, c = scheme.weights(n)
    rhs = mass @ (c @ history) + scheme.lhs_coef * load
    return stiffness_solve(rhs)


# reduced steps share the recurrence; the operators are dense and the load
# is already projected
step_reduced = step_full


def _march(scheme, mass, solve, u0, load_at):
    """Run the implicit recurrence; returns (n_steps+1, dof) level matrix."""
    dof = u0.size
    levels = np.empty((scheme.n_steps + 1, dof))
    levels[0] = u0
    for m in range(1, scheme.n_steps + 1):
        levels[m] = step_full(scheme, m, mass, solve, levels[:m],
                              load_at(m * scheme.dt))
    return levels


def _make_load_fn(mesh, source, free, lift):
    """Normalize the source argument to t -> free-restricted load vector.

    Accepts a constant, a nodal array, a ScalarField, or a callable of t
    returning any of those.  `lift` is the constant Dirichlet shift
    -K[free, constrained] @ values added to every load.
    """
    def lower(val):
        if isinstance(val, ScalarField):
            return assemble_load(mesh, val)
        arr = np.asarray(val, dtype=float)
        if arr.ndim == 0:
            return assemble_load(mesh, float(arr))
        return assemble_load(mesh, ScalarField(mesh, arr))

    if callable(source):
        return lambda t: lower(source(t))[free] + lift
    const = lower(source)[free] + lift
    return lambda t: const


class TransientProblem:
    """Bound mesh/coefficients/BC/source ready for repeated transient solves.

    The factorization of the constant left-hand operator happens once per
    `solve_full` / `solve_reduced` call; a problem instance is immutable and
    safe to share.
    """

    def __init__(self, mesh, bc, k, q, source, u0=None):
        self.mesh = mesh
        self.bc = bc
        self.k = k
        self.q = q
        self.source = source
        self.stiffness = assemble_stiffness(mesh, k)
        self.mass = assemble_mass(mesh, q)
        free, con = bc.free_nodes, bc.dirichlet_nodes
        self.K_ff = self.stiffness[free][:, free].tocsc()
        self.B_ff = self.mass[free][:, free].tocsr()
        if con.size:
            self.lift = -(self.stiffness[free][:, con] @ bc.dirichlet_values)
        else:
            self.lift = np.zeros(free.size)
        self.u0_full = (np.zeros(mesh.n_nodes) if u0 is None
                        else np.asarray(u0, dtype=float))

    def solve_full(self, scheme, obs=None, keep="obs"):
        """Fine-grid transient solve.

        Returns (Trajectory, observations or None).  With keep="obs" only
        the levels needed to interpolate the observation times are retained
        in the returned trajectory; keep="all" retains every level.
        """
        A = (self.B_ff + scheme.lhs_coef * self.K_ff).tocsc()
        try:
            solver = spla.splu(A)
        except RuntimeError as exc:
            raise RuntimeError(
                "singular transient operator (condition estimate %.3g): %s"
                % (_condition_estimate(A), exc)) from exc
        load_at = _make_load_fn(self.mesh, self.source, self.bc.free_nodes,
                                self.lift)
        levels = _march(scheme, self.B_ff, solver.solve,
                        self.u0_full[self.bc.free_nodes], load_at)
        keep_idx = _kept_levels(scheme, obs, keep)
        full = np.empty((keep_idx.size, self.mesh.n_nodes))
        for row, m in enumerate(keep_idx):
            full[row] = self.bc.scatter(levels[m])
        traj = Trajectory(scheme.times[keep_idx], full)
        data = obs.observe(traj) if obs is not None else None
        return traj, data

    def solve_reduced(self, R_free, scheme, obs=None, keep="obs"):
        """Transient solve projected on the columns of R_free.

        R_free has free-node rows only; the returned trajectory stores
        reduced coordinates.  Observations account for the (constant)
        Dirichlet part excluded from the reduced state.
        """
        Bt = np.asarray((R_free.T @ self.B_ff @ R_free).todense()) \
            if sp.issparse(R_free) else R_free.T @ (self.B_ff @ R_free)
        Kt = np.asarray((R_free.T @ self.K_ff @ R_free).todense()) \
            if sp.issparse(R_free) else R_free.T @ (self.K_ff @ R_free)
        A = Bt + scheme.lhs_coef * Kt
        try:
            chol = sla.cho_factor(A)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                "singular reduced operator (condition estimate %.3g): %s"
                % (np.linalg.cond(A), exc)) from exc
        solve = lambda rhs: sla.cho_solve(chol, rhs)
        base = _make_load_fn(self.mesh, self.source, self.bc.free_nodes,
                             self.lift)
        RT = R_free.T
        load_at = lambda t: RT @ base(t)
        u0_red = RT @ self.u0_full[self.bc.free_nodes]
        levels = _march(scheme, Bt, solve, np.asarray(u0_red).ravel(), load_at)
        keep_idx = _kept_levels(scheme, obs, keep)
        traj = Trajectory(scheme.times[keep_idx], levels[keep_idx])
        data = None
        if obs is not None:
            C_red = obs.matrix[:, self.bc.free_nodes] @ R_free
            if sp.issparse(C_red):
                C_red = np.asarray(C_red.todense())
            offset = obs.matrix[:, self.bc.dirichlet_nodes] @ self.bc.dirichlet_values
            from .fem import interp_observe
            data = interp_observe(traj, obs.times, C_red, offset)
        return traj, data

    def downscale(self, R_free, reduced_traj) -> Trajectory:
        """Lift a reduced trajectory back to full nodal vectors."""
        fine = np.empty((reduced_traj.times.size, self.mesh.n_nodes))
        for row, state in enumerate(reduced_traj.states):
            lifted = R_free @ state
            if sp.issparse(R_free):
                lifted = np.asarray(lifted).ravel()
            fine[row] = self.bc.scatter(lifted)
        return Trajectory(reduced_traj.times, fine)


def _kept_levels(scheme, obs, keep):
    if keep == "all" or obs is None:
        return np.arange(scheme.n_steps + 1)
    t = scheme.times
    idx = {0, scheme.n_steps}
    for tau in obs.times:
        lo = int(np.floor(tau / scheme.dt + 1e-9))
        idx.update((min(lo, scheme.n_steps), min(lo + 1, scheme.n_steps)))
    return np.array(sorted(idx))


def _condition_estimate(A):
    try:
        dense = A.toarray() if sp.issparse(A) else np.asarray(A)
        return float(np.linalg.cond(dense))
    except Exception:
        return float("nan")


def save_trajectory(traj: Trajectory, out_dir, gamma, dt, n_steps) -> None:
    """One CSV per time level plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (t, state) in enumerate(zip(traj.times, traj.states)):
        name = "level_%05d.csv" % i
        np.savetxt(out / name, state)
        names.append({"file": name, "time": float(t)})
    manifest = {"gamma": gamma, "dt": dt, "n_steps": n_steps, "levels": names}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_trajectory(out_dir) -> Trajectory:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    times = [lvl["time"] for lvl in manifest["levels"]]
    states = [np.loadtxt(out / lvl["file"]) for lvl in manifest["levels"]]
    return Trajectory(np.array(times), np.vstack(states))
