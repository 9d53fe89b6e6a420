"""Parameter-to-observation maps binding fields, stepping and sensors.

An InputModel fixes how the stacked parameter vector z decomposes into an
optional fractional-order slot plus Karhunen-Loeve blocks, and how those
blocks become the physical coefficient fields.  ForwardModel turns that
into a callable G(z) on either the fine grid or a multiscale subspace.
"""

from __future__ import annotations

import numpy as np

from .fem import BoundaryCondition, ObservationOperator, ScalarField, StructuredMesh
from .randfield import (CorrelatedFieldSet, KLBasis, MixedFieldSpec,
                        realize_correlated, realize_field, realize_mixed)
from .surrogate import to_unit_interval
from .timestepping import FractionalScheme, TransientProblem

GAMMA_SLOT_BOUNDS = (0.005, 0.995)   # clamp for direct-coordinate optimization


class InputModel:
    """Decomposition of z into fractional order and coefficient-field blocks.

    layout "single": k = exp(Y1), q constant.
    layout "pair":   k = exp(Y1), q = exp(Y2), Y1/Y2 cross-correlated.
    layout "mixed":  k = exp of the indicator-stitched field, q constant.

    When gamma is inferred the first entry of z carries it, read either
    directly (gamma_transform "direct", used with box-supported samplers)
    or through the arctan squash onto (0, 1) ("arctan", used with Gaussian
    priors whose support is the whole real line).
    """

    def __init__(self, layout, mesh, gamma=None, gamma_transform="direct",
                 basis: KLBasis | None = None, field_set: CorrelatedFieldSet | None = None,
                 mixed_spec: MixedFieldSpec | None = None, q_value=1.0):
        if layout not in ("single", "pair", "mixed"):
            raise ValueError("unknown layout %r" % layout)
        if gamma is not None and not 0.0 < gamma < 1.0:
            raise ValueError("fixed gamma must lie in (0, 1)")
        if gamma_transform not in ("direct", "arctan"):
            raise ValueError("unknown gamma transform %r" % gamma_transform)
        self.layout = layout
        self.mesh = mesh
        self.gamma = gamma
        self.gamma_transform = gamma_transform
        self.basis = basis
        self.field_set = field_set
        self.mixed_spec = mixed_spec
        self.q_value = float(q_value)
        if layout == "single":
            self.n_field = basis.n_modes
        elif layout == "pair":
            self.n_field = field_set.n_z
        else:
            self.n_field = mixed_spec.n_z

    @property
    def infers_gamma(self):
        return self.gamma is None

    @property
    def n_z(self):
        return self.n_field + (1 if self.infers_gamma else 0)

    def with_gamma_transform(self, transform) -> "InputModel":
        return InputModel(self.layout, self.mesh, self.gamma, transform,
                          self.basis, self.field_set, self.mixed_spec,
                          self.q_value)

    def split(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_z,):
            raise ValueError("expected %d parameters, got shape %r"
                             % (self.n_z, z.shape))
        if self.infers_gamma:
            return z[0], z[1:]
        return self.gamma, z

    def gamma_of(self, z) -> float:
        raw, _ = self.split(z)
        if self.infers_gamma and self.gamma_transform == "arctan":
            return float(to_unit_interval(raw))
        return float(raw)

    def log_fields(self, z) -> dict:
        """Log-scale realizations keyed by role name."""
        _, zf = self.split(z)
        if self.layout == "single":
            return {"log_k": realize_field(self.basis, zf)}
        if self.layout == "pair":
            y1, y2 = realize_correlated(self.field_set, zf)
            return {"log_k": y1, "log_q": y2}
        return {"log_k": realize_mixed(self.mixed_spec, zf)}

    def k_field(self, z) -> ScalarField:
        return self.log_fields(z)["log_k"].exp()

    def q_field(self, z):
        if self.layout == "pair":
            return self.log_fields(z)["log_q"].exp()
        return self.q_value

    def coefficients(self, z):
        """(k, q) physical fields with a single realization pass."""
        logs = self.log_fields(z)
        k = logs["log_k"].exp()
        q = logs["log_q"].exp() if "log_q" in logs else self.q_value
        return k, q

    def k_from_field_block(self, z_field) -> ScalarField:
        """Physical permeability from the field block alone (offline use)."""
        z_field = np.asarray(z_field, dtype=float)
        if self.layout == "single":
            return realize_field(self.basis, z_field).exp()
        if self.layout == "pair":
            return realize_correlated(self.field_set, z_field)[0].exp()
        return realize_mixed(self.mixed_spec, z_field).exp()

    def prior_step_vector(self, base_step, gamma_step):
        """Finite-difference steps honoring the fractional-order slot."""
        h = np.full(self.n_z, float(base_step))
        if self.infers_gamma:
            h[0] = float(gamma_step)
        return h


class ForwardModel:
    """Callable z -> observation vector for a fixed discretization.

    With `space` None the fine model is solved; otherwise the transient
    problem is projected on the given multiscale basis (rows restricted to
    free nodes once, up front).
    """

    def __init__(self, model: InputModel, bc: BoundaryCondition,
                 obs: ObservationOperator, source, t_end, dt, space=None):
        n_steps = int(round(t_end / dt))
        if abs(n_steps * dt - t_end) > 1e-9 * t_end or n_steps < 1:
            raise ValueError("t_end must be an integer multiple of dt")
        self.model = model
        self.bc = bc
        self.obs = obs
        self.source = source
        self.t_end = float(t_end)
        self.dt = float(dt)
        self.n_steps = n_steps
        self.space = space
        self.R_free = None if space is None else space.R[bc.free_nodes]
        self.n_calls = 0

    @property
    def n_outputs(self):
        return self.obs.n_d

    @property
    def n_columns(self):
        return None if self.space is None else self.R_free.shape[1]

    def scheme_for(self, z) -> FractionalScheme:
        return FractionalScheme(self.model.gamma_of(z), self.dt, self.n_steps)

    def problem_for(self, z) -> TransientProblem:
        k, q = self.model.coefficients(z)
        return TransientProblem(self.model.mesh, self.bc, k, q, self.source)

    def __call__(self, z) -> np.ndarray:
        self.n_calls += 1
        prob = self.problem_for(z)
        scheme = self.scheme_for(z)
        if self.space is None:
            _, data = prob.solve_full(scheme, self.obs)
        else:
            _, data = prob.solve_reduced(self.R_free, scheme, self.obs)
        return data

    def solve(self, z, keep="all"):
        """Full trajectory access (fine nodal states either way)."""
        prob = self.problem_for(z)
        scheme = self.scheme_for(z)
        if self.space is None:
            return prob.solve_full(scheme, self.obs, keep=keep)
        traj, data = prob.solve_reduced(self.R_free, scheme, self.obs, keep=keep)
        return prob.downscale(self.R_free, traj), data
