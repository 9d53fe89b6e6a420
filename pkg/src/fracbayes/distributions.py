"""Parameter measures shared by the surrogate trainer and the sampler."""

from __future__ import annotations

import numpy as np


class UniformBox:
    """Product of independent uniforms on per-dimension intervals."""

    gpc_family = "legendre"

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower/upper must be matching 1-D arrays")
        if np.any(self.upper <= self.lower):
            raise ValueError("every upper bound must exceed its lower bound")
        self._log_volume = float(np.sum(np.log(self.upper - self.lower)))

    @property
    def dim(self):
        return self.lower.size

    def sample(self, rng, n):
        u = rng.random((n, self.dim))
        return self.lower + u * (self.upper - self.lower)

    def contains(self, z):
        z = np.asarray(z)
        return bool(np.all(z >= self.lower) and np.all(z <= self.upper))

    def log_pdf(self, z):
        return -self._log_volume if self.contains(z) else -np.inf

    def to_dict(self):
        return {"kind": "uniform_box", "lower": self.lower.tolist(),
                "upper": self.upper.tolist()}


class StandardGaussian:
    """Independent standard normals in every dimension."""

    gpc_family = "hermite"

    def __init__(self, dim):
        self.dim = int(dim)
        if self.dim < 1:
            raise ValueError("dim must be positive")

    def sample(self, rng, n):
        return rng.standard_normal((n, self.dim))

    def contains(self, z):
        return True

    def log_pdf(self, z):
        z = np.asarray(z, dtype=float)
        return float(-0.5 * z @ z - 0.5 * self.dim * np.log(2.0 * np.pi))

    def to_dict(self):
        return {"kind": "standard_gaussian", "dim": self.dim}


def measure_from_dict(d):
    if d["kind"] == "uniform_box":
        return UniformBox(np.array(d["lower"]), np.array(d["upper"]))
    if d["kind"] == "standard_gaussian":
        return StandardGaussian(d["dim"])
    raise ValueError("unknown measure kind %r" % d["kind"])
