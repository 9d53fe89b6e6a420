"""Bayesian inversion for 2-D time-fractional diffusion at desk scale.

Library layout:

- fem: structured bilinear elements, assembly, boundary conditions, sensors
- timestepping: Caputo discretization and full/reduced transient solvers
- randfield: Karhunen-Loeve parameterization of log coefficient fields
- multiscale: spectral coarse spaces and operator projection
- optimize: regularized Levenberg-Marquardt and the intermediate box
- surrogate: least-squares polynomial-chaos response surfaces
- sampling: DREAM(ZS) MCMC, posterior statistics and intervals
- pipeline / cli: batch experiment driver
"""

__version__ = "0.1.0"
