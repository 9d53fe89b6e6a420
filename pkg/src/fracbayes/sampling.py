"""Gaussian likelihood, DREAM(ZS) sampling and posterior summaries.

The sampler runs several chains whose differential-evolution proposals draw
difference pairs from a growing archive of past states, with per-coordinate
subspace crossover.  Each chain owns an independent seeded RNG stream so
results are reproducible regardless of scheduling.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


class GaussianLikelihood:
    """Independent additive Gaussian noise of known standard deviation."""

    def __init__(self, data, sigma0, forward):
        self.data = np.asarray(data, dtype=float)
        if sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        self.sigma0 = float(sigma0)
        self.forward = forward
        self._norm = -0.5 * self.data.size * math.log(
            2.0 * math.pi * self.sigma0 ** 2)

    def log_density(self, z) -> float:
        g = np.asarray(self.forward(z), dtype=float)
        if g.shape != self.data.shape or not np.all(np.isfinite(g)):
            warnings.warn("forward output invalid at z=%s; likelihood -inf"
                          % np.asarray(z))
            return -np.inf
        misfit = self.data - g
        return self._norm - 0.5 * float(misfit @ misfit) / self.sigma0 ** 2


def log_likelihood(likelihood: GaussianLikelihood, z) -> float:
    return likelihood.log_density(z)


class Posterior:
    """Unnormalized log posterior: likelihood plus prior measure."""

    def __init__(self, likelihood, prior):
        self.likelihood = likelihood
        self.prior = prior

    def log_density(self, z) -> float:
        lp = self.prior.log_pdf(z)
        if lp == -np.inf:
            return -np.inf
        return self.likelihood.log_density(z) + lp


def log_posterior(likelihood, prior, z) -> float:
    return Posterior(likelihood, prior).log_density(z)


@dataclass
class DreamConfig:
    """Tuning constants of the archive-based differential-evolution sampler."""

    n_chains: int = 5
    n_pairs: int = 2             # difference pairs per proposal
    e_range: float = 0.01        # scale perturbation e ~ U(-e_range, e_range)
    eps_std: float = 1e-8        # additive jitter std
    n_cr: int = 8                # crossover levels m/n_cr, m = 1..n_cr
    archive_init: int | None = None   # default 10 * n_z
    n_generations: int = 1000
    unit_jump_every: int = 5     # full jump g = 1 at this cadence

    def __post_init__(self):
        if self.n_chains < 3:
            raise ValueError("need at least 3 chains")
        if not abs(self.e_range) < 1.0:
            raise ValueError("e_range must satisfy |e_range| < 1")
        if self.n_pairs < 1 or self.n_cr < 1:
            raise ValueError("n_pairs and n_cr must be positive")


class ChainEnsemble:
    """Chain states, archive and per-chain RNG streams for DREAM(ZS)."""

    def __init__(self, log_density, prior_sampler, n_z, cfg: DreamConfig, seed):
        self.log_density = log_density
        self.cfg = cfg
        self.n_z = int(n_z)
        streams = np.random.SeedSequence(seed).spawn(cfg.n_chains + 1)
        self.archive_rng = np.random.default_rng(streams[0])
        self.chain_rngs = [np.random.default_rng(s) for s in streams[1:]]
        n0 = cfg.archive_init if cfg.archive_init is not None else 10 * n_z
        if n0 < 2 * cfg.n_pairs:
            raise ValueError("archive too small for %d pairs" % cfg.n_pairs)
        self.archive = prior_sampler(self.archive_rng, n0)
        self.states = prior_sampler(self.archive_rng, cfg.n_chains)
        self.log_ps = np.array([log_density(z) for z in self.states])
        self.accepted = np.zeros(cfg.n_chains, dtype=int)
        self.proposed = np.zeros(cfg.n_chains, dtype=int)
        self.generation = 0

    def propose(self, i, unit_jump: bool):
        """Differential-evolution candidate for chain i from the archive."""
        cfg, rng = self.cfg, self.chain_rngs[i]
        rows = rng.choice(self.archive.shape[0], size=2 * cfg.n_pairs,
                          replace=False)
        r1 = self.archive[rows[:cfg.n_pairs]]
        r2 = self.archive[rows[cfg.n_pairs:]]
        cr = (rng.integers(1, cfg.n_cr + 1)) / cfg.n_cr
        active = rng.random(self.n_z) <= cr
        if not active.any():
            active[rng.integers(self.n_z)] = True
        n_active = int(active.sum())
        g = 1.0 if unit_jump else 2.38 / math.sqrt(2.0 * cfg.n_pairs * n_active)
        e = rng.uniform(-cfg.e_range, cfg.e_range, size=self.n_z)
        eps = rng.normal(0.0, cfg.eps_std, size=self.n_z)
        jump = (1.0 + e) * g * (r1.sum(axis=0) - r2.sum(axis=0)) + eps
        candidate = self.states[i].copy()
        candidate[active] += jump[active]
        return candidate, n_active

    def metropolis(self, i, candidate) -> bool:
        """Accept/reject the candidate for chain i; updates state and counters."""
        rng = self.chain_rngs[i]
        self.proposed[i] += 1
        logp = self.log_density(candidate)
        if logp == -np.inf and self.log_ps[i] == -np.inf:
            warnings.warn("both current and candidate density vanish for "
                          "chain %d" % i)
            return False
        if math.log(rng.random()) < logp - self.log_ps[i]:
            self.states[i] = candidate
            self.log_ps[i] = logp
            self.accepted[i] += 1
            return True
        return False

    def advance_generation(self):
        """One sweep over all chains followed by the archive append."""
        self.generation += 1
        unit = self.generation % self.cfg.unit_jump_every == 0
        flags = np.zeros(self.cfg.n_chains, dtype=bool)
        for i in range(self.cfg.n_chains):
            candidate, _ = self.propose(i, unit)
            flags[i] = self.metropolis(i, candidate)
        self.archive = np.vstack([self.states.copy(), self.archive])
        return flags


@dataclass
class DreamResult:
    """Stored states, acceptance bookkeeping and the post burn-in half."""

    samples: np.ndarray          # (generations, n_chains, n_z)
    log_posts: np.ndarray        # (generations, n_chains)
    accepted: np.ndarray         # (generations, n_chains) bool
    acceptance_rates: np.ndarray
    archive_size: int
    config: DreamConfig
    seed: int

    def retained(self) -> np.ndarray:
        """Second half of every chain, flattened to (n_kept, n_z)."""
        start = self.samples.shape[0] // 2
        kept = self.samples[start:]
        return kept.reshape(-1, kept.shape[-1])

    def retained_log_posts(self) -> np.ndarray:
        start = self.samples.shape[0] // 2
        return self.log_posts[start:].ravel()


def run_dream_zs(log_density, prior_sampler, n_z, cfg: DreamConfig,
                 seed: int) -> DreamResult:
    """Run the sampler; all randomness flows from `seed` via per-chain streams.

    `prior_sampler(rng, n)` supplies the initial population and archive.
    Every generation stores the current states of all chains and appends
    them to the archive.
    """
    ens = ChainEnsemble(log_density, prior_sampler, n_z, cfg, seed)
    samples = np.empty((cfg.n_generations, cfg.n_chains, n_z))
    logps = np.empty((cfg.n_generations, cfg.n_chains))
    flags = np.zeros((cfg.n_generations, cfg.n_chains), dtype=bool)
    for g in range(cfg.n_generations):
        flags[g] = ens.advance_generation()
        samples[g] = ens.states
        logps[g] = ens.log_ps
    rates = ens.accepted / np.maximum(ens.proposed, 1)
    return DreamResult(samples, logps, flags, rates, ens.archive.shape[0],
                       cfg, seed)


def posterior_stats(z_samples, realize_fn):
    """Nodewise mean and population (1/n) standard deviation of a pushforward.

    `realize_fn` maps one parameter vector to a value array (for instance a
    log-coefficient field); statistics are taken across the samples.
    """
    z_samples = np.atleast_2d(z_samples)
    if z_samples.shape[0] == 0:
        raise ValueError("no samples")
    acc = None
    acc2 = None
    for z in z_samples:
        vals = np.asarray(realize_fn(z), dtype=float)
        if acc is None:
            acc = np.zeros_like(vals)
            acc2 = np.zeros_like(vals)
        acc += vals
        acc2 += vals * vals
    n = z_samples.shape[0]
    mean = acc / n
    var = np.maximum(acc2 / n - mean ** 2, 0.0)
    return mean, np.sqrt(var)


def credible_interval(samples, alpha0: float):
    """Equal-tailed interval from the order statistics at ranks ceil(p*M)."""
    samples = np.sort(np.asarray(samples, dtype=float))
    m = samples.size
    if m * alpha0 / 2.0 < 1.0:
        raise ValueError("too few samples (%d) for alpha0 = %g" % (m, alpha0))
    lo_rank = int(np.ceil(m * alpha0 / 2.0))
    hi_rank = int(np.ceil(m * (1.0 - alpha0 / 2.0)))
    return samples[lo_rank - 1], samples[hi_rank - 1]


def prediction_interval(z_samples, response_fn, sigma0, alpha0, rng):
    """Noise-widened quantile band of a pushforward response.

    Each posterior sample is pushed through `response_fn` (scalar or vector
    output per response point) and independent N(0, sigma0^2) measurement
    noise is added before taking the empirical quantiles.  Returns
    (lower, upper) arrays over the response points.
    """
    z_samples = np.atleast_2d(z_samples)
    vals = np.vstack([np.atleast_1d(response_fn(z)) for z in z_samples])
    if sigma0 > 0:
        vals = vals + rng.normal(0.0, sigma0, size=vals.shape)
    lows, highs = [], []
    for col in vals.T:
        lo, hi = credible_interval(col, alpha0)
        lows.append(lo)
        highs.append(hi)
    return np.array(lows), np.array(highs)


def kl_estimate(z_samples, log_lik_approx, log_lik_full) -> float:
    """Divergence of the approximate posterior from the full-model posterior.

    Monte-Carlo estimate of E[log(L~/L)] + log E[L/L~] over samples of the
    approximate posterior; the second expectation uses log-sum-exp.
    """
    z_samples = np.atleast_2d(z_samples)
    la = np.array([log_lik_approx(z) for z in z_samples], dtype=float)
    lf = np.array([log_lik_full(z) for z in z_samples], dtype=float)
    finite = np.isfinite(la) & np.isfinite(lf)
    if not finite.any():
        raise ValueError("no finite likelihood evaluations")
    la, lf = la[finite], lf[finite]
    term1 = float(np.mean(la - lf))
    term2 = float(logsumexp(lf - la) - math.log(la.size))
    return term1 + term2


def save_chains(result: DreamResult, csv_path, diagnostics_path=None) -> None:
    """Chain CSV (generation, chain, z..., log posterior, accepted flag)."""
    g, c, n_z = result.samples.shape
    gen = np.repeat(np.arange(g), c)
    chain = np.tile(np.arange(c), g)
    flat = result.samples.reshape(g * c, n_z)
    rows = np.column_stack([gen, chain, flat,
                            result.log_posts.reshape(-1),
                            result.accepted.reshape(-1).astype(int)])
    header = ",".join(["generation", "chain"]
                      + ["z%d" % i for i in range(n_z)]
                      + ["log_posterior", "accepted"])
    np.savetxt(csv_path, rows, delimiter=",", header=header, comments="")
    if diagnostics_path is not None:
        diag = {
            "acceptance_per_chain": result.acceptance_rates.tolist(),
            "mean_acceptance": float(result.acceptance_rates.mean()),
            "archive_size": result.archive_size,
            "seed": result.seed,
            "config": {k: getattr(result.config, k)
                       for k in ("n_chains", "n_pairs", "e_range", "eps_std",
                                 "n_cr", "archive_init", "n_generations",
                                 "unit_jump_every")},
        }
        Path(diagnostics_path).write_text(json.dumps(diag, indent=2))


def load_chains(csv_path):
    """Returns (samples (G, C, n_z), log_posts, accepted) from a chain CSV."""
    raw = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    raw = np.atleast_2d(raw)
    gens = raw[:, 0].astype(int)
    chains = raw[:, 1].astype(int)
    g, c = gens.max() + 1, chains.max() + 1
    if raw.shape[0] != g * c:
        raise ValueError("malformed chain file: %d rows for %d generations x "
                         "%d chains" % (raw.shape[0], g, c))
    n_z = raw.shape[1] - 4
    order = np.lexsort((chains, gens))
    raw = raw[order]
    samples = raw[:, 2:2 + n_z].reshape(g, c, n_z)
    logps = raw[:, 2 + n_z].reshape(g, c)
    accepted = raw[:, 3 + n_z].reshape(g, c).astype(bool)
    return samples, logps, accepted
