"""Batch experiment driver: synthetic data, inversion stages, statistics.

A single JSON config describes the experiment.  Every stage persists its
artifacts under the configured output directory and records them (with
content hashes and timings) in run_manifest.json, so later stages resume
from files instead of silently recomputing earlier ones.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import jsonschema

from . import fem, multiscale, optimize, randfield, sampling, surrogate
from .distributions import StandardGaussian, UniformBox
from .forward import GAMMA_SLOT_BOUNDS, ForwardModel, InputModel
from .timestepping import save_trajectory


class ConfigError(Exception):
    """Invalid or missing configuration; maps to exit code 2."""


class StageFailure(Exception):
    """A pipeline stage could not run; maps to exit code 3."""


STAGES = ("synth", "space", "optimize", "surrogate", "sample", "stats")

_KERNEL_SCHEMA = {
    "type": "object",
    "properties": {
        "family": {"enum": ["gaussian", "exponential"]},
        "lx": {"type": "number", "exclusiveMinimum": 0},
        "ly": {"type": "number", "exclusiveMinimum": 0},
        "sigma2": {"type": "number", "exclusiveMinimum": 0},
        "exponent_form": {"enum": ["half_l2", "per_l"]},
    },
    "required": ["family", "lx", "ly"],
    "additionalProperties": False,
}

_FIELD_SCHEMA = {
    "type": "object",
    "properties": {
        "kernel": _KERNEL_SCHEMA,
        "n_modes": {"type": "integer", "minimum": 1},
        "mean": {"type": ["number", "string"]},
    },
    "required": ["kernel", "n_modes"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "mesh": {
            "type": "object",
            "properties": {
                "fine": {"type": "array", "items": {"type": "integer", "minimum": 1},
                         "minItems": 2, "maxItems": 2},
                "coarse": {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 2, "maxItems": 2},
                "domain": {"type": "array", "items": {"type": "number"},
                           "minItems": 4, "maxItems": 4},
            },
            "required": ["fine", "coarse"],
            "additionalProperties": False,
        },
        "time": {
            "type": "object",
            "properties": {
                "t_end": {"type": "number", "exclusiveMinimum": 0},
                "dt_data": {"type": "number", "exclusiveMinimum": 0},
                "dt_solver": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["t_end", "dt_data", "dt_solver"],
            "additionalProperties": False,
        },
        "boundary": {
            "type": "object",
            "patternProperties": {
                "^(bottom|top|left|right)$": {
                    "oneOf": [{"enum": ["neumann", "dirichlet"]},
                              {"type": "array",
                               "prefixItems": [{"enum": ["dirichlet"]},
                                               {"type": "number"}],
                               "minItems": 2, "maxItems": 2}]}
            },
            "additionalProperties": False,
        },
        "source": {"type": "number"},
        "noise_sigma": {"type": "number", "minimum": 0},
        "gamma": {
            "oneOf": [{"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                      {"type": "object",
                       "properties": {
                           "infer": {"const": True},
                           "true_value": {"type": "number",
                                          "exclusiveMinimum": 0,
                                          "exclusiveMaximum": 1}},
                       "required": ["infer", "true_value"],
                       "additionalProperties": False}]
        },
        "inputs": {
            "type": "object",
            "properties": {
                "layout": {"enum": ["single", "pair", "mixed"]},
                "permeability": _FIELD_SCHEMA,
                "specific": {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                                       _FIELD_SCHEMA]},
                "subfields": {"type": "array", "items": _FIELD_SCHEMA,
                              "minItems": 2, "maxItems": 2},
                "regions": {"type": "array",
                            "items": {"type": "array",
                                      "items": {"type": "array",
                                                "items": {"type": "number"},
                                                "minItems": 4, "maxItems": 4}}},
                "correlation": {
                    "type": "object",
                    "properties": {
                        "rho": {"type": "number", "exclusiveMinimum": -1,
                                "exclusiveMaximum": 1},
                        "mode": {"enum": ["cholesky", "lead_first", "lead_second"]},
                    },
                    "required": ["rho"],
                    "additionalProperties": False,
                },
            },
            "required": ["layout"],
            "additionalProperties": False,
        },
        "observation": {
            "type": "object",
            "properties": {
                "sensor_grid": {
                    "type": "object",
                    "properties": {
                        "nx": {"type": "integer", "minimum": 1},
                        "ny": {"type": "integer", "minimum": 1},
                        "extent": {"type": "array", "items": {"type": "number"},
                                   "minItems": 4, "maxItems": 4},
                    },
                    "required": ["nx", "ny", "extent"],
                    "additionalProperties": False,
                },
                "sensors": {"type": "array",
                            "items": {"type": "array", "items": {"type": "number"},
                                      "minItems": 2, "maxItems": 2}},
                "times": {
                    "oneOf": [{"type": "array", "items": {"type": "number"}},
                              {"type": "object",
                               "properties": {"start": {"type": "number"},
                                              "stop": {"type": "number"},
                                              "step": {"type": "number"}},
                               "required": ["start", "stop", "step"],
                               "additionalProperties": False}]
                },
            },
            "required": ["times"],
            "additionalProperties": False,
        },
        "gmsfem": {
            "type": "object",
            "properties": {
                "n_mu": {"type": "integer", "minimum": 1},
                "m_snap": {"type": "integer", "minimum": 1},
                "m_coarse": {"type": "integer", "minimum": 1},
                "m_rich": {"type": "integer", "minimum": 1},
                "select": {"enum": ["smallest", "largest"]},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["n_mu", "m_snap", "m_coarse", "m_rich"],
            "additionalProperties": False,
        },
        "lm": {
            "type": "object",
            "properties": {
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "step": {"type": "number", "exclusiveMinimum": 0},
                "gamma_step": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "gpc": {
            "type": "object",
            "properties": {
                "degree": {"type": "integer", "minimum": 0},
                "oversampling": {"type": "number", "minimum": 1},
            },
            "required": ["degree"],
            "additionalProperties": False,
        },
        "dream": {
            "type": "object",
            "properties": {
                "n_chains": {"type": "integer", "minimum": 3},
                "n_generations": {"type": "integer", "minimum": 2},
                "n_pairs": {"type": "integer", "minimum": 1},
                "e_range": {"type": "number"},
                "eps_std": {"type": "number", "minimum": 0},
                "n_cr": {"type": "integer", "minimum": 1},
                "archive_init": {"type": ["integer", "null"], "minimum": 4},
                "unit_jump_every": {"type": "integer", "minimum": 1},
            },
            "required": ["n_generations"],
            "additionalProperties": False,
        },
        "kl_divergence": {
            "type": "object",
            "properties": {
                "enabled": {"type": "boolean"},
                "n_samples": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
        "stats": {
            "type": "object",
            "properties": {
                "alpha0": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "histogram_bins": {"type": "integer", "minimum": 2},
                "field_subsample": {"type": "integer", "minimum": 1},
                "responses": {
                    "type": "array",
                    "items": {"type": "object",
                              "properties": {"sensor": {"type": "integer", "minimum": 0},
                                             "time": {"type": "integer", "minimum": 0}},
                              "additionalProperties": False}},
            },
            "additionalProperties": False,
        },
        "seeds": {
            "type": "object",
            "properties": {name: {"type": "integer"}
                           for name in ("data", "snapshots", "training", "chains")},
            "required": ["data", "snapshots", "training", "chains"],
            "additionalProperties": False,
        },
        "true_z": {"type": "array", "items": {"type": "number"}},
        "output_dir": {"type": "string"},
    },
    "required": ["mesh", "time", "source", "noise_sigma", "gamma", "inputs",
                 "observation", "gmsfem", "gpc", "dream", "seeds", "output_dir"],
    "additionalProperties": False,
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file %s not found" % path)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config is not valid JSON: %s" % exc) from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError("config invalid at %s: %s"
                          % ("/".join(map(str, exc.absolute_path)), exc.message)) from exc
    time_cfg = cfg["time"]
    for key in ("dt_data", "dt_solver"):
        n = time_cfg["t_end"] / time_cfg[key]
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("t_end must be an integer multiple of %s" % key)


def apply_seed_overrides(cfg: dict, overrides) -> dict:
    cfg = json.loads(json.dumps(cfg))
    for item in overrides or []:
        name, _, value = item.partition("=")
        if name not in cfg["seeds"] or not value.lstrip("-").isdigit():
            raise ConfigError("bad seed override %r (use name=int with name "
                              "in %s)" % (item, sorted(cfg["seeds"])))
        cfg["seeds"][name] = int(value)
    return cfg


# ----------------------------------------------------------------- builders

def _mean_values(mesh, mean_spec):
    if isinstance(mean_spec, str):
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        try:
            vals = eval(mean_spec, {"__builtins__": {}},
                        {"x": x, "y": y, "np": np})
        except Exception as exc:
            raise ConfigError("cannot evaluate mean expression %r: %s"
                              % (mean_spec, exc)) from exc
        return np.broadcast_to(np.asarray(vals, dtype=float), x.shape).copy()
    return float(mean_spec or 0.0)


def build_mesh(cfg):
    nx, ny = cfg["mesh"]["fine"]
    domain = tuple(cfg["mesh"].get("domain", (0.0, 1.0, 0.0, 1.0)))
    return fem.StructuredMesh(nx, ny, domain)


def build_coarse(cfg, mesh):
    hx, hy = cfg["mesh"]["coarse"]
    try:
        return multiscale.CoarseGrid(mesh, hx, hy)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_boundary(cfg, mesh):
    edges = {}
    for name, tag in cfg.get("boundary", {}).items():
        if tag == "neumann":
            edges[name] = ("neumann",)
        elif tag == "dirichlet":
            edges[name] = ("dirichlet", 0.0)
        else:
            edges[name] = ("dirichlet", float(tag[1]))
    return fem.BoundaryCondition(mesh, edges)


def build_observation(cfg, mesh):
    obs_cfg = cfg["observation"]
    if "sensors" in obs_cfg:
        sensors = np.asarray(obs_cfg["sensors"], dtype=float)
    elif "sensor_grid" in obs_cfg:
        g = obs_cfg["sensor_grid"]
        x0, x1, y0, y1 = g["extent"]
        xs = np.linspace(x0, x1, g["nx"])
        ys = np.linspace(y0, y1, g["ny"])
        X, Y = np.meshgrid(xs, ys)
        sensors = np.column_stack([X.ravel(), Y.ravel()])
    else:
        raise ConfigError("observation needs 'sensors' or 'sensor_grid'")
    t = obs_cfg["times"]
    if isinstance(t, dict):
        n = int(round((t["stop"] - t["start"]) / t["step"]))
        times = t["start"] + t["step"] * np.arange(n + 1)
    else:
        times = np.asarray(t, dtype=float)
    return fem.ObservationOperator(mesh, sensors, times)


def _build_kl(mesh, field_cfg, unit_variance=False):
    kernel = randfield.CovarianceKernel.from_dict(field_cfg["kernel"])
    if unit_variance:
        kernel = kernel.unit_variance()
    return randfield.build_kl(mesh, kernel, field_cfg["n_modes"],
                              _mean_values(mesh, field_cfg.get("mean", 0.0)))


def build_input_model(cfg, mesh) -> InputModel:
    inputs = cfg["inputs"]
    layout = inputs["layout"]
    gamma_cfg = cfg["gamma"]
    gamma = None if isinstance(gamma_cfg, dict) else float(gamma_cfg)
    if layout == "single":
        if "permeability" not in inputs:
            raise ConfigError("single layout requires inputs.permeability")
        basis = _build_kl(mesh, inputs["permeability"])
        q = inputs.get("specific", 1.0)
        if not isinstance(q, (int, float)):
            raise ConfigError("single layout takes a constant specific field")
        return InputModel("single", mesh, gamma, basis=basis, q_value=q)
    if layout == "pair":
        for key in ("permeability", "specific", "correlation"):
            if key not in inputs:
                raise ConfigError("pair layout requires inputs.%s" % key)
        if isinstance(inputs["specific"], (int, float)):
            raise ConfigError("pair layout needs a KL spec for the specific field")
        b1 = _build_kl(mesh, inputs["permeability"], unit_variance=True)
        b2 = _build_kl(mesh, inputs["specific"], unit_variance=True)
        sig = [np.sqrt(inputs["permeability"]["kernel"].get("sigma2", 1.0)),
               np.sqrt(inputs["specific"]["kernel"].get("sigma2", 1.0))]
        corr = inputs["correlation"]
        fset = randfield.CorrelatedFieldSet(
            [b1, b2], sig, corr["rho"], corr.get("mode", "lead_second"))
        return InputModel("pair", mesh, gamma, field_set=fset)
    # mixed layout
    for key in ("subfields", "regions", "correlation"):
        if key not in inputs:
            raise ConfigError("mixed layout requires inputs.%s" % key)
    if len(inputs["regions"]) != len(inputs["subfields"]):
        raise ConfigError("need one region list per subfield")
    bases = [_build_kl(mesh, fc, unit_variance=True)
             for fc in inputs["subfields"]]
    sig = [np.sqrt(fc["kernel"].get("sigma2", 1.0))
           for fc in inputs["subfields"]]
    corr = inputs["correlation"]
    fset = randfield.CorrelatedFieldSet(bases, sig, corr["rho"],
                                        corr.get("mode", "lead_first"))
    try:
        spec = randfield.MixedFieldSpec(mesh, inputs["regions"], fset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    q = inputs.get("specific", 1.0)
    return InputModel("mixed", mesh, gamma, mixed_spec=spec, q_value=q)


def true_gamma(cfg) -> float:
    g = cfg["gamma"]
    return float(g["true_value"]) if isinstance(g, dict) else float(g)


# ----------------------------------------------------------------- manifest

class RunManifest:
    """Stage bookkeeping: files with content hashes, timings, seeds."""

    def __init__(self, outdir: Path, cfg: dict):
        self.path = Path(outdir) / "run_manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"config": cfg, "seeds": cfg["seeds"], "stages": {}}
        self.data["config"] = cfg
        self.data["seeds"] = cfg["seeds"]

    def record(self, stage: str, files, seconds: float) -> None:
        hashed = {}
        for f in files:
            f = Path(f)
            if f.is_dir():
                for sub in sorted(f.rglob("*")):
                    if sub.is_file():
                        hashed[str(sub)] = _sha256(sub)
            else:
                hashed[str(f)] = _sha256(f)
        self.data["stages"][stage] = {"files": hashed,
                                      "seconds": round(seconds, 3)}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2))


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------- stages

class Experiment:
    """All configured objects plus stage implementations."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.outdir = Path(cfg["output_dir"])
        self.mesh = build_mesh(cfg)
        self.coarse = build_coarse(cfg, self.mesh)
        self.bc = build_boundary(cfg, self.mesh)
        self.obs = build_observation(cfg, self.mesh)
        self.model = build_input_model(cfg, self.mesh)
        self.manifest = RunManifest(self.outdir, cfg)

    # -- shared helpers

    def fine_model(self, dt, gamma_transform="direct") -> ForwardModel:
        return ForwardModel(self.model.with_gamma_transform(gamma_transform),
                            self.bc, self.obs, self.cfg["source"],
                            self.cfg["time"]["t_end"], dt)

    def reduced_model(self, space, gamma_transform="direct") -> ForwardModel:
        return ForwardModel(self.model.with_gamma_transform(gamma_transform),
                            self.bc, self.obs, self.cfg["source"],
                            self.cfg["time"]["t_end"],
                            self.cfg["time"]["dt_solver"], space=space)

    def _require(self, path, producer):
        path = Path(path)
        if not path.exists():
            raise StageFailure("missing artifact %s; run stage %r first"
                               % (path, producer))
        return path

    def load_data(self):
        data = np.loadtxt(self._require(self.outdir / "data.csv", "synth"))
        truth = json.loads(
            self._require(self.outdir / "truth.json", "synth").read_text())
        return data, truth

    def load_space(self):
        self._require(self.outdir / "space" / "manifest.json", "space")
        return multiscale.load_space(self.outdir / "space")

    def load_optimization(self):
        report = json.loads(self._require(
            self.outdir / "optimization.json", "optimize").read_text())
        return report

    def surrogate_dir(self, prior_based):
        return self.outdir / ("surrogate_prior" if prior_based else "surrogate")

    def chains_path(self, prior_based):
        base = "chains_prior" if prior_based else "chains"
        return self.outdir / (base + ".csv"), self.outdir / (base + "_diagnostics.json")

    def training_measure(self, prior_based):
        if prior_based:
            return StandardGaussian(self.model.n_z)
        report = self.load_optimization()
        inter = report["intermediate"]
        return UniformBox(np.array(inter["lower"]), np.array(inter["upper"]))

    # -- stage: synth

    def stage_synth(self):
        t0 = time.time()
        self.outdir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(self.cfg["seeds"]["data"])
        if "true_z" in self.cfg:
            z_field = np.asarray(self.cfg["true_z"], dtype=float)
            if z_field.size != self.model.n_field:
                raise ConfigError("true_z must have %d entries"
                                  % self.model.n_field)
        else:
            z_field = rng.standard_normal(self.model.n_field)
        gamma = true_gamma(self.cfg)
        z_true = (np.concatenate([[gamma], z_field])
                  if self.model.infers_gamma else z_field)
        fine = self.fine_model(self.cfg["time"]["dt_data"])
        noiseless = fine(z_true)
        sigma = self.cfg["noise_sigma"]
        data = noiseless + sigma * rng.standard_normal(noiseless.size)
        np.savetxt(self.outdir / "data.csv", data)
        truth = {"z_true": z_true.tolist(), "gamma_true": gamma,
                 "noise_sigma": sigma, "noiseless": noiseless.tolist()}
        (self.outdir / "truth.json").write_text(json.dumps(truth, indent=2))
        files = [self.outdir / "data.csv", self.outdir / "truth.json"]
        for name, f in self.model.log_fields(z_true).items():
            path = self.outdir / ("truth_%s.csv" % name)
            fem.save_field(f, path, role=name)
            files += [path, path.with_suffix(".json")]
        self.manifest.record("synth", files, time.time() - t0)
        return data

    # -- stage: space

    def stage_space(self):
        t0 = time.time()
        g = self.cfg["gmsfem"]
        rng = np.random.default_rng(self.cfg["seeds"]["snapshots"])
        space = multiscale.build_space(
            self.coarse, self.model.k_from_field_block, self.model.n_field,
            g["n_mu"], g["m_snap"], g["m_rich"], rng,
            select=g.get("select", "smallest"),
            meta={"seed": self.cfg["seeds"]["snapshots"],
                  "m_coarse": g["m_coarse"]})
        multiscale.save_space(space, self.outdir / "space")
        self.manifest.record("space", [self.outdir / "space"], time.time() - t0)
        return space

    # -- stage: optimize

    def stage_optimize(self, space=None):
        t0 = time.time()
        data, _ = self.load_data()
        space = space or self.load_space()
        coarse_space = space.truncate(self.cfg["gmsfem"]["m_coarse"])
        fwd = self.reduced_model(coarse_space, gamma_transform="direct")
        lm_cfg = self.cfg.get("lm", {})
        step = self.model.prior_step_vector(lm_cfg.get("step", 0.5),
                                            lm_cfg.get("gamma_step", 0.1))
        bounds = None
        z0 = np.zeros(self.model.n_z)
        if self.model.infers_gamma:
            z0[0] = 0.5
            lo = np.full(self.model.n_z, -np.inf)
            hi = np.full(self.model.n_z, np.inf)
            lo[0], hi[0] = GAMMA_SLOT_BOUNDS
            bounds = (lo, hi)
        cfg = optimize.LMConfig(alpha=lm_cfg.get("alpha", 0.01), step=step,
                                max_iters=lm_cfg.get("max_iters", 50),
                                tol=lm_cfg.get("tol", 1e-6), bounds=bounds)
        result = optimize.lm_solve(fwd, data, z0, cfg)
        sd = optimize.sampling_distribution(fwd, result.z_ols, data, step)
        overrides = {0: (0.0, 1.0)} if self.model.infers_gamma else None
        inter = optimize.build_intermediate(sd, overrides)
        path = self.outdir / "optimization.json"
        optimize.save_report(path, result, sd, inter,
                             extra={"model_columns": fwd.n_columns,
                                    "forward_calls": fwd.n_calls})
        self.manifest.record("optimize", [path], time.time() - t0)
        return result, sd, inter

    # -- stage: surrogate

    def stage_surrogate(self, prior_based=False, space=None):
        t0 = time.time()
        space = space or self.load_space()
        measure = self.training_measure(prior_based)
        transform = "arctan" if prior_based else "direct"
        fwd = self.reduced_model(space, gamma_transform=transform)
        mset = surrogate.multi_indices(self.cfg["gpc"]["degree"], self.model.n_z)
        over = self.cfg["gpc"].get("oversampling", 2.0)
        n_train = int(np.ceil(over * mset.size))
        rng = np.random.default_rng(self.cfg["seeds"]["training"])
        fitted = surrogate.fit_surrogate(fwd, measure, mset, rng,
                                         n_train=n_train)
        out = self.surrogate_dir(prior_based)
        surrogate.save_surrogate(fitted, out, seed=self.cfg["seeds"]["training"])
        self.manifest.record("surrogate_prior" if prior_based else "surrogate",
                             [out], time.time() - t0)
        return fitted

    # -- stage: sample

    def stage_sample(self, prior_based=False, fitted=None):
        t0 = time.time()
        data, _ = self.load_data()
        if fitted is None:
            fitted = surrogate.load_surrogate(self.surrogate_dir(prior_based))
        measure = self.training_measure(prior_based)
        lik = sampling.GaussianLikelihood(data, self.cfg["noise_sigma"], fitted)
        post = sampling.Posterior(lik, measure)
        d = self.cfg["dream"]
        cfg = sampling.DreamConfig(
            n_chains=d.get("n_chains", 5), n_pairs=d.get("n_pairs", 2),
            e_range=d.get("e_range", 0.01), eps_std=d.get("eps_std", 1e-8),
            n_cr=d.get("n_cr", 8), archive_init=d.get("archive_init"),
            n_generations=d["n_generations"],
            unit_jump_every=d.get("unit_jump_every", 5))
        result = sampling.run_dream_zs(post.log_density, measure.sample,
                                       self.model.n_z, cfg,
                                       self.cfg["seeds"]["chains"])
        csv_path, diag_path = self.chains_path(prior_based)
        sampling.save_chains(result, csv_path, diag_path)
        self.manifest.record("sample_prior" if prior_based else "sample",
                             [csv_path, diag_path], time.time() - t0)
        return result

    # -- stage: stats

    def stage_stats(self, prior_based=False):
        t0 = time.time()
        csv_path, _ = self.chains_path(prior_based)
        self._require(csv_path, "sample")
        try:
            samples, logps, _ = sampling.load_chains(csv_path)
        except ValueError as exc:
            raise StageFailure("malformed chain file %s: %s"
                               % (csv_path, exc)) from exc
        start = samples.shape[0] // 2
        kept = samples[start:].reshape(-1, samples.shape[-1])
        scfg = self.cfg.get("stats", {})
        alpha0 = scfg.get("alpha0", 0.05)
        bins = scfg.get("histogram_bins", 30)
        out = self.outdir / ("stats_prior" if prior_based else "stats")
        out.mkdir(parents=True, exist_ok=True)
        files = []

        n_z = kept.shape[1]
        for i in range(n_z):
            hist, edges = np.histogram(kept[:, i], bins=bins)
            mass = hist / kept.shape[0]
            path = out / ("marginal_z%02d.csv" % i)
            np.savetxt(path, np.column_stack([edges[:-1], edges[1:], mass]),
                       delimiter=",", header="left,right,mass", comments="")
            files.append(path)
        for i in range(n_z):
            for j in range(i + 1, n_z):
                hist2, _, _ = np.histogram2d(kept[:, i], kept[:, j], bins=bins)
                path = out / ("pairwise_z%02d_z%02d.csv" % (i, j))
                np.savetxt(path, hist2 / kept.shape[0], delimiter=",")
                files.append(path)

        truth = None
        truth_path = self.outdir / "truth.json"
        if truth_path.exists():
            truth = json.loads(truth_path.read_text())
        rows = []
        for i in range(n_z):
            col = kept[:, i]
            if prior_based and self.model.infers_gamma and i == 0:
                col = surrogate.to_unit_interval(col)
            lo, hi = sampling.credible_interval(col, alpha0)
            row = [i, float(col.mean()), lo, hi]
            if truth is not None:
                z_true = truth["z_true"][i]
                row += [z_true, int(lo <= z_true <= hi)]
            rows.append(row)
        header = "dim,mean,lower,upper" + (",true,inside" if truth else "")
        path = out / "credible_intervals.csv"
        np.savetxt(path, np.array(rows), delimiter=",", header=header,
                   comments="")
        files.append(path)

        sub = scfg.get("field_subsample")
        field_kept = kept
        if sub is not None and sub < kept.shape[0]:
            idx = np.linspace(0, kept.shape[0] - 1, sub).astype(int)
            field_kept = kept[idx]
        transform = "arctan" if prior_based else "direct"
        model = self.model.with_gamma_transform(transform)
        roles = sorted(model.log_fields(
            np.full(model.n_z, 0.5) if model.infers_gamma
            else np.zeros(model.n_z)))
        for role in roles:
            mean, std = sampling.posterior_stats(
                field_kept, lambda z: model.log_fields(z)[role].values)
            kind = model.log_fields(field_kept[0])[role].kind
            for tag, vals in (("mean", mean), ("std", std)):
                path = out / ("field_%s_%s.csv" % (role, tag))
                fem.save_field(fem.ScalarField(self.mesh, vals, kind), path,
                               role="%s posterior %s" % (role, tag))
                files += [path, path.with_suffix(".json")]

        for spec in scfg.get("responses", []):
            files.append(self._response_bands(out, spec, kept, prior_based,
                                              alpha0))

        if self.cfg.get("kl_divergence", {}).get("enabled"):
            files.append(self._kl_divergence(out, kept, prior_based))

        self.manifest.record("stats_prior" if prior_based else "stats",
                             files, time.time() - t0)
        return out

    def _response_bands(self, out, spec, kept, prior_based, alpha0):
        """Credible and prediction band over one observation slice."""
        fitted = surrogate.load_surrogate(self.surrogate_dir(prior_based))
        data, _ = self.load_data()
        n_s = self.obs.n_sensors
        if "sensor" in spec:
            sel = spec["sensor"] + n_s * np.arange(self.obs.times.size)
            axis = self.obs.times
            label = "sensor%02d_over_time" % spec["sensor"]
        else:
            sel = spec["time"] * n_s + np.arange(n_s)
            axis = np.arange(n_s)
            label = "time%02d_over_sensors" % spec["time"]
        responses = np.vstack([fitted(z)[sel] for z in kept])
        lows = np.empty(sel.size)
        highs = np.empty(sel.size)
        plows = np.empty(sel.size)
        phighs = np.empty(sel.size)
        rng = np.random.default_rng(self.cfg["seeds"]["chains"] + 1)
        noise = rng.normal(0.0, self.cfg["noise_sigma"], size=responses.shape)
        for c in range(sel.size):
            lows[c], highs[c] = sampling.credible_interval(responses[:, c], alpha0)
            plows[c], phighs[c] = sampling.credible_interval(
                responses[:, c] + noise[:, c], alpha0)
        path = out / ("band_%s.csv" % label)
        np.savetxt(path, np.column_stack(
            [axis, responses.mean(axis=0), lows, highs, plows, phighs,
             data[sel]]),
            delimiter=",",
            header="axis,mean,cred_lo,cred_hi,pred_lo,pred_hi,data",
            comments="")
        return path

    def _kl_divergence(self, out, kept, prior_based):
        data, _ = self.load_data()
        n = self.cfg["kl_divergence"].get("n_samples", 50)
        idx = np.linspace(0, kept.shape[0] - 1, min(n, kept.shape[0])).astype(int)
        fitted = surrogate.load_surrogate(self.surrogate_dir(prior_based))
        transform = "arctan" if prior_based else "direct"
        full = self.fine_model(self.cfg["time"]["dt_solver"],
                               gamma_transform=transform)
        sigma = self.cfg["noise_sigma"]
        lik_s = sampling.GaussianLikelihood(data, sigma, fitted)
        lik_f = sampling.GaussianLikelihood(data, sigma, full)
        value = sampling.kl_estimate(kept[idx], lik_s.log_density,
                                     lik_f.log_density)
        path = out / "kl_divergence.json"
        path.write_text(json.dumps({"kl": value, "n_samples": int(idx.size)},
                                   indent=2))
        return path


# ----------------------------------------------------------------- commands

def cmd_synth(cfg) -> None:
    Experiment(cfg).stage_synth()


def cmd_invert(cfg, stage_from=None, prior_based=False) -> None:
    """Run the inversion stage sequence, resuming from persisted artifacts.

    Intermediate-based order: space, optimize, surrogate, sample, stats.
    Prior-based mode skips the optimization and builds the surrogate over
    the Gaussian prior with Hermite polynomials, everything else fixed.
    """
    exp = Experiment(cfg)
    exp.load_data()      # fail fast when synth has not run
    order = [s for s in ("space", "optimize", "surrogate", "sample", "stats")
             if not (prior_based and s == "optimize")]
    if stage_from is not None:
        if stage_from not in order:
            raise ConfigError("unknown stage %r (choose from %s)"
                              % (stage_from, order))
        order = order[order.index(stage_from):]
    space = None
    fitted = None
    for stage in order:
        if stage == "space":
            space = exp.stage_space()
        elif stage == "optimize":
            exp.stage_optimize(space=space)
        elif stage == "surrogate":
            fitted = exp.stage_surrogate(prior_based, space=space)
        elif stage == "sample":
            exp.stage_sample(prior_based, fitted=fitted)
        elif stage == "stats":
            exp.stage_stats(prior_based)


def cmd_stats(cfg, prior_based=False) -> None:
    Experiment(cfg).stage_stats(prior_based)


def cmd_forward(cfg, z=None, out_name="forward") -> None:
    """Single fine-grid solve; writes the trajectory dump and observations."""
    exp = Experiment(cfg)
    model = exp.fine_model(cfg["time"]["dt_solver"])
    if z is None:
        z = np.zeros(exp.model.n_z)
        if exp.model.infers_gamma:
            z[0] = true_gamma(cfg)
    z = np.asarray(z, dtype=float)
    traj, data = model.solve(z, keep="obs")
    out = exp.outdir / out_name
    save_trajectory(traj, out, model.model.gamma_of(z), model.dt,
                    model.n_steps)
    np.savetxt(exp.outdir / (out_name + "_observations.csv"), data)
    exp.manifest.record("forward",
                        [out, exp.outdir / (out_name + "_observations.csv")],
                        0.0)


def cmd_surrogate_test(cfg, n_test=100, prior_based=False) -> dict:
    """Held-out accuracy of a fitted surrogate against the reduced model."""
    exp = Experiment(cfg)
    fitted = surrogate.load_surrogate(exp.surrogate_dir(prior_based))
    space = exp.load_space()
    measure = exp.training_measure(prior_based)
    transform = "arctan" if prior_based else "direct"
    fwd = exp.reduced_model(space, gamma_transform=transform)
    rng = np.random.default_rng(cfg["seeds"]["training"] + 1)
    Z = measure.sample(rng, n_test)
    num = den = 0.0
    for z in Z:
        ref = fwd(z)
        err = fitted(z) - ref
        num += float(err @ err)
        den += float(ref @ ref)
    rel_rms = float(np.sqrt(num / den))
    report = {"n_test": n_test, "relative_rms": rel_rms,
              "prior_based": prior_based}
    path = exp.outdir / ("surrogate_test%s.json"
                         % ("_prior" if prior_based else ""))
    path.write_text(json.dumps(report, indent=2))
    exp.manifest.record("surrogate_test", [path], 0.0)
    return report
