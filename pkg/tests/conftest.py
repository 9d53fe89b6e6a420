"""Shared fixtures: the desk-scale inversion run and acceptance reporting."""

import json
from pathlib import Path

import numpy as np
import pytest

from fracbayes import pipeline, sampling

REPO_ROOT = Path(__file__).resolve().parent.parent

ACCEPTANCE_RESULTS = []


def record_criterion(number, name, passed, detail=""):
    """Collect one acceptance line; printed in the terminal summary."""
    ACCEPTANCE_RESULTS.append((number, name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        line = "criterion %2d %-28s %s" % (number, name,
                                           "PASS" if passed else "FAIL")
        if detail:
            line += "  (%s)" % detail
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full desk-scale single-field inversion, both surrogate modes.

    One shared run backs the end-to-end acceptance criteria and the
    held-out surrogate check; everything is seeded so the outcome is
    deterministic.
    """
    import time
    started = time.time()
    outdir = tmp_path_factory.mktemp("desk_run")
    cfg = pipeline.load_config(REPO_ROOT / "configs" / "desk_single.json")
    cfg["output_dir"] = str(outdir)
    exp = pipeline.Experiment(cfg)
    exp.stage_synth()
    space = exp.stage_space()
    lm_result, sdist, inter = exp.stage_optimize(space=space)
    fitted = exp.stage_surrogate(space=space)
    result = exp.stage_sample(fitted=fitted)
    exp.stage_stats()
    fitted_prior = exp.stage_surrogate(prior_based=True, space=space)
    result_prior = exp.stage_sample(prior_based=True, fitted=fitted_prior)
    truth = json.loads((outdir / "truth.json").read_text())
    elapsed = time.time() - started
    return {
        "elapsed_seconds": elapsed,
        "cfg": cfg,
        "outdir": outdir,
        "experiment": exp,
        "space": space,
        "lm_result": lm_result,
        "sampling_distribution": sdist,
        "intermediate": inter,
        "surrogate": fitted,
        "surrogate_prior": fitted_prior,
        "dream": result,
        "dream_prior": result_prior,
        "truth": truth,
    }


def retained_samples(dream_result):
    return dream_result.retained()
