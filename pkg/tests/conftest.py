"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

from msgl.synthetic import write_calms21_dataset, write_ratsi_dataset

ACCEPTANCE_TITLES = {
    1: "gradient correctness (all four variants, < 1e-4, < 2 min)",
    2: "causal branches ignore future frames (bit-exact)",
    3: "parameter-count slope T=35 -> T=50 is 62,400",
    4: "preprocessing identities, leakage, window counts",
    5: "label-smoothing loss closed forms",
    6: "Adam first step, plateau halving, early stop + restore",
    7: "metric oracles on 1,000 random instances",
    8: "boundary analysis vs linear-scan oracle",
    9: "desk-scale learning on separable synthetic data",
    10: "end-to-end determinism (checkpoints, metrics.json)",
    11: "reproduction targets on the real datasets (optional)",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test belongs to acceptance criterion n")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance_id", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "skipped" if report.skipped else report.outcome
        _outcomes.setdefault(marker, []).append(outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report.acceptance_id = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_TITLES):
        results = _outcomes.get(n)
        if not results:
            continue
        if any(r == "failed" for r in results):
            status = "FAIL"
        elif all(r == "skipped" for r in results):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {ACCEPTANCE_TITLES[n]}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def ratsi_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("ratsi")
    write_ratsi_dataset(root, n_frames=160, seed=3)
    return root


@pytest.fixture(scope="session")
def calms21_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("calms21")
    write_calms21_dataset(root, n_train=5, n_test=2, n_frames=120, seed=4)
    return root


SMALL_EXPERIMENT = {
    "window": 8,
    "seed": 5,
    "model": {"d_model": 16, "d_ff": 32, "heads": 2, "bam_hidden": 8},
    "train": {"max_epochs": 2, "batch_size": 64},
}


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    """A JSON experiment config small enough for a full CLI round trip in seconds."""
    import json

    path = tmp_path_factory.mktemp("config") / "small.json"
    path.write_text(json.dumps(SMALL_EXPERIMENT))
    return path
