"""Shared fixtures: small synthetic splits, cached desk benchmark runs and the
acceptance summary printed at the end of the session."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from unlearnlab.data import split_classwise, synthesize_pair
from unlearnlab.harness import load_config, run_experiment
from unlearnlab.harness.runner import build_split
from unlearnlab.net import build_mlp
from unlearnlab.train import TrainConfig, train_supervised

CONFIG_DIR = resources.files("unlearnlab.harness") / "configs"

# criterion number -> (title, outcome); filled by the report hook below
ACCEPTANCE: dict[int, list] = {}
# seconds spent building shared fixtures outside any acceptance test
FIXTURE_SECONDS: dict[str, float] = {}
# criterion marker of the test being run, if any
_ACTIVE: list = [None]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = ACCEPTANCE.setdefault(number, [title, "PASS", 0.0])
    entry[2] += report.duration
    if report.failed:
        entry[1] = "FAIL"
    elif report.skipped and entry[1] == "PASS" and report.when == "call":
        entry[1] = "SKIP"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_protocol(item, nextitem):
    _ACTIVE[0] = item.get_closest_marker("criterion")
    yield
    _ACTIVE[0] = None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report._criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, seconds = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status:4s}  {title}  ({seconds:.1f} s)")


def acceptance_seconds() -> float:
    """Time charged to the acceptance suite so far."""
    inside = sum(v[2] for v in ACCEPTANCE.values())
    return inside + sum(FIXTURE_SECONDS.values())


@dataclass
class DeskRun:
    root: Path
    report: dict
    seconds: float

    def rows(self, model: str) -> list[dict]:
        return [r for r in self.report["rows"] if r["model"] == model]

    def values(self, model: str, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows(model)], dtype=np.float64)

    def mean(self, model: str, key: str) -> float:
        return float(self.values(model, key).mean())

    def cell(self, model: str, seed: int) -> dict:
        return json.loads((self.root / "cells" / f"{model}_s{seed}.json").read_text())


def _desk(tmp_path_factory, name: str) -> DeskRun:
    out = tmp_path_factory.mktemp(name)
    start = time.perf_counter()
    root = run_experiment(CONFIG_DIR / f"{name}.toml", out=out)
    seconds = time.perf_counter() - start
    # inside an acceptance test the setup time is already charged to it
    if _ACTIVE[0] is None:
        FIXTURE_SECONDS[name] = seconds
    return DeskRun(root, json.loads((root / "report.json").read_text()), seconds)


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> DeskRun:
    """Class-wise desk benchmark: 8 methods x 5 seeds, forget class 4."""
    return _desk(tmp_path_factory, "desk")


@pytest.fixture(scope="session")
def desk_random(tmp_path_factory) -> DeskRun:
    """Random-forgetting desk benchmark: 50 samples per class, FT/RL/COLA+."""
    return _desk(tmp_path_factory, "desk_random")


@pytest.fixture(scope="session")
def desk_config():
    return load_config(CONFIG_DIR / "desk.toml")


@pytest.fixture(scope="session")
def desk_split(desk_config):
    return build_split(desk_config)


@pytest.fixture(scope="session")
def small_split():
    """4-class blobs, 60 train samples per class, forget class 1."""
    train, test = synthesize_pair("blobs", 4, 60, 6, 0.6, 3, radius=4.0)
    return split_classwise(train, [1], test)


@pytest.fixture(scope="session")
def small_original(small_split):
    net = build_mlp(6, [16, 16, 8], 4, 0)
    return train_supervised(net, small_split.full, TrainConfig(epochs=15, learning_rate=0.05)).network


@pytest.fixture(scope="session")
def small_retrain(small_split):
    net = build_mlp(6, [16, 16, 8], 4, 1000)
    return train_supervised(net, small_split.retain,
                            TrainConfig(epochs=15, learning_rate=0.05)).network
