from __future__ import annotations

import copy
import json
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from hflsim import scenarios
from hflsim.config import parse_config

ACCEPTANCE_LINES: list[str] = []


def scenario_doc(name: str) -> dict:
    return json.loads(scenarios.path(name).read_text())


def two_level_doc(seed: int = 0, groups=((10, 11), (12, 13)), rounds: int = 2, **extra) -> dict:
    """Root 0, servers 1..g, users as given, small blobs."""
    nodes = [{"id": 0, "kind": "root"}]
    for i, members in enumerate(groups, start=1):
        nodes.append({"id": i, "kind": "group_server", "parent": 0})
        nodes += [{"id": u, "kind": "user", "parent": i} for u in members]
    doc = {
        "seed": seed,
        "hierarchy": {"nodes": nodes},
        "data": {"classes": 2, "dim": 2, "n_per_class": 30, "spread": 0.5, "test_fraction": 0.2},
        "model": {"arch": "logreg", "learning_rate": 0.1, "local_epochs": 1, "batch_size": 4},
        "schedule": {"global_rounds": rounds},
    }
    doc.update(copy.deepcopy(extra))
    return doc


def cfg_from(doc: dict):
    return parse_config(doc)


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE_LINES.append(f"criterion {number:2d} FAIL  {title}  ({type(exc).__name__}: {exc})"[:300])
        raise
    ACCEPTANCE_LINES.append(f"criterion {number:2d} PASS  {title}  [{time.perf_counter() - start:.2f} s]")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def tmp_out(tmp_path: Path) -> Path:
    return tmp_path / "out"
