from __future__ import annotations

import random
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def _pinned_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


@pytest.fixture
def fixture_repo() -> Path:
    return FIXTURES / "repo"


def write_tree(root: Path, spec: dict) -> Path:
    """Materialise ``{"name": "text" | {...}}`` under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    for name, value in spec.items():
        if isinstance(value, dict):
            write_tree(root / name, value)
        elif isinstance(value, bytes):
            (root / name).write_bytes(value)
        else:
            (root / name).write_text(value)
    return root


def random_tree_spec(rng: random.Random, max_nodes: int) -> dict:
    """A random nested dict with at most ``max_nodes`` nodes, root included."""
    root: dict = {}
    folders = [root]
    for i in range(rng.randint(0, max_nodes - 1)):
        parent = rng.choice(folders)
        if rng.random() < 0.3:
            child: dict = {}
            parent[f"d{i}"] = child
            folders.append(child)
        else:
            words = rng.randint(0, 40)
            parent[f"f{i}.m"] = " ".join(f"w{rng.randint(0, 50)}" for _ in range(words))
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
