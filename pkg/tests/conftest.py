"""Shared fixtures: small deterministic graphs and the benchmark dataset.

The acceptance benchmark prefers a real prepared citation dataset when one
is available (set INVARDEF_DATA_DIR to a portable dataset directory, e.g. a
prepared copy of Cora).  When none is present, a synthetic citation-style
benchmark with matched scale and statistics is generated once per session;
every benchmark-based test reports which dataset it ran on.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from invardef.data_io import load_dataset, make_split
from invardef.graph import Graph
from invardef.synthbench import citation_benchmark

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture()
def path3() -> Graph:
    """Three nodes in a path 0-1-2."""
    return Graph(
        features=np.eye(3),
        edge_index=np.array([[0, 1], [1, 2]]),
        labels=np.array([0, 1, 0]),
        num_classes=2,
    )


def two_block_graph(n_per_block: int = 8, seed: int = 7) -> Graph:
    """Two homophilic feature-separable clusters joined by one edge."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per_block
    labels = np.array([0] * n_per_block + [1] * n_per_block)
    features = rng.normal(0, 0.3, size=(n, 4))
    features[:n_per_block, 0] += 1.5
    features[n_per_block:, 1] += 1.5
    edges = set()
    for block in (range(n_per_block), range(n_per_block, n)):
        block = list(block)
        for i in range(1, len(block)):
            j = int(rng.integers(0, i))
            edges.add((block[j], block[i]))
        for _ in range(n_per_block):
            a, b = rng.choice(block, size=2, replace=False)
            if a != b:
                edges.add((min(a, b), max(a, b)))
    edges.add((0, n_per_block))
    return Graph(
        features=features,
        edge_index=np.array(sorted(edges)),
        labels=labels,
        num_classes=2,
    )


@pytest.fixture()
def toy_graph() -> Graph:
    return two_block_graph()


def _benchmark_from_env() -> tuple[str, Graph] | None:
    root = os.environ.get("INVARDEF_DATA_DIR")
    if not root:
        return None
    path = Path(root)
    if not (path / "meta.json").exists():
        return None
    return (f"external:{path.name}", load_dataset(path))


_BENCH_CACHE: dict[str, object] = {}


@pytest.fixture(scope="session")
def benchmark():
    """(name, graph, splits) used by benchmark-scale tests."""
    if "bench" not in _BENCH_CACHE:
        external = _benchmark_from_env()
        if external is not None:
            name, graph = external
        else:
            name = "synthcite-2485"
            graph = citation_benchmark(seed=0)
        splits = make_split(graph, 0.1, 0.1, seed=0)
        _BENCH_CACHE["bench"] = (name, graph, splits)
    return _BENCH_CACHE["bench"]
