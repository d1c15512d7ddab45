import sys
import csv

import numpy as np
import pytest

from ridesim.network import build_network


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.fixture
def write_network_files(tmp_path):
    def _write(nodes, edges, name="net"):
        nf = write_csv(tmp_path / f"{name}_nodes.csv", ["node_id", "lon", "lat"], nodes)
        ef = write_csv(tmp_path / f"{name}_edges.csv", ["from", "to", "length_m"], edges)
        return nf, ef

    return _write


@pytest.fixture
def line_network():
    """0 - 1 - 2 - 3, 100 m legs, both directions."""
    nodes = [(i, -73.99 + 0.001 * i, 40.73) for i in range(4)]
    edges = [(i, i + 1, 100.0) for i in range(3)]
    return build_network(nodes, edges, undirected=True)


def random_graph(seed, n=8, p=0.35, directed=True):
    rng = np.random.default_rng(seed)
    nodes = [(i, float(rng.uniform(-74, -73.9)), float(rng.uniform(40.7, 40.8))) for i in range(n)]
    edges = []
    for u in range(n):
        for v in range(n):
            if u != v and rng.random() < p:
                edges.append((u, v, float(np.round(rng.uniform(1, 100), 3))))
    # a spanning chain keeps everything weakly connected
    for u in range(n - 1):
        edges.append((u, u + 1, float(np.round(rng.uniform(50, 150), 3))))
    return nodes, edges


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.line(n))
