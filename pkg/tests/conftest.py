import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from topostab.dataset import DatasetBundle, attach_hk_features, default_data_dir  # noqa: E402
from topostab.graph import Graph, PerturbConfig, make_rng  # noqa: E402
from topostab.images import PiParams  # noqa: E402

from oracles import random_graph_adj  # noqa: E402

DATA_DIR = default_data_dir()


def dataset_available(name: str) -> bool:
    return (DATA_DIR / name / f"{name}_A.txt").exists() or (DATA_DIR / f"{name}_A.txt").exists()


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


@pytest.fixture(scope="session")
def mutag_dir():
    if not dataset_available("MUTAG"):
        pytest.skip("MUTAG files not present")
    return DATA_DIR


def synthetic_bundle(num_graphs=12, seed=0, max_nodes=7, pi=PiParams(), perturb_p=0.05, num_classes=2):
    """Small random bundle with degree features and attached topo rows."""
    rng = make_rng(seed)
    graphs = []
    for k in range(num_graphs):
        n = int(rng.integers(1, max_nodes + 1))
        adj = random_graph_adj(rng, n, 0.45)
        graphs.append(Graph.from_adjacency(adj, label=k % num_classes))
    bundle = DatasetBundle("SYN", graphs, num_classes, 0)
    return attach_hk_features(bundle, pi, PerturbConfig(perturb_p, seed))


@pytest.fixture
def small_bundle():
    return synthetic_bundle()


# -- acceptance summary ----------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number = marker.args[0]
    entry = _CRITERIA.setdefault(number, {"title": marker.args[1], "ok": True, "seen": False, "why": ""})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["seen"] = True
        if report.outcome != "passed":
            entry["ok"] = False
            crash = getattr(report.longrepr, "reprcrash", None)
            msg = crash.message if crash is not None else str(report.longrepr)
            lines = msg.strip().splitlines()
            entry["why"] = lines[0][:160] if lines else report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        line = f"criterion {number}: {status}  {e['title']}"
        if status == "FAIL" and e["why"]:
            line += f"  ({e['why']})"
        terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
