import numpy as np
import pytest

from gdis.exposure import compute_exposures
from gdis.graph import Network, partition_graph
from gdis.simulator import SimConfig, simulate

# filled by test_acceptance.py; printed after the run
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def path3():
    return Network(3, [(0, 1), (1, 2)], [[1.0, 0.0], [0.5, 0.5], [0.0, 2.0]])


@pytest.fixture(scope="session")
def small_world():
    """A 200-node simulated network with exposures and a partition."""
    cfg = SimConfig(node_count=200, edge_prob=0.04, seed=11)
    net, trace, truth = simulate(cfg)
    exp = compute_exposures(net, cfg.smoothing)
    part = partition_graph(net, seed=11)
    return cfg, net, exp, part, truth


def random_network(rng, m, p=0.3, k=3):
    iu = np.triu_indices(m, 1)
    keep = rng.random(len(iu[0])) < p
    edges = np.column_stack([iu[0][keep], iu[1][keep]])
    return Network(m, edges, rng.normal(size=(m, k)),
                   treatments=(rng.random(m) < 0.5).astype(float),
                   outcomes=rng.normal(size=m))
