import numpy as np
import pytest

from netspill.panel import ClusterMap, GroupPartition, NetworkStack, PanelDataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_instance(seed, n_b=3, n_f=3, T=3, p=0, clusters=None, density=0.5):
    """Small random panel with a one-layer static network and no self-loops."""
    rng = np.random.default_rng(seed)
    n = n_b + n_f
    group = np.array([0] * n_b + [1] * n_f)
    if clusters is None:
        clusters = np.array([0] * n_b + [1] * n_f)
    adj = (rng.random((n, n)) < density).astype(float)
    np.fill_diagonal(adj, 0.0)
    data = PanelDataset(y=rng.normal(size=(n, T + 1)), X=rng.normal(size=(n, T, p)),
                        partition=GroupPartition(group), clusters=ClusterMap(clusters))
    nets = NetworkStack([adj], n_periods=T, static=True)
    return data, nets, adj


@pytest.fixture
def tiny():
    return random_instance(0)
