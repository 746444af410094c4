import numpy as np
import pytest
import torch

from krigwrap.data import MissingnessSpec, simulate_missingness, split_nodes, synthetic_panel
from krigwrap.jigsaw import view_tensors
from krigwrap.sampling import make_view


@pytest.fixture(scope="session")
def small_panel():
    return synthetic_panel(n_nodes=16, T=288, seed=3)


def micro_view(n_nodes=10, T=96, rate=0.3, seed=0, pattern="random"):
    panel, meta, adj = synthetic_panel(n_nodes=n_nodes, T=T, seed=seed)
    obs, unobs = split_nodes(n_nodes, 0.2, seed)
    mask = simulate_missingness(panel, obs, MissingnessSpec(pattern, rate, seed=seed), adj)
    return make_view(panel, adj, mask, obs, unobs), meta.features()


@pytest.fixture
def micro():
    view, feats = micro_view()
    return view, feats


@pytest.fixture
def micro_vt64(micro):
    view, feats = micro
    return view, feats, view_tensors(view, feats, 8, dtype=torch.float64)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
