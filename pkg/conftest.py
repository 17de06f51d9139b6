import numpy as np
import pytest

import tensor_core as tc

collect_ignore = ["examples", "venv", "data", "runs"]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="executa os treinos longos")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: treinos longos, só com --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="use --runslow para executar")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64_mode():
    """Todos os testes rodam em 64 bits, com o grafo padrão limpo"""
    tc.set_precision("float64")
    graph = tc.current_graph()
    if graph is not None:
        graph.clear()
    yield
    tc.set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
