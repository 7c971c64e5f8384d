import numpy as np
import pytest

from fiva import nn
from fiva.synthdata import ClientSpec, ShapeWorldSpec, generate_client_dataset


@pytest.fixture(scope="session")
def small_world():
    """Three small clients and a hold-out on a 16x16 grid."""
    clients = (
        ClientSpec("a", 40, (1, 2), 0.0, 0.02, seed=1),
        ClientSpec("b", 20, (3,), 0.1, 0.05, seed=2),
        ClientSpec("c", 20, (2, 3), -0.1, 0.05, seed=3),
    )
    holdout = ClientSpec("holdout", 20, (1, 2, 3), 0.0, 0.03, seed=9)
    return ShapeWorldSpec(clients, holdout, grid=16, n_foreground=3, max_shapes=2)


@pytest.fixture(scope="session")
def small_data(small_world):
    return [generate_client_dataset(small_world, c.name) for c in small_world.clients]


@pytest.fixture(scope="session")
def small_model(small_data):
    heads = tuple(nn.HeadSpec(d.name, d.head_labels) for d in small_data)
    return nn.ModelSpec(heads=heads, n_labels=4, height=16, width=16, widths=(4, 6, 8))


# acceptance lines, echoed in the terminal summary so they survive output capture
_ACCEPTANCE: list = []


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
