import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rdinet.network import ArchSpec, Branch, build_network, conv, dense, flatten, max_pool

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# a 4-exit image net that is cheap enough for property tests
TINY_CNN = ArchSpec(
    name="tiny_cnn",
    input_shape=(8, 8, 1),
    backbone=(conv(4), conv(4), max_pool(2), flatten(), dense(12), dense(3, relu=False)),
    branches=(
        Branch(0, (max_pool(2), flatten(), dense(3, relu=False))),
        Branch(2, (flatten(), dense(3, relu=False))),
        Branch(4, (dense(3, relu=False),)),
    ),
    num_classes=3,
)

# two linear exits on a two-pixel input
LINEAR2 = ArchSpec(
    name="linear2",
    input_shape=(1, 2, 1),
    backbone=(flatten(), dense(2, relu=False)),
    branches=(Branch(0, (dense(2, relu=False),)),),
    num_classes=2,
)


def linear_net(w_exit1, w_exit2=None):
    """LINEAR2 with chosen [2 pixels x 2 classes] weight matrices and zero biases."""
    net = build_network(LINEAR2, 0)
    net.params["br1.0.w"] = np.asarray(w_exit1, dtype=float)
    net.params["bb1.w"] = np.asarray(w_exit1 if w_exit2 is None else w_exit2, dtype=float)
    net.params["br1.0.b"] = np.zeros(2)
    net.params["bb1.b"] = np.zeros(2)
    return net


@pytest.fixture(scope="session")
def tiny_net():
    return build_network(TINY_CNN, 3)


@pytest.fixture(scope="session")
def tiny_data():
    rng = np.random.default_rng(11)
    return rng.uniform(0, 1, (12, 8, 8, 1)), rng.integers(0, 3, 12)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
