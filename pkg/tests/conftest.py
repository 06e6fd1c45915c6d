import numpy as np
import pytest

from hcdborrow.model import HistoricalControlSet
from hcdborrow.priors import BetaMixture

# published non-robust and robust MAP priors of the worked example
MAP_EXAMPLE = dict(weights=[0.8118, 0.1882], a=[23.1972, 3.9494], b=[411.6442, 61.46489])
ROBUST_MAP = dict(weights=[0.6494, 0.1506, 0.2], a=[23.1972, 3.9494, 1.0], b=[411.6442, 61.46489, 1.0])


@pytest.fixture
def map_prior_example():
    return BetaMixture(np.array(MAP_EXAMPLE["weights"]), np.array(MAP_EXAMPLE["a"]), np.array(MAP_EXAMPLE["b"]))


@pytest.fixture
def robust_map_prior():
    return BetaMixture(np.array(ROBUST_MAP["weights"]), np.array(ROBUST_MAP["a"]), np.array(ROBUST_MAP["b"]),
                       meta={"robust_index": 2, "robust_weight": 0.2})


@pytest.fixture
def efsa_like_hcd():
    sizes = [50, 50, 60, 55, 47, 89, 70, 50, 52, 60, 65, 50, 48, 55, 60, 75]
    events = [3, 3, 3, 3, 2, 5, 4, 3, 3, 3, 3, 3, 2, 3, 3, 4]
    return HistoricalControlSet.from_counts(events, sizes)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LOG = []


@pytest.fixture
def acceptance():
    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LOG.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)
