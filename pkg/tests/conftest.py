import logging

import pytest

from spseg.ingestion import SyntheticSpec, generate_synthetic
from spseg.training import TrainConfig

logging.getLogger("spseg").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def tiny_multiclass():
    """24 images of 32x32, three classes."""
    return generate_synthetic(SyntheticSpec(n_images=24, m=32, h=32, n_classes=3, radius_range=(4, 8), seed=3))


@pytest.fixture(scope="session")
def tiny_binary():
    return generate_synthetic(SyntheticSpec(n_images=20, m=32, h=32, mode="binary", radius_range=(3, 6),
                                            count_range=(1, 2), seed=4))


@pytest.fixture
def fast_cfg():
    return TrainConfig(base_filters=4, max_epochs=2, batch_size=8, patience=5, seed=0)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, passed, detail):
        status = "PASS" if passed is True else "FAIL" if passed is False else str(passed)
        line = f"criterion {number}: {status}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
