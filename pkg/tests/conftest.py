import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

DATA = HERE / "data"
MNIST_TRAIN = DATA / "mnist-train-sample-idx3-ubyte"
MNIST_TEST = DATA / "mnist-test-sample-idx3-ubyte"


@pytest.fixture(scope="session")
def mnist_train_path():
    return MNIST_TRAIN


@pytest.fixture(scope="session")
def mnist_test_path():
    return MNIST_TEST


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=_criterion_order):
            terminalreporter.write_line(line)


def _criterion_order(line):
    label = line.split()[1].rstrip(":")
    digits = "".join(ch for ch in label if ch.isdigit())
    return int(digits), label[len(digits):]
