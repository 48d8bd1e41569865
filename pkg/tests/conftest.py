import numpy as np
import pytest
import torch

from gps_ssl.data import generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(2, 3, 4, 8, 0.1, False, 3)


@pytest.fixture(scope="session")
def flip_ds():
    return generate_synthetic(2, 3, 4, 16, 0.05, True, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
        lines[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
