import pytest

from steeradapt.data import SynthConfig, generate_synthetic


SMALL = dict(height=16, width=32)


@pytest.fixture(scope="session")
def tiny_synth():
    """Small-resolution two-domain dataset for fast training tests."""
    return generate_synthetic(SynthConfig(n_per_domain=48, n_test=16, seed=3, **SMALL))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
