import pytest

from tsa.model import Model, ModelConfig

SMALL = ModelConfig(n_layers=4, n_heads=2, n_kv_heads=1, d_model=16, d_head=8, d_ff=32, vocab_size=50)

_acceptance_lines = []


@pytest.fixture(scope="session")
def small_model():
    return Model.random(SMALL, seed=3)


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""

    def record(number, title, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        _acceptance_lines.append(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert passed, f"criterion {number} failed: {title} {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
