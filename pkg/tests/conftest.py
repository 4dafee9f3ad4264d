import numpy as np
import pytest

from graphlimit.graph import compute_coefficients
from graphlimit.model import AnnulusModel


@pytest.fixture(scope="session")
def annulus():
    return AnnulusModel()


@pytest.fixture(scope="session")
def coeffs(annulus):
    return compute_coefficients(annulus, n=512)


@pytest.fixture
def record(request):
    """Record one acceptance line; printed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def _record(number, passed, detail):
        lines.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")


def exact_v(h):
    """Closed-form limit solution on the annulus edge, normalized at the root."""
    h = np.asarray(h, dtype=float)
    return (2 / 3) * ((1 / 3) * ((2 * h + 1) ** 1.5 - 1) - 2 * h)
