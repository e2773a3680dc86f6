import pytest

from mv_equilibrium.market import Scenario, build_market

DESK = dict(r=0.02, b=0.06, sigma=0.2)
RANDOM = dict(
    r={"base": 0.03, "walk": 0.01},
    b={"base": 0.08, "walk": -0.02},
    sigma={"base": 0.25, "walk": 0.05},
)
STATE = dict(r=0.02, b={"base": 0.07, "walk": 0.02}, sigma={"base": 0.25, "walk": 0.03})


def market(N=6, mode="recombining", **kw):
    opts = dict(DESK)
    opts.update(kw)
    return build_market(Scenario(N=N, mode=mode, **opts))


@pytest.fixture
def make_market():
    return market


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
