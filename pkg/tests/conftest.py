import pytest

from qmtwin.model import ExperimentConfig
from qmtwin.simulator import simulate_records

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def short_cfg():
    """Default sequence with a 1 s integration time."""
    return ExperimentConfig(t_int=1.0)


@pytest.fixture(scope="session")
def short_runs(short_cfg):
    """(signal, vacuum) record arrays of a 1 s run pair."""
    sig = simulate_records(short_cfg, 11)
    vac = simulate_records(short_cfg.replace(mu_in_target=0.0), 12)
    return sig, vac


@pytest.fixture
def report(request):
    """Record one acceptance line; printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
