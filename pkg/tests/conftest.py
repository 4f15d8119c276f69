import pytest

from takeup.presets import TABLE2_COL1
from takeup.simulator import SimConfig, simulate_panel


@pytest.fixture(scope="session")
def small_sim():
    """A 300-household panel with dispersed benefits, cheap enough for repeated likelihood calls."""
    config = SimConfig(TABLE2_COL1, seed=7, benefit_dispersion=0.3, n_households=300, horizon_months=24)
    return simulate_panel(config)


@pytest.fixture(scope="session")
def small_panel(small_sim):
    return small_sim.panel


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Record one PASS/FAIL line per acceptance criterion; lines are echoed live and in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def log(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n{line}")

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
