import os
import re

import pytest
from hypothesis import HealthCheck, settings

from xheep_sim.cpu import parse_microprogram
from xheep_sim.kernel import Simulator, StopCondition
from xheep_sim.platform import Platform, PlatformConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def make_platform():
    def factory(**kw):
        return Platform(PlatformConfig(**kw))
    return factory


def run_program(text, fast_forward=True, max_cycles=2_000_000, **cfg):
    """Load ``text`` on a fresh platform, run to halt and return (platform, cpu, sim)."""
    p = Platform(PlatformConfig(**cfg))
    cpu = p.load_program(parse_microprogram(text, p.symbols))
    sim = Simulator(p, fast_forward=fast_forward)
    sim.run(StopCondition.all_halted(max_cycles))
    return p, cpu, sim


@pytest.fixture(scope="session")
def anchor_powers():
    """Average power of every anchor scenario under the shipped table."""
    from xheep_sim.calibrate import verify
    from xheep_sim.power import load_calibration
    return verify(load_calibration())


@pytest.fixture(scope="session")
def conv_comparison():
    from xheep_sim.benchmarks import compare_conv
    return compare_conv()


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = dict(getattr(mod, "RESULTS", {}))
    for rep in terminalreporter.stats.get("failed", []):
        m = re.search(r"test_criterion_(\d+)", rep.nodeid)
        if m and int(m.group(1)) not in results:
            results[int(m.group(1))] = f"criterion {m.group(1)}: FAIL  (raised before finishing)"
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
