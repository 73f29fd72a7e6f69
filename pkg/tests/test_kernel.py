import pytest

from xheep_sim.errors import ConfigurationError
from xheep_sim.interconnect import BusTransaction, Topology
from xheep_sim.kernel import Simulator, StopCondition
from xheep_sim.platform import Platform, PlatformConfig


def test_single_step_on_an_empty_platform():
    p = Platform(PlatformConfig())
    Simulator(p).step()
    assert p.clock.cycle_count == 1
    assert p.bus.total_grants == 0


@pytest.mark.parametrize("ff", [True, False])
def test_cycle_limit_truncates_idle_run(ff):
    p = Platform(PlatformConfig())
    report = Simulator(p, ff).run_until(StopCondition.cycle_limit(100))
    assert report.total_cycles == 100 and report.truncated


def test_zero_cycle_limit_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        Simulator(Platform(PlatformConfig())).run(StopCondition.cycle_limit(0))


def _bus(topology):
    p = Platform(PlatformConfig(topology=topology))
    return p, p.bus


def test_two_masters_on_one_bank_share_it_evenly():
    p, bus = _bus(Topology.FULLY_CONNECTED)
    masters = bus.masters[:2]
    grants = {m: 0 for m in masters}
    pending = {}
    for c in range(10):
        for m in masters:
            if m not in pending:
                pending[m] = bus.request(BusTransaction(m, p.bank_base(1), False, c))
        for t in bus.arbitrate(c):
            grants[t.master_id] += 1
            del pending[t.master_id]
        bus.respond(c)
    assert list(grants.values()) == [5, 5]


def test_one_at_a_time_drains_four_requests_in_four_cycles():
    p, bus = _bus(Topology.ONE_AT_A_TIME)
    txns = [bus.request(BusTransaction(m, p.bank_base(b), False, 0))
            for b, m in enumerate(bus.masters[:4])]
    for c in range(4):
        bus.arbitrate(c)
        bus.respond(c)
    assert sorted(t.grant_cycle for t in txns) == [0, 1, 2, 3]
