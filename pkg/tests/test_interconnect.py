
import pytest
from hypothesis import given, strategies as st

from xheep_sim.errors import AccessFault, ConfigurationError
from xheep_sim.interconnect import (AddressMap, AddressingMode, Arbiter, Bus, BusTransaction, FaultKind,
                                    Region, RoundRobin, StreamMaster, Topology, bank_and_offset,
                                    decode, measure_peak_bandwidth, memory_region)
from xheep_sim.memory import BankSlave, MemoryBank
from xheep_sim.platform import PlatformConfig

KIB = 1024


@pytest.mark.parametrize("mode", list(AddressingMode))
def test_decode_is_a_bijection_over_256_kib(mode):
    banks, size = 8, 32 * KIB
    amap = AddressMap([memory_region("ram", 0, banks, size, mode)])
    seen = set()
    for addr in range(0, banks * size, 4):
        slave, off = decode(amap, addr)
        assert off % 4 == 0 and 0 <= off < size
        seen.add((slave, off))
    assert len(seen) == banks * size // 4


def test_interleaved_rotates_banks():
    assert [bank_and_offset(4 * w, AddressingMode.INTERLEAVED, 8, 1024)[0] for w in range(10)] == \
        [0, 1, 2, 3, 4, 5, 6, 7, 0, 1]
    assert bank_and_offset(4 * 9, AddressingMode.INTERLEAVED, 8, 1024) == (1, 4)
    assert bank_and_offset(1024 + 8, AddressingMode.CONTIGUOUS, 8, 1024) == (1, 8)


def test_unmapped_address_faults():
    amap = AddressMap([memory_region("ram", 0, 2, 1024, AddressingMode.CONTIGUOUS)])
    with pytest.raises(AccessFault) as exc:
        decode(amap, 0x1000_0000)
    assert exc.value.kind is FaultKind.DECODE


def test_overlapping_regions_rejected():
    amap = AddressMap([Region("a", 0x1000, 0x1000, "a")])
    with pytest.raises(ConfigurationError, match="overlap"):
        amap.add(Region("b", 0x1800, 0x1000, "b"))


def test_bank_count_must_be_power_of_two():
    with pytest.raises(ConfigurationError):
        memory_region("ram", 0, 6, 1024, AddressingMode.CONTIGUOUS)


def _bus(topology, n_masters, n_banks=8):
    region = memory_region("ram", 0, n_banks, 1024, AddressingMode.CONTIGUOUS)
    banks = [MemoryBank(b, 1024) for b in range(n_banks)]
    slaves = {region.bank_slave(b): BankSlave(banks[b]) for b in range(n_banks)}
    return Bus(topology, AddressMap([region]), [f"m{i}" for i in range(n_masters)], slaves)


def test_grant_and_response_timing():
    bus = _bus(Topology.FULLY_CONNECTED, 1)
    t = bus.request(BusTransaction("m0", 0x10, False, 5))
    bus.arbitrate(5)
    bus.respond(5)
    assert (t.grant_cycle, t.response_cycle) == (5, 6)
    assert not t.responded(5) and t.responded(6)


def test_unmapped_request_faults_next_cycle():
    bus = _bus(Topology.FULLY_CONNECTED, 1)
    t = bus.request(BusTransaction("m0", 0x9000_0000, False, 3))
    assert t.fault is FaultKind.DECODE and t.response_cycle == 4


def test_one_at_a_time_grants_one_per_cycle():
    bus = _bus(Topology.ONE_AT_A_TIME, 4)
    for i in range(4):
        bus.request(BusTransaction(f"m{i}", i * 1024, False, 0))
    assert len(bus.arbitrate(0)) == 1


def test_fully_connected_grants_distinct_slaves_in_parallel():
    bus = _bus(Topology.FULLY_CONNECTED, 4)
    for i in range(4):
        bus.request(BusTransaction(f"m{i}", i * 1024, False, 0))
    assert len(bus.arbitrate(0)) == 4


def test_fully_connected_serialises_same_slave():
    bus = _bus(Topology.FULLY_CONNECTED, 3)
    for i in range(3):
        bus.request(BusTransaction(f"m{i}", 4 * i, False, 0))
    assert len(bus.arbitrate(0)) == 1


@pytest.mark.parametrize("topology", list(Topology))
@pytest.mark.parametrize("k", range(1, 9))
def test_round_robin_never_starves(topology, k):
    """Under persistent k-way contention each master waits at most k-1 grants."""
    arb = Arbiter(topology, 8)
    masters = list(range(k))
    last = {m: -1 for m in masters}
    for cycle in range(20 * k):
        granted = arb.arbitrate({m: "bank0" for m in masters})
        assert len(granted) == 1
        last[granted[0]] = cycle
        if cycle >= k:
            assert all(cycle - last[m] <= k - 1 for m in masters)


@given(st.lists(st.sets(st.integers(0, 7), min_size=1), min_size=1, max_size=50))
def test_round_robin_picks_a_candidate(rounds):
    rr = RoundRobin(8)
    for cands in rounds:
        assert rr.pick(cands) in cands


@pytest.mark.parametrize("n", range(1, 9))
def test_peak_bandwidth(n):
    fc = PlatformConfig(topology=Topology.FULLY_CONNECTED)
    oaat = PlatformConfig(topology=Topology.ONE_AT_A_TIME)
    assert measure_peak_bandwidth(fc, n) == 32 * n
    assert measure_peak_bandwidth(oaat, n) == 32


def test_single_master_sustains_one_word_per_cycle():
    bus = _bus(Topology.FULLY_CONNECTED, 1)
    m = StreamMaster("m0", [(4 * i, False, 0) for i in range(100)])
    for c in range(102):
        m.issue(bus, c)
        bus.arbitrate(c)
        bus.respond(c)
    assert m.done and m.completed == 100


def test_trace_csv(tmp_path):
    region = memory_region("ram", 0, 1, 1024, AddressingMode.CONTIGUOUS)
    bus = Bus(Topology.FULLY_CONNECTED, AddressMap([region]), ["m0"],
              {"bank0": BankSlave(MemoryBank(0, 1024))}, trace=True)
    bus.request(BusTransaction("m0", 8, True, 0, write_data=7))
    bus.arbitrate(0)
    bus.respond(0)
    path = tmp_path / "t.csv"
    bus.write_trace_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("cycle,master,address")
    assert lines[1].split(",")[:5] == ["0", "m0", "0x00000008", "w", "0"]
