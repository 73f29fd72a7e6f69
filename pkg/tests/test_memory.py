import pytest
from hypothesis import given, strategies as st

from xheep_sim.errors import AccessFault, ConfigurationError
from xheep_sim.interconnect import AddressingMode, FaultKind
from xheep_sim.memory import (POISON, MemoryBank, MemoryRegion, PowerState, PowerStateMachine)


def settle(psm, start, target):
    lat = psm.request(target, start)
    c = start
    while psm.next_event() is not None:
        c += 1
        psm.apply_due(c)
    return lat, c


def test_gating_reports_next_cycle_ungating_after_latency():
    psm = PowerStateMachine("d")
    assert psm.request(PowerState.OFF, 10) == 1
    psm.apply_due(10)
    assert psm.state is PowerState.ON
    psm.apply_due(11)
    assert psm.state is PowerState.OFF
    assert psm.request(PowerState.ON, 20) == 10
    psm.apply_due(29)
    assert psm.state is PowerState.OFF
    psm.apply_due(30)
    assert psm.state is PowerState.ON


def test_illegal_transitions():
    ao = PowerStateMachine("ao", always_on=True)
    with pytest.raises(ConfigurationError):
        ao.request(PowerState.OFF, 0)
    cpu = PowerStateMachine("cpu", {PowerState.CLOCK_GATED, PowerState.OFF})
    with pytest.raises(ConfigurationError):
        cpu.request(PowerState.RETENTION, 0)
    bank = PowerStateMachine("b")
    settle(bank, 0, PowerState.OFF)
    with pytest.raises(ConfigurationError):
        bank.request(PowerState.RETENTION, 50)


@pytest.mark.parametrize("state,kind", [(PowerState.CLOCK_GATED, FaultKind.GATED),
                                        (PowerState.RETENTION, FaultKind.RETAINED),
                                        (PowerState.OFF, FaultKind.POWERED_OFF)])
def test_access_outside_on_faults(state, kind):
    bank = MemoryBank(0, 1024)
    bank.psm.force(state)
    with pytest.raises(AccessFault) as exc:
        bank.access(0, False)
    assert exc.value.kind is kind


def test_off_poisons_contents():
    bank = MemoryBank(0, 64)
    bank.write_word(8, 1234)
    bank.psm.force(PowerState.OFF)
    bank.psm.force(PowerState.ON)
    assert bank.read_word(8) == POISON


def test_byte_enable():
    bank = MemoryBank(0, 64)
    bank.write_word(0, 0x11223344)
    bank.access(0, True, byte_enable=0b0101, write_data=0xAABBCCDD)
    assert bank.read_word(0) == 0x11BB33DD


_NON_OFF = st.sampled_from([PowerState.ON, PowerState.CLOCK_GATED, PowerState.RETENTION])


@given(st.lists(st.integers(0, 0xFFFFFFFF), min_size=16, max_size=16), st.lists(_NON_OFF, max_size=20))
def test_retention_preserves_contents(words, schedule):
    bank = MemoryBank(0, 64)
    for i, w in enumerate(words):
        bank.write_word(4 * i, w)
    c = 0
    for target in schedule:
        _, c = settle(bank.psm, c, target)
    _, c = settle(bank.psm, c, PowerState.ON)
    assert [bank.read_word(4 * i) for i in range(16)] == words


@pytest.mark.parametrize("mode", list(AddressingMode))
def test_region_image_round_trip(tmp_path, mode):
    banks = [MemoryBank(b, 256) for b in range(4)]
    region = MemoryRegion(banks, mode)
    data = bytes(range(256)) * 4
    path = tmp_path / "img.bin"
    path.write_bytes(data)
    region.load_image_file(path)
    out = tmp_path / "out.bin"
    region.save_image_file(out)
    assert out.read_bytes() == data
    if mode is AddressingMode.INTERLEAVED:
        assert banks[1].read_word(0) == int.from_bytes(data[4:8], "little")
