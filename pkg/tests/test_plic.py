import pytest

from xheep_sim.errors import ConfigurationError
from xheep_sim.interconnect import BusTransaction
from xheep_sim.plic import InterruptController


def ctl():
    c = InterruptController()
    c.add_line(1, "dma", priority=2, fast=True)
    c.add_line(5, "timer", priority=1)
    c.add_line(6, "gpio", priority=3)
    return c


def test_fast_line_visible_same_cycle_plic_line_next():
    c = ctl()
    c.raise_(1, 10)
    assert c.wake_pending(10)
    c2 = ctl()
    c2.raise_(5, 10)
    assert not c2.wake_pending(10) and c2.wake_pending(11)


def test_highest_priority_claimed_first_then_lowest_id():
    c = ctl()
    c.add_line(7, "other", priority=3)
    for i in (1, 5, 6, 7):
        c.raise_(i, 0)
    assert [c.claim(5) for _ in range(5)] == [6, 7, 1, 5, None]


def test_disabled_and_priority_zero_latch_without_delivery():
    c = ctl()
    c.enable(6, False)
    c.set_priority(5, 0)
    c.raise_(6, 0)
    c.raise_(5, 0)
    assert not c.wake_pending(3)
    c.enable(6, True)
    assert c.claim(3) == 6


def test_id_zero_reserved_and_duplicates():
    c = ctl()
    with pytest.raises(ConfigurationError):
        c.add_line(0, "x")
    with pytest.raises(ConfigurationError):
        c.add_line(5, "x")
    assert c.next_free_id(5) == 7


def test_register_claim():
    c = ctl()
    c.raise_(6, 0)
    t = BusTransaction("cpu.data", 0x3000, False, 4)
    t.offset = c.REG_CLAIM
    c.access(t, 4)
    assert t.read_data == 6 and not c.lines[6].pending


def test_signal_is_deferred_to_propagate():
    c = ctl()
    c.signal(1, 3)
    assert not c.wake_pending(3)
    c.propagate(3)
    assert c.wake_pending(3)


def test_claim_with_nothing_pending():
    assert ctl().claim(0) is None


def test_equal_priority_ties_go_to_the_lower_id():
    c = InterruptController()
    c.add_line(9, "b", priority=2)
    c.add_line(2, "a", priority=2)
    c.raise_(9, 0)
    c.raise_(2, 0)
    assert c.claim(1) == 2
