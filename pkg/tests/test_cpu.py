from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from xheep_sim.cpu import MicroprogramError, get_profile, parse_microprogram
from xheep_sim.interconnect import Topology
from xheep_sim.platform import IRQ_TIMER, IRQ_TIMER_AO, Platform, PlatformConfig
from xheep_sim.kernel import Simulator, StopCondition

from conftest import run_program


def straight_line_halt(ops):
    """Halt cycle of a loop-free program with code in bank 0 and data elsewhere.

    Fetches take one cycle and never contend with data, so op k starts at
    max(fetch response, previous end); the next fetch leaves when op k starts.
    """
    fetch_issue, prev_end = 0, 0
    for kind, n in ops:
        start = max(fetch_issue + 1, prev_end)
        fetch_issue = start
        if kind == "HALT":
            return start
        prev_end = start + n
    raise AssertionError("no HALT")


def to_text(ops):
    body = []
    for kind, n in ops:
        if kind == "COMPUTE":
            body.append(f"COMPUTE {n}")
        elif kind in ("LOAD", "STORE"):
            body.append(f"{kind} bank3 {n}")
        else:
            body.append(kind)
    return "\n".join(body) + "\n"


def test_ten_single_cycle_ops_halt_at_eleven():
    _, cpu, _ = run_program("COMPUTE 1\n" * 10 + "HALT\n")
    assert cpu.halt_cycle == 11
    assert cpu.executed_ops == 11 and cpu.fetch_count == 11


def test_long_compute_then_halt():
    _, cpu, _ = run_program("COMPUTE 10\nHALT\n")
    assert cpu.halt_cycle == 11


_op = st.one_of(st.tuples(st.just("COMPUTE"), st.integers(1, 40)),
                st.tuples(st.sampled_from(["LOAD", "STORE"]), st.integers(1, 8)))


@given(st.lists(_op, max_size=12), st.booleans())
def test_straight_line_timing_matches_oracle(body, ff):
    ops = body + [("HALT", 0)]
    _, cpu, _ = run_program(to_text(ops), fast_forward=ff)
    assert cpu.halt_cycle == straight_line_halt(ops)


_any_op = st.one_of(st.tuples(st.just("COMPUTE"), st.integers(1, 20)),
                    st.tuples(st.sampled_from(["LOAD", "STORE"]), st.integers(1, 6), st.integers(0, 3)))


def _mixed(ops):
    lines = []
    for op in ops:
        if op[0] == "COMPUTE":
            lines.append(f"COMPUTE {op[1]}")
        else:
            lines.append(f"{op[0]} bank{op[2]}+0x100 {op[1]}")
    return "\n".join(lines + ["HALT"]) + "\n"


@settings(max_examples=100)
@given(st.lists(_any_op, min_size=1, max_size=10))
def test_fully_connected_never_slower(ops):
    text = _mixed(ops)
    _, fc, _ = run_program(text, topology=Topology.FULLY_CONNECTED)
    _, one, _ = run_program(text, topology=Topology.ONE_AT_A_TIME)
    assert fc.halt_cycle <= one.halt_cycle


def test_shared_bank_contention_costs_cycles():
    # every fetch overlaps the previous op's data access
    text = "LOAD bank1 1\n" * 8 + "HALT\n"
    _, fc, _ = run_program(text, topology=Topology.FULLY_CONNECTED)
    _, one, _ = run_program(text, topology=Topology.ONE_AT_A_TIME)
    assert fc.halt_cycle < one.halt_cycle


def test_loops_and_variables():
    p, cpu, _ = run_program("LOOP 3 i\nLOOP 2 j\nSTORE bank2+8*i+4*j value=10*i+j\nENDLOOP\nENDLOOP\nHALT\n")
    base = p.bank_base(2)
    assert [p.read_word(base + 4 * k) for k in range(6)] == [0, 1, 10, 11, 20, 21]


def test_load_then_store_copies():
    p = Platform(PlatformConfig())
    for k in range(4):
        p.write_word(p.bank_base(1) + 4 * k, 100 + k)
    cpu = p.load_program(parse_microprogram("LOAD bank1 4\nSTORE bank2 4\nHALT\n", p.symbols))
    Simulator(p).run(StopCondition.all_halted(1000))
    assert [p.read_word(p.bank_base(2) + 4 * k) for k in range(4)] == [100, 101, 102, 103]
    assert cpu.halt_cycle == 9


def test_xpulp_divides_exactly():
    xp = get_profile("cv32e40p+xpulp")
    assert xp.compute_cycles(64, "matmul32") == 16
    assert xp.compute_cycles(64, "matmul8") == 4
    assert xp.compute_cycles(64, "generic") == 64
    assert xp.compute_cycles(10, "matmul32") == 3
    base = get_profile("cv32e40p")
    assert base.compute_cycles(64, "matmul32") == 64
    _, cpu, _ = run_program("COMPUTE 4096 matmul32\nCOMPUTE 4096 matmul8\nHALT\n", cpu_profile="cv32e40p+xpulp")
    assert cpu.compute_cycles == 1024 + 256


@pytest.mark.parametrize("line,irq,halt", [("timer_ao", IRQ_TIMER_AO, 102), ("timer", IRQ_TIMER, 103)])
@pytest.mark.parametrize("ff", [True, False])
def test_wfi_sleeps_gated_until_interrupt(line, irq, halt, ff):
    p = Platform(PlatformConfig())
    cpu = p.load_program(parse_microprogram("WFI\nHALT\n", p.symbols))
    getattr(p, line).arm(100)
    Simulator(p, ff).run(StopCondition.all_halted(10_000))
    assert cpu.latched_irqs == [irq]
    assert cpu.halt_cycle == halt
    assert p.energy.domain_totals()["cpu"].cycles["clock-gated"] >= 98


def test_wfi_without_wakeup_deadlocks_cleanly():
    p = Platform(PlatformConfig())
    p.load_program(parse_microprogram("WFI\nHALT\n", p.symbols))
    sim = Simulator(p)
    sim.run(StopCondition.all_halted(None))
    assert sim.deadlocked and any(e["kind"] == "deadlock" for e in p.events)


def test_data_fault_traps():
    p, cpu, _ = run_program("LOAD 0x1f000000\nHALT\n")
    assert cpu.trapped
    assert any(e["kind"] == "cpu-trap" for e in p.events)


@pytest.mark.parametrize("text,line,col", [
    ("COMPUTE 1\nFROB 2\nHALT\n", 2, 1),
    ("LOAD\nHALT\n", 1, 1),
    ("COMPUTE 0\nHALT\n", 1, 9),
    ("COMPUTE 4 fancy\nHALT\n", 1, 11),
    ("LOOP 2\nHALT\n", 1, 1),
    ("ENDLOOP\nHALT\n", 1, 1),
    ("   LOAD nowhere\nHALT\n", 1, 9),
    ("COMPUTE 1\n", 1, 1),
    ("LOOP 2 i\n  LOOP 2 i\n  ENDLOOP\nENDLOOP\nHALT\n", 2, 10),
])
def test_parse_errors_carry_position(text, line, col):
    with pytest.raises(MicroprogramError) as exc:
        parse_microprogram(text, {"bank0": 0}, source="prog.mprog")
    assert (exc.value.line, exc.value.col) == (line, col)
    assert str(exc.value).startswith(f"prog.mprog:{line}:{col}:")


def test_text_round_trip():
    syms = {"bank1": 0x8000}
    text = """.code 0x40
.equ N 3
LOOP N i
  LOAD bank1+16*i 4 8
  COMPUTE 7 matmul8
  STORE bank1+0x100+4*i value=2*i+1
  WFI gate
ENDLOOP
HALT
"""
    prog = parse_microprogram(text, syms)
    again = parse_microprogram(prog.to_text(), syms)
    assert again == prog
    assert again.code_base == 0x40


def test_profile_validation():
    from xheep_sim.cpu import CpuProfile
    from xheep_sim.errors import ConfigurationError
    with pytest.raises(ConfigurationError):
        CpuProfile("bad", compute_cycle_scale=Fraction(0))
    with pytest.raises(ConfigurationError):
        get_profile("nope")


def test_halt_first_completes_in_the_second_step():
    # the HALT word still has to be fetched: request in cycle 0, execute in cycle 1
    _, cpu, sim = run_program("HALT\n", fast_forward=False)
    assert cpu.halt_cycle == 1 and sim.steps == 2


_loop_body = st.lists(st.one_of(st.builds("COMPUTE {}".format, st.integers(1, 9)),
                                st.builds("LOAD bank2+{} 2".format, st.sampled_from([0, 8, 64]))),
                      min_size=1, max_size=4)


@given(st.lists(st.tuples(st.integers(0, 4), _loop_body), max_size=3))
def test_every_executed_op_is_fetched_once(loops):
    lines = []
    for count, body in loops:
        lines += [f"LOOP {count}"] + body + ["ENDLOOP"]
    _, cpu, _ = run_program("\n".join(lines + ["HALT"]) + "\n")
    assert cpu.fetch_count == cpu.executed_ops
    # LOOP once, then the body and ENDLOOP per iteration
    expected = 1 + sum(1 + count * (len(body) + 1) for count, body in loops)
    assert cpu.executed_ops == expected


def test_no_cpu_clock_energy_while_asleep():
    p = Platform(PlatformConfig())
    p.load_program(parse_microprogram("WFI\nHALT\n", p.symbols))
    p.timer_ao.arm(500)
    Simulator(p).run(StopCondition.all_halted(10_000))
    tally = p.energy.domain_totals()["cpu"]
    assert tally.cycles["clock-gated"] >= 490
    # clock energy accrues only for cycles spent on
    assert tally.clock_feature == tally.cycles["on"] * p.profile.dynamic_power_scale


def test_wfi_with_interrupt_already_pending_falls_through():
    p = Platform(PlatformConfig())
    cpu = p.load_program(parse_microprogram("COMPUTE 20\nWFI\nHALT\n", p.symbols))
    p.timer_ao.arm(5)
    Simulator(p).run(StopCondition.all_halted(10_000))
    assert cpu.latched_irqs == [IRQ_TIMER_AO]
    assert cpu.halt_cycle == straight_line_halt([("COMPUTE", 20), ("WFI", 1), ("HALT", 0)])
    assert cpu.wfi_entries == 1 and p.energy.domain_totals()["cpu"].cycles["clock-gated"] == 0


def test_wake_latches_the_highest_priority_line():
    from xheep_sim.platform import IRQ_DMA
    for order in ((3, 4), (4, 3)):
        p = Platform(PlatformConfig())
        cpu = p.load_program(parse_microprogram("COMPUTE 30\nWFI\nHALT\n", p.symbols))
        p.timer_ao.arm(order[0])
        p.dma.channels[0].configure(p.bank_base(1), p.bank_base(2), 4)
        p.dma.start(0, order[1])
        Simulator(p).run(StopCondition.all_halted(10_000))
        assert cpu.latched_irqs == [IRQ_DMA]
