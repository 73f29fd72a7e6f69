"""End-to-end acceptance checks, one per criterion.

Each test records a PASS/FAIL line; conftest prints them all at the end of
the session so they land in the captured test output.
"""
import time
from fractions import Fraction

import pytest

from xheep_sim.benchmarks import conv_scenario, program_text
from xheep_sim.cpu import parse_microprogram
from xheep_sim.errors import AccessFault
from xheep_sim.interconnect import AddressingMode, BusTransaction, FaultKind, Topology
from xheep_sim.kernel import Simulator, StopCondition
from xheep_sim.platform import Platform, PlatformConfig
from xheep_sim.power import EnvelopeError, load_calibration
from xheep_sim.scenario import Scenario, run_scenario
from xheep_sim.sweep import sweep

CAL = load_calibration()
RESULTS: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def within(x, target, rel):
    return abs(x / target - 1) <= rel


def test_criterion_1_bandwidth_scales_with_ports():
    t0 = time.perf_counter()
    lines = {}
    for mode in AddressingMode:
        for topo in Topology:
            cfg = PlatformConfig(topology=topo, addressing=mode)
            rows = sweep(Scenario("ports", cfg, []), "ports", list(range(1, 9)))
            lines[(mode, topo)] = [r["bits_per_cycle"] for r in rows]
    elapsed = time.perf_counter() - t0
    ok = elapsed < 10
    for (mode, topo), bw in lines.items():
        want = [32 * n for n in range(1, 9)] if topo is Topology.FULLY_CONNECTED else [32] * 8
        ok &= bw == want
    fc = lines[(AddressingMode.CONTIGUOUS, Topology.FULLY_CONNECTED)]
    record(1, ok, f"fully-connected {fc} bits/cycle, one-at-a-time 32 for all n, {elapsed:.2f} s")


def _matmul_cycles(topology, profile="cv32e40p", prog="matmul16.mprog"):
    p = Platform(PlatformConfig(cpu_profile=profile, topology=topology))
    cpu = p.load_program(parse_microprogram(program_text(prog), p.symbols, source=prog))
    Simulator(p).run(StopCondition.all_halted(10_000_000))
    assert not cpu.trapped
    return cpu


def test_criterion_2_matmul_topology_gap():
    from test_cpu import test_fully_connected_never_slower
    fc = _matmul_cycles(Topology.FULLY_CONNECTED).halt_cycle
    one = _matmul_cycles(Topology.ONE_AT_A_TIME).halt_cycle
    ratio = fc / one
    test_fully_connected_never_slower()
    record(2, abs(ratio - 0.66) <= 0.10,
           f"fully-connected {fc} vs one-at-a-time {one} cycles, ratio {ratio:.4f} (0.66 +- 0.10); "
           f"100 random programs never slower")


def test_criterion_3_xpulp_speedup():
    base32 = _matmul_cycles(Topology.FULLY_CONNECTED).compute_cycles
    fast32 = _matmul_cycles(Topology.FULLY_CONNECTED, "cv32e40p+xpulp").compute_cycles
    base8 = _matmul_cycles(Topology.FULLY_CONNECTED, prog="matmul16_int8.mprog").compute_cycles
    fast8 = _matmul_cycles(Topology.FULLY_CONNECTED, "cv32e40p+xpulp", "matmul16_int8.mprog").compute_cycles
    ok = fast32 * 4 == base32 and fast8 * 16 == base8
    record(3, ok, f"32-bit {base32} -> {fast32} compute cycles (/4), 8-bit {base8} -> {fast8} (/16)")


def test_criterion_4_acquisition_staging(anchor_powers):
    a, g, c = (anchor_powers[f"acquisition-{v}"] for v in ("all-on", "gated", "cpu-off"))
    d1, d2 = g / a - 1, c / g - 1
    ok = (within(a, 384e-6, 0.05) and within(g, 310e-6, 0.05) and within(c, 286e-6, 0.05)
          and abs(d1 + 0.19) <= 0.02 and abs(d2 + 0.08) <= 0.02)
    record(4, ok, f"{a * 1e6:.1f} / {g * 1e6:.1f} / {c * 1e6:.1f} uW, steps {100 * d1:+.1f} % and {100 * d2:+.1f} %")


def test_criterion_5_processing_staging(anchor_powers):
    full, gated = anchor_powers["processing-full"], anchor_powers["processing-gated"]
    d = gated / full - 1
    ok = within(full, 8.17e-3, 0.05) and within(gated, 7.68e-3, 0.05) and abs(d + 0.06) <= 0.02
    record(5, ok, f"{full * 1e3:.3f} mW full, {gated * 1e3:.3f} mW gated, step {100 * d:+.1f} %")


def test_criterion_6_accelerator_energy_ratios(conv_comparison):
    c = conv_comparison
    r_cgra, r_imc = c.ratio("cgra"), c.ratio("imc")
    p_cgra, p_imc = c.power_w["cgra"], c.power_w["imc"]
    ok = (abs(r_cgra - 4.9) <= 0.3 and abs(r_imc - 4.8) <= 0.3
          and within(p_cgra, 4.01e-3, 0.05) and within(p_imc, 1.65e-3, 0.05))
    record(6, ok, f"E_cpu/E_cgra {r_cgra:.3f}, E_cpu/E_imc {r_imc:.3f}; "
                  f"CGRA {p_cgra * 1e3:.3f} mW, IMC {p_imc * 1e3:.3f} mW at 60 MHz")


def test_criterion_7_operating_envelope(anchor_powers):
    low, high = anchor_powers["idle-32khz"], anchor_powers["full-470mhz"]
    rejected = []
    for v, f in ((Fraction(4, 5), 170_000_001), (Fraction(1), 320_000_001), (Fraction(6, 5), 470_000_001)):
        p = Platform(PlatformConfig(calibration=CAL, voltage_v=v, frequency_hz=Fraction(10**6)))
        with pytest.raises(EnvelopeError):
            p.fll.set_frequency(f, 0)
        p.fll.set_frequency(CAL.f_max(v), 0)
        t = BusTransaction("cpu.data", 0, True, 0, write_data=f)
        with pytest.raises(AccessFault) as exc:
            p.fll.access(t, 0)
        rejected.append(exc.value.kind is FaultKind.REJECTED)
    ok = within(low, 270e-6, 0.10) and within(high, 48e-3, 0.10) and all(rejected)
    record(7, ok, f"{low * 1e6:.1f} uW at 32 kHz / 0.8 V, {high * 1e3:.2f} mW at 470 MHz / 1.2 V "
                  f"({100 * (high / 48e-3 - 1):+.1f} %), above-f_max requests rejected")


def test_criterion_8_property_suites():
    from test_interconnect import test_decode_is_a_bijection_over_256_kib, test_round_robin_never_starves
    from test_memory import test_retention_preserves_contents
    from test_power import test_domain_energies_add_up, test_fast_forward_is_bit_identical
    from test_xaif import test_imc_memory_mode_is_plain_memory
    for mode in AddressingMode:
        test_decode_is_a_bijection_over_256_kib(mode)
    test_retention_preserves_contents()
    for topo in Topology:
        for k in range(1, 9):
            test_round_robin_never_starves(topo, k)
    reports = [run_scenario(conv_scenario("cgra"), write_outputs=False).report.to_json() for _ in range(2)]
    assert reports[0] == reports[1]
    test_fast_forward_is_bit_identical()
    test_domain_energies_add_up()
    test_imc_memory_mode_is_plain_memory()
    record(8, True, "decode bijection, retention, round-robin k<=8, determinism, "
                    "energy additivity, IMC memory-mode equivalence")
