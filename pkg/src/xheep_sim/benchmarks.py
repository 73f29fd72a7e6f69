"""Healthcare benchmark scenarios and the calibration anchor workloads.

Acquisition phases are real ADC -> DMA -> memory transfers with the CPU
sleeping between blocks. Processing phases are traffic/compute shapes: the
shipped matmul and convolution microprograms stand in for the classifier
kernels, since only cycle counts and power states matter for energy.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from typing import Callable, Optional

import numpy as np

from .interconnect import AddressingMode, Topology
from .kernel import StopCondition
from .memory import PowerState
from .platform import AdcConfig, PlatformConfig
from .power import CalibrationTable, load_calibration
from .scenario import AcceleratorSpec, PhaseSpec, Scenario, run_scenario
from .xaif import CgraKernel, CgraLaneDescriptor, XaifCapacity

KIB = 1024
MHZ = 1_000_000


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    leads: int
    window_s: int
    sample_rate_hz: int = 256
    sample_bits: int = 16
    dma_blocks: int = 120
    processing_tiles: int = 1

    @property
    def samples(self) -> int:
        return self.leads * self.sample_rate_hz * self.window_s

    @property
    def input_bytes(self) -> int:
        return self.samples * self.sample_bits // 8

    @property
    def input_words(self) -> int:
        return self.input_bytes // 4

    @property
    def block_words(self) -> int:
        return self.input_words // self.dma_blocks

    @property
    def banks_needed(self) -> int:
        """Banks in use: code in bank 0, samples from bank 1 onwards."""
        return 1 + -(-self.input_bytes // (32 * KIB))


BENCHMARKS = {
    "heartbeat-classifier": BenchmarkSpec("heartbeat-classifier", leads=3, window_s=15, dma_blocks=120),
    "seizure-cnn": BenchmarkSpec("seizure-cnn", leads=23, window_s=4, dma_blocks=64, processing_tiles=4),
}


def get_benchmark(name: str) -> BenchmarkSpec:
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; known: {sorted(BENCHMARKS)}") from None


def program_text(name: str) -> str:
    return resources.files("xheep_sim").joinpath(f"data/programs/{name}").read_text()


HEEPOCRATES_XAIF = XaifCapacity(slave_ports=3, master_ports=4, interrupt_lines=1, power_domains=3)
HEEPOCRATES_ACCELERATORS = (AcceleratorSpec("cgra", "cgra"), AcceleratorSpec("imc", "imc"))
ACCELERATOR_DOMAINS = ("cgra_logic", "cgra_ctx", "imc_array")


def heepocrates_platform(calibration: Optional[CalibrationTable] = None, **kw) -> PlatformConfig:
    """8 x 32 KiB contiguous banks, fully-connected bus, CV32E20, XAIF sized for CGRA + IMC."""
    base = dict(cpu_profile="cv32e20", bank_count=8, bank_size=32 * KIB,
                topology=Topology.FULLY_CONNECTED, addressing=AddressingMode.CONTIGUOUS,
                xaif=HEEPOCRATES_XAIF, frequency_hz=Fraction(MHZ), voltage_v=Fraction(4, 5),
                calibration=calibration)
    base.update(kw)
    return PlatformConfig(**base)


def gate_unused(used_banks, bank_count: int = 8, periph: bool = True,
                accelerators=ACCELERATOR_DOMAINS) -> dict:
    """Power directives switching off every bank not in ``used_banks`` plus the
    peripheral domain and the given accelerator domains."""
    d = {f"bank{b}": PowerState.OFF for b in range(bank_count) if b not in used_banks}
    if periph:
        d["periph"] = PowerState.OFF
    for dom in accelerators:
        d[dom] = PowerState.OFF
    return d


# ---------------------------------------------------------------------------
# acquisition


ACQUISITION_VARIANTS = {
    "all-on": "all domains on, CPU clock-gated while waiting",
    "gated": "unused banks, peripheral domain and accelerators off",
    "cpu-off": "as gated, CPU powered off while waiting",
}


def acquisition_program(bench: BenchmarkSpec) -> str:
    block_bytes = 4 * bench.block_words
    return f"""\
# {bench.name}: {bench.dma_blocks} ADC blocks of {bench.block_words} words into bank1
.code bank0
STORE dma + 0x14 value=1
STORE dma + 0x08 value={block_bytes}
LOOP {bench.dma_blocks} b
  STORE dma + 0x04 value=bank1 + {block_bytes}*b
  STORE dma + 0x1C value=1
  WFI
ENDLOOP
HALT
"""


def adc_config(bench: BenchmarkSpec) -> AdcConfig:
    return AdcConfig(channel_count=bench.leads, sample_rate_hz=Fraction(bench.sample_rate_hz),
                     sample_bits=bench.sample_bits, fifo_depth_words=16, samples_per_word=2,
                     generator={"kind": "sine", "amplitude": 1000, "frequency": 1.2})


def acquisition_phase(bench: BenchmarkSpec, variant: str = "cpu-off",
                      frequency_hz=MHZ, voltage_v=Fraction(4, 5)) -> PhaseSpec:
    if variant not in ACQUISITION_VARIANTS:
        raise KeyError(f"unknown acquisition variant {variant!r}")
    power = {} if variant == "all-on" else gate_unused(range(bench.banks_needed))
    return PhaseSpec(
        name="acquisition", voltage_v=Fraction(voltage_v), frequency_hz=Fraction(frequency_hz),
        program_text=acquisition_program(bench), program_source=f"<{bench.name} acquisition>",
        power=power,
        cpu_idle=PowerState.OFF if variant == "cpu-off" else PowerState.CLOCK_GATED,
        adc=True, stop=StopCondition.phase(duration_s=bench.window_s, until_halted=False))


# ---------------------------------------------------------------------------
# processing


PROCESSING_VARIANTS = {
    "full": "every domain on",
    "gated": "unused banks, peripheral domain and accelerators off",
}


def processing_program(bench: BenchmarkSpec) -> str:
    body = program_text("matmul16.mprog")
    if bench.processing_tiles == 1:
        return body
    lines = body.splitlines()
    out, opened = [], False
    for line in lines:
        s = line.strip()
        if not opened and s.startswith("LOOP"):
            out.append(f"LOOP {bench.processing_tiles} tile")
            opened = True
        if s == "HALT":
            out.append("ENDLOOP")
        out.append(line)
    return "\n".join(out) + "\n"


def processing_phase(bench: BenchmarkSpec, variant: str = "gated",
                     frequency_hz=170 * MHZ, voltage_v=Fraction(4, 5)) -> PhaseSpec:
    if variant not in PROCESSING_VARIANTS:
        raise KeyError(f"unknown processing variant {variant!r}")
    power = {d: PowerState.ON for d in ("cpu", "periph", *ACCELERATOR_DOMAINS)}
    power.update({f"bank{b}": PowerState.ON for b in range(8)})
    if variant == "gated":
        power.update(gate_unused(range(2)))
    return PhaseSpec(
        name="processing", voltage_v=Fraction(voltage_v), frequency_hz=Fraction(frequency_hz),
        program_text=processing_program(bench), program_source=f"<{bench.name} processing>",
        power=power, cpu_idle=PowerState.CLOCK_GATED, adc=False,
        stop=StopCondition.all_halted())


def benchmark_scenario(name: str, acquisition: str = "cpu-off", processing: str = "gated",
                       calibration: Optional[CalibrationTable] = None) -> Scenario:
    bench = get_benchmark(name)
    cfg = heepocrates_platform(calibration, adc=adc_config(bench))
    return Scenario(bench.name, cfg,
                    [acquisition_phase(bench, acquisition), processing_phase(bench, processing)],
                    accelerators=list(HEEPOCRATES_ACCELERATORS))


# ---------------------------------------------------------------------------
# 16x16 convolution: CPU, CGRA, IMC


CONV_N = 16
CONV_K = 3
CONV_OUT = CONV_N - CONV_K + 1
CONV_FREQUENCY_HZ = 60 * MHZ


def conv_operands(seed: int = 7):
    rng = np.random.default_rng(seed)
    image = rng.integers(-128, 128, size=(CONV_N, CONV_N), dtype=np.int64)
    weights = rng.integers(-8, 8, size=(CONV_K, CONV_K), dtype=np.int64)
    return image, weights


def conv_reference(image, weights):
    """Valid 2-D correlation with 32-bit wrap-around."""
    out = np.zeros((CONV_OUT, CONV_OUT), dtype=np.int64)
    for r in range(CONV_K):
        for c in range(CONV_K):
            out += weights[r, c] * image[r:r + CONV_OUT, c:c + CONV_OUT]
    return ((out + (1 << 31)) % (1 << 32)) - (1 << 31)


def _write_image(platform, base: int, image) -> None:
    for (r, c), v in np.ndenumerate(image):
        platform.write_word(base + 4 * (r * CONV_N + c), int(v) & 0xFFFFFFFF)


def cgra_conv_kernel(platform, weights, cycles_per_element: int) -> CgraKernel:
    """Four lanes, 49 outputs each; lane k reads its own image copy in bank k+1."""
    per_lane = CONV_OUT * CONV_OUT // 4
    lanes = []
    for k in range(4):
        base = platform.bank_base(k + 1)
        lanes.append(CgraLaneDescriptor(in_base=base, in_row_stride=4 * CONV_N, out_cols=CONV_OUT,
                                        first_element=k * per_lane, n_elements=per_lane,
                                        out_base=base + 0x400))
    return CgraKernel(CONV_K, CONV_K, cycles_per_element, lanes, [int(w) for w in weights.flat])


def read_cgra_output(platform):
    per_lane = CONV_OUT * CONV_OUT // 4
    flat = []
    for k in range(4):
        base = platform.bank_base(k + 1) + 0x400
        flat += [platform.read_word(base + 4 * i) for i in range(per_lane)]
    arr = np.array(flat, dtype=np.int64).reshape(CONV_OUT, CONV_OUT)
    return np.where(arr >= 1 << 31, arr - (1 << 32), arr)


IMC_OUT_ROW = 57
IMC_WEIGHT_ROW = 48


def imc_preload(imc, image, weights) -> None:
    """Lay out shifted input rows, broadcast weight rows and zeroed outputs."""
    w = imc.row_words
    for y in range(CONV_N):
        for s in range(CONV_K):
            row = [int(image[y, x + s]) if x + s < CONV_N else 0 for x in range(w)]
            imc.set_row(3 * y + s, row)
    for r in range(CONV_K):
        for c in range(CONV_K):
            imc.set_row(IMC_WEIGHT_ROW + 3 * r + c, [int(weights[r, c])] * w)
    for r in range(CONV_OUT):
        imc.set_row(IMC_OUT_ROW + r, [0] * w)


def read_imc_output(imc):
    rows = []
    for r in range(CONV_OUT):
        vals = imc.row(IMC_OUT_ROW + r)[:CONV_OUT]
        rows.append([v - (1 << 32) if v >= 1 << 31 else v for v in vals])
    return np.array(rows, dtype=np.int64)


CONV_ENGINES = ("cpu", "cgra", "imc")


def conv_scenario(engine: str, calibration: Optional[CalibrationTable] = None, seed: int = 7) -> Scenario:
    if engine not in CONV_ENGINES:
        raise KeyError(f"unknown convolution engine {engine!r}")
    cal = calibration or load_calibration()
    image, weights = conv_operands(seed)
    cfg = heepocrates_platform(cal, frequency_hz=Fraction(CONV_FREQUENCY_HZ))
    setup: list[Callable] = []
    if engine == "cpu":
        prog, used, accel_off, idle = "conv3x3.mprog", range(2), ACCELERATOR_DOMAINS, PowerState.CLOCK_GATED
        setup.append(lambda p: _write_image(p, p.bank_base(1), image))
    elif engine == "cgra":
        prog, used, accel_off, idle = "cgra_launch.mprog", range(5), ("imc_array",), PowerState.OFF
        cpe = int(cal.accelerators.get("cgra", {}).get("cycles_per_element", 4))

        def cgra_setup(p):
            for k in range(4):
                _write_image(p, p.bank_base(k + 1), image)
            p.accelerator("cgra").load_context(cgra_conv_kernel(p, weights, cpe))
        setup.append(cgra_setup)
    else:
        prog, used, accel_off, idle = "imc_conv3x3.mprog", range(1), ("cgra_logic", "cgra_ctx"), PowerState.CLOCK_GATED
        setup.append(lambda p: imc_preload(p.accelerator("imc"), image, weights))
    phase = PhaseSpec(f"conv-{engine}", voltage_v=Fraction(4, 5), frequency_hz=Fraction(CONV_FREQUENCY_HZ),
                      program_text=program_text(prog), program_source=prog,
                      power=gate_unused(used, accelerators=accel_off), cpu_idle=idle,
                      stop=StopCondition.all_halted())
    return Scenario(f"conv-{engine}", cfg, [phase], accelerators=list(HEEPOCRATES_ACCELERATORS),
                    setup=setup)


# ---------------------------------------------------------------------------
# operating-envelope endpoints


def deep_idle_scenario(calibration: Optional[CalibrationTable] = None, duration_s=1) -> Scenario:
    """32 kHz bypass clock, 0.8 V; only the always-on domain runs, banks 0-1 retain."""
    power = gate_unused(range(2))
    power.update({"cpu": PowerState.OFF, "bank0": PowerState.RETENTION, "bank1": PowerState.RETENTION})
    phase = PhaseSpec("idle", voltage_v=Fraction(4, 5), fll_bypass=True, power=power,
                      stop=StopCondition.phase(duration_s=duration_s, until_halted=False))
    return Scenario("idle-32khz", heepocrates_platform(calibration), [phase],
                    accelerators=list(HEEPOCRATES_ACCELERATORS))


def peak_scenario(calibration: Optional[CalibrationTable] = None) -> Scenario:
    """Full-active processing at the top of the envelope (470 MHz, 1.2 V)."""
    bench = get_benchmark("heartbeat-classifier")
    phase = processing_phase(bench, "full", frequency_hz=470 * MHZ, voltage_v=Fraction(6, 5))
    return Scenario("full-470mhz", heepocrates_platform(calibration), [phase],
                    accelerators=list(HEEPOCRATES_ACCELERATORS))


# ---------------------------------------------------------------------------
# anchors


def anchor_scenarios(calibration: Optional[CalibrationTable] = None) -> dict:
    """anchor name -> (scenario, phase whose average power is compared)."""
    hb = get_benchmark("heartbeat-classifier")
    seizure = get_benchmark("seizure-cnn")

    def acq(variant):
        return Scenario(f"heartbeat-{variant}", heepocrates_platform(calibration, adc=adc_config(hb)),
                        [acquisition_phase(hb, variant)], accelerators=list(HEEPOCRATES_ACCELERATORS))

    def proc(variant):
        return Scenario(f"seizure-{variant}", heepocrates_platform(calibration),
                        [processing_phase(seizure, variant)], accelerators=list(HEEPOCRATES_ACCELERATORS))

    return {
        "acquisition-all-on": (acq("all-on"), "acquisition"),
        "acquisition-gated": (acq("gated"), "acquisition"),
        "acquisition-cpu-off": (acq("cpu-off"), "acquisition"),
        "processing-full": (proc("full"), "processing"),
        "processing-gated": (proc("gated"), "processing"),
        "cgra-active": (conv_scenario("cgra", calibration), "conv-cgra"),
        "imc-active": (conv_scenario("imc", calibration), "conv-imc"),
        "idle-32khz": (deep_idle_scenario(calibration), "idle"),
        "full-470mhz": (peak_scenario(calibration), "processing"),
    }


@dataclass
class ConvComparison:
    cycles: dict
    energy_j: dict
    power_w: dict

    def ratio(self, engine: str) -> float:
        return self.energy_j["cpu"] / self.energy_j[engine]


def compare_conv(calibration: Optional[CalibrationTable] = None) -> ConvComparison:
    cycles, energy, power = {}, {}, {}
    for engine in CONV_ENGINES:
        rep = run_scenario(conv_scenario(engine, calibration), write_outputs=False).report
        ph = rep.phase(f"conv-{engine}")
        cycles[engine] = ph["cycles"]
        energy[engine] = ph["energy_j"]
        power[engine] = ph["average_power_w"]
    return ConvComparison(cycles, energy, power)
