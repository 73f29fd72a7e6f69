"""Platform configuration and assembly.

Default memory map::

    0x0000_0000  main memory (bank_count x bank_size)
    0x2000_0000  always-on peripherals (one bus port): soc_ctrl, power, dma,
                 fll, uart, timer_ao
    0x3000_0000  peripheral domain (one bus port): plic, timer, gpio, i2c, spi
    0x4000_0000  SPI flash, execute-in-place window
    0x5000_0000  accelerator windows, allocated on attach
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

from .cpu import CpuMaster, Microprogram, get_profile
from .errors import ConfigurationError
from .interconnect import AddressingMode, AddressMap, Bus, Region, StreamMaster, Topology, memory_region
from .memory import ALL_CAPABILITIES, POISON, BankSlave, MemoryBank, MemoryRegion, PowerState
from .peripherals import (AdcStream, DmaEngine, FlashReader, PeripheralSubsystem, RegisterFile, Timer,
                          UartSink, constant_generator, csv_trace, prbs_generator, sine_generator)
from .plic import InterruptController
from .power import CalibrationTable, EnergyAccount, Fll, PowerManager, load_calibration
from .xaif import XAIF_WINDOW_BASE, XaifCapacity

RAM_BASE = 0x0000_0000
AO_PERIPH_BASE = 0x2000_0000
PERIPH_BASE = 0x3000_0000
FLASH_BASE = 0x4000_0000

# interrupt ids of the built-in sources
IRQ_DMA = 1
IRQ_TIMER_AO = 2
IRQ_DMA_ERROR = 3
IRQ_TIMER = 8

CPU_CAPABILITIES = frozenset({PowerState.CLOCK_GATED, PowerState.OFF})
PERIPH_CAPABILITIES = frozenset({PowerState.CLOCK_GATED, PowerState.OFF})


@dataclass
class AdcConfig:
    channel_count: int = 3
    sample_rate_hz: Fraction = Fraction(256)
    sample_bits: int = 16
    fifo_depth_words: int = 16
    samples_per_word: int = 1
    generator: dict = field(default_factory=lambda: {"kind": "constant", "value": 0})
    enabled: bool = False

    def make_generator(self):
        g = dict(self.generator)
        kind = g.pop("kind", "constant")
        if kind == "constant":
            return constant_generator(int(g.get("value", 0)))
        if kind == "sine":
            return sine_generator(float(g.get("amplitude", 1000)), float(g.get("frequency", 1.2)),
                                  float(self.sample_rate_hz), float(g.get("offset", 0)))
        if kind == "prbs":
            return prbs_generator(int(g.get("seed", 1)), self.sample_bits)
        if kind == "csv":
            return csv_trace(g["path"])
        raise ConfigurationError(f"unknown ADC generator {kind!r}")


@dataclass
class PlatformConfig:
    cpu_profile: str = "cv32e20"
    bank_count: int = 8
    bank_size: int = 32 * 1024
    topology: Topology = Topology.FULLY_CONNECTED
    addressing: AddressingMode = AddressingMode.CONTIGUOUS
    xaif: XaifCapacity = field(default_factory=XaifCapacity)
    peripheral_extra_latency: int = 2
    frequency_hz: Fraction = Fraction(100_000_000)
    voltage_v: Fraction = Fraction(4, 5)
    fll_lock_latency: int = 0
    dma_channels: int = 1
    latencies: Optional[dict] = None
    adc: AdcConfig = field(default_factory=AdcConfig)
    flash_image: bytes = b""
    flash_fetch_latency: int = 4
    flash_spi_latency: int = 0
    uart_log: Optional[str] = None
    poison: int = POISON
    cpu_sleep_state: PowerState = PowerState.CLOCK_GATED
    calibration: Optional[CalibrationTable] = None
    trace: bool = False

    def with_(self, **kw) -> "PlatformConfig":
        return replace(self, **kw)

    def validate(self) -> list[str]:
        errors = []
        try:
            get_profile(self.cpu_profile)
        except ConfigurationError as exc:
            errors.append(str(exc))
        if self.bank_count <= 0 or self.bank_count & (self.bank_count - 1):
            errors.append(f"bank_count must be a power of two, got {self.bank_count}")
        if self.bank_size <= 0 or self.bank_size % 4:
            errors.append(f"bank_size must be a positive multiple of 4, got {self.bank_size}")
        if self.bank_count * self.bank_size > AO_PERIPH_BASE - RAM_BASE:
            errors.append("main memory overlaps the peripheral windows")
        cal = self.calibration
        if cal is not None:
            try:
                cal.check_envelope(self.voltage_v, self.frequency_hz)
            except ConfigurationError as exc:
                errors.append(str(exc))
        return errors


class Platform:
    """All components of one simulated system, wired per a :class:`PlatformConfig`."""

    def __init__(self, config: Optional[PlatformConfig] = None):
        config = config or PlatformConfig()
        if config.calibration is None:
            config = replace(config, calibration=load_calibration())
        errs = config.validate()
        if errs:
            raise ConfigurationError("; ".join(errs))
        self.config = config
        cal = config.calibration
        from .kernel import SimClock
        self.clock = SimClock(config.frequency_hz, config.voltage_v, envelope_check=cal.check_envelope)
        self.events: list = []
        self.power = PowerManager(self.events)
        self.power.add_domain("always_on", kind="always-on", always_on=True)
        self.power.add_domain("cpu", CPU_CAPABILITIES, kind="cpu", latencies=config.latencies)
        self.power.add_domain("periph", PERIPH_CAPABILITIES, kind="peripheral", latencies=config.latencies)
        for b in range(config.bank_count):
            self.power.add_domain(f"bank{b}", ALL_CAPABILITIES, kind="memory", latencies=config.latencies)
        self.profile = get_profile(config.cpu_profile)
        self.energy = EnergyAccount(cal, self.power, self.clock, {"cpu": self.profile.dynamic_power_scale})
        self.clock.before_change.append(self.energy.flush)
        self.clock.after_change.append(self.energy.note_operating_point)
        charge = self.energy.charge

        self.interrupts = InterruptController()
        self.interrupts.add_line(IRQ_DMA, "dma", priority=2, fast=True)
        self.interrupts.add_line(IRQ_TIMER_AO, "timer_ao", priority=1, fast=True)
        self.interrupts.add_line(IRQ_DMA_ERROR, "dma-error", priority=3, fast=True)
        self.interrupts.add_line(IRQ_TIMER, "timer", priority=1)

        # memory
        self.banks = [MemoryBank(b, config.bank_size, psm=self.power.domain(f"bank{b}").psm,
                                 charge=charge, poison=config.poison)
                      for b in range(config.bank_count)]
        self.memory = MemoryRegion(self.banks, config.addressing)
        ram = memory_region("ram", RAM_BASE, config.bank_count, config.bank_size, config.addressing)
        self.address_map = AddressMap([ram])
        slaves: dict = {ram.bank_slave(b): BankSlave(bank) for b, bank in enumerate(self.banks)}

        # peripherals
        self.fll = Fll(self.clock, cal, config.fll_lock_latency, self.events)
        self.adc = AdcStream(self.clock, config.adc.channel_count, config.adc.sample_rate_hz,
                             config.adc.sample_bits, config.adc.fifo_depth_words,
                             config.adc.samples_per_word, config.adc.make_generator(),
                             events=self.events, enabled=config.adc.enabled)
        self.flash = FlashReader(config.flash_image, fetch_latency=config.flash_fetch_latency,
                                 spi_latency=config.flash_spi_latency)
        self.uart = UartSink(log_path=config.uart_log)
        self.dma = DmaEngine(config.dma_channels, interrupts=self.interrupts, charge=charge,
                             events=self.events, fifos=[self.adc.fifo, self.flash.fifo, self.uart.fifo])
        for ch in self.dma.channels:
            ch.done_irq_line = IRQ_DMA
            ch.error_irq_line = IRQ_DMA_ERROR
        self.timer_ao = Timer("timer_ao", self.interrupts, IRQ_TIMER_AO)
        self.timer = Timer("timer", self.interrupts, IRQ_TIMER)
        self.soc_ctrl = RegisterFile("soc_ctrl")

        lat = config.peripheral_extra_latency
        self.ao_periph = PeripheralSubsystem("ao_periph", lat, charge=charge, domain="always_on")
        for name, off, size, dev in (("soc_ctrl", 0x0000, 0x1000, self.soc_ctrl),
                                     ("power", 0x1000, 0x1000, self.power),
                                     ("dma", 0x2000, 0x1000, self.dma),
                                     ("fll", 0x3000, 0x1000, self.fll),
                                     ("uart", 0x4000, 0x1000, self.uart),
                                     ("timer_ao", 0x5000, 0x1000, self.timer_ao)):
            self.ao_periph.add(name, off, size, dev)
        periph_psm = self.power.domain("periph").psm
        self.periph = PeripheralSubsystem("periph", lat, psm=periph_psm, charge=charge, domain="periph")
        # the interrupt controller stays reachable while the peripheral domain is off
        self.interrupts.always_available = True
        for name, off, size, dev in (("plic", 0x0000, 0x4000, self.interrupts),
                                     ("timer", 0x4000, 0x1000, self.timer),
                                     ("gpio", 0x5000, 0x1000, RegisterFile("gpio")),
                                     ("i2c", 0x6000, 0x1000, RegisterFile("i2c")),
                                     ("spi", 0x7000, 0x1000, RegisterFile("spi"))):
            self.periph.add(name, off, size, dev)
        self.address_map.add(Region("ao_periph", AO_PERIPH_BASE, 0x10000, "ao_periph"))
        self.address_map.add(Region("periph", PERIPH_BASE, 0x10000, "periph"))
        self.address_map.add(Region("flash", FLASH_BASE, self.flash.size, "flash"))
        slaves["ao_periph"] = self.ao_periph
        slaves["periph"] = self.periph
        slaves["flash"] = self.flash

        self.symbols: dict[str, int] = {"ram": RAM_BASE, "flash": FLASH_BASE}
        for b in range(config.bank_count):
            self.symbols[f"bank{b}"] = self.bank_base(b)
        for sub, base in ((self.ao_periph, AO_PERIPH_BASE), (self.periph, PERIPH_BASE)):
            for name, off, _, _ in sub.devices:
                self.symbols[name] = base + off

        self.bus = Bus(config.topology, self.address_map, [], slaves, charge=charge, trace=config.trace)
        self.cpus: list[CpuMaster] = []
        self.stream_masters: list[StreamMaster] = []
        self.accelerators: list = []
        self.xaif_used = XaifCapacity()
        self.next_xaif_base = XAIF_WINDOW_BASE
        self._declare_ports()

    # -- wiring -----------------------------------------------------------

    def _declare_ports(self) -> None:
        for port in ("cpu.instr", "cpu.data", self.dma.read_port, self.dma.write_port):
            self.bus.add_master(port)

    def bank_base(self, b: int) -> int:
        if self.config.addressing is AddressingMode.CONTIGUOUS:
            return RAM_BASE + b * self.config.bank_size
        return RAM_BASE + 4 * b

    def load_program(self, program: Microprogram, name: str = "cpu") -> CpuMaster:
        if name != "cpu":
            for port in (f"{name}.instr", f"{name}.data"):
                if port not in self.bus.index:
                    self.bus.add_master(port)
        cpu = CpuMaster(program, self.profile, self.interrupts, self.energy.charge, self.events,
                        name=name, domain="cpu", psm=self.power.domain("cpu").psm,
                        sleep_state=self.config.cpu_sleep_state)
        self.cpus = [c for c in self.cpus if c.name != name] + [cpu]
        self.power.sleepers = [s for s in self.power.sleepers if s.name != name] + [cpu]
        return cpu

    def add_stream_master(self, master: StreamMaster) -> StreamMaster:
        self.bus.add_master(master.name)
        self.stream_masters.append(master)
        return master

    @property
    def cpu(self) -> Optional[CpuMaster]:
        return self.cpus[0] if self.cpus else None

    def attach(self, model, **kw):
        from .xaif import attach
        return attach(self, model, **kw)

    def accelerator(self, name: str):
        for a in self.accelerators:
            if a.name == name:
                return a
        raise KeyError(name)

    # -- kernel hooks (declaration order) --------------------------------

    def masters(self):
        yield from self.cpus
        yield self.dma
        yield from self.accelerators
        yield from self.stream_masters

    def tickers(self):
        yield self.adc
        yield self.flash
        yield self.uart
        yield self.timer_ao
        yield self.timer
        yield from self.accelerators

    def components(self):
        yield from self.cpus
        yield self.dma
        yield from self.accelerators
        yield self.adc
        yield self.flash
        yield self.uart
        yield self.timer_ao
        yield self.timer
        for s in self.stream_masters:
            yield _StreamProxy(s)

    def all_idle(self) -> bool:
        return (all(c.halted for c in self.cpus) and not self.dma.busy
                and not any(a.busy for a in self.accelerators)
                and all(s.done for s in self.stream_masters))

    # -- convenience ------------------------------------------------------

    def set_power(self, domain: str, state, cycle: Optional[int] = None) -> Optional[int]:
        """Request a transition now (lands at the start of the next cycle)."""
        st = PowerState.parse(state) if isinstance(state, str) else state
        c = self.clock.cycle_count if cycle is None else cycle
        return self.power.request_transition(domain, st, c, source="scenario")

    def force_power(self, domain: str, state) -> None:
        """Set a domain's state immediately (between phases)."""
        st = PowerState.parse(state) if isinstance(state, str) else state
        self.power.domain(domain).psm.force(st)

    def write_word(self, address: int, value: int) -> None:
        region = self.address_map.find(address)
        if region is None or region.name != "ram":
            raise ConfigurationError(f"backdoor write outside main memory at {address:#x}")
        self.memory.write_word(address - region.base, value)

    def read_word(self, address: int) -> int:
        region = self.address_map.find(address)
        if region is None or region.name != "ram":
            raise ConfigurationError(f"backdoor read outside main memory at {address:#x}")
        return self.memory.read_word(address - region.base)


class _StreamProxy:
    def __init__(self, s: StreamMaster):
        self.s = s

    def next_event(self, cycle: int):
        return None if self.s.done else cycle
