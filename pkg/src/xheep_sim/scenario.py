"""Scenario files: declarative multi-phase workloads.

A scenario is a TOML document. Every physical quantity is a string with an
explicit unit; a bare number where a quantity is expected is a validation
error. Example::

    [scenario]
    name = "demo"

    [platform]
    cpu_profile = "cv32e20"
    bank_count = 8
    bank_size = "32 KiB"
    topology = "fully-connected"
    addressing = "contiguous"
    xaif = { slave_ports = 3, master_ports = 4, interrupt_lines = 1, power_domains = 3 }

    [[accelerator]]
    kind = "cgra"

    [[phase]]
    name = "acquisition"
    voltage = "0.8 V"
    frequency = "1 MHz"
    program = "programs/acquire.mprog"
    power = { bank2 = "off", periph = "off" }
    cpu_idle = "off"
    adc = "on"
    stop = { duration = "15 s" }
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional

from .cpu import MicroprogramError, parse_microprogram
from .errors import ConfigurationError
from .interconnect import AddressingMode, Topology
from .kernel import Simulator, StopCondition
from .memory import PowerState
from .platform import AdcConfig, Platform, PlatformConfig
from .power import BYPASS_FREQUENCY_HZ, CalibrationTable, load_calibration
from .report import EnergyReport
from .units import UnitError, parse_quantity
from .xaif import CgraModel, ImcModel, XaifCapacity

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class ValidationIssue:
    location: str
    message: str

    def to_dict(self) -> dict:
        return {"location": self.location, "message": self.message}

    def __str__(self) -> str:
        return f"{self.location}: {self.message}"


class ScenarioError(ConfigurationError):
    def __init__(self, issues: list[ValidationIssue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))


@dataclass
class AcceleratorSpec:
    kind: str
    name: str
    params: dict = field(default_factory=dict)
    window: Optional[int] = None
    irq_priority: int = 4


@dataclass
class Preload:
    address: str
    words: Optional[list] = None
    file: Optional[str] = None
    random_words: int = 0
    seed: int = 0
    mask: int = 0xFFFFFFFF


@dataclass
class PhaseSpec:
    name: str
    voltage_v: Optional[Fraction] = None
    frequency_hz: Optional[Fraction] = None
    fll_bypass: bool = False
    program_text: Optional[str] = None
    program_source: str = "<inline>"
    power: dict = field(default_factory=dict)
    cpu_idle: Optional[PowerState] = None
    adc: Optional[bool] = None
    stop: StopCondition = field(default_factory=StopCondition.all_halted)
    setup: list = field(default_factory=list)      # callables(platform) for programmatic scenarios


@dataclass
class Scenario:
    name: str
    platform: PlatformConfig
    phases: list
    accelerators: list = field(default_factory=list)
    preloads: list = field(default_factory=list)
    report_json: Optional[str] = None
    report_csv: Optional[str] = None
    trace_csv: Optional[str] = None
    base_dir: Path = field(default_factory=Path.cwd)
    setup: list = field(default_factory=list)      # callables(platform) run after build

    def with_platform(self, **kw) -> "Scenario":
        s = copy.copy(self)
        s.platform = replace(self.platform, **kw)
        return s


# ---------------------------------------------------------------------------
# loading


_STATE_NAMES = {"on", "clock-gated", "gated", "retention", "off"}


class _Reader:
    def __init__(self):
        self.issues: list[ValidationIssue] = []

    def err(self, loc: str, msg: str) -> None:
        self.issues.append(ValidationIssue(loc, msg))

    def qty(self, table: dict, key: str, dim: str, loc: str, default=None):
        if key not in table:
            return default
        try:
            return parse_quantity(table[key], dim)
        except UnitError as exc:
            self.err(f"{loc}.{key}", str(exc))
            return default

    def enum(self, table: dict, key: str, cls, loc: str, default):
        if key not in table:
            return default
        try:
            return cls(table[key])
        except ValueError:
            self.err(f"{loc}.{key}", f"expected one of {[e.value for e in cls]}, got {table[key]!r}")
            return default

    def integer(self, table: dict, key: str, loc: str, default):
        if key not in table:
            return default
        v = table[key]
        if not isinstance(v, int) or isinstance(v, bool):
            self.err(f"{loc}.{key}", f"expected an integer, got {v!r}")
            return default
        return v


def _parse_int(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def _stop(r: _Reader, raw, loc: str) -> StopCondition:
    if raw is None:
        return StopCondition.all_halted()
    if not isinstance(raw, dict):
        r.err(loc, "stop must be a table")
        return StopCondition.all_halted()
    duration = r.qty(raw, "duration", "time", loc)
    cycles = r.qty(raw, "cycles", "cycles", loc)
    max_cycles = r.qty(raw, "max_cycles", "cycles", loc)
    until = raw.get("until")
    if until not in (None, "halted", "limit"):
        r.err(f"{loc}.until", f"unknown stop condition {until!r}")
    if until == "limit":
        if cycles is None:
            r.err(loc, "until = 'limit' needs cycles")
            return StopCondition.all_halted()
        return StopCondition.cycle_limit(int(cycles))
    if duration is None and cycles is None:
        return StopCondition.all_halted(None if max_cycles is None else int(max_cycles))
    return StopCondition.phase(duration, None if cycles is None else int(cycles),
                               until_halted=until == "halted",
                               max_cycles=None if max_cycles is None else int(max_cycles))


def parse_scenario(text: str, base_dir=None, source: str = "<scenario>") -> Scenario:
    """Parse and structurally validate; raises :class:`ScenarioError` with every issue."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError([ValidationIssue(source, f"parse error: {exc}")]) from None
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    r = _Reader()
    head = raw.get("scenario", {})
    name = head.get("name", Path(source).stem)

    pl = raw.get("platform", {})
    cal = None
    if "calibration" in pl and pl["calibration"] != "default":
        try:
            cal = load_calibration(base / pl["calibration"])
        except (OSError, ConfigurationError) as exc:
            r.err("platform.calibration", str(exc))
    xa = pl.get("xaif", {})
    adc_raw = raw.get("adc", {})
    adc = AdcConfig(
        channel_count=r.integer(adc_raw, "channels", "adc", 3),
        sample_rate_hz=r.qty(adc_raw, "sample_rate", "frequency", "adc", Fraction(256)),
        sample_bits=r.integer(adc_raw, "sample_bits", "adc", 16),
        fifo_depth_words=r.integer(adc_raw, "fifo_depth", "adc", 16),
        samples_per_word=r.integer(adc_raw, "samples_per_word", "adc", 1),
        generator=dict(adc_raw.get("generator", {"kind": "constant", "value": 0})),
    )
    if adc.generator.get("kind") == "csv":
        adc.generator["path"] = str(base / adc.generator["path"])
    latencies = None
    if "transition_latency" in pl:
        latencies = {}
        for key, val in pl["transition_latency"].items():
            try:
                a, b = (PowerState.parse(x) for x in key.split("->"))
                latencies[(a, b)] = int(parse_quantity(val, "cycles"))
            except (ValueError, UnitError) as exc:
                r.err(f"platform.transition_latency.{key}", str(exc))
    flash_image = b""
    if "flash_image" in pl:
        try:
            flash_image = (base / pl["flash_image"]).read_bytes()
        except OSError as exc:
            r.err("platform.flash_image", str(exc))
    config = PlatformConfig(
        cpu_profile=pl.get("cpu_profile", "cv32e20"),
        bank_count=r.integer(pl, "bank_count", "platform", 8),
        bank_size=int(r.qty(pl, "bank_size", "size", "platform", 32 * 1024)),
        topology=r.enum(pl, "topology", Topology, "platform", Topology.FULLY_CONNECTED),
        addressing=r.enum(pl, "addressing", AddressingMode, "platform", AddressingMode.CONTIGUOUS),
        xaif=XaifCapacity(r.integer(xa, "slave_ports", "platform.xaif", 0),
                          r.integer(xa, "master_ports", "platform.xaif", 0),
                          r.integer(xa, "interrupt_lines", "platform.xaif", 0),
                          r.integer(xa, "power_domains", "platform.xaif", 0)),
        peripheral_extra_latency=int(r.qty(pl, "peripheral_extra_latency", "cycles", "platform", 2)),
        frequency_hz=r.qty(pl, "frequency", "frequency", "platform", Fraction(100_000_000)),
        voltage_v=r.qty(pl, "voltage", "voltage", "platform", Fraction(4, 5)),
        fll_lock_latency=int(r.qty(pl, "fll_lock_latency", "cycles", "platform", 0)),
        dma_channels=r.integer(pl, "dma_channels", "platform", 1),
        latencies=latencies,
        adc=adc,
        flash_image=flash_image,
        flash_fetch_latency=int(r.qty(pl, "flash_fetch_latency", "cycles", "platform", 4)),
        calibration=cal,
        trace=bool(raw.get("report", {}).get("trace", False)),
    )

    accels = []
    for i, a in enumerate(raw.get("accelerator", [])):
        loc = f"accelerator[{i}]"
        kind = a.get("kind")
        if kind not in ("cgra", "imc"):
            r.err(f"{loc}.kind", f"unknown accelerator kind {kind!r}")
            continue
        window = None
        if "window" in a:
            try:
                window = _parse_int(a["window"])
            except ValueError:
                r.err(f"{loc}.window", f"bad address {a['window']!r}")
        params = {k: v for k, v in a.items() if k not in ("kind", "name", "window", "irq_priority")}
        accels.append(AcceleratorSpec(kind, a.get("name", kind), params, window,
                                      r.integer(a, "irq_priority", loc, 4)))

    preloads = []
    for i, p in enumerate(raw.get("preload", [])):
        loc = f"preload[{i}]"
        if "address" not in p:
            r.err(loc, "preload needs an address")
            continue
        pr = Preload(str(p["address"]), words=p.get("words"), file=p.get("file"),
                     seed=r.integer(p, "seed", loc, 0))
        if "random_words" in p:
            pr.random_words = r.integer(p, "random_words", loc, 0)
        if pr.file is not None:
            pr.file = str(base / pr.file)
        preloads.append(pr)

    phases = []
    for i, ph in enumerate(raw.get("phase", [])):
        loc = f"phase[{i}]"
        spec = PhaseSpec(ph.get("name", f"phase{i}"))
        spec.voltage_v = r.qty(ph, "voltage", "voltage", loc)
        spec.frequency_hz = r.qty(ph, "frequency", "frequency", loc)
        spec.fll_bypass = bool(ph.get("fll_bypass", False))
        if "program" in ph:
            path = base / ph["program"]
            try:
                spec.program_text = path.read_text()
                spec.program_source = str(path)
            except OSError as exc:
                r.err(f"{loc}.program", str(exc))
        elif "program_text" in ph:
            spec.program_text = ph["program_text"]
            spec.program_source = f"{loc}.program_text"
        for dom, st in ph.get("power", {}).items():
            if st not in _STATE_NAMES:
                r.err(f"{loc}.power.{dom}", f"unknown power state {st!r}")
                continue
            spec.power[dom] = PowerState.parse(st)
        if "cpu_idle" in ph:
            if ph["cpu_idle"] not in _STATE_NAMES:
                r.err(f"{loc}.cpu_idle", f"unknown power state {ph['cpu_idle']!r}")
            else:
                spec.cpu_idle = PowerState.parse(ph["cpu_idle"])
        if "adc" in ph:
            spec.adc = ph["adc"] in ("on", True)
        spec.stop = _stop(r, ph.get("stop"), f"{loc}.stop")
        phases.append(spec)
    if not phases:
        r.err("phase", "a scenario needs at least one phase")

    rep = raw.get("report", {})
    scn = Scenario(name, config, phases, accels, preloads, rep.get("json"), rep.get("csv"),
                   rep.get("trace_csv"), base)
    if r.issues:
        raise ScenarioError(r.issues)
    return scn


def load_scenario(path) -> Scenario:
    """Load and fully validate a scenario file."""
    path = resolve_scenario_path(path)
    scn = parse_scenario(path.read_text(), base_dir=path.parent, source=str(path))
    issues = validate_scenario(scn)
    if issues:
        raise ScenarioError(issues)
    return scn


def resolve_scenario_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    shipped = resources.files("xheep_sim").joinpath(f"data/scenarios/{p.name}")
    for cand in (shipped, resources.files("xheep_sim").joinpath(f"data/scenarios/{p.name}.scenario")):
        if cand.is_file():
            return Path(str(cand))
    raise FileNotFoundError(path)


# ---------------------------------------------------------------------------
# validation and execution


def _resolve(expr: str, symbols: dict) -> int:
    prog = parse_microprogram(f"STORE {expr}\nHALT\n", symbols)
    return prog.ops[0].addr.const


def _make_accelerator(spec: AcceleratorSpec, calibration: CalibrationTable):
    params = dict(spec.params)
    if spec.kind == "cgra":
        return CgraModel(spec.name, int(parse_quantity(params.get("context_size", "4 KiB"), "size")))
    cal = calibration.accelerators.get("imc", {})
    cpo = int(params.get("cycles_per_row_op", cal.get("cycles_per_row_op", 16)))
    return ImcModel(spec.name, int(parse_quantity(params.get("array_size", "32 KiB"), "size")),
                    int(params.get("row_words", 32)), cpo)


def _preload(platform: Platform, pr: Preload) -> None:
    base = _resolve(pr.address, platform.symbols)
    words = list(pr.words or [])
    if pr.file is not None:
        data = Path(pr.file).read_bytes()
        data += b"\0" * (-len(data) % 4)
        words += [int.from_bytes(data[i:i + 4], "little") for i in range(0, len(data), 4)]
    if pr.random_words:
        rng = random.Random(pr.seed)
        words += [rng.getrandbits(32) & pr.mask for _ in range(pr.random_words)]
    for i, w in enumerate(words):
        platform.write_word(base + 4 * i, w)


def build_platform(scn: Scenario) -> Platform:
    platform = Platform(scn.platform)
    for spec in scn.accelerators:
        model = _make_accelerator(spec, platform.config.calibration)
        platform.attach(model, irq_priority=spec.irq_priority, window_base=spec.window)
    for pr in scn.preloads:
        _preload(platform, pr)
    for fn in scn.setup:
        fn(platform)
    return platform


def _build_checked(scn: Scenario, issues: list) -> tuple[Platform, set]:
    """Like :func:`build_platform`, but records each failing piece and carries on."""
    platform = Platform(scn.platform)
    skipped: set = set()
    for i, spec in enumerate(scn.accelerators):
        try:
            model = _make_accelerator(spec, platform.config.calibration)
            platform.attach(model, irq_priority=spec.irq_priority, window_base=spec.window)
        except (ConfigurationError, ValueError) as exc:
            issues.append(ValidationIssue(f"accelerator[{i}]", str(exc)))
            skipped.add(f"{spec.name}_")
    for i, pr in enumerate(scn.preloads):
        try:
            _preload(platform, pr)
        except (ConfigurationError, OSError, ValueError) as exc:
            issues.append(ValidationIssue(f"preload[{i}]", str(exc)))
    if not issues:
        for fn in scn.setup:
            fn(platform)
    return platform, skipped


def validate_scenario(scn: Scenario) -> list[ValidationIssue]:
    issues: list[ValidationIssue] = []
    cfg = scn.platform
    for e in cfg.validate():
        issues.append(ValidationIssue("platform", e))
    if issues:
        return issues
    try:
        platform, skipped = _build_checked(scn, issues)
    except ConfigurationError as exc:
        return [ValidationIssue("platform", str(exc))]
    cal = platform.config.calibration
    v, f = cfg.voltage_v, cfg.frequency_hz
    for i, ph in enumerate(scn.phases):
        loc = f"phase[{i}]"
        v = ph.voltage_v if ph.voltage_v is not None else v
        f = ph.frequency_hz if ph.frequency_hz is not None else f
        try:
            cal.check_envelope(v, BYPASS_FREQUENCY_HZ if ph.fll_bypass else f)
        except ConfigurationError as exc:
            issues.append(ValidationIssue(loc, str(exc)))
        if ph.program_text is not None:
            try:
                parse_microprogram(ph.program_text, platform.symbols, source=ph.program_source)
            except MicroprogramError as exc:
                issues.append(ValidationIssue(f"{ph.program_source}:{exc.line}:{exc.col}", exc.message))
        for dom, st in ph.power.items():
            if any(dom.startswith(prefix) for prefix in skipped):
                continue
            if dom not in platform.power.domains:
                issues.append(ValidationIssue(f"{loc}.power.{dom}", f"unknown power domain {dom!r}"))
                continue
            try:
                platform.power.domain(dom).psm.check(st)
            except ConfigurationError as exc:
                issues.append(ValidationIssue(f"{loc}.power.{dom}", str(exc)))
        if ph.cpu_idle is not None:
            try:
                platform.power.domain("cpu").psm.check(ph.cpu_idle)
            except ConfigurationError as exc:
                issues.append(ValidationIssue(f"{loc}.cpu_idle", str(exc)))
    return issues


def enter_phase(platform: Platform, ph: PhaseSpec) -> None:
    """Apply a phase's boundary directives."""
    platform.energy.begin_phase(ph.name)
    clock = platform.clock
    v = ph.voltage_v if ph.voltage_v is not None else clock.voltage_v
    f = ph.frequency_hz if ph.frequency_hz is not None else platform.fll.programmed_hz
    platform.fll._pending.clear()
    platform.fll.bypass = ph.fll_bypass
    platform.fll.programmed_hz = Fraction(f)
    clock.set_operating_point(BYPASS_FREQUENCY_HZ if ph.fll_bypass else f, v)
    platform.energy.note_operating_point()
    for dom, st in ph.power.items():
        platform.force_power(dom, st)
    if ph.program_text is not None:
        prog = parse_microprogram(ph.program_text, platform.symbols, source=ph.program_source)
        cpu = platform.load_program(prog)
        if ph.cpu_idle is not None:
            cpu.sleep_state = ph.cpu_idle
    elif ph.cpu_idle is not None and platform.cpu is not None:
        platform.cpu.sleep_state = ph.cpu_idle
    if ph.adc is True:
        platform.adc.enable(clock.cycle_count)
    elif ph.adc is False:
        platform.adc.enabled = False
    for fn in ph.setup:
        fn(platform)


@dataclass
class ScenarioResult:
    report: EnergyReport
    platform: Platform
    faulted: bool


def run_scenario(scn: Scenario, fast_forward: bool = True, write_outputs: bool = True) -> ScenarioResult:
    """Execute every phase in order and return the combined report."""
    platform = build_platform(scn)
    sim = Simulator(platform, fast_forward=fast_forward)
    for ph in scn.phases:
        enter_phase(platform, ph)
        sim.run(ph.stop)
        for cpu in platform.cpus:
            if cpu.trapped:
                break
    from .report import build_report
    report = build_report(platform, scenario=scn.name, truncated=sim.truncated)
    if write_outputs:
        report.write(_out(scn, scn.report_json), _out(scn, scn.report_csv))
        if scn.trace_csv and platform.config.trace:
            platform.bus.write_trace_csv(_out(scn, scn.trace_csv))
    return ScenarioResult(report, platform, report.faulted)


def _out(scn: Scenario, path: Optional[str]):
    if not path:
        return None
    p = Path(path)
    return p if p.is_absolute() else scn.base_dir / p
