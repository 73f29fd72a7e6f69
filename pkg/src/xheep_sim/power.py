"""Power manager, FLL operating points and the calibrated energy model.

Energy is accumulated lazily: every domain's leakage and clock energy is
constant between two state/voltage/frequency changes, so the account only
counts cycles and activity units and settles them into joules when such a
change (or a report) forces a flush. Stepping cycle by cycle and skipping an
idle stretch in one go therefore produce bit-identical results.

Per domain and cycle the model charges::

    leak(state) * (V/Vref)**leak_exp / f
    + [state is on] * (clock + activity * units) * (V/Vref)**dyn_exp * scale
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

from .errors import ConfigurationError
from .memory import ALL_CAPABILITIES, PowerState, PowerStateMachine
from .units import UnitError, format_quantity, parse_quantity

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

BYPASS_FREQUENCY_HZ = Fraction(32768)
REQUIRED_ANCHORS = (
    "acquisition-all-on",
    "acquisition-gated",
    "acquisition-cpu-off",
    "processing-full",
    "processing-gated",
    "cgra-active",
    "imc-active",
    "idle-32khz",
    "full-470mhz",
)


class EnvelopeError(ConfigurationError):
    """Operating point outside the calibrated (voltage, f_max) envelope."""


@dataclass
class DomainCalibration:
    leak_active_w: float = 0.0
    leak_clock_gated_w: float = 0.0
    leak_retention_w: float = 0.0
    clock_energy_j: float = 0.0
    activity_energy_j: float = 0.0

    def leakage(self, state: PowerState) -> float:
        if state is PowerState.ON:
            return self.leak_active_w
        if state is PowerState.CLOCK_GATED:
            return self.leak_clock_gated_w
        if state is PowerState.RETENTION:
            return self.leak_retention_w
        return 0.0


@dataclass
class CalibrationTable:
    reference_voltage: Fraction = Fraction(4, 5)
    operating_points: list = field(default_factory=lambda: [
        (Fraction(4, 5), Fraction(170_000_000)), (Fraction(6, 5), Fraction(470_000_000))])
    dynamic_voltage_exponent: float = 2.0
    leakage_voltage_exponent: float = 1.0
    retention_leakage_factor: float = 0.575
    always_on_leakage_split: dict = field(default_factory=lambda: {"core": 0.35, "peripherals": 0.65})
    domains: dict = field(default_factory=dict)
    accelerators: dict = field(default_factory=dict)
    anchors: dict = field(default_factory=dict)
    notes: str = ""
    name: str = "uncalibrated"

    def domain(self, name: str) -> DomainCalibration:
        if name in self.domains:
            return self.domains[name]
        if name.startswith("bank") and "bank" in self.domains:
            return self.domains["bank"]
        return DomainCalibration()

    def f_max(self, voltage) -> Fraction:
        v = Fraction(voltage)
        pts = sorted(self.operating_points)
        if v < pts[0][0] or v > pts[-1][0]:
            raise EnvelopeError(
                f"voltage {float(v):g} V outside calibrated range "
                f"{float(pts[0][0]):g}-{float(pts[-1][0]):g} V")
        for (v0, f0), (v1, f1) in zip(pts, pts[1:]):
            if v0 <= v <= v1:
                if v1 == v0:
                    return max(f0, f1)
                return f0 + (f1 - f0) * (v - v0) / (v1 - v0)
        return pts[0][1]

    def check_envelope(self, voltage, frequency) -> None:
        fmax = self.f_max(voltage)
        if Fraction(frequency) <= 0:
            raise EnvelopeError("frequency must be positive")
        if Fraction(frequency) > fmax:
            raise EnvelopeError(
                f"{float(frequency) / 1e6:g} MHz exceeds f_max {float(fmax) / 1e6:g} MHz "
                f"at {float(voltage):g} V")

    def validate(self) -> list[str]:
        errors = []
        pts = sorted(self.operating_points)
        for (v0, f0), (v1, f1) in zip(pts, pts[1:]):
            if f1 < f0:
                errors.append("f_max must be monotone in voltage")
        for a in REQUIRED_ANCHORS:
            if a not in self.anchors:
                errors.append(f"missing anchor {a!r}")
        split = self.always_on_leakage_split
        if abs(sum(split.values()) - 1.0) > 1e-9:
            errors.append("always-on leakage split must sum to 1")
        for name, d in self.domains.items():
            if not (0 <= d.leak_retention_w <= d.leak_clock_gated_w <= d.leak_active_w + 1e-18):
                errors.append(f"domain {name}: leakage must satisfy retention <= clock-gated <= active")
        return errors

    # -- file format -----------------------------------------------------

    @classmethod
    def from_toml(cls, text: str) -> "CalibrationTable":
        raw = tomllib.loads(text)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "CalibrationTable":
        head = raw.get("calibration", {})
        t = cls()
        try:
            t.name = head.get("name", t.name)
            t.reference_voltage = parse_quantity(head["reference_voltage"], "voltage")
            t.dynamic_voltage_exponent = float(head.get("dynamic_voltage_exponent", 2.0))
            t.leakage_voltage_exponent = float(head.get("leakage_voltage_exponent", 1.0))
            t.retention_leakage_factor = float(head.get("retention_leakage_factor", 0.575))
            t.notes = head.get("notes", "")
            t.operating_points = [
                (parse_quantity(p["voltage"], "voltage"), parse_quantity(p["max_frequency"], "frequency"))
                for p in raw.get("operating_point", [])]
            t.always_on_leakage_split = {k: float(v) for k, v in raw.get("always_on_leakage_split", {}).items()}
            for name, d in raw.get("domain", {}).items():
                active = float(parse_quantity(d["leak_active"], "power"))
                gated = float(parse_quantity(d["leak_clock_gated"], "power")) if "leak_clock_gated" in d else active
                if "leak_retention" in d:
                    ret = float(parse_quantity(d["leak_retention"], "power"))
                elif d.get("retention", False):
                    ret = active * t.retention_leakage_factor
                else:
                    ret = 0.0
                t.domains[name] = DomainCalibration(
                    active, gated, ret,
                    float(parse_quantity(d.get("clock_energy", "0 J"), "energy")),
                    float(parse_quantity(d.get("activity_energy", "0 J"), "energy")))
            t.accelerators = {k: dict(v) for k, v in raw.get("accelerator", {}).items()}
            for a in raw.get("anchor", []):
                t.anchors[a["name"]] = float(parse_quantity(a["power"], "power"))
        except KeyError as exc:
            raise ConfigurationError(f"calibration: missing key {exc}") from None
        except UnitError as exc:
            raise ConfigurationError(f"calibration: {exc}") from None
        return t

    def to_toml(self) -> str:
        lines = ["[calibration]", f'name = "{self.name}"',
                 f'reference_voltage = "{format_quantity(self.reference_voltage, "voltage")}"',
                 f"dynamic_voltage_exponent = {self.dynamic_voltage_exponent}",
                 f"leakage_voltage_exponent = {self.leakage_voltage_exponent}",
                 f"retention_leakage_factor = {self.retention_leakage_factor}"]
        if self.notes:
            lines.append('notes = """' + self.notes.strip() + '"""')
        for v, f in self.operating_points:
            lines += ["", "[[operating_point]]", f'voltage = "{format_quantity(v, "voltage")}"',
                      f'max_frequency = "{format_quantity(f, "frequency", "M")}"']
        lines += ["", "[always_on_leakage_split]"]
        lines += [f"{k} = {v}" for k, v in self.always_on_leakage_split.items()]
        for name, d in self.domains.items():
            lines += ["", f"[domain.{name}]",
                      f'leak_active = "{format_quantity(d.leak_active_w, "power", "u")}"',
                      f'leak_clock_gated = "{format_quantity(d.leak_clock_gated_w, "power", "u")}"',
                      f'leak_retention = "{format_quantity(d.leak_retention_w, "power", "u")}"',
                      f'clock_energy = "{format_quantity(d.clock_energy_j, "energy", "p")}"',
                      f'activity_energy = "{format_quantity(d.activity_energy_j, "energy", "p")}"']
        for name, params in self.accelerators.items():
            lines += ["", f"[accelerator.{name}]"]
            lines += [f"{k} = {json.dumps(v)}" for k, v in params.items()]
        for name, w in self.anchors.items():
            lines += ["", "[[anchor]]", f'name = "{name}"', f'power = "{format_quantity(w, "power", "u")}"']
        return "\n".join(lines) + "\n"


def load_calibration(path=None) -> CalibrationTable:
    """Load a calibration file; ``None`` loads the shipped HEEPocrates table."""
    if path is None:
        text = resources.files("xheep_sim").joinpath("data/calibration/heepocrates.toml").read_text()
    else:
        text = Path(path).read_text()
    return CalibrationTable.from_toml(text)


# ---------------------------------------------------------------------------


class PowerDomain:
    def __init__(self, name: str, psm: PowerStateMachine, kind: str = "generic"):
        self.name = name
        self.psm = psm
        self.kind = kind

    @property
    def state(self) -> PowerState:
        return self.psm.state

    @property
    def retention_capable(self) -> bool:
        return PowerState.RETENTION in self.psm.capabilities


@dataclass
class PowerEvent:
    cycle: int
    kind: str
    source: str
    detail: str


class PowerManager:
    """Owns every power domain and serialises gating requests.

    Requests may come from memory-mapped register writes, XAIF power-control
    ports or the CPU's WFI. All of them land at the start of a later cycle.
    """

    REG_STRIDE = 4
    STATE_CODES = [PowerState.ON, PowerState.CLOCK_GATED, PowerState.RETENTION, PowerState.OFF]
    latency = 1

    def __init__(self, events: Optional[list] = None):
        self.domains: dict[str, PowerDomain] = {}
        self.events = events if events is not None else []
        self.sleepers: list = []
        self._on_change: list[Callable[[PowerDomain], None]] = []
        self.interrupts = None

    def add_domain(self, name: str, capabilities=ALL_CAPABILITIES, kind: str = "generic",
                   latencies: Optional[dict] = None, psm: Optional[PowerStateMachine] = None,
                   always_on: bool = False) -> PowerDomain:
        if name in self.domains:
            raise ConfigurationError(f"duplicate power domain {name!r}")
        psm = psm or PowerStateMachine(name, capabilities, latencies, always_on=always_on)
        dom = PowerDomain(name, psm, kind)
        psm.pre_listeners.append(lambda d=dom: self._changed(d))
        self.domains[name] = dom
        return dom

    def on_change(self, cb: Callable[[PowerDomain], None]) -> None:
        self._on_change.append(cb)

    def _changed(self, dom: PowerDomain) -> None:
        for cb in self._on_change:
            cb(dom)

    def domain(self, name: str) -> PowerDomain:
        try:
            return self.domains[name]
        except KeyError:
            raise ConfigurationError(f"unknown power domain {name!r}") from None

    def request_transition(self, domain_id: str, target: PowerState, cycle: int,
                           source: str = "power-manager") -> Optional[int]:
        """Schedule a transition; returns its latency, or None if it was rejected."""
        dom = self.domain(domain_id)
        try:
            latency = dom.psm.request(target, cycle)
        except ConfigurationError as exc:
            self.events.append(PowerEvent(cycle, "power-request-rejected", source, str(exc)))
            return None
        return latency

    def begin_cycle(self, cycle: int) -> None:
        """Apply transitions that land at the start of ``cycle``."""
        for dom in self.domains.values():
            psm = dom.psm
            if psm._reported_at is not None or psm._settle_cycle is not None:
                psm.apply_due(cycle)

    def update(self, cycle: int) -> None:
        """Kernel phase 5: sleep/wake handshakes with the CPU."""
        for s in self.sleepers:
            dom = self.domains[s.domain]
            if s.wants_sleep and dom.psm.target is PowerState.ON:
                self.request_transition(s.domain, s.sleep_target, cycle, source=s.name)
                s.wants_sleep = False
            elif s.sleeping and dom.psm.target is not PowerState.ON and s.wake_requested(cycle):
                self.request_transition(s.domain, PowerState.ON, cycle, source=s.name)

    def next_event(self) -> Optional[int]:
        best = None
        for dom in self.domains.values():
            n = dom.psm.next_event()
            if n is not None and (best is None or n < best):
                best = n
        return best

    def quiescent(self, cycle: int) -> bool:
        for s in self.sleepers:
            if s.wants_sleep:
                return False
            if s.sleeping and self.domains[s.domain].psm.target is not PowerState.ON and s.wake_requested(cycle):
                return False
        return True

    # bus slave protocol: one word per domain, value = state code
    def access(self, txn, cycle: int) -> int:
        from .errors import AccessFault
        from .interconnect import FaultKind
        names = list(self.domains)
        idx = (txn.offset & ~3) // self.REG_STRIDE
        if idx >= len(names):
            raise AccessFault(FaultKind.DECODE, f"power manager offset {txn.offset:#x}")
        dom = self.domains[names[idx]]
        if txn.is_write:
            code = txn.write_data & 3
            if self.request_transition(dom.name, self.STATE_CODES[code], cycle,
                                       source="power-register") is None:
                raise AccessFault(FaultKind.REJECTED, f"illegal transition for {dom.name}")
        else:
            txn.read_data = self.STATE_CODES.index(dom.state)
        return self.latency


# ---------------------------------------------------------------------------


class Fll:
    """Frequency-locked loop with memory-mapped frequency/voltage registers.

    Changes apply at the start of the next cycle plus ``lock_latency``
    cycles. With bypass enabled the 32 kHz reference drives the system clock.
    """

    REG_FREQ = 0x0      # Hz
    REG_VOLT = 0x4      # mV
    REG_BYPASS = 0x8
    latency = 1

    def __init__(self, clock, calibration: CalibrationTable, lock_latency: int = 0,
                 events: Optional[list] = None):
        self.clock = clock
        self.calibration = calibration
        self.lock_latency = lock_latency
        self.bypass = False
        self.programmed_hz = Fraction(clock.frequency_hz)
        self.events = events if events is not None else []
        self._pending: list[tuple[int, Fraction, Fraction]] = []

    def _target(self) -> tuple[Fraction, Fraction]:
        if self._pending:
            return self._pending[-1][1], self._pending[-1][2]
        return Fraction(self.clock.frequency_hz), Fraction(self.clock.voltage_v)

    def _schedule(self, cycle: int, f: Fraction, v: Fraction) -> None:
        self._pending.append((cycle + 1 + self.lock_latency, f, v))

    def set_frequency(self, requested_hz, cycle: int) -> Fraction:
        f = Fraction(requested_hz)
        _, v = self._target()
        try:
            self.calibration.check_envelope(v, f)
        except EnvelopeError as exc:
            self.events.append(PowerEvent(cycle, "fll-rejected", "fll", str(exc)))
            raise
        self.programmed_hz = f
        if not self.bypass:
            self._schedule(cycle, f, v)
        return f

    def set_voltage(self, requested_v, cycle: int) -> Fraction:
        v = Fraction(requested_v)
        f, _ = self._target()
        try:
            self.calibration.check_envelope(v, f)
        except EnvelopeError as exc:
            self.events.append(PowerEvent(cycle, "fll-rejected", "fll", str(exc)))
            raise
        self._schedule(cycle, f, v)
        return v

    def set_operating_point(self, voltage, frequency, cycle: int) -> None:
        v, f = Fraction(voltage), Fraction(frequency)
        self.calibration.check_envelope(v, f)
        self.programmed_hz = f
        self._schedule(cycle, BYPASS_FREQUENCY_HZ if self.bypass else f, v)

    def set_bypass(self, enabled: bool, cycle: int) -> Fraction:
        self.bypass = bool(enabled)
        _, v = self._target()
        f = BYPASS_FREQUENCY_HZ if self.bypass else self.programmed_hz
        self._schedule(cycle, f, v)
        return f

    def next_event(self) -> Optional[int]:
        return min((c for c, _, _ in self._pending), default=None)

    def apply_due(self, cycle: int) -> bool:
        changed = False
        keep = []
        for c, f, v in self._pending:
            if c <= cycle:
                if f != self.clock.frequency_hz or v != self.clock.voltage_v:
                    self.clock.set_operating_point(f, v, cycle)
                    changed = True
            else:
                keep.append((c, f, v))
        self._pending = keep
        return changed

    def access(self, txn, cycle: int) -> int:
        from .errors import AccessFault
        from .interconnect import FaultKind
        off = txn.offset & ~3
        if txn.is_write:
            try:
                if off == self.REG_FREQ:
                    self.set_frequency(txn.write_data, cycle)
                elif off == self.REG_VOLT:
                    self.set_voltage(Fraction(txn.write_data, 1000), cycle)
                elif off == self.REG_BYPASS:
                    self.set_bypass(bool(txn.write_data & 1), cycle)
                else:
                    raise AccessFault(FaultKind.DECODE, f"FLL offset {off:#x}")
            except EnvelopeError as exc:
                raise AccessFault(FaultKind.REJECTED, str(exc)) from None
        else:
            f, v = self._target()
            txn.read_data = {self.REG_FREQ: int(f), self.REG_VOLT: int(v * 1000),
                             self.REG_BYPASS: int(self.bypass)}.get(off, 0)
        return self.latency


# ---------------------------------------------------------------------------


@dataclass
class DomainTally:
    leak_j: float = 0.0
    clock_j: float = 0.0
    activity_j: float = 0.0
    cycles: dict = field(default_factory=lambda: {s.value: 0 for s in PowerState})
    activity_units: int = 0
    # linear features for calibration: energy = params . features
    leak_feature: dict = field(default_factory=lambda: {s.value: 0.0 for s in PowerState})
    clock_feature: float = 0.0
    activity_feature: float = 0.0

    @property
    def energy_j(self) -> float:
        return self.leak_j + self.clock_j + self.activity_j


@dataclass
class PhaseTally:
    name: str
    cycles: int = 0
    wall_time: Fraction = Fraction(0)
    energy_j: float = 0.0
    domains: dict = field(default_factory=dict)
    operating_points: list = field(default_factory=list)


class EnergyAccount:
    def __init__(self, calibration: CalibrationTable, power: PowerManager, clock,
                 dynamic_scale: Optional[dict] = None):
        self.calibration = calibration
        self.power = power
        self.clock = clock
        self.dynamic_scale = dynamic_scale or {}
        self.phases: list[PhaseTally] = []
        self._phase: Optional[PhaseTally] = None
        self._seg_cycles = 0
        self._activity: dict[str, int] = {}
        self.total_energy_j = 0.0
        power.on_change(lambda d: self.flush())
        self.begin_phase("default")

    # -- accumulation ---------------------------------------------------

    def charge(self, domain: str, units: int = 1) -> None:
        self._activity[domain] = self._activity.get(domain, 0) + units

    def tick(self) -> None:
        self._seg_cycles += 1

    def skip(self, n: int) -> None:
        self._seg_cycles += n

    def begin_phase(self, name: str) -> PhaseTally:
        self.flush()
        if self._phase is not None and self._phase.cycles == 0 and self._phase.name == "default" \
                and not any(d.energy_j for d in self._phase.domains.values()):
            self.phases.remove(self._phase)
        self._phase = PhaseTally(name)
        self._phase.operating_points.append((float(self.clock.voltage_v), float(self.clock.frequency_hz)))
        self.phases.append(self._phase)
        return self._phase

    @property
    def phase(self) -> PhaseTally:
        return self._phase

    def flush(self) -> None:
        n = self._seg_cycles
        act = self._activity
        if n == 0 and not act:
            return
        cal = self.calibration
        v = self.clock.voltage_v
        f = self.clock.frequency_hz
        ratio = float(v / cal.reference_voltage)
        vl = ratio ** cal.leakage_voltage_exponent
        vd = ratio ** cal.dynamic_voltage_exponent
        seconds = float(Fraction(n) / f)
        phase = self._phase
        increments = []
        for name, dom in self.power.domains.items():
            tally = phase.domains.get(name)
            if tally is None:
                tally = phase.domains[name] = DomainTally()
            st = dom.psm.state
            c = cal.domain(name)
            units = act.get(name, 0)
            lf = vl * seconds
            leak = c.leakage(st) * lf
            tally.leak_feature[st.value] += lf
            tally.cycles[st.value] += n
            clock_e = act_e = 0.0
            if st is PowerState.ON:
                scale = vd * self.dynamic_scale.get(name, 1.0)
                tally.clock_feature += scale * n
                tally.activity_feature += scale * units
                tally.activity_units += units
                clock_e = c.clock_energy_j * scale * n
                act_e = c.activity_energy_j * scale * units
            tally.leak_j += leak
            tally.clock_j += clock_e
            tally.activity_j += act_e
            increments.append(leak + clock_e + act_e)
        inc = math.fsum(increments)
        phase.energy_j += inc
        phase.cycles += n
        phase.wall_time += Fraction(n) / f
        self.total_energy_j += inc
        self._seg_cycles = 0
        self._activity = {}

    def note_operating_point(self) -> None:
        if self._phase is not None:
            op = (float(self.clock.voltage_v), float(self.clock.frequency_hz))
            if not self._phase.operating_points or self._phase.operating_points[-1] != op:
                self._phase.operating_points.append(op)

    # -- queries ----------------------------------------------------------

    def domain_totals(self) -> dict[str, DomainTally]:
        self.flush()
        out: dict[str, DomainTally] = {}
        for ph in self.phases:
            for name, t in ph.domains.items():
                agg = out.setdefault(name, DomainTally())
                agg.leak_j += t.leak_j
                agg.clock_j += t.clock_j
                agg.activity_j += t.activity_j
                agg.activity_units += t.activity_units
                agg.clock_feature += t.clock_feature
                agg.activity_feature += t.activity_feature
                for k in agg.cycles:
                    agg.cycles[k] += t.cycles[k]
                    agg.leak_feature[k] += t.leak_feature[k]
        return out


def always_on_split(calibration: CalibrationTable) -> dict[str, float]:
    """Watts of always-on leakage per contributor at the reference voltage."""
    leak = calibration.domain("always_on").leak_active_w
    return {k: leak * frac for k, frac in calibration.always_on_leakage_split.items()}
