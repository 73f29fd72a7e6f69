"""Cycle-driven simulation kernel.

Every cycle runs the same six phases in the same order:

1. masters issue requests (CPU, DMA, accelerator lanes, stream masters)
2. the bus arbitrates
3. slaves respond; stream peripherals and accelerators tick
4. queued interrupts propagate
5. the power manager services sleep/wake handshakes
6. energy accumulates

Power-state and operating-point changes land at the start of a cycle,
before phase 1. When every component reports that nothing can happen
before some later cycle, the kernel jumps there directly; energy is
accumulated per constant-state segment, so the jump is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

from .errors import ConfigurationError


class SimClock:
    """Global cycle counter plus the current (frequency, voltage) point.

    Wall time is exact: the clock keeps the rational time at which the
    current frequency segment started.
    """

    def __init__(self, frequency_hz, voltage_v, envelope_check: Optional[Callable] = None):
        self.cycle_count = 0
        self.frequency_hz = Fraction(frequency_hz)
        self.voltage_v = Fraction(voltage_v)
        self._seg_cycle = 0
        self._seg_wall = Fraction(0)
        self.before_change: list[Callable[[], None]] = []
        self.after_change: list[Callable[[], None]] = []
        self._envelope_check = envelope_check
        if envelope_check is not None:
            envelope_check(self.voltage_v, self.frequency_hz)

    def wall_time_at(self, cycle: int) -> Fraction:
        return self._seg_wall + Fraction(cycle - self._seg_cycle) / self.frequency_hz

    @property
    def wall_time(self) -> Fraction:
        return self.wall_time_at(self.cycle_count)

    def cycle_reaching(self, t: Fraction) -> int:
        """First cycle whose end time lies strictly after ``t``."""
        return math.floor(self._seg_cycle + (Fraction(t) - self._seg_wall) * self.frequency_hz)

    def set_operating_point(self, frequency_hz, voltage_v, cycle: Optional[int] = None) -> None:
        f, v = Fraction(frequency_hz), Fraction(voltage_v)
        if self._envelope_check is not None:
            self._envelope_check(v, f)
        if f == self.frequency_hz and v == self.voltage_v:
            return
        for cb in self.before_change:
            cb()
        c = self.cycle_count if cycle is None else cycle
        self._seg_wall = self.wall_time_at(c)
        self._seg_cycle = c
        self.frequency_hz, self.voltage_v = f, v
        for cb in self.after_change:
            cb()


@dataclass(frozen=True)
class StopCondition:
    """``kind`` is ``halted``, ``cycles`` or ``phase``.

    ``phase`` completes when the wall-time ``duration_s`` or ``cycles`` has
    elapsed, or (``until_halted``) once every master is idle. ``max_cycles``
    is a safety bound that marks the run truncated.
    """
    kind: str = "halted"
    cycles: Optional[int] = None
    duration_s: Optional[Fraction] = None
    until_halted: bool = True
    max_cycles: Optional[int] = None

    @classmethod
    def all_halted(cls, max_cycles: Optional[int] = 50_000_000) -> "StopCondition":
        return cls("halted", max_cycles=max_cycles)

    @classmethod
    def cycle_limit(cls, n: int) -> "StopCondition":
        return cls("cycles", cycles=n)

    @classmethod
    def phase(cls, duration_s=None, cycles=None, until_halted: bool = True,
              max_cycles: Optional[int] = None) -> "StopCondition":
        return cls("phase", cycles=cycles,
                   duration_s=None if duration_s is None else Fraction(duration_s),
                   until_halted=until_halted, max_cycles=max_cycles)


class Simulator:
    """Drives a :class:`~xheep_sim.platform.Platform` through the phase loop."""

    def __init__(self, platform, fast_forward: bool = True):
        self.p = platform
        self.fast_forward = fast_forward
        self.truncated = False
        self.deadlocked = False
        self.steps = 0

    @property
    def cycle(self) -> int:
        return self.p.clock.cycle_count

    def _begin_cycle(self, c: int) -> None:
        p = self.p
        p.power.begin_cycle(c)
        if p.fll is not None and p.fll._pending:
            if p.fll.apply_due(c):
                p.energy.note_operating_point()

    def step(self) -> None:
        p = self.p
        c = p.clock.cycle_count
        self._begin_cycle(c)
        bus = p.bus
        for m in p.masters():
            m.issue(bus, c)
        bus.arbitrate(c)
        bus.respond(c)
        for t in p.tickers():
            t.tick(c)
        p.interrupts.propagate(c)
        p.power.update(c)
        p.energy.tick()
        p.clock.cycle_count = c + 1
        self.steps += 1

    # -- fast-forward -----------------------------------------------------

    def next_activity(self) -> Optional[int]:
        """Earliest cycle >= now at which any component must be stepped."""
        p = self.p
        c = p.clock.cycle_count
        if p.bus.busy or p.interrupts._queued or not p.power.quiescent(c):
            return c
        best = None
        for src in (p.power.next_event(), p.fll.next_event() if p.fll else None):
            if src is not None:
                best = src if best is None else min(best, src)
        for comp in p.components():
            n = comp.next_event(c)
            if n is not None:
                if n <= c:
                    return c
                best = n if best is None else min(best, n)
        if best is not None:
            best = max(best, c)
        return best

    def _skip_to(self, target: int) -> None:
        p = self.p
        n = target - p.clock.cycle_count
        if n <= 0:
            return
        p.energy.skip(n)
        p.bus.skip_idle(n)
        p.clock.cycle_count = target

    # -- running ----------------------------------------------------------

    def _phase_done(self, stop: StopCondition, start_cycle: int, start_wall: Fraction) -> bool:
        p = self.p
        c = p.clock.cycle_count
        if stop.kind == "halted":
            return p.all_idle()
        if stop.kind == "cycles":
            return c - start_cycle >= stop.cycles
        if stop.cycles is not None and c - start_cycle >= stop.cycles:
            return True
        if stop.duration_s is not None and p.clock.wall_time - start_wall >= stop.duration_s:
            return True
        if stop.duration_s is None and stop.cycles is None:
            return p.all_idle()
        return False

    def _horizon(self, stop: StopCondition, start_cycle: int, start_wall: Fraction) -> Optional[int]:
        """Cycle at which the stop condition fires on time alone."""
        p = self.p
        limits = []
        if stop.cycles is not None:
            limits.append(start_cycle + stop.cycles)
        if stop.max_cycles is not None:
            limits.append(start_cycle + stop.max_cycles)
        if stop.duration_s is not None:
            # first cycle boundary at or after start_wall + duration
            t = start_wall + stop.duration_s
            c = p.clock.cycle_reaching(t)
            if p.clock.wall_time_at(c) < t:
                c += 1
            limits.append(c)
        return min(limits) if limits else None

    def run(self, stop: StopCondition) -> None:
        """Advance until ``stop`` holds (no report)."""
        if stop.kind == "cycles" and (stop.cycles is None or stop.cycles <= 0):
            raise ConfigurationError("cycle limit must be a positive number of cycles")
        if stop.kind not in ("halted", "cycles", "phase"):
            raise ConfigurationError(f"unknown stop condition {stop.kind!r}")
        p = self.p
        start_cycle = p.clock.cycle_count
        start_wall = p.clock.wall_time
        while True:
            if self._phase_done(stop, start_cycle, start_wall):
                if stop.kind == "cycles":
                    self.truncated = True
                return
            c = p.clock.cycle_count
            if stop.max_cycles is not None and c - start_cycle >= stop.max_cycles:
                self.truncated = True
                p.events.append({"cycle": c, "kind": "cycle-limit", "source": "kernel",
                                 "detail": f"stopped after {stop.max_cycles} cycles"})
                return
            if self.fast_forward:
                nxt = self.next_activity()
                horizon = self._horizon(stop, start_cycle, start_wall)
                if nxt is None:
                    if horizon is None:
                        self.deadlocked = True
                        p.events.append({"cycle": c, "kind": "deadlock", "source": "kernel",
                                         "detail": "no component can make progress"})
                        return
                    nxt = horizon
                elif horizon is not None:
                    nxt = min(nxt, horizon)
                if nxt > c:
                    self._skip_to(nxt)
                    continue
            self.step()

    def run_until(self, stop: StopCondition, scenario: str = "ad-hoc"):
        """Run and return an :class:`~xheep_sim.report.EnergyReport`."""
        self.run(stop)
        from .report import build_report
        return build_report(self.p, scenario=scenario, truncated=self.truncated)
