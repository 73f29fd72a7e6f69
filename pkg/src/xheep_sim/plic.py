"""Interrupt aggregation: a PLIC-style controller plus fast (bypass) lines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import AccessFault, ConfigurationError
from .interconnect import FaultKind

MAX_PRIORITY = 7
XAIF_DEFAULT_PRIORITY = 4


@dataclass
class IrqLine:
    id: int
    source: str
    priority: int = 1
    enabled: bool = True
    fast: bool = False
    pending: bool = False
    raised_cycle: Optional[int] = None
    raise_count: int = 0
    claim_count: int = 0

    def __post_init__(self):
        if not 0 <= self.priority <= MAX_PRIORITY:
            raise ConfigurationError(f"irq {self.id}: priority must be in 0..{MAX_PRIORITY}")


class InterruptController:
    """Level-latched pending bits, highest-priority claim, lowest-id tie-break.

    Lines routed through the PLIC reach the CPU wake logic one cycle after
    they are raised; lines marked ``fast`` are visible in the same cycle.
    Priority 0 lines latch but are never delivered.
    """

    # memory-mapped layout (offsets in the PLIC window)
    REG_PRIORITY = 0x000     # + 4*id
    REG_PENDING = 0x1000     # bitmap, word per 32 ids
    REG_ENABLE = 0x2000      # bitmap, word per 32 ids
    REG_CLAIM = 0x3000
    latency = 1

    def __init__(self):
        self.lines: dict[int, IrqLine] = {}
        self._queued: list[tuple[int, int]] = []
        self.claims: list[int] = []

    def add_line(self, id: int, source: str, priority: int = 1, enabled: bool = True,
                 fast: bool = False) -> IrqLine:
        if id in self.lines:
            raise ConfigurationError(f"duplicate interrupt id {id}")
        if id <= 0:
            raise ConfigurationError("interrupt id 0 is reserved")
        line = IrqLine(id, source, priority, enabled, fast)
        self.lines[id] = line
        return line

    def next_free_id(self, start: int = 1) -> int:
        i = start
        while i in self.lines:
            i += 1
        return i

    def _line(self, line_id: int) -> IrqLine:
        try:
            return self.lines[line_id]
        except KeyError:
            raise ConfigurationError(f"unknown interrupt line {line_id}") from None

    def raise_(self, line_id: int, cycle: int = 0) -> None:
        line = self._line(line_id)
        if not line.pending:
            line.raised_cycle = cycle
        line.pending = True
        line.raise_count += 1

    def signal(self, line_id: int, cycle: int) -> None:
        """Queue a raise from a component; applied in the interrupt phase."""
        self._line(line_id)
        self._queued.append((line_id, cycle))

    def propagate(self, cycle: int) -> None:
        queued, self._queued = self._queued, []
        for line_id, c in queued:
            self.raise_(line_id, c)

    def _deliverable(self, line: IrqLine, cycle: Optional[int]) -> bool:
        if not (line.pending and line.enabled and line.priority > 0):
            return False
        if cycle is None or line.fast:
            return True
        return line.raised_cycle is not None and line.raised_cycle < cycle

    def wake_pending(self, cycle: Optional[int] = None) -> bool:
        return any(self._deliverable(l, cycle) for l in self.lines.values())

    def claim(self, cycle: Optional[int] = None) -> Optional[int]:
        best = None
        for line in self.lines.values():
            if not self._deliverable(line, cycle):
                continue
            if best is None or line.priority > best.priority or (
                    line.priority == best.priority and line.id < best.id):
                best = line
        if best is None:
            return None
        best.pending = False
        best.raised_cycle = None
        best.claim_count += 1
        self.claims.append(best.id)
        return best.id

    def enable(self, line_id: int, enabled: bool = True) -> None:
        self._line(line_id).enabled = enabled

    def set_priority(self, line_id: int, priority: int) -> None:
        if not 0 <= priority <= MAX_PRIORITY:
            raise ConfigurationError(f"priority must be in 0..{MAX_PRIORITY}")
        self._line(line_id).priority = priority

    def next_event(self) -> Optional[int]:
        return None

    # bus slave protocol
    def access(self, txn, cycle: int) -> int:
        off = txn.offset & ~3
        if off < self.REG_PENDING:
            line_id = off // 4
            if txn.is_write:
                if line_id in self.lines:
                    self.set_priority(line_id, txn.write_data & 7)
            else:
                txn.read_data = self.lines[line_id].priority if line_id in self.lines else 0
        elif off < self.REG_ENABLE:
            base = (off - self.REG_PENDING) // 4 * 32
            if txn.is_write:
                raise AccessFault(FaultKind.REJECTED, "pending bits are read-only")
            txn.read_data = sum(1 << (i - base) for i, l in self.lines.items()
                                if base <= i < base + 32 and l.pending)
        elif off < self.REG_CLAIM:
            base = (off - self.REG_ENABLE) // 4 * 32
            if txn.is_write:
                for i, l in self.lines.items():
                    if base <= i < base + 32:
                        l.enabled = bool(txn.write_data >> (i - base) & 1)
            else:
                txn.read_data = sum(1 << (i - base) for i, l in self.lines.items()
                                    if base <= i < base + 32 and l.enabled)
        elif off == self.REG_CLAIM:
            if txn.is_write:
                pass  # completion write: nothing to do for level-latched lines
            else:
                claimed = self.claim(cycle)
                txn.read_data = 0 if claimed is None else claimed
        else:
            raise AccessFault(FaultKind.DECODE, f"PLIC offset {off:#x}")
        return self.latency
