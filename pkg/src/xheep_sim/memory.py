"""On-chip SRAM banks and the power-state machine shared by every domain."""

from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import AccessFault, ConfigurationError
from .interconnect import FaultKind, WORD_BYTES, AddressingMode, bank_and_offset

POISON = 0x0BAD0BAD


class PowerState(Enum):
    ON = "on"
    CLOCK_GATED = "clock-gated"
    RETENTION = "retention"
    OFF = "off"

    @property
    def rank(self) -> int:
        # higher = more restrictive
        return _RANK[self]

    @classmethod
    def parse(cls, text: str) -> "PowerState":
        key = text.strip().lower().replace("_", "-")
        aliases = {"active": "on", "gated": "clock-gated", "cg": "clock-gated", "ret": "retention"}
        return cls(aliases.get(key, key))


_RANK = {PowerState.ON: 0, PowerState.CLOCK_GATED: 1, PowerState.RETENTION: 2, PowerState.OFF: 3}

ALL_CAPABILITIES = frozenset({PowerState.CLOCK_GATED, PowerState.RETENTION, PowerState.OFF})

# (from, to) -> cycles; every domain reuses this table unless overridden.
DEFAULT_LATENCIES: dict[tuple[PowerState, PowerState], int] = {}
for _a in PowerState:
    for _b in PowerState:
        if _a is _b:
            lat = 0
        elif _b is PowerState.OFF:
            lat = 1
        elif _a is PowerState.OFF:
            lat = 10
        elif PowerState.RETENTION in (_a, _b):
            lat = 2
        else:
            lat = 1
        DEFAULT_LATENCIES[(_a, _b)] = lat
del _a, _b


def more_restrictive(a: PowerState, b: PowerState) -> PowerState:
    return a if a.rank >= b.rank else b


class PowerStateMachine:
    """Per-domain gating state with scheduled transitions.

    A request issued in cycle ``t`` with latency ``L`` completes at the start
    of cycle ``t + max(L, 1)``. While it is in flight the domain reports the
    more restrictive of the old and new states, so gating takes effect from
    ``t + 1`` and un-gating only once the latency has elapsed.
    """

    def __init__(self, name: str, capabilities=ALL_CAPABILITIES,
                 latencies: Optional[dict] = None, state: PowerState = PowerState.ON,
                 always_on: bool = False):
        self.name = name
        self.capabilities = frozenset(capabilities)
        self.latencies = dict(DEFAULT_LATENCIES)
        if latencies:
            self.latencies.update(latencies)
        self.always_on = always_on
        self.state = state
        self.target = state
        self._reported_at: Optional[tuple[int, PowerState]] = None
        self._settle_cycle: Optional[int] = None
        self.listeners: list[Callable[[PowerState, PowerState], None]] = []
        # called before the reported state changes (energy segments close here)
        self.pre_listeners: list[Callable[[], None]] = []
        self.transitions = 0

    @property
    def in_transition(self) -> bool:
        return self._settle_cycle is not None

    def check(self, target: PowerState) -> None:
        if self.always_on and target is not PowerState.ON:
            raise ConfigurationError(f"domain {self.name!r} is always on")
        if target is not PowerState.ON and target not in self.capabilities:
            raise ConfigurationError(f"domain {self.name!r} does not support {target.value}")
        if target is PowerState.RETENTION and PowerState.OFF in (self.state, self.target):
            raise ConfigurationError(
                f"domain {self.name!r}: off -> retention is not allowed (contents already lost)")

    def request(self, target: PowerState, cycle: int) -> int:
        """Schedule a transition; returns its latency in cycles."""
        self.check(target)
        if target is self.target:
            return 0
        # mid-transition the reported (more restrictive) state is the origin
        origin = self.state if self.in_transition else self.target
        latency = self.latencies[(origin, target)]
        settle = cycle + max(latency, 1)
        if target.rank >= self.state.rank:
            report = cycle + 1
        else:
            report = settle
        self.target = target
        self._settle_cycle = settle
        self._reported_at = (report, target)
        self.transitions += 1
        return latency

    def next_event(self) -> Optional[int]:
        cands = []
        if self._reported_at is not None:
            cands.append(self._reported_at[0])
        if self._settle_cycle is not None:
            cands.append(self._settle_cycle)
        return min(cands) if cands else None

    def apply_due(self, cycle: int) -> bool:
        """Advance to ``cycle``; returns True if the reported state changed."""
        changed = False
        if self._reported_at is not None and self._reported_at[0] <= cycle:
            new = self._reported_at[1]
            self._reported_at = None
            if new is not self.state:
                for cb in self.pre_listeners:
                    cb()
                old, self.state = self.state, new
                changed = True
                for cb in self.listeners:
                    cb(old, new)
        if self._settle_cycle is not None and self._settle_cycle <= cycle:
            self._settle_cycle = None
        return changed

    def force(self, state: PowerState) -> None:
        """Set the state immediately (reset/preload only)."""
        self.check(state)
        if state is not self.state:
            for cb in self.pre_listeners:
                cb()
        old = self.state
        self.state = self.target = state
        self._reported_at = None
        self._settle_cycle = None
        if old is not state:
            for cb in self.listeners:
                cb(old, state)


_FAULT_FOR_STATE = {
    PowerState.CLOCK_GATED: FaultKind.GATED,
    PowerState.RETENTION: FaultKind.RETAINED,
    PowerState.OFF: FaultKind.POWERED_OFF,
}


def state_fault(state: PowerState) -> Optional[FaultKind]:
    return _FAULT_FOR_STATE.get(state)


class MemoryBank:
    """One SRAM bank. Accesses succeed only while its domain is on."""

    latency = 1

    def __init__(self, bank_id: int, size_bytes: int = 32 * 1024,
                 psm: Optional[PowerStateMachine] = None, charge=None, domain: Optional[str] = None,
                 poison: int = POISON):
        if size_bytes <= 0 or size_bytes % WORD_BYTES:
            raise ConfigurationError(f"bank size must be a positive multiple of 4, got {size_bytes}")
        self.bank_id = bank_id
        self.size_bytes = size_bytes
        self.contents = bytearray(size_bytes)
        self.domain = domain or f"bank{bank_id}"
        self.psm = psm or PowerStateMachine(self.domain)
        self.psm.listeners.append(self._on_state_change)
        self.poison_bytes = poison.to_bytes(4, "little")
        self.access_count_read = 0
        self.access_count_write = 0
        self._charge = charge

    @property
    def power_state(self) -> PowerState:
        return self.psm.state

    def _on_state_change(self, old: PowerState, new: PowerState) -> None:
        if new is PowerState.OFF:
            self.contents[:] = self.poison_bytes * (self.size_bytes // WORD_BYTES)

    def set_power_state(self, new_state: PowerState, cycle: int = 0) -> int:
        return self.psm.request(new_state, cycle)

    def read_word(self, offset: int) -> int:
        o = offset & ~3
        return int.from_bytes(self.contents[o:o + 4], "little")

    def write_word(self, offset: int, value: int, byte_enable: int = 0xF) -> None:
        o = offset & ~3
        data = (value & 0xFFFFFFFF).to_bytes(4, "little")
        if byte_enable == 0xF:
            self.contents[o:o + 4] = data
        else:
            for i in range(4):
                if byte_enable >> i & 1:
                    self.contents[o + i] = data[i]

    def access(self, offset: int, is_write: bool, byte_enable: int = 0xF, write_data: int = 0) -> Optional[int]:
        if offset < 0 or (offset & ~3) + 4 > self.size_bytes:
            raise AccessFault(FaultKind.DECODE, f"offset {offset:#x} outside bank {self.bank_id}")
        fault = state_fault(self.psm.state)
        if fault is not None:
            raise AccessFault(fault, f"bank {self.bank_id} is {self.psm.state.value}")
        if self._charge is not None:
            self._charge(self.domain, 1)
        if is_write:
            self.access_count_write += 1
            self.write_word(offset, write_data, byte_enable)
            return None
        self.access_count_read += 1
        return self.read_word(offset)

    # bus slave protocol
    def bus_access(self, txn, cycle: int) -> int:
        data = self.access(txn.offset, txn.is_write, txn.byte_enable, txn.write_data)
        if not txn.is_write:
            txn.read_data = data
        return self.latency

    def load_image(self, data: bytes, offset: int = 0) -> None:
        if offset < 0 or offset + len(data) > self.size_bytes:
            raise ConfigurationError(f"image of {len(data)} bytes does not fit bank {self.bank_id}")
        self.contents[offset:offset + len(data)] = data

    def dump_image(self) -> bytes:
        return bytes(self.contents)


class BankSlave:
    """Adapter exposing a :class:`MemoryBank` through the bus slave protocol."""

    def __init__(self, bank: MemoryBank):
        self.bank = bank
        self.latency = bank.latency

    def access(self, txn, cycle: int) -> int:
        return self.bank.bus_access(txn, cycle)


class MemoryRegion:
    """All banks of the main memory seen as one flat, little-endian region."""

    def __init__(self, banks: list[MemoryBank], addressing: AddressingMode):
        self.banks = banks
        self.addressing = addressing
        self.bank_size = banks[0].size_bytes
        self.size = self.bank_size * len(banks)

    def _locate(self, rel: int) -> tuple[MemoryBank, int]:
        b, off = bank_and_offset(rel, self.addressing, len(self.banks), self.bank_size)
        return self.banks[b], off

    def write_bytes(self, rel: int, data: bytes) -> None:
        if rel < 0 or rel + len(data) > self.size:
            raise ConfigurationError("image exceeds memory region")
        for i, byte in enumerate(data):
            bank, off = self._locate(rel + i)
            bank.contents[off] = byte

    def read_bytes(self, rel: int, n: int) -> bytes:
        out = bytearray(n)
        for i in range(n):
            bank, off = self._locate(rel + i)
            out[i] = bank.contents[off]
        return bytes(out)

    def read_word(self, rel: int) -> int:
        return int.from_bytes(self.read_bytes(rel, 4), "little")

    def write_word(self, rel: int, value: int) -> None:
        self.write_bytes(rel, (value & 0xFFFFFFFF).to_bytes(4, "little"))

    def load_image_file(self, path, rel: int = 0) -> int:
        data = Path(path).read_bytes()
        self.write_bytes(rel, data)
        return len(data)

    def save_image_file(self, path, rel: int = 0, n: Optional[int] = None) -> None:
        Path(path).write_bytes(self.read_bytes(rel, self.size - rel if n is None else n))


def load_bank_images(banks: Iterable[MemoryBank], paths: Iterable) -> None:
    """Preload one flat image file per bank (missing entries are skipped)."""
    for bank, path in zip(banks, paths):
        if path is not None:
            bank.load_image(Path(path).read_bytes())
