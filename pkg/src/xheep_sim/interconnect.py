"""OBI-style system bus: address decoding, round-robin arbitration, responses.

Timing contract (all slaves):

* a request issued in cycle ``t`` (kernel phase 1) may be granted in ``t``
  (phase 2);
* the slave serves it in phase 3 of the grant cycle and the response is
  visible to the master from ``grant_cycle + latency`` on (``latency`` is 1
  for SRAM);
* a master port holds at most one ungranted request; it stays pending until
  granted.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .errors import AccessFault, ConfigurationError

WORD_BYTES = 4
BUS_WIDTH_BITS = 32


class Topology(Enum):
    ONE_AT_A_TIME = "one-at-a-time"
    FULLY_CONNECTED = "fully-connected"


class AddressingMode(Enum):
    CONTIGUOUS = "contiguous"
    INTERLEAVED = "interleaved"


class FaultKind(Enum):
    DECODE = "decode"
    GATED = "gated"
    RETAINED = "retained"
    POWERED_OFF = "powered-off"
    REJECTED = "rejected"
    DEVICE = "device"


@dataclass(eq=False)
class BusTransaction:
    master_id: str
    address: int
    is_write: bool
    issue_cycle: int
    byte_enable: int = 0xF
    write_data: int = 0
    grant_cycle: Optional[int] = None
    response_cycle: Optional[int] = None
    read_data: Optional[int] = None
    fault: Optional[FaultKind] = None
    slave_id: Optional[str] = None
    offset: int = 0

    def responded(self, cycle: int) -> bool:
        return self.response_cycle is not None and self.response_cycle <= cycle


@dataclass(frozen=True)
class Region:
    name: str
    base: int
    size: int
    target: str
    addressing: Optional[AddressingMode] = None
    bank_count: int = 1
    bank_size: int = 0

    @property
    def end(self) -> int:
        return self.base + self.size

    @property
    def is_memory(self) -> bool:
        return self.addressing is not None

    def bank_slave(self, bank: int) -> str:
        return f"{self.target}{bank}"


def memory_region(name: str, base: int, bank_count: int, bank_size: int,
                  addressing: AddressingMode, target: str = "bank") -> Region:
    if bank_count <= 0 or bank_count & (bank_count - 1):
        raise ConfigurationError(f"bank count must be a power of two, got {bank_count}")
    if bank_size <= 0 or bank_size % WORD_BYTES:
        raise ConfigurationError(f"bank size must be a positive multiple of 4, got {bank_size}")
    return Region(name, base, bank_count * bank_size, target, addressing, bank_count, bank_size)


def bank_and_offset(rel: int, mode: AddressingMode, bank_count: int, bank_size: int) -> tuple[int, int]:
    """Map a region-relative byte address to ``(bank, byte offset in bank)``."""
    if mode is AddressingMode.CONTIGUOUS:
        return rel // bank_size, rel % bank_size
    word = rel // WORD_BYTES
    return word % bank_count, (word // bank_count) * WORD_BYTES + rel % WORD_BYTES


class AddressMap:
    def __init__(self, regions: Iterable[Region] = ()):
        self.regions: list[Region] = []
        for r in regions:
            self.add(r)

    def add(self, region: Region) -> Region:
        if region.size <= 0:
            raise ConfigurationError(f"region {region.name!r} has non-positive size")
        if region.base < 0 or region.end > 1 << 32:
            raise ConfigurationError(f"region {region.name!r} lies outside the 32-bit space")
        if region.is_memory and region.bank_count * region.bank_size != region.size:
            raise ConfigurationError(f"region {region.name!r}: bank_count x bank_size != size")
        for other in self.regions:
            if region.base < other.end and other.base < region.end:
                raise ConfigurationError(
                    f"address overlap: {region.name!r} [{region.base:#010x}, {region.end:#010x}) "
                    f"and {other.name!r} [{other.base:#010x}, {other.end:#010x})")
            if region.name == other.name:
                raise ConfigurationError(f"duplicate region name {region.name!r}")
        self.regions.append(region)
        self.regions.sort(key=lambda r: r.base)
        return region

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def find(self, address: int) -> Optional[Region]:
        for r in self.regions:
            if r.base <= address < r.end:
                return r
        return None

    def __iter__(self) -> Iterator[Region]:
        return iter(self.regions)


def decode(address_map: AddressMap, address: int) -> tuple[str, int]:
    """Return ``(slave_id, local_offset)`` or raise a decode fault."""
    region = address_map.find(address)
    if region is None:
        raise AccessFault(FaultKind.DECODE, f"unmapped address {address:#010x}")
    rel = address - region.base
    if region.is_memory:
        bank, off = bank_and_offset(rel, region.addressing, region.bank_count, region.bank_size)
        return region.bank_slave(bank), off
    return region.target, rel


class RoundRobin:
    """Round-robin pointer over master indices ``0..n-1``."""

    def __init__(self, n: int):
        self.n = n
        self.last = n - 1

    def pick(self, candidates: Iterable[int]) -> int:
        n, last = self.n, self.last
        choice = min(candidates, key=lambda m: (m - last - 1) % n)
        self.last = choice
        return choice


class Arbiter:
    """Grant selection for one bus, holding the round-robin state."""

    def __init__(self, topology: Topology, n_masters: int):
        self.topology = topology
        self.n_masters = n_masters
        self._global = RoundRobin(max(n_masters, 1))
        self._per_slave: dict[str, RoundRobin] = {}

    def arbitrate(self, pending: dict[int, str]) -> list[int]:
        """``pending`` maps master index -> target slave; returns granted indices."""
        if not pending:
            return []
        if self.topology is Topology.ONE_AT_A_TIME:
            return [self._global.pick(pending)]
        by_slave: dict[str, list[int]] = {}
        for m, s in pending.items():
            by_slave.setdefault(s, []).append(m)
        grants = []
        for s, ms in by_slave.items():
            if len(ms) == 1:
                grants.append(ms[0])
                # an uncontended grant still advances this slave's pointer
                rr = self._per_slave.get(s)
                if rr is not None:
                    rr.last = ms[0]
            else:
                rr = self._per_slave.setdefault(s, RoundRobin(self.n_masters))
                grants.append(rr.pick(ms))
        grants.sort()
        return grants


def arbitrate(topology: Topology, pending: dict[int, str], n_masters: int,
              arbiter: Optional[Arbiter] = None) -> list[int]:
    arbiter = arbiter or Arbiter(topology, n_masters)
    return arbiter.arbitrate(pending)


class Bus:
    """The system bus connecting master ports to slaves.

    ``slaves`` maps a slave id to an object with ``access(txn, cycle) -> int``
    returning the response latency (or raising :class:`AccessFault`).
    ``charge(domain, units)`` is called once per grant so the energy model can
    account interconnect activity.
    """

    def __init__(self, topology: Topology, address_map: AddressMap, masters: list[str],
                 slaves: dict, charge=None, trace: bool = False, bus_domain: str = "always_on"):
        self.topology = topology
        self.address_map = address_map
        self.masters = list(masters)
        self.index = {m: i for i, m in enumerate(self.masters)}
        if len(self.index) != len(self.masters):
            raise ConfigurationError("duplicate master port names")
        self.slaves = slaves
        self.arbiter = Arbiter(topology, len(self.masters))
        self.pending: dict[int, BusTransaction] = {}
        self._granted: list[BusTransaction] = []
        self._charge = charge
        self.bus_domain = bus_domain
        self.trace_enabled = trace
        self.trace: list[BusTransaction] = []
        self.grants_per_cycle: Counter = Counter()
        self.grants_by_master: Counter = Counter()
        self.total_grants = 0
        self.total_faults = 0
        self.issued = 0
        self.last_grants = 0
        self.max_grants_in_cycle = 0
        self._idle_cycles_pending = 0

    def add_master(self, name: str) -> int:
        if name in self.index:
            raise ConfigurationError(f"duplicate master port {name!r}")
        self.index[name] = len(self.masters)
        self.masters.append(name)
        self.arbiter = Arbiter(self.topology, len(self.masters))
        return self.index[name]

    def can_issue(self, master: str) -> bool:
        return self.index[master] not in self.pending

    def request(self, txn: BusTransaction) -> BusTransaction:
        port = self.index[txn.master_id]
        if port in self.pending:
            raise RuntimeError(f"master {txn.master_id} already has an ungranted request")
        self.issued += 1
        if self.trace_enabled:
            self.trace.append(txn)
        try:
            txn.slave_id, txn.offset = decode(self.address_map, txn.address)
        except AccessFault as exc:
            txn.fault = exc.kind
            txn.grant_cycle = txn.issue_cycle
            txn.response_cycle = txn.issue_cycle + 1
            self.total_faults += 1
            return txn
        if txn.slave_id not in self.slaves:
            txn.fault = FaultKind.DECODE
            txn.grant_cycle = txn.issue_cycle
            txn.response_cycle = txn.issue_cycle + 1
            self.total_faults += 1
            return txn
        self.pending[port] = txn
        return txn

    def arbitrate(self, cycle: int) -> list[BusTransaction]:
        if not self.pending:
            self.last_grants = 0
            self._idle_cycles_pending += 1
            return []
        self._flush_idle()
        grants = self.arbiter.arbitrate({p: t.slave_id for p, t in self.pending.items()})
        granted = []
        for port in grants:
            txn = self.pending.pop(port)
            txn.grant_cycle = cycle
            granted.append(txn)
            self.grants_by_master[txn.master_id] += 1
        n = len(granted)
        if self.topology is Topology.ONE_AT_A_TIME:
            assert n <= 1
        self.grants_per_cycle[n] += 1
        self.total_grants += n
        self.last_grants = n
        self.max_grants_in_cycle = max(self.max_grants_in_cycle, n)
        if self._charge is not None and n:
            self._charge(self.bus_domain, n)
        self._granted = granted
        return granted

    def respond(self, cycle: int) -> None:
        for txn in self._granted:
            slave = self.slaves[txn.slave_id]
            try:
                latency = slave.access(txn, cycle)
            except AccessFault as exc:
                txn.fault = exc.kind
                latency = getattr(slave, "latency", 1)
                self.total_faults += 1
            txn.response_cycle = cycle + max(1, latency)
        self._granted = []

    def skip_idle(self, n: int) -> None:
        self._idle_cycles_pending += n

    def _flush_idle(self) -> None:
        if self._idle_cycles_pending:
            self.grants_per_cycle[0] += self._idle_cycles_pending
            self._idle_cycles_pending = 0

    @property
    def busy(self) -> bool:
        return bool(self.pending) or bool(self._granted)

    def stats(self, cycles: int) -> dict:
        self._flush_idle()
        hist = dict(sorted(self.grants_per_cycle.items()))
        return {
            "transactions": self.issued,
            "grants": self.total_grants,
            "faults": self.total_faults,
            "bits_per_cycle": (self.total_grants * BUS_WIDTH_BITS / cycles) if cycles else 0.0,
            "max_grants_per_cycle": self.max_grants_in_cycle,
            "grants_per_cycle_histogram": {str(k): v for k, v in hist.items()},
            "grants_by_master": dict(sorted(self.grants_by_master.items())),
        }

    def write_trace_csv(self, path) -> None:
        write_trace_csv(self.trace, path)


def write_trace_csv(transactions: Iterable[BusTransaction], path) -> None:
    """One line per transaction: cycle, master, address, r/w, grant, response, fault."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "master", "address", "rw", "grant_cycle", "response_cycle", "fault"])
        for t in transactions:
            w.writerow([
                t.issue_cycle, t.master_id, f"0x{t.address:08x}", "w" if t.is_write else "r",
                "" if t.grant_cycle is None else t.grant_cycle,
                "" if t.response_cycle is None else t.response_cycle,
                "" if t.fault is None else t.fault.value,
            ])


class StreamMaster:
    """Pipelined data-only master replaying a fixed access stream.

    Issues at most one new request per cycle and keeps up to
    ``max_outstanding`` granted-but-unanswered transactions; this is what lets
    a single port sustain one word per cycle.
    """

    def __init__(self, name: str, accesses: Iterable[tuple[int, bool, int]], max_outstanding: int = 2):
        self.name = name
        self._accesses = iter(accesses)
        self._next = next(self._accesses, None)
        self.max_outstanding = max_outstanding
        self.outstanding: list[BusTransaction] = []
        self.completed = 0
        self.faults = 0
        self.read_data: list[int] = []

    @property
    def done(self) -> bool:
        return self._next is None and not self.outstanding

    def issue(self, bus: Bus, cycle: int) -> None:
        still = []
        for t in self.outstanding:
            if t.responded(cycle):
                self.completed += 1
                if t.fault is not None:
                    self.faults += 1
                elif not t.is_write:
                    self.read_data.append(t.read_data)
            else:
                still.append(t)
        self.outstanding = still
        if self._next is None or not bus.can_issue(self.name):
            return
        if len(self.outstanding) >= self.max_outstanding:
            return
        addr, is_write, data = self._next
        txn = BusTransaction(self.name, addr, is_write, cycle, write_data=data)
        bus.request(txn)
        self.outstanding.append(txn)
        self._next = next(self._accesses, None)


def read_stream(base: int, stride: int, span: int, count: int):
    """``count`` reads walking ``span`` words from ``base``, wrapping around."""
    return ((base + (k % span) * stride, False, 0) for k in range(count))


class _NullSlave:
    latency = 1

    def access(self, txn, cycle):
        if not txn.is_write:
            txn.read_data = 0
        return 1


def measure_peak_bandwidth(config, n_master_ports: int, window: int = 256, warmup: int = 4) -> float:
    """Sustained bus bandwidth in bits/cycle with ``n`` master/bank pairs.

    Each master streams reads to its own dedicated bank (one bank slave is
    added per master port). ``config`` needs ``topology``, ``addressing`` and
    ``bank_size`` attributes.
    """
    if n_master_ports <= 0:
        raise ConfigurationError("n_master_ports must be at least 1")
    n_banks = 1
    while n_banks < n_master_ports:
        n_banks *= 2
    region = memory_region("ram", 0, n_banks, config.bank_size, config.addressing)
    amap = AddressMap([region])
    slaves = {region.bank_slave(b): _NullSlave() for b in range(n_banks)}
    total = warmup + window + 4
    masters = []
    for i in range(n_master_ports):
        if config.addressing is AddressingMode.CONTIGUOUS:
            base, stride = i * config.bank_size, WORD_BYTES
        else:
            base, stride = i * WORD_BYTES, WORD_BYTES * n_banks
        span = region.bank_size // WORD_BYTES
        masters.append(StreamMaster(f"stream{i}", read_stream(base, stride, span, total * 2)))
    bus = Bus(config.topology, amap, [m.name for m in masters], slaves)
    granted_in_window = 0
    for cycle in range(warmup + window):
        for m in masters:
            m.issue(bus, cycle)
        g = bus.arbitrate(cycle)
        bus.respond(cycle)
        if cycle >= warmup:
            granted_in_window += len(g)
    return granted_in_window * BUS_WIDTH_BITS / window
