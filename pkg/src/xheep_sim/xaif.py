"""Accelerator plug-in interface and the two reference accelerators.

An accelerator model declares an :class:`XaifDescriptor` and implements
:class:`Accelerator`. :func:`attach` wires its slave windows into the address
map, its master ports into the bus, its interrupt lines into the interrupt
controller and its power domains into the power manager. The model only ever
sees the resulting :class:`XaifPorts` handle.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .errors import AccessFault, ConfigurationError
from .interconnect import BusTransaction, FaultKind, Region, WORD_BYTES
from .memory import MemoryBank, PowerState, state_fault
from .plic import XAIF_DEFAULT_PRIORITY

XAIF_WINDOW_BASE = 0x5000_0000
MIN_WINDOW = 0x1000

CAPABILITY_NAMES = {
    "clock-gate": PowerState.CLOCK_GATED,
    "power-gate": PowerState.OFF,
    "retention": PowerState.RETENTION,
}


@dataclass
class XaifDescriptor:
    n_slave_ports: int
    n_master_ports: int
    n_interrupt_lines: int
    n_power_domains: int
    slave_window_sizes: tuple = ()
    power_domain_capabilities: tuple = ()
    slave_names: tuple = ()
    domain_names: tuple = ()
    # power domain (index) that gates each slave port
    slave_domains: tuple = ()

    def validate(self) -> None:
        counts = (self.n_slave_ports, self.n_master_ports, self.n_interrupt_lines, self.n_power_domains)
        if min(counts) < 0:
            raise ConfigurationError("XAIF port counts must be non-negative")
        if len(self.slave_window_sizes) != self.n_slave_ports:
            raise ConfigurationError("one window size is needed per slave port")
        if any(s <= 0 or s % WORD_BYTES for s in self.slave_window_sizes):
            raise ConfigurationError("slave windows must be positive multiples of 4 bytes")
        if len(self.power_domain_capabilities) != self.n_power_domains:
            raise ConfigurationError("one capability set is needed per power domain")


@dataclass
class XaifCapacity:
    slave_ports: int = 0
    master_ports: int = 0
    interrupt_lines: int = 0
    power_domains: int = 0


@dataclass
class XaifPorts:
    """Everything an attached model may touch."""
    name: str
    master_ports: list
    window_bases: list
    window_sizes: list
    irq_lines: list
    domains: list                 # domain names
    psms: list                    # their power-state machines (read-only use)
    _interrupts: object = None
    _charge: object = None
    _power: object = None
    _events: list = field(default_factory=list)

    def raise_irq(self, k: int, cycle: int) -> None:
        self._interrupts.signal(self.irq_lines[k], cycle)

    def charge(self, k: int, units: int = 1) -> None:
        if self._charge is not None:
            self._charge(self.domains[k], units)

    def request_power(self, k: int, state: PowerState, cycle: int) -> Optional[int]:
        """Power-control port: ask the power manager for a domain transition."""
        return self._power.request_transition(self.domains[k], state, cycle, source=f"xaif:{self.name}")

    def domain_on(self, k: int) -> bool:
        return self.psms[k].state is PowerState.ON

    def event(self, cycle: int, kind: str, detail: str) -> None:
        self._events.append({"cycle": cycle, "kind": kind, "source": self.name, "detail": detail})


class Accelerator(ABC):
    """Plug-in boundary for accelerator models.

    Models are pure state machines advanced once per cycle: :meth:`issue`
    runs with the bus masters, :meth:`tick` with the slaves.
    """

    name: str = "accelerator"
    descriptor: XaifDescriptor
    ports: Optional[XaifPorts] = None

    def bind(self, ports: XaifPorts) -> None:
        self.ports = ports

    @abstractmethod
    def slave_access(self, port: int, txn, cycle: int) -> int:
        """Serve a bus access on slave port ``port``; return the latency."""

    def issue(self, bus, cycle: int) -> None:
        pass

    def tick(self, cycle: int) -> None:
        pass

    def next_event(self, cycle: int) -> Optional[int]:
        return None

    def reset(self) -> None:
        pass

    @property
    def busy(self) -> bool:
        return False


class XaifSlavePort:
    """Bus-facing adapter: checks the port's power domain, then delegates."""

    def __init__(self, model: Accelerator, port: int, psm=None):
        self.model = model
        self.port = port
        self.psm = psm
        self.latency = 1

    def access(self, txn, cycle: int) -> int:
        if self.psm is not None:
            fault = state_fault(self.psm.state)
            if fault is not None:
                raise AccessFault(fault, f"{self.model.name} port {self.port} is {self.psm.state.value}")
        return self.model.slave_access(self.port, txn, cycle)


def _window_size(size: int) -> int:
    w = MIN_WINDOW
    while w < size:
        w *= 2
    return w


def check_capacity(descriptor: XaifDescriptor, capacity: XaifCapacity, used: XaifCapacity) -> None:
    problems = []
    for label, attr, want in (
            ("slave ports", "slave_ports", descriptor.n_slave_ports),
            ("master ports", "master_ports", descriptor.n_master_ports),
            ("interrupt lines", "interrupt_lines", descriptor.n_interrupt_lines),
            ("power domains", "power_domains", descriptor.n_power_domains)):
        free = getattr(capacity, attr) - getattr(used, attr)
        if want > free:
            problems.append(f"{label} (requested {want}, {free} available)")
    if problems:
        raise ConfigurationError("XAIF capacity exceeded: " + "; ".join(problems))


def attach(platform, model: Accelerator, descriptor: Optional[XaifDescriptor] = None,
           irq_priority: int = XAIF_DEFAULT_PRIORITY, window_base: Optional[int] = None) -> XaifPorts:
    """Wire ``model`` into ``platform``; returns the bound port handle."""
    desc = descriptor or model.descriptor
    desc.validate()
    check_capacity(desc, platform.config.xaif, platform.xaif_used)
    if any(a.name == model.name for a in platform.accelerators):
        raise ConfigurationError(f"an accelerator named {model.name!r} is already attached")

    domains, psms = [], []
    for k in range(desc.n_power_domains):
        dname = f"{model.name}_{desc.domain_names[k]}" if desc.domain_names else f"{model.name}_pd{k}"
        caps = desc.power_domain_capabilities[k]
        dom = platform.power.add_domain(dname, capabilities=caps, kind="xaif",
                                        latencies=platform.config.latencies)
        domains.append(dname)
        psms.append(dom.psm)

    bases, sizes = [], []
    base = platform.next_xaif_base if window_base is None else window_base
    for k, size in enumerate(desc.slave_window_sizes):
        win = _window_size(size)
        base = (base + win - 1) // win * win
        sname = desc.slave_names[k] if desc.slave_names else f"s{k}"
        region_name = f"{model.name}_{sname}"
        platform.address_map.add(Region(region_name, base, size, region_name))
        dom_idx = desc.slave_domains[k] if desc.slave_domains else (0 if psms else None)
        psm = psms[dom_idx] if dom_idx is not None else None
        platform.bus.slaves[region_name] = XaifSlavePort(model, k, psm)
        platform.symbols[region_name] = base
        bases.append(base)
        sizes.append(size)
        base += win
    platform.next_xaif_base = max(platform.next_xaif_base, base)

    masters = []
    for k in range(desc.n_master_ports):
        mname = f"{model.name}.m{k}"
        platform.bus.add_master(mname)
        masters.append(mname)

    lines = []
    for k in range(desc.n_interrupt_lines):
        lid = platform.interrupts.next_free_id(16)
        platform.interrupts.add_line(lid, f"xaif:{model.name}:{k}", priority=irq_priority)
        lines.append(lid)

    used = platform.xaif_used
    used.slave_ports += desc.n_slave_ports
    used.master_ports += desc.n_master_ports
    used.interrupt_lines += desc.n_interrupt_lines
    used.power_domains += desc.n_power_domains

    ports = XaifPorts(model.name, masters, bases, sizes, lines, domains, psms,
                      platform.interrupts, platform.energy.charge, platform.power, platform.events)
    model.bind(ports)
    platform.accelerators.append(model)
    return ports


# ---------------------------------------------------------------------------
# CGRA


CGRA_MAGIC = 0xC64A0001
CGRA_HEADER_WORDS = 6
CGRA_LANE_WORDS = 7


@dataclass
class CgraLaneDescriptor:
    in_base: int
    in_row_stride: int
    out_cols: int
    first_element: int
    n_elements: int
    out_base: int
    out_stride: int = WORD_BYTES

    def words(self) -> list[int]:
        return [self.in_base, self.in_row_stride, self.out_cols, self.first_element,
                self.n_elements, self.out_base, self.out_stride]


@dataclass
class CgraKernel:
    """A 2-D correlation spread over up to four lanes.

    Output element ``e`` of a lane reads the ``kernel_rows x kernel_cols``
    window whose top-left word is
    ``in_base + (e // out_cols) * in_row_stride + (e % out_cols) * 4`` and
    stores the weighted sum (32-bit wrap-around) at ``out_base + i * out_stride``
    where ``i`` counts the lane's elements from 0.
    """
    kernel_rows: int
    kernel_cols: int
    cycles_per_element: int
    lanes: list
    weights: list = field(default_factory=list)

    def encode(self) -> list[int]:
        n = len(self.lanes)
        weights_offset = (CGRA_HEADER_WORDS + CGRA_LANE_WORDS * n) * WORD_BYTES
        words = [CGRA_MAGIC, self.kernel_rows, self.kernel_cols, self.cycles_per_element, n,
                 weights_offset if self.weights else 0]
        for lane in self.lanes:
            words += lane.words()
        words += [w & 0xFFFFFFFF for w in self.weights]
        return words

    @classmethod
    def decode(cls, read_word) -> "CgraKernel":
        if read_word(0) != CGRA_MAGIC:
            raise ValueError("bad CGRA context magic")
        kr, kc, cpe, n, woff = (read_word(4 * i) for i in range(1, 6))
        if not 1 <= n <= 4:
            raise ValueError(f"lane count {n} outside 1..4")
        lanes = []
        for k in range(n):
            base = (CGRA_HEADER_WORDS + CGRA_LANE_WORDS * k) * WORD_BYTES
            lanes.append(CgraLaneDescriptor(*(read_word(base + 4 * i) for i in range(CGRA_LANE_WORDS))))
        weights = []
        if woff:
            weights = [_signed(read_word(woff + 4 * i)) for i in range(kr * kc)]
        return cls(kr, kc, cpe, lanes, weights)


def _signed(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v >> 31 else v


class _Lane:
    def __init__(self, desc: CgraLaneDescriptor, kernel: CgraKernel, port: str):
        self.d = desc
        self.k = kernel
        self.port = port
        self.element = 0
        self.load_idx = 0
        self.acc = 0
        self.values_received = 0
        self.compute_left = 0
        self.outstanding: deque = deque()
        self.store_pending = False
        self.done = desc.n_elements == 0
        self.loads_per_element = kernel.kernel_rows * kernel.kernel_cols

    def load_address(self) -> int:
        d, k = self.d, self.k
        e = d.first_element + self.element
        r, c = divmod(self.load_idx, k.kernel_cols)
        row, col = divmod(e, d.out_cols)
        return d.in_base + (row + r) * d.in_row_stride + (col + c) * WORD_BYTES


class CgraModel(Accelerator):
    """Four-lane streaming CGRA with a retentive context memory.

    Slave port 0 holds the control registers (CTRL 0x0: write 1 = start,
    STATUS 0x4: 0 idle / 1 busy / 2 done / 3 error, CYCLES 0x8, ERROR_ADDR
    0xC), slave port 1 the context memory holding a :class:`CgraKernel`.
    Each lane loads its window with up to two reads in flight, computes for
    ``cycles_per_element`` cycles and stores one word.
    """

    STATUS_IDLE, STATUS_BUSY, STATUS_DONE, STATUS_ERROR = range(4)
    MAX_OUTSTANDING = 2

    def __init__(self, name: str = "cgra", context_bytes: int = 4096):
        self.name = name
        self.context_bytes = context_bytes
        self.descriptor = XaifDescriptor(
            n_slave_ports=2, n_master_ports=4, n_interrupt_lines=1, n_power_domains=2,
            slave_window_sizes=(0x100, context_bytes),
            power_domain_capabilities=(
                frozenset({PowerState.CLOCK_GATED, PowerState.OFF}),
                frozenset({PowerState.CLOCK_GATED, PowerState.RETENTION, PowerState.OFF})),
            slave_names=("cfg", "ctx"), domain_names=("logic", "ctx"), slave_domains=(0, 1))
        self.context: Optional[MemoryBank] = None
        self.reset()

    def bind(self, ports: XaifPorts) -> None:
        super().bind(ports)
        self.context = MemoryBank(0, self.context_bytes, psm=ports.psms[1], domain=ports.domains[1],
                                  charge=ports._charge)
        ports.psms[0].listeners.append(self._logic_power)

    def reset(self) -> None:
        self.status = self.STATUS_IDLE
        self.lanes: list[_Lane] = []
        self.start_cycle: Optional[int] = None
        self.last_cycles = 0
        self.error_addr = 0
        self.runs = 0
        self.grants_per_cycle: dict[int, int] = {}
        self._pending_start: Optional[int] = None

    def _logic_power(self, old: PowerState, new: PowerState) -> None:
        if new is PowerState.OFF:
            # datapath state is lost; the context memory is a separate domain
            self.reset()

    def load_context(self, kernel: CgraKernel) -> None:
        """Backdoor preload used by tests; scenarios write the window over the bus."""
        for i, w in enumerate(kernel.encode()):
            self.context.write_word(4 * i, w)

    @property
    def busy(self) -> bool:
        return self.status == self.STATUS_BUSY or self._pending_start is not None

    def slave_access(self, port: int, txn, cycle: int) -> int:
        if port == 1:
            data = self.context.access(txn.offset, txn.is_write, txn.byte_enable, txn.write_data)
            if not txn.is_write:
                txn.read_data = data
            return 1
        off = txn.offset & ~3
        if txn.is_write:
            if off == 0x0 and txn.write_data & 1:
                if self.busy:
                    raise AccessFault(FaultKind.REJECTED, "CGRA already running")
                self._pending_start = cycle
            elif off == 0x4:
                if not self.busy:
                    self.status = self.STATUS_IDLE
        else:
            txn.read_data = {0x0: 0, 0x4: self.status, 0x8: self.last_cycles,
                             0xC: self.error_addr}.get(off, 0)
        return 1

    def start(self, cycle: int) -> None:
        if self.busy:
            raise ConfigurationError("CGRA already running")
        self._pending_start = cycle

    def _begin(self, cycle: int) -> None:
        self._pending_start = None
        if self.context.power_state is not PowerState.ON:
            self._fail(cycle, 0, "context memory not accessible")
            return
        try:
            kernel = CgraKernel.decode(self.context.read_word)
        except ValueError as exc:
            self._fail(cycle, 0, str(exc))
            return
        self.kernel = kernel
        self.lanes = [_Lane(d, kernel, self.ports.master_ports[k]) for k, d in enumerate(kernel.lanes)]
        self.status = self.STATUS_BUSY
        self.start_cycle = cycle
        self.runs += 1

    def _fail(self, cycle: int, addr: int, why: str) -> None:
        self.status = self.STATUS_ERROR
        self.error_addr = addr
        self.lanes = []
        self.ports.event(cycle, "cgra-error", why)
        self.ports.raise_irq(0, cycle)

    def issue(self, bus, cycle: int) -> None:
        if self.ports is None or not self.ports.domain_on(0):
            return
        if self._pending_start is not None and cycle > self._pending_start:
            self._begin(cycle)
        if self.status != self.STATUS_BUSY:
            return
        computing = 0
        for lane in self.lanes:
            if self._advance_lane(lane, bus, cycle):
                computing += 1
            if self.status == self.STATUS_ERROR:
                return
        if computing:
            self.ports.charge(0, computing)
        if all(l.done for l in self.lanes):
            self.status = self.STATUS_DONE
            self.last_cycles = cycle - self.start_cycle
            self.ports.raise_irq(0, cycle)

    def _advance_lane(self, lane: _Lane, bus, cycle: int) -> bool:
        """One cycle of a lane; returns True while it is computing."""
        while lane.outstanding and lane.outstanding[0].responded(cycle):
            t = lane.outstanding.popleft()
            if t.fault is not None:
                self._fail(cycle, t.address, f"bus fault {t.fault.value} at 0x{t.address:08x}")
                return False
            if not t.is_write:
                w = self.kernel.weights[lane.values_received] if self.kernel.weights else 1
                lane.acc = (lane.acc + w * _signed(t.read_data)) & 0xFFFFFFFF
                lane.values_received += 1
        if lane.done:
            return False
        if lane.compute_left:
            lane.compute_left -= 1
            if lane.compute_left == 0:
                lane.store_pending = True
            return True
        if lane.store_pending:
            if bus.can_issue(lane.port) and len(lane.outstanding) < self.MAX_OUTSTANDING:
                addr = lane.d.out_base + lane.element * lane.d.out_stride
                t = BusTransaction(lane.port, addr, True, cycle, write_data=lane.acc)
                bus.request(t)
                lane.outstanding.append(t)
                self.ports.charge(0, 1)
                lane.store_pending = False
                lane.element += 1
                lane.load_idx = 0
                lane.values_received = 0
                lane.acc = 0
            return False
        if lane.element >= lane.d.n_elements:
            if not lane.outstanding:
                lane.done = True
            return False
        if lane.load_idx < lane.loads_per_element:
            if bus.can_issue(lane.port) and len(lane.outstanding) < self.MAX_OUTSTANDING:
                t = BusTransaction(lane.port, lane.load_address(), False, cycle)
                bus.request(t)
                lane.outstanding.append(t)
                self.ports.charge(0, 1)
                lane.load_idx += 1
            return False
        if lane.values_received == lane.loads_per_element:
            cpe = self.kernel.cycles_per_element
            if cpe <= 0:
                lane.store_pending = True
                return self._advance_lane(lane, bus, cycle)
            lane.compute_left = cpe - 1
            if lane.compute_left == 0:
                lane.store_pending = True
            return True
        return False

    def next_event(self, cycle: int) -> Optional[int]:
        if self.busy:
            return cycle
        return None


# ---------------------------------------------------------------------------
# IMC


class ImcModel(Accelerator):
    """Dual-mode in-memory-computing macro on a single slave port.

    The window holds the array (``array_size`` bytes, rows of ``row_words``
    words) followed by a control page: MODE (+0x0, 0 = memory, 1 =
    computation), STATUS (+0x4, bit0 busy, bit1 done, bit2 sticky error) and
    CLEAR (+0x8, any write clears done/error).

    In computation mode a write into the array range is a command. Its
    offset selects the destination row (``offset // row_bytes``) and the
    opcode (word index inside the row: 0 = MAC-row, 1 = shift-row); its data
    selects the sources: bits 0-7 row A, bits 8-15 row B, bits 16-20 shift.

    * MAC-row:   ``dst[w] += A[w] * B[w]``
    * shift-row: ``dst[w] = A[w] >> shift`` (arithmetic)

    A command's write response arrives when it completes, so a blocking
    master waits for it. A command arriving while the array is busy is
    rejected and sets the sticky error bit. Completion raises no interrupt.
    """

    OP_MAC_ROW = 0
    OP_SHIFT_ROW = 1
    MODE_MEMORY, MODE_COMPUTE = 0, 1

    def __init__(self, name: str = "imc", array_size: int = 32 * 1024, row_words: int = 32,
                 cycles_per_row_op: int = 16):
        if array_size % (row_words * WORD_BYTES):
            raise ConfigurationError("IMC array size must be a whole number of rows")
        self.name = name
        self.array_size = array_size
        self.row_words = row_words
        self.row_bytes = row_words * WORD_BYTES
        self.n_rows = array_size // self.row_bytes
        self.cycles_per_row_op = cycles_per_row_op
        self.descriptor = XaifDescriptor(
            n_slave_ports=1, n_master_ports=0, n_interrupt_lines=0, n_power_domains=1,
            slave_window_sizes=(array_size + 0x100,),
            power_domain_capabilities=(frozenset({PowerState.CLOCK_GATED, PowerState.RETENTION,
                                                  PowerState.OFF}),),
            slave_names=("mem",), domain_names=("array",))
        self.array: Optional[MemoryBank] = None
        self.mode = self.MODE_MEMORY
        self.busy_until = -1
        self.done = False
        self.error = False
        self.commands = 0
        self.rejected = 0

    def bind(self, ports: XaifPorts) -> None:
        super().bind(ports)
        self.array = MemoryBank(0, self.array_size, psm=ports.psms[0], domain=ports.domains[0],
                                charge=ports._charge)

    def standalone(self) -> "ImcModel":
        """Give the model a private array so it can be used without a platform."""
        self.array = MemoryBank(0, self.array_size)
        return self

    def is_busy(self, cycle: int) -> bool:
        return cycle < self.busy_until

    def row(self, r: int) -> list[int]:
        return [self.array.read_word(r * self.row_bytes + 4 * w) for w in range(self.row_words)]

    def set_row(self, r: int, values) -> None:
        for w, v in enumerate(values):
            self.array.write_word(r * self.row_bytes + 4 * w, v & 0xFFFFFFFF)

    def execute(self, dst: int, opcode: int, data: int) -> None:
        a, b, shift = data & 0xFF, (data >> 8) & 0xFF, (data >> 16) & 0x1F
        for r in (dst, a, b):
            if r >= self.n_rows:
                raise AccessFault(FaultKind.REJECTED, f"IMC row {r} out of range")
        if opcode == self.OP_MAC_ROW:
            d, ra, rb = self.row(dst), self.row(a), self.row(b)
            self.set_row(dst, [x + _signed(p) * _signed(q) for x, p, q in zip(d, ra, rb)])
        elif opcode == self.OP_SHIFT_ROW:
            self.set_row(dst, [_signed(p) >> shift for p in self.row(a)])
        else:
            raise AccessFault(FaultKind.REJECTED, f"unknown IMC opcode {opcode}")

    def command(self, offset: int, data: int, cycle: int) -> int:
        """Issue a computation command; returns its latency in cycles."""
        if self.is_busy(cycle):
            self.error = True
            self.rejected += 1
            raise AccessFault(FaultKind.REJECTED, "IMC busy")
        dst, word = divmod(offset, self.row_bytes)
        try:
            self.execute(dst, word // WORD_BYTES, data)
        except AccessFault:
            self.error = True
            raise
        self.commands += 1
        self.done = False
        self.busy_until = cycle + self.cycles_per_row_op
        if self.ports is not None:
            self.ports.charge(0, self.cycles_per_row_op)
        self.done = True
        return self.cycles_per_row_op + 1

    def slave_access(self, port: int, txn, cycle: int) -> int:
        off = txn.offset
        if off >= self.array_size:
            ctl = (off - self.array_size) & ~3
            if txn.is_write:
                if ctl == 0x0:
                    if self.is_busy(cycle):
                        self.error = True
                        raise AccessFault(FaultKind.REJECTED, "IMC busy")
                    self.mode = txn.write_data & 1
                elif ctl == 0x8:
                    self.done = False
                    self.error = False
            else:
                busy = self.is_busy(cycle)
                txn.read_data = {
                    0x0: self.mode,
                    0x4: int(busy) | (int(self.done and not busy) << 1) | (int(self.error) << 2),
                }.get(ctl, 0)
            return 1
        if self.mode == self.MODE_COMPUTE and txn.is_write:
            return self.command(off, txn.write_data, cycle)
        data = self.array.access(off, txn.is_write, txn.byte_enable, txn.write_data)
        if not txn.is_write:
            txn.read_data = data
        return 1
