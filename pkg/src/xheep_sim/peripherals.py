"""DMA engine, ADC/flash stream sources, timer, UART and peripheral subsystems."""

from __future__ import annotations

import csv
import math
import random
from collections import deque
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

from .errors import AccessFault, ConfigurationError
from .interconnect import BusTransaction, FaultKind, WORD_BYTES
from .memory import state_fault


class WordFifo:
    """Bounded word FIFO shared between a stream peripheral and the DMA."""

    def __init__(self, name: str, depth: int):
        if depth <= 0:
            raise ConfigurationError(f"FIFO {name!r}: depth must be positive")
        self.name = name
        self.depth = depth
        self.words: deque = deque()
        self.pushed = 0
        self.popped = 0

    def __len__(self) -> int:
        return len(self.words)

    @property
    def full(self) -> bool:
        return len(self.words) >= self.depth

    def push(self, word) -> None:
        self.words.append(word)
        self.pushed += 1

    def pop(self):
        self.popped += 1
        return self.words.popleft()


# ---------------------------------------------------------------------------
# peripheral subsystem (one shared slave port per subsystem)


class PeripheralSubsystem:
    """Devices behind a single bus slave port with an extra access latency.

    ``psm`` is the power domain of the subsystem (None = always on); devices
    may carry their own ``always_available`` flag to stay reachable while the
    subsystem is off.
    """

    def __init__(self, name: str, extra_latency: int = 2, psm=None, charge=None, domain: str = "always_on"):
        self.name = name
        self.extra_latency = extra_latency
        self.psm = psm
        self._charge = charge
        self.domain = domain
        self.devices: list[tuple[str, int, int, object]] = []
        self.latency = 1 + extra_latency

    def add(self, name: str, offset: int, size: int, device) -> None:
        for n, o, s, _ in self.devices:
            if offset < o + s and o < offset + size:
                raise ConfigurationError(f"{self.name}: device {name!r} overlaps {n!r}")
        self.devices.append((name, offset, size, device))
        self.devices.sort(key=lambda d: d[1])

    def device(self, name: str):
        for n, _, _, d in self.devices:
            if n == name:
                return d
        raise KeyError(name)

    def offset_of(self, name: str) -> int:
        for n, o, _, _ in self.devices:
            if n == name:
                return o
        raise KeyError(name)

    @property
    def size(self) -> int:
        return max((o + s for _, o, s, _ in self.devices), default=0x1000)

    def access(self, txn, cycle: int) -> int:
        for name, off, size, dev in self.devices:
            if off <= txn.offset < off + size:
                break
        else:
            raise AccessFault(FaultKind.DECODE, f"{self.name}: no device at offset {txn.offset:#x}")
        if self.psm is not None and not getattr(dev, "always_available", False):
            fault = state_fault(self.psm.state)
            if fault is not None:
                raise AccessFault(fault, f"{self.name} is {self.psm.state.value}")
        outer = txn.offset
        txn.offset = outer - off
        try:
            lat = dev.access(txn, cycle)
        finally:
            txn.offset = outer
        if self._charge is not None:
            self._charge(self.domain, 1)
        return lat + self.extra_latency


class RegisterFile:
    """Plain read/write scratch registers (GPIO, I2C, SPI, SoC control)."""

    latency = 1

    def __init__(self, name: str, n_words: int = 16):
        self.name = name
        self.regs = [0] * n_words

    def access(self, txn, cycle: int) -> int:
        i = txn.offset // WORD_BYTES
        if i >= len(self.regs):
            raise AccessFault(FaultKind.DECODE, f"{self.name} register {txn.offset:#x}")
        if txn.is_write:
            self.regs[i] = txn.write_data
        else:
            txn.read_data = self.regs[i]
        return self.latency


# ---------------------------------------------------------------------------
# DMA


class DmaStatus(Enum):
    IDLE = 0
    BUSY = 1
    DONE = 2
    ERROR = 3


@dataclass
class DmaChannel:
    index: int
    done_irq_line: Optional[int] = None
    error_irq_line: Optional[int] = None
    src: int = 0
    dst: int = 0
    src_fifo: Optional[WordFifo] = None
    dst_fifo: Optional[WordFifo] = None
    length_bytes: int = 0
    src_stride: int = WORD_BYTES
    dst_stride: int = WORD_BYTES
    status: DmaStatus = DmaStatus.IDLE
    words_read: int = 0
    words_written: int = 0
    start_cycle: Optional[int] = None
    done_cycle: Optional[int] = None
    transfers: int = 0

    @property
    def n_words(self) -> int:
        return self.length_bytes // WORD_BYTES

    def configure(self, src=0, dst=0, length_bytes: int = 0, src_stride: int = WORD_BYTES,
                  dst_stride: int = WORD_BYTES) -> None:
        """``src``/``dst`` are addresses or :class:`WordFifo` objects."""
        if self.status is DmaStatus.BUSY:
            raise ConfigurationError(f"DMA channel {self.index} is busy")
        if length_bytes % WORD_BYTES:
            raise ConfigurationError("DMA length must be a multiple of 4 bytes")
        self.src_fifo = src if isinstance(src, WordFifo) else None
        self.dst_fifo = dst if isinstance(dst, WordFifo) else None
        self.src = 0 if self.src_fifo else src
        self.dst = 0 if self.dst_fifo else dst
        self.length_bytes = length_bytes
        self.src_stride = src_stride
        self.dst_stride = dst_stride


class DmaEngine:
    """DMA with one read and one write master port.

    Per word the read port fetches (cycle ``t``, response ``t+1``) and the
    write port stores it from ``t+1``; a two-entry buffer between them keeps
    one word per cycle flowing. FIFO sources are popped directly, without a
    bus read, and FIFO destinations are pushed without a bus write.

    Registers per channel (stride 0x20): SRC 0x00, DST 0x04, LENGTH 0x08,
    SRC_STRIDE 0x0C, DST_STRIDE 0x10, SRC_FIFO 0x14, DST_FIFO 0x18 (FIFO
    index + 1, 0 = memory), CTRL 0x1C (write 1 = start; read = status).
    """

    CH_STRIDE = 0x20
    latency = 1
    BUFFER_DEPTH = 2

    def __init__(self, n_channels: int = 1, name: str = "dma", interrupts=None,
                 charge: Optional[Callable[[str, int], None]] = None, domain: str = "always_on",
                 events: Optional[list] = None, fifos: Optional[list] = None):
        self.name = name
        self.read_port = f"{name}.read"
        self.write_port = f"{name}.write"
        self.channels = [DmaChannel(i) for i in range(n_channels)]
        self.interrupts = interrupts
        self._charge = charge or (lambda d, u: None)
        self.domain = domain
        self.events = events if events is not None else []
        self.fifos: list[WordFifo] = fifos if fifos is not None else []
        self._active: Optional[DmaChannel] = None
        self._buffer: deque = deque()
        self._rtxn: Optional[BusTransaction] = None
        self._wtxn: Optional[BusTransaction] = None
        self._start_queue: deque = deque()

    def start(self, index: int, cycle: int = 0) -> None:
        ch = self.channels[index]
        if ch.status is DmaStatus.BUSY:
            raise ConfigurationError(f"DMA channel {index} is already busy")
        ch.status = DmaStatus.BUSY
        ch.words_read = ch.words_written = 0
        ch.start_cycle = cycle
        ch.done_cycle = None
        self._start_queue.append(ch)

    @property
    def busy(self) -> bool:
        return self._active is not None or bool(self._start_queue)

    def _finish(self, ch: DmaChannel, status: DmaStatus, cycle: int) -> None:
        ch.status = status
        ch.done_cycle = cycle
        ch.transfers += 1
        self._active = None
        self._buffer.clear()
        self._rtxn = self._wtxn = None
        line = ch.done_irq_line if status is DmaStatus.DONE else (ch.error_irq_line or ch.done_irq_line)
        if status is DmaStatus.ERROR:
            self.events.append({"cycle": cycle, "kind": "dma-error", "source": self.name,
                                "detail": f"channel {ch.index}"})
        if line is not None and self.interrupts is not None:
            self.interrupts.signal(line, cycle)

    def issue(self, bus, cycle: int) -> None:
        """Kernel phase 1."""
        if self._active is None:
            if not self._start_queue:
                return
            self._active = self._start_queue.popleft()
        ch = self._active
        # collect responses
        if self._wtxn is not None and self._wtxn.responded(cycle):
            if self._wtxn.fault is not None:
                self._finish(ch, DmaStatus.ERROR, cycle)
                return
            ch.words_written += 1
            self._wtxn = None
        if self._rtxn is not None and self._rtxn.responded(cycle):
            if self._rtxn.fault is not None:
                self._finish(ch, DmaStatus.ERROR, cycle)
                return
            self._buffer.append(self._rtxn.read_data)
            self._rtxn = None
        if ch.words_written == ch.n_words:
            self._finish(ch, DmaStatus.DONE, cycle)
            return
        # write side
        if self._buffer and self._wtxn is None:
            word = self._buffer.popleft()
            if ch.dst_fifo is not None:
                if not ch.dst_fifo.full:
                    ch.dst_fifo.push(word)
                    ch.words_written += 1
                    self._charge(self.domain, 1)
                else:
                    self._buffer.appendleft(word)
            else:
                addr = ch.dst + ch.words_written * ch.dst_stride
                self._wtxn = BusTransaction(self.write_port, addr, True, cycle, write_data=word)
                bus.request(self._wtxn)
                self._charge(self.domain, 1)
        # read side
        if ch.words_read < ch.n_words and self._rtxn is None and len(self._buffer) < self.BUFFER_DEPTH:
            if ch.src_fifo is not None:
                if len(ch.src_fifo):
                    self._buffer.append(ch.src_fifo.pop())
                    ch.words_read += 1
                    self._charge(self.domain, 1)
            else:
                addr = ch.src + ch.words_read * ch.src_stride
                self._rtxn = BusTransaction(self.read_port, addr, False, cycle)
                bus.request(self._rtxn)
                ch.words_read += 1
                self._charge(self.domain, 1)
        if ch.dst_fifo is not None and ch.words_written == ch.n_words:
            self._finish(ch, DmaStatus.DONE, cycle)

    def next_event(self, cycle: int) -> Optional[int]:
        if self._start_queue:
            return cycle
        ch = self._active
        if ch is None:
            return None
        if self._rtxn is not None or self._wtxn is not None or self._buffer:
            return cycle
        if ch.src_fifo is not None and not len(ch.src_fifo):
            return None    # waiting for the stream source
        return cycle

    # register interface
    def access(self, txn, cycle: int) -> int:
        idx, reg = divmod(txn.offset & ~3, self.CH_STRIDE)
        if idx >= len(self.channels):
            raise AccessFault(FaultKind.DECODE, f"DMA channel {idx}")
        ch = self.channels[idx]
        if txn.is_write:
            if ch.status is DmaStatus.BUSY:
                self.events.append({"cycle": cycle, "kind": "dma-busy-write", "source": self.name,
                                    "detail": f"channel {idx} reconfigured while busy"})
                raise AccessFault(FaultKind.REJECTED, f"DMA channel {idx} is busy")
            v = txn.write_data
            if reg == 0x00:
                ch.src = v
            elif reg == 0x04:
                ch.dst = v
            elif reg == 0x08:
                if v % WORD_BYTES:
                    raise AccessFault(FaultKind.REJECTED, "DMA length must be a multiple of 4")
                ch.length_bytes = v
            elif reg == 0x0C:
                ch.src_stride = v
            elif reg == 0x10:
                ch.dst_stride = v
            elif reg == 0x14:
                ch.src_fifo = self._fifo(v)
            elif reg == 0x18:
                ch.dst_fifo = self._fifo(v)
            elif reg == 0x1C:
                if v & 1:
                    self.start(idx, cycle)
                elif v == 0:
                    ch.status = DmaStatus.IDLE
        else:
            txn.read_data = {
                0x00: ch.src, 0x04: ch.dst, 0x08: ch.length_bytes, 0x0C: ch.src_stride,
                0x10: ch.dst_stride, 0x14: self._fifo_code(ch.src_fifo),
                0x18: self._fifo_code(ch.dst_fifo), 0x1C: ch.status.value,
            }.get(reg, 0)
        return self.latency

    def _fifo(self, code: int) -> Optional[WordFifo]:
        if code == 0:
            return None
        if code - 1 >= len(self.fifos):
            raise AccessFault(FaultKind.REJECTED, f"no FIFO with index {code - 1}")
        return self.fifos[code - 1]

    def _fifo_code(self, fifo) -> int:
        return 0 if fifo is None else self.fifos.index(fifo) + 1


# ---------------------------------------------------------------------------
# ADC stream


def constant_generator(value: int = 0) -> Callable[[int, int], int]:
    return lambda n, lead: value


def sine_generator(amplitude: float = 1000.0, frequency_hz: float = 1.2, sample_rate_hz: float = 256.0,
                   offset: float = 0.0) -> Callable[[int, int], int]:
    def gen(n: int, lead: int) -> int:
        phase = 2 * math.pi * frequency_hz * n / sample_rate_hz + lead * math.pi / 3
        return int(round(offset + amplitude * math.sin(phase)))
    return gen


def prbs_generator(seed: int = 1, bits: int = 16) -> Callable[[int, int], int]:
    rng = random.Random(seed)
    cache: dict = {}

    def gen(n: int, lead: int) -> int:
        # values are drawn in production order, so repeated runs match
        key = (n, lead)
        if key not in cache:
            cache.clear()
            cache[key] = rng.getrandbits(bits)
        return cache[key]
    return gen


def csv_trace(path) -> Callable[[int, int], int]:
    """Samples from a ``timestamp_s, lead, value`` CSV, replayed in time order.

    Timestamps only order the samples; pacing always comes from the ADC's
    configured sample rate. Missing samples read as 0.
    """
    table: dict = {}
    by_lead: dict = {}
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    for ts, lead, value in sorted(((float(a), int(b), int(float(c))) for a, b, c in rows)):
        n = by_lead.get(lead, 0)
        table[(n, lead)] = value
        by_lead[lead] = n + 1
    return lambda n, lead: table.get((n, lead), 0)


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


class AdcStream:
    """Wall-time paced multi-lead ADC filling a word FIFO.

    Sample instant ``n`` occurs at ``n / sample_rate_hz`` seconds and yields
    one sample per lead. Samples are packed ``samples_per_word`` to a word;
    a sample instant is pushed in the cycle whose end time first passes it.
    On overflow the oldest word is dropped and an event recorded.
    """

    def __init__(self, clock, channel_count: int = 3, sample_rate_hz=256, sample_bits: int = 16,
                 fifo_depth_words: int = 16, samples_per_word: int = 1,
                 generator: Optional[Callable[[int, int], int]] = None, name: str = "adc",
                 events: Optional[list] = None, enabled: bool = True):
        if samples_per_word < 1 or samples_per_word * sample_bits > 32:
            raise ConfigurationError("samples_per_word x sample_bits must fit one 32-bit word")
        self.clock = clock
        self.name = name
        self.channel_count = channel_count
        self.sample_rate_hz = Fraction(sample_rate_hz)
        self.sample_bits = sample_bits
        self.samples_per_word = samples_per_word
        self.fifo = WordFifo(f"{name}.fifo", fifo_depth_words)
        self.generator = generator or constant_generator(0)
        self.events = events if events is not None else []
        self.enabled = enabled
        self.next_instant = 0
        self.samples_produced = 0
        self.samples_dropped = 0
        self.overflow_events = 0
        self._partial: list[int] = []
        self._start_wall = Fraction(0)
        self.stop_after: Optional[int] = None

    def enable(self, cycle: Optional[int] = None) -> None:
        """Start sampling; instants are counted from the current wall time."""
        self.enabled = True
        self._start_wall = self.clock.wall_time if cycle is None else self.clock.wall_time_at(cycle)
        self.next_instant = 0

    def _instant_time(self, n: int) -> Fraction:
        return self._start_wall + Fraction(n) / self.sample_rate_hz

    @property
    def samples_in_fifo(self) -> int:
        return len(self.fifo) * self.samples_per_word + len(self._partial)

    def tick(self, cycle: int) -> int:
        """Kernel phase 3; returns the number of overflow events in this cycle."""
        if not self.enabled:
            return 0
        end = self.clock.wall_time_at(cycle + 1)
        overflows = 0
        mask = (1 << self.sample_bits) - 1
        while self._instant_time(self.next_instant) < end:
            if self.stop_after is not None and self.next_instant >= self.stop_after:
                break
            n = self.next_instant
            for lead in range(self.channel_count):
                self._partial.append(self.generator(n, lead) & mask)
                self.samples_produced += 1
                if len(self._partial) == self.samples_per_word:
                    word = 0
                    for i, s in enumerate(self._partial):
                        word |= s << (i * self.sample_bits)
                    self._partial = []
                    if self.fifo.full:
                        self.fifo.words.popleft()
                        self.samples_dropped += self.samples_per_word
                        self.overflow_events += 1
                        overflows += 1
                        self.events.append({"cycle": cycle, "kind": "adc-overflow", "source": self.name,
                                            "detail": "FIFO full, oldest word dropped"})
                    self.fifo.push(word)
            self.next_instant += 1
        return overflows

    def next_event(self, cycle: int) -> Optional[int]:
        if not self.enabled:
            return None
        if self.stop_after is not None and self.next_instant >= self.stop_after:
            return None
        return max(cycle, self.clock.cycle_reaching(self._instant_time(self.next_instant)))


# ---------------------------------------------------------------------------
# flash, timer, UART


class FlashReader:
    """Off-chip SPI flash: a read-only execute-in-place window and a word FIFO.

    Bus reads return image words after ``1 + fetch_latency`` cycles. The
    stream side pushes the image sequentially into ``fifo`` (one word every
    ``1 + spi_latency`` cycles) once :meth:`start_stream` is called.
    """

    def __init__(self, image: bytes = b"", size: int = 1 << 20, fetch_latency: int = 4,
                 spi_latency: int = 0, fifo_depth_words: int = 8, name: str = "flash"):
        self.name = name
        self.size = size
        self.image = bytes(image)
        self.fetch_latency = fetch_latency
        self.spi_latency = spi_latency
        self.latency = 1 + fetch_latency
        self.fifo = WordFifo(f"{name}.fifo", fifo_depth_words)
        self._stream_pos: Optional[int] = None
        self._stream_end = 0
        self._next_push = 0
        self.reads = 0

    @classmethod
    def from_file(cls, path, **kw) -> "FlashReader":
        return cls(Path(path).read_bytes(), **kw)

    def word(self, offset: int) -> int:
        chunk = self.image[offset:offset + 4]
        return int.from_bytes(chunk.ljust(4, b"\xff"), "little")

    def access(self, txn, cycle: int) -> int:
        if txn.is_write:
            raise AccessFault(FaultKind.REJECTED, "flash is read-only")
        if txn.offset >= self.size:
            raise AccessFault(FaultKind.DECODE, f"flash offset {txn.offset:#x}")
        txn.read_data = self.word(txn.offset & ~3)
        self.reads += 1
        return self.latency

    def start_stream(self, offset: int, length_bytes: int, cycle: int = 0) -> None:
        self._stream_pos = offset
        self._stream_end = offset + length_bytes
        self._next_push = cycle

    def tick(self, cycle: int) -> None:
        if self._stream_pos is None or cycle < self._next_push:
            return
        if self._stream_pos >= self._stream_end:
            self._stream_pos = None
            return
        if not self.fifo.full:
            self.fifo.push(self.word(self._stream_pos))
            self._stream_pos += WORD_BYTES
            self._next_push = cycle + 1 + self.spi_latency

    def next_event(self, cycle: int) -> Optional[int]:
        if self._stream_pos is None or self.fifo.full:
            return None
        return max(cycle, self._next_push)


class Timer:
    """Cycle-compare timer. Registers: COUNT 0x0 (read), COMPARE 0x4, CTRL 0x8 (bit 0 enable)."""

    latency = 1

    def __init__(self, name: str = "timer", interrupts=None, irq_line: Optional[int] = None):
        self.name = name
        self.interrupts = interrupts
        self.irq_line = irq_line
        self.compare: Optional[int] = None
        self.enabled = False
        self.fired = 0

    def arm(self, compare_cycle: int) -> None:
        self.compare = compare_cycle
        self.enabled = True

    def tick(self, cycle: int) -> None:
        if self.enabled and self.compare is not None and cycle >= self.compare:
            self.enabled = False
            self.fired += 1
            if self.interrupts is not None and self.irq_line is not None:
                self.interrupts.signal(self.irq_line, cycle)

    def next_event(self, cycle: int) -> Optional[int]:
        if self.enabled and self.compare is not None:
            return max(cycle, self.compare)
        return None

    def access(self, txn, cycle: int) -> int:
        off = txn.offset & ~3
        if txn.is_write:
            if off == 0x4:
                self.compare = txn.write_data
            elif off == 0x8:
                self.enabled = bool(txn.write_data & 1)
        else:
            txn.read_data = {0x0: cycle & 0xFFFFFFFF, 0x4: self.compare or 0,
                             0x8: int(self.enabled)}.get(off, 0)
        return self.latency


class UartSink:
    """Transmit-only UART; every byte written to TX (0x0) is appended to the log."""

    latency = 1

    def __init__(self, name: str = "uart", log_path=None, fifo_depth_words: int = 8):
        self.name = name
        self.log_path = Path(log_path) if log_path else None
        self.text: list[str] = []
        self.fifo = WordFifo(f"{name}.fifo", fifo_depth_words)

    def _emit(self, byte: int) -> None:
        ch = chr(byte & 0xFF)
        self.text.append(ch)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(ch)

    def tick(self, cycle: int) -> None:
        while len(self.fifo):
            self._emit(self.fifo.pop())

    def next_event(self, cycle: int) -> Optional[int]:
        return cycle if len(self.fifo) else None

    def access(self, txn, cycle: int) -> int:
        if txn.is_write:
            if txn.offset & ~3 == 0:
                self._emit(txn.write_data)
        else:
            txn.read_data = 0
        return self.latency

    @property
    def output(self) -> str:
        return "".join(self.text)
