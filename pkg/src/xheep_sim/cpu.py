"""Microprogram-driven CPU master with separate instruction and data ports.

Text format, one op per line (``#`` starts a comment)::

    .code  <expr>                    code region base (default 0)
    .equ   NAME <expr>               named constant
    LOAD   <addr> [n_words [stride]]
    STORE  <addr> [n_words [stride]] [value=<expr>]
    COMPUTE <cycles> [generic|matmul32|matmul8]
    WFI    [gate|off|on]
    LOOP   <count> [var]
    ENDLOOP
    HALT

Addresses and values are linear expressions over integer literals, symbols
(memory-map region names and ``.equ`` constants) and enclosing loop
variables, e.g. ``ram + 0x8000 + 64*i + 4*k``.

Timing (2-stage fetch/execute). Op ``k`` enters execute in cycle
``S_k = max(R_k, E_{k-1})`` where ``R_k`` is the response cycle of its
instruction fetch and ``E_{k-1}`` the cycle its predecessor finished. The
fetch of op ``k+1`` is issued in ``S_k``. LOAD/STORE issue one blocking data
transaction per word; COMPUTE occupies execute for its (profile-scaled)
cycle count; every other op takes one cycle. There is no prefetch past WFI.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from .errors import ConfigurationError
from .interconnect import BusTransaction, WORD_BYTES
from .memory import PowerState

COMPUTE_CLASSES = ("generic", "matmul32", "matmul8")
LOAD_BUFFER_DEPTH = 64


@dataclass(frozen=True)
class CpuProfile:
    name: str
    compute_cycle_scale: Fraction = Fraction(1)
    simd_speedup_32b: Fraction = Fraction(1)
    simd_speedup_8b: Fraction = Fraction(1)
    dynamic_power_scale: float = 1.0

    def __post_init__(self):
        if self.compute_cycle_scale <= 0:
            raise ConfigurationError("compute_cycle_scale must be positive")
        if self.simd_speedup_32b < 1 or self.simd_speedup_8b < 1:
            raise ConfigurationError("SIMD speedups must be >= 1")
        if self.dynamic_power_scale <= 0:
            raise ConfigurationError("dynamic_power_scale must be positive")

    def compute_cycles(self, n: int, cls: str = "generic") -> int:
        c = Fraction(n) * self.compute_cycle_scale
        if cls == "matmul32":
            c /= self.simd_speedup_32b
        elif cls == "matmul8":
            c /= self.simd_speedup_8b
        return max(1, math.ceil(c)) if n > 0 else 0


PROFILES = {
    "cv32e20": CpuProfile("cv32e20", dynamic_power_scale=1.0),
    "cv32e40x": CpuProfile("cv32e40x", dynamic_power_scale=1.15),
    "cv32e40p": CpuProfile("cv32e40p", dynamic_power_scale=1.3),
    "cv32e40p+xpulp": CpuProfile("cv32e40p+xpulp", simd_speedup_32b=Fraction(4),
                                 simd_speedup_8b=Fraction(16), dynamic_power_scale=1.3),
}


def get_profile(name: str) -> CpuProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown CPU profile {name!r}; choose from {sorted(PROFILES)}") from None


# ---------------------------------------------------------------------------
# microprogram representation and parser


class MicroprogramError(ConfigurationError):
    def __init__(self, message: str, line: int, col: int, source: str = "<program>"):
        super().__init__(f"{source}:{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col
        self.source = source


@dataclass(frozen=True)
class LinExpr:
    """``const + sum(coef * var)``, with symbols already folded into const."""
    const: int = 0
    terms: tuple = ()

    def evaluate(self, env: dict) -> int:
        return self.const + sum(c * env[v] for v, c in self.terms)

    def __str__(self) -> str:
        parts = [f"{c}*{v}" for v, c in self.terms]
        if self.const or not parts:
            parts.insert(0, f"0x{self.const:x}" if self.const >= 0 else str(self.const))
        return " + ".join(parts).replace("+ -", "- ")


@dataclass(frozen=True)
class Op:
    kind: str
    line: int = 0
    addr: Optional[LinExpr] = None
    n_words: int = 1
    stride: int = WORD_BYTES
    value: Optional[LinExpr] = None
    cycles: int = 0
    cls: str = "generic"
    count: int = 0
    var: Optional[str] = None
    mode: Optional[str] = None
    match: int = -1

    def to_text(self) -> str:
        k = self.kind
        if k in ("LOAD", "STORE"):
            s = f"{k} {self.addr}"
            if self.n_words != 1 or self.stride != WORD_BYTES:
                s += f" {self.n_words} {self.stride}"
            if self.value is not None:
                s += f" value={str(self.value).replace(' ', '')}"
            return s
        if k == "COMPUTE":
            return f"COMPUTE {self.cycles} {self.cls}"
        if k == "LOOP":
            return f"LOOP {self.count}" + (f" {self.var}" if self.var else "")
        if k == "WFI" and self.mode:
            return f"WFI {self.mode}"
        return k


def _ops_equal(a: Op, b: Op) -> bool:
    from dataclasses import replace
    return replace(a, line=0) == replace(b, line=0)


@dataclass
class Microprogram:
    ops: list
    code_base: int = 0
    name: str = "program"

    def __eq__(self, other):
        if not isinstance(other, Microprogram):
            return NotImplemented
        return (self.code_base == other.code_base and len(self.ops) == len(other.ops)
                and all(_ops_equal(a, b) for a, b in zip(self.ops, other.ops)))

    def to_text(self) -> str:
        lines = [f".code 0x{self.code_base:x}"]
        depth = 0
        for op in self.ops:
            if op.kind == "ENDLOOP":
                depth -= 1
            lines.append("    " * depth + op.to_text())
            if op.kind == "LOOP":
                depth += 1
        return "\n".join(lines) + "\n"

    @property
    def code_size(self) -> int:
        return len(self.ops) * WORD_BYTES


_TOKEN = re.compile(r"\s*(?:(0x[0-9a-fA-F_]+|\d[\d_]*)|([A-Za-z_][A-Za-z0-9_.]*)|(\S))")
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class _ExprParser:
    def __init__(self, text: str, col0: int, line: int, symbols: dict, loop_vars: set, source: str):
        self.toks = []
        pos = 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                break
            col = col0 + m.start(m.lastindex)
            if m.group(1):
                digits = m.group(1).replace("_", "")
                self.toks.append(("num", int(digits, 16) if digits[:2] == "0x" else int(digits), col))
            elif m.group(2):
                self.toks.append(("id", m.group(2), col))
            else:
                self.toks.append(("op", m.group(3), col))
            pos = m.end()
        self.i = 0
        self.line, self.col0, self.symbols, self.loop_vars, self.source = line, col0, symbols, loop_vars, source

    def _err(self, msg, col=None):
        raise MicroprogramError(msg, self.line, col if col is not None else self.col0, self.source)

    def _peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def parse(self) -> LinExpr:
        if not self.toks:
            self._err("empty expression")
        const, terms = self._term()
        while self._peek() is not None:
            kind, val, col = self._peek()
            if kind != "op" or val not in "+-":
                self._err(f"unexpected {val!r}", col)
            self.i += 1
            c2, t2 = self._term()
            sign = 1 if val == "+" else -1
            const += sign * c2
            for v, c in t2.items():
                terms[v] = terms.get(v, 0) + sign * c
        return LinExpr(const, tuple(sorted((v, c) for v, c in terms.items() if c)))

    def _term(self):
        const, var = self._factor()
        while self._peek() is not None and self._peek()[1] == "*":
            col = self._peek()[2]
            self.i += 1
            c2, v2 = self._factor()
            if var is not None and v2 is not None:
                self._err("product of two loop variables is not linear", col)
            const *= c2
            var = var or v2
        return (0, {var: const}) if var is not None else (const, {})

    def _factor(self):
        tok = self._peek()
        if tok is None:
            self._err("expression ends unexpectedly")
        kind, val, col = tok
        self.i += 1
        if kind == "num":
            return val, None
        if kind == "id":
            if val in self.loop_vars:
                return 1, val
            if val in self.symbols:
                return int(self.symbols[val]), None
            self._err(f"unknown symbol {val!r}", col)
        if val == "-":
            c, v = self._factor()
            return -c, v
        if val == "(":
            self._err("parentheses are not supported", col)
        self._err(f"unexpected {val!r}", col)


def _split_fields(body: str, col0: int):
    """Split on whitespace except inside an expression joined by operators."""
    out = []
    for m in re.finditer(r"\S+", body):
        out.append((m.group(0), col0 + m.start()))
    # rejoin "a + b" style expressions: a field that is or ends/starts with an operator glues
    merged = []
    for text, col in out:
        if merged and (text[0] in "+-*" or merged[-1][0][-1] in "+-*") and not text.startswith("value="):
            prev, pcol = merged.pop()
            gap = col - (pcol + len(prev))
            merged.append((prev + " " * gap + text, pcol))
        else:
            merged.append((text, col))
    return merged


def parse_microprogram(text: str, symbols: Optional[dict] = None, source: str = "<program>",
                       name: str = "program") -> Microprogram:
    """Parse the text format; errors carry exact ``line:col``."""
    syms = dict(symbols or {})
    ops: list[Op] = []
    stack: list[tuple[int, Optional[str], int, int]] = []   # (op index, var, line, col)
    code_base = syms.get("code", 0)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        m = re.match(r"\s*(\S+)", line)
        if not m:
            continue
        word, wcol = m.group(1), m.start(1) + 1
        fields = _split_fields(line[m.end(1):], m.end(1) + 1)
        loop_vars = {v for _, v, _, _ in stack if v}

        def expr(ftext, fcol):
            return _ExprParser(ftext, fcol, lineno, syms, loop_vars, source).parse()

        def const_int(ftext, fcol, what):
            e = expr(ftext, fcol)
            if e.terms:
                raise MicroprogramError(f"{what} must be a constant", lineno, fcol, source)
            return e.const

        def nargs(lo, hi):
            if not lo <= len(fields) <= hi:
                col = fields[hi][1] if len(fields) > hi else wcol
                raise MicroprogramError(
                    f"{word} takes {lo}..{hi} operands, got {len(fields)}", lineno, col, source)

        kw = word.upper()
        if word.startswith("."):
            if word == ".code":
                nargs(1, 1)
                code_base = const_int(*fields[0], "code base")
            elif word == ".equ":
                nargs(2, 2)
                sym, scol = fields[0]
                if not _IDENT.match(sym):
                    raise MicroprogramError(f"bad symbol name {sym!r}", lineno, scol, source)
                syms[sym] = const_int(*fields[1], "constant")
            else:
                raise MicroprogramError(f"unknown directive {word!r}", lineno, wcol, source)
            continue
        if kw in ("LOAD", "STORE"):
            value = None
            if kw == "STORE" and fields and fields[-1][0].startswith("value="):
                vtext, vcol = fields.pop()
                value = expr(vtext[6:], vcol + 6)
            nargs(1, 3)
            addr = expr(*fields[0])
            n = const_int(*fields[1], "word count") if len(fields) > 1 else 1
            stride = const_int(*fields[2], "stride") if len(fields) > 2 else WORD_BYTES
            if n < 1:
                raise MicroprogramError("word count must be >= 1", lineno, fields[1][1], source)
            ops.append(Op(kw, lineno, addr=addr, n_words=n, stride=stride, value=value))
        elif kw == "COMPUTE":
            nargs(1, 2)
            cycles = const_int(*fields[0], "cycle count")
            if cycles < 1:
                raise MicroprogramError("COMPUTE needs at least 1 cycle", lineno, fields[0][1], source)
            cls = fields[1][0] if len(fields) > 1 else "generic"
            if cls not in COMPUTE_CLASSES:
                raise MicroprogramError(f"unknown compute class {cls!r}", lineno, fields[1][1], source)
            ops.append(Op("COMPUTE", lineno, cycles=cycles, cls=cls))
        elif kw == "WFI":
            nargs(0, 1)
            mode = fields[0][0].lower() if fields else None
            if mode not in (None, "gate", "off", "on"):
                raise MicroprogramError(f"unknown WFI mode {mode!r}", lineno, fields[0][1], source)
            ops.append(Op("WFI", lineno, mode=mode))
        elif kw == "LOOP":
            nargs(1, 2)
            count = const_int(*fields[0], "loop count")
            if count < 0:
                raise MicroprogramError("loop count must be >= 0", lineno, fields[0][1], source)
            var = None
            if len(fields) > 1:
                var, vcol = fields[1]
                if not _IDENT.match(var):
                    raise MicroprogramError(f"bad loop variable {var!r}", lineno, vcol, source)
                if var in loop_vars or var in syms:
                    raise MicroprogramError(f"loop variable {var!r} shadows a name", lineno, vcol, source)
            stack.append((len(ops), var, lineno, wcol))
            ops.append(Op("LOOP", lineno, count=count, var=var))
        elif kw == "ENDLOOP":
            nargs(0, 0)
            if not stack:
                raise MicroprogramError("ENDLOOP without LOOP", lineno, wcol, source)
            start = stack.pop()[0]
            ops[start] = Op("LOOP", ops[start].line, count=ops[start].count, var=ops[start].var,
                            match=len(ops))
            ops.append(Op("ENDLOOP", lineno, match=start))
        elif kw == "HALT":
            nargs(0, 0)
            ops.append(Op("HALT", lineno))
        else:
            raise MicroprogramError(f"unknown op {word!r}", lineno, wcol, source)
    if stack:
        _, _, l, c = stack[-1]
        raise MicroprogramError("LOOP without ENDLOOP", l, c, source)
    depth = 0
    top_halt = False
    for op in ops:
        depth += op.kind == "LOOP"
        depth -= op.kind == "ENDLOOP"
        if op.kind == "HALT" and depth == 0:
            top_halt = True
    if not top_halt:
        last = len(text.splitlines()) or 1
        raise MicroprogramError("program has no top-level HALT", last, 1, source)
    return Microprogram(ops, code_base, name)


# ---------------------------------------------------------------------------
# execution


@dataclass
class _Exec:
    pc: int
    op: Op
    start: int
    end: Optional[int] = None           # known finish cycle (compute/control)
    words_done: int = 0
    txn: Optional[BusTransaction] = None
    env: dict = field(default_factory=dict)


class CpuMaster:
    """In-order CPU model driving ``<name>.instr`` and ``<name>.data``."""

    def __init__(self, program: Microprogram, profile: CpuProfile, interrupts=None,
                 charge: Optional[Callable[[str, int], None]] = None, events: Optional[list] = None,
                 name: str = "cpu", domain: str = "cpu", psm=None,
                 sleep_state: Optional[PowerState] = PowerState.CLOCK_GATED):
        self.program = program
        self.profile = profile
        self.name = name
        self.instr_port = f"{name}.instr"
        self.data_port = f"{name}.data"
        self.domain = domain
        self.psm = psm
        self.interrupts = interrupts
        self._charge = charge or (lambda d, u: None)
        self.events = events if events is not None else []
        self.default_sleep_state = sleep_state
        self.reset()

    def reset(self) -> None:
        self.halted = not self.program.ops
        self.trapped = False
        self.halt_cycle: Optional[int] = None
        self.fetch_count = 0
        self.executed_ops = 0
        self.data_transactions = 0
        self.compute_cycles = 0
        self.latched_irqs: list[int] = []
        self.load_buffer: deque = deque(maxlen=LOAD_BUFFER_DEPTH)
        self.wants_sleep = False
        self.sleeping = False
        self.sleep_state = self.default_sleep_state
        self._sleep_target: Optional[PowerState] = None
        self.wfi_entries = 0
        self._frames: list[list] = []     # [loop pc, iteration]
        self._fetch: Optional[tuple[int, BusTransaction]] = None
        self._ex: Optional[_Exec] = None
        self._next_pc: Optional[int] = 0 if self.program.ops else None
        self._started = False

    # -- helpers ----------------------------------------------------------

    @property
    def last_irq(self) -> Optional[int]:
        return self.latched_irqs[-1] if self.latched_irqs else None

    def _env(self) -> dict:
        env = {}
        for pc, it in self._frames:
            v = self.program.ops[pc].var
            if v:
                env[v] = it
        return env

    def _powered(self) -> bool:
        return self.psm is None or self.psm.state is PowerState.ON

    def _trap(self, cycle: int, what: str, txn: BusTransaction) -> None:
        self.trapped = True
        self.halted = True
        self.halt_cycle = cycle
        self.events.append({"cycle": cycle, "kind": "cpu-trap", "source": self.name,
                            "detail": f"{what} fault ({txn.fault.value}) at 0x{txn.address:08x}"})

    def _issue(self, bus, port: str, address: int, is_write: bool, cycle: int, data: int = 0):
        txn = BusTransaction(port, address & 0xFFFFFFFF, is_write, cycle, write_data=data & 0xFFFFFFFF)
        bus.request(txn)
        self._charge(self.domain, 1)
        return txn

    def _issue_fetch(self, bus, cycle: int) -> None:
        pc = self._next_pc
        if pc is None or pc >= len(self.program.ops):
            self._next_pc = None
            return
        txn = self._issue(bus, self.instr_port, self.program.code_base + pc * WORD_BYTES, False, cycle)
        self.fetch_count += 1
        self._fetch = (pc, txn)
        self._next_pc = None

    def _advance_control(self, pc: int, op: Op) -> Optional[int]:
        """Resolve the pc that follows ``op`` and update loop frames."""
        if op.kind == "LOOP":
            if op.count == 0:
                return op.match + 1
            self._frames.append([pc, 0])
            return pc + 1
        if op.kind == "ENDLOOP":
            frame = self._frames[-1]
            frame[1] += 1
            if frame[1] < self.program.ops[op.match].count:
                return op.match + 1
            self._frames.pop()
            return pc + 1
        if op.kind == "HALT":
            return None
        return pc + 1

    def _data_request(self, ex: _Exec, bus, cycle: int) -> None:
        op = ex.op
        addr = op.addr.evaluate(ex.env) + ex.words_done * op.stride
        if op.kind == "LOAD":
            ex.txn = self._issue(bus, self.data_port, addr, False, cycle)
        else:
            if op.value is not None:
                data = op.value.evaluate(ex.env)
            else:
                data = self.load_buffer.popleft() if self.load_buffer else 0
            ex.txn = self._issue(bus, self.data_port, addr, True, cycle, data)
        self.data_transactions += 1

    # -- kernel phase 1 ---------------------------------------------------

    def issue(self, bus, cycle: int) -> None:
        if self.halted:
            return
        if self.sleeping:
            if not self._powered() or self.psm is not None and self.psm.target is not PowerState.ON:
                return
            if self.interrupts is None or not self.interrupts.wake_pending(cycle):
                return
            self._wake(cycle)
            self._issue_fetch(bus, cycle)
            return
        if not self._powered():
            return
        ex = self._ex
        if ex is not None:
            if ex.op.kind in ("LOAD", "STORE"):
                t = ex.txn
                if t is not None and t.responded(cycle):
                    if t.fault is not None:
                        self._trap(cycle, "data", t)
                        return
                    if not t.is_write:
                        self.load_buffer.append(t.read_data)
                    ex.words_done += 1
                    ex.txn = None
                    if ex.words_done < ex.op.n_words:
                        self._data_request(ex, bus, cycle)
                    else:
                        ex.end = cycle
            if ex.end is not None and ex.end <= cycle:
                self._ex = None
        if self._ex is None:
            self._enter(bus, cycle)
        if not self._started:
            self._started = True
            if self._fetch is None and self._ex is None:
                self._issue_fetch(bus, cycle)

    def _enter(self, bus, cycle: int) -> None:
        if self._fetch is None:
            return
        pc, txn = self._fetch
        if not txn.responded(cycle):
            return
        self._fetch = None
        if txn.fault is not None:
            self._trap(cycle, "fetch", txn)
            return
        op = self.program.ops[pc]
        self.executed_ops += 1
        ex = _Exec(pc, op, cycle, env=self._env())
        if op.kind == "HALT":
            self.halted = True
            self.halt_cycle = cycle
            return
        if op.kind == "WFI":
            self.wfi_entries += 1
            self._ex = ex
            if self._try_claim(cycle):
                ex.end = cycle
                self._ex = None
                self._next_pc = pc + 1
                self._issue_fetch(bus, cycle)
            else:
                self._sleep(op, cycle)
            return
        self._next_pc = self._advance_control(pc, op)
        self._ex = ex
        if op.kind in ("LOAD", "STORE"):
            self._data_request(ex, bus, cycle)
        elif op.kind == "COMPUTE":
            n = self.profile.compute_cycles(op.cycles, op.cls)
            self.compute_cycles += n
            ex.end = cycle + n
            self.load_buffer.clear()
            # compute activity is charged up front; energy is settled per segment anyway
            self._charge(self.domain, n)
        else:
            ex.end = cycle + 1
        self._issue_fetch(bus, cycle)

    def _try_claim(self, cycle: int) -> bool:
        if self.interrupts is None or not self.interrupts.wake_pending(cycle):
            return False
        irq = self.interrupts.claim(cycle)
        assert irq is not None
        self.latched_irqs.append(irq)
        return True

    def _sleep(self, op: Op, cycle: int) -> None:
        mode = op.mode
        if mode == "off":
            state = PowerState.OFF
        elif mode == "gate":
            state = PowerState.CLOCK_GATED
        elif mode == "on":
            state = None
        else:
            state = self.sleep_state
        self.sleeping = True
        self.wants_sleep = state is not None and self.psm is not None
        self._sleep_target = state
        self.events.append({"cycle": cycle, "kind": "wfi", "source": self.name,
                            "detail": state.value if state else "spin"})

    @property
    def sleep_target(self) -> PowerState:
        return self._sleep_target or PowerState.ON

    def _wake(self, cycle: int) -> None:
        ok = self._try_claim(cycle)
        assert ok, "woken without a pending interrupt"
        self.sleeping = False
        self.wants_sleep = False
        ex = self._ex
        self._ex = None
        self._next_pc = ex.pc + 1

    def wake_requested(self, cycle: int) -> bool:
        return self.interrupts is not None and self.interrupts.wake_pending(cycle)

    # -- fast-forward -----------------------------------------------------

    def next_event(self, cycle: int) -> Optional[int]:
        if self.halted:
            return None
        if self.sleeping:
            if self.wants_sleep:
                return cycle
            if self.psm is not None and self.psm.target is not PowerState.ON:
                return None        # woken through the power manager
            return cycle if self.wake_requested(cycle) else None
        ex = self._ex
        if ex is not None and ex.op.kind == "COMPUTE":
            # nothing to do until the burst ends once the next fetch has been served
            if self._fetch is None or self._fetch[1].response_cycle is not None:
                return max(cycle, ex.end)
        return cycle

    @property
    def done(self) -> bool:
        return self.halted

    def stats(self) -> dict:
        return {
            "halted": self.halted,
            "trapped": self.trapped,
            "halt_cycle": self.halt_cycle,
            "executed_ops": self.executed_ops,
            "instruction_fetches": self.fetch_count,
            "data_transactions": self.data_transactions,
            "compute_cycles": self.compute_cycles,
            "wfi_entries": self.wfi_entries,
            "latched_irqs": list(self.latched_irqs),
        }
