"""Deterministic interpreter: registers, volatile stack, call-site counters.

The stack is a byte array living at absolute addresses
[STACK_BASE - capacity, STACK_BASE); rsp starts at STACK_BASE and grows
downward, each push occupying the 8 bytes [rsp, rsp+7] after the
decrement. Uninitialized bytes read as zero. Instruction addresses are
flat indices over all function bodies in declaration order.

Execution emits events consumed by checkpoint policies:

  * a call instruction yields EV_CALL carrying the call site, the callee
    entry address and the caller frame region [rsp_after_push, rbp+7] --
    return address, locals and the saved frame pointer slot, i.e. the
    bytes a later recovery must replay for this activation;
  * ``out`` yields EV_OUT and ``halt`` yields EV_HALT;
  * every other instruction yields EV_TICK.

Events are reported after the instruction has executed, so a snapshot
taken at an event sees the post-instruction machine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .isa import MASK64, RBP, RSP, Cond, Op, Program

STACK_BASE = 0x80000
DEFAULT_STACK_CAPACITY = 64 * 1024

REGISTER_IMAGE_BYTES = 156  # 16*8 gpr + 6*2 seg + 8 flags + 8 rip

EV_TICK = 0
EV_CALL = 1
EV_HALT = 2
EV_OUT = 3

_REG_STRUCT = struct.Struct("<16Q6HQQ")
_SIGN_BIT = 1 << 63


class MachineError(Exception):
    def __init__(self, msg: str, rip: int = -1, executed: int = -1):
        super().__init__(f"{msg} (rip={rip}, executed={executed})")
        self.rip = rip
        self.executed = executed


class StackOverflow(MachineError):
    pass


class StackUnderflow(MachineError):
    pass


class InvalidAddress(MachineError):
    pass


class ExecEvent(NamedTuple):
    kind: int
    at: int                      # executed count after the instruction
    site: int = -1               # call site address (EV_CALL)
    callee_entry: int = -1       # callee first instruction (EV_CALL)
    caller_rbp: int = 0          # rbp of the calling frame (EV_CALL)
    region: tuple[int, int] | None = None  # caller frame bytes (EV_CALL)
    value: int = 0               # emitted value (EV_OUT)


class RegisterFile:
    """16 8-byte GPRs, 6 2-byte segment registers, flags, rip: 156 bytes."""

    __slots__ = ("gpr", "seg", "flags", "rip")

    def __init__(self):
        self.gpr = [0] * 16
        self.seg = [0] * 6
        self.flags = 0
        self.rip = 0

    @property
    def rsp(self) -> int:
        return self.gpr[RSP]

    @property
    def rbp(self) -> int:
        return self.gpr[RBP]

    def pack(self) -> bytes:
        return _REG_STRUCT.pack(*self.gpr, *self.seg,
                                self.flags & MASK64, self.rip)

    @classmethod
    def unpack(cls, blob: bytes) -> "RegisterFile":
        if len(blob) != REGISTER_IMAGE_BYTES:
            raise ValueError(f"register image must be {REGISTER_IMAGE_BYTES} bytes")
        vals = _REG_STRUCT.unpack(blob)
        rf = cls()
        rf.gpr = list(vals[:16])
        rf.seg = list(vals[16:22])
        flags = vals[22]
        rf.flags = flags - (1 << 64) if flags & _SIGN_BIT else flags
        rf.rip = vals[23]
        return rf

    def copy(self) -> "RegisterFile":
        rf = RegisterFile()
        rf.gpr = list(self.gpr)
        rf.seg = list(self.seg)
        rf.flags = self.flags
        rf.rip = self.rip
        return rf


@dataclass
class CompiledCode:
    """Flat decoded program: parallel op/x/y arrays plus address metadata."""
    ops: list[int]
    xs: list[int]
    ys: list[int]
    entry_addr: int
    func_of_addr: list[str]
    entry_of_func: dict[str, int]
    base_of_func: dict[str, int]
    frame_of_func: dict[str, int]
    site_loop_trips: dict[int, int]  # call site -> annotated trips (0 if none)
    labels: dict[str, dict[str, int]] = field(default_factory=dict)


# internal decoded opcodes; ALU split by operand flavor
_PUSH, _POP, _MOVI, _MOVR, _SUBSP, _ADDSP, _STORE, _LOAD = range(8)
_ADDR, _ADDI, _SUBR, _SUBI, _MULR, _MULI, _CMPR, _CMPI = range(8, 16)
_JMP, _JCOND, _CALL, _RET, _OUT, _HALT = range(16, 22)


def compile_program(program: Program) -> CompiledCode:
    cached = getattr(program, "_compiled", None)
    if cached is not None:
        return cached

    ops: list[int] = []
    xs: list[int] = []
    ys: list[int] = []
    func_of_addr: list[str] = []
    base_of_func: dict[str, int] = {}
    entry_of_func: dict[str, int] = {}
    frame_of_func: dict[str, int] = {}

    for name, fn in program.functions.items():
        base_of_func[name] = len(ops)
        entry_of_func[name] = len(ops)
        frame_of_func[name] = fn.frame_bytes
        for ins in fn.body:
            func_of_addr.append(name)
            op = ins.op
            if op == Op.PUSH:
                ops.append(_PUSH); xs.append(ins.rd); ys.append(0)
            elif op == Op.POP:
                ops.append(_POP); xs.append(ins.rd); ys.append(0)
            elif op == Op.MOV_IMM:
                ops.append(_MOVI); xs.append(ins.rd); ys.append(ins.imm)
            elif op == Op.MOV_REG:
                ops.append(_MOVR); xs.append(ins.rd); ys.append(ins.rs)
            elif op == Op.SUB_RSP:
                ops.append(_SUBSP); xs.append(ins.imm); ys.append(0)
            elif op == Op.ADD_RSP:
                ops.append(_ADDSP); xs.append(ins.imm); ys.append(0)
            elif op == Op.STORE:
                ops.append(_STORE); xs.append(ins.imm); ys.append(ins.rd)
            elif op == Op.LOAD:
                ops.append(_LOAD); xs.append(ins.imm); ys.append(ins.rd)
            elif op in (Op.ADD, Op.SUB, Op.MUL, Op.CMP):
                table = {Op.ADD: (_ADDR, _ADDI), Op.SUB: (_SUBR, _SUBI),
                         Op.MUL: (_MULR, _MULI), Op.CMP: (_CMPR, _CMPI)}
                reg_op, imm_op = table[op]
                if ins.rs is not None:
                    ops.append(reg_op); xs.append(ins.rd); ys.append(ins.rs)
                else:
                    ops.append(imm_op); xs.append(ins.rd); ys.append(ins.imm)
            elif op == Op.JMP:
                ops.append(_JMP); xs.append(0); ys.append(0)  # patched below
            elif op == Op.JCOND:
                ops.append(_JCOND); xs.append(0); ys.append(int(ins.cond))
            elif op in (Op.CALL, Op.PCALL):
                ops.append(_CALL); xs.append(0); ys.append(0)  # patched below
            elif op == Op.RET:
                ops.append(_RET); xs.append(0); ys.append(0)
            elif op == Op.OUT:
                ops.append(_OUT); xs.append(ins.rd); ys.append(0)
            elif op == Op.HALT:
                ops.append(_HALT); xs.append(0); ys.append(0)
            else:
                raise ValueError(f"cannot compile {ins!r}")

    # patch jump / call targets now that every address is known
    for name, fn in program.functions.items():
        base = base_of_func[name]
        for idx, ins in enumerate(fn.body):
            if ins.op in (Op.JMP, Op.JCOND):
                xs[base + idx] = base + fn.labels[ins.label]
            elif ins.op in (Op.CALL, Op.PCALL):
                xs[base + idx] = entry_of_func[ins.label]

    # innermost enclosing annotated loop per call site
    site_loop_trips: dict[int, int] = {}
    for name, fn in program.functions.items():
        base = base_of_func[name]
        anns = [lp for lp in program.loops if lp.func == name]
        for idx, ins in enumerate(fn.body):
            if ins.op not in (Op.CALL, Op.PCALL):
                continue
            best = None
            for lp in anns:
                if lp._head_index <= idx <= lp.back_edge_index:
                    if best is None or lp.nesting_depth > best.nesting_depth:
                        best = lp
            if best is not None:
                site_loop_trips[base + idx] = best.static_trip_count or 0

    code = CompiledCode(
        ops=ops, xs=xs, ys=ys,
        entry_addr=entry_of_func[program.entry],
        func_of_addr=func_of_addr,
        entry_of_func=entry_of_func,
        base_of_func=base_of_func,
        frame_of_func=frame_of_func,
        site_loop_trips=site_loop_trips,
        labels={n: dict(fn.labels) for n, fn in program.functions.items()},
    )
    program._compiled = code
    return code


class MachineState:
    """Volatile machine state: everything here is lost at a power failure."""

    __slots__ = ("regs", "stack", "stack_floor", "stack_base", "executed",
                 "call_site_counters", "halted", "output",
                 "ev_site", "ev_callee_entry", "ev_caller_rbp",
                 "ev_lo", "ev_hi", "ev_value", "ev_num")

    def __init__(self, program: Program | None = None,
                 capacity: int = DEFAULT_STACK_CAPACITY):
        self.regs = RegisterFile()
        self.stack = bytearray(capacity)
        self.stack_base = STACK_BASE
        self.stack_floor = STACK_BASE - capacity
        self.executed = 0
        self.call_site_counters: dict[int, int] = {}
        self.halted = False
        self.output: list[int] = []
        self.ev_site = -1
        self.ev_callee_entry = -1
        self.ev_caller_rbp = 0
        self.ev_lo = -1
        self.ev_hi = -1
        self.ev_value = 0
        self.ev_num = 0
        if program is not None:
            self.regs.gpr[RSP] = STACK_BASE
            self.regs.rip = compile_program(program).entry_addr

    def live_region(self) -> tuple[int, int] | None:
        """[rsp, stack_base) as an inclusive byte range; None when empty."""
        rsp = self.regs.gpr[RSP]
        if rsp >= self.stack_base:
            return None
        return rsp, self.stack_base - 1


def fresh_state(program: Program,
                capacity: int = DEFAULT_STACK_CAPACITY) -> MachineState:
    return MachineState(program, capacity)


def _exec_one(st: MachineState, code: CompiledCode) -> int:
    """Execute exactly one instruction; returns the event kind."""
    regs = st.regs
    gpr = regs.gpr
    rip = regs.rip
    op = code.ops[rip]
    x = code.xs[rip]
    y = code.ys[rip]
    stack = st.stack
    floor = st.stack_floor

    if op == _MOVI:
        gpr[x] = y
        regs.rip = rip + 1
    elif op == _MOVR:
        gpr[x] = gpr[y]
        regs.rip = rip + 1
    elif op == _ADDR:
        gpr[x] = (gpr[x] + gpr[y]) & MASK64
        regs.rip = rip + 1
    elif op == _ADDI:
        gpr[x] = (gpr[x] + y) & MASK64
        regs.rip = rip + 1
    elif op == _SUBR:
        gpr[x] = (gpr[x] - gpr[y]) & MASK64
        regs.rip = rip + 1
    elif op == _SUBI:
        gpr[x] = (gpr[x] - y) & MASK64
        regs.rip = rip + 1
    elif op == _MULR:
        gpr[x] = (gpr[x] * gpr[y]) & MASK64
        regs.rip = rip + 1
    elif op == _MULI:
        gpr[x] = (gpr[x] * y) & MASK64
        regs.rip = rip + 1
    elif op == _CMPR or op == _CMPI:
        a = gpr[x]
        b = gpr[y] if op == _CMPR else y
        if a & _SIGN_BIT:
            a -= 1 << 64
        if b & _SIGN_BIT:
            b -= 1 << 64
        regs.flags = (a > b) - (a < b)
        regs.rip = rip + 1
    elif op == _STORE:
        addr = gpr[RBP] - x
        if addr < floor or addr + 8 > st.stack_base:
            raise InvalidAddress(f"store at {addr:#x}", rip, st.executed)
        stack[addr - floor:addr - floor + 8] = gpr[y].to_bytes(8, "little")
        regs.rip = rip + 1
    elif op == _LOAD:
        addr = gpr[RBP] - x
        if addr < floor or addr + 8 > st.stack_base:
            raise InvalidAddress(f"load at {addr:#x}", rip, st.executed)
        gpr[y] = int.from_bytes(stack[addr - floor:addr - floor + 8], "little")
        regs.rip = rip + 1
    elif op == _PUSH:
        rsp = gpr[RSP] - 8
        if rsp < floor:
            raise StackOverflow("push below stack floor", rip, st.executed)
        stack[rsp - floor:rsp - floor + 8] = gpr[x].to_bytes(8, "little")
        gpr[RSP] = rsp
        regs.rip = rip + 1
    elif op == _POP:
        rsp = gpr[RSP]
        if rsp + 8 > st.stack_base:
            raise StackUnderflow("pop from empty stack", rip, st.executed)
        gpr[x] = int.from_bytes(stack[rsp - floor:rsp - floor + 8], "little")
        gpr[RSP] = rsp + 8
        regs.rip = rip + 1
    elif op == _SUBSP:
        rsp = gpr[RSP] - x
        if rsp < floor:
            raise StackOverflow("sub rsp below stack floor", rip, st.executed)
        gpr[RSP] = rsp
        regs.rip = rip + 1
    elif op == _ADDSP:
        rsp = gpr[RSP] + x
        if rsp > st.stack_base:
            raise StackUnderflow("add rsp above stack base", rip, st.executed)
        gpr[RSP] = rsp
        regs.rip = rip + 1
    elif op == _JMP:
        regs.rip = x
    elif op == _JCOND:
        f = regs.flags
        if ((y == 0 and f == 0) or (y == 1 and f != 0)
                or (y == 2 and f < 0) or (y == 3 and f <= 0)
                or (y == 4 and f > 0) or (y == 5 and f >= 0)):
            regs.rip = x
        else:
            regs.rip = rip + 1
    elif op == _CALL:
        rsp = gpr[RSP] - 8
        if rsp < floor:
            raise StackOverflow("call below stack floor", rip, st.executed)
        stack[rsp - floor:rsp - floor + 8] = (rip + 1).to_bytes(8, "little")
        gpr[RSP] = rsp
        regs.rip = x
        st.executed += 1
        num = st.call_site_counters.get(rip, 0) + 1
        st.call_site_counters[rip] = num
        st.ev_num = num
        st.ev_site = rip
        st.ev_callee_entry = x
        st.ev_caller_rbp = gpr[RBP]
        st.ev_lo = rsp
        st.ev_hi = gpr[RBP] + 7
        return EV_CALL
    elif op == _RET:
        rsp = gpr[RSP]
        if rsp + 8 > st.stack_base:
            raise StackUnderflow("ret with empty stack", rip, st.executed)
        regs.rip = int.from_bytes(stack[rsp - floor:rsp - floor + 8], "little")
        gpr[RSP] = rsp + 8
    elif op == _OUT:
        st.output.append(gpr[x])
        st.ev_value = gpr[x]
        regs.rip = rip + 1
        st.executed += 1
        return EV_OUT
    elif op == _HALT:
        st.halted = True
        st.executed += 1
        return EV_HALT
    else:  # pragma: no cover - compile_program emits only known codes
        raise MachineError(f"bad opcode {op}", rip, st.executed)

    st.executed += 1
    return EV_TICK


def _make_event(st: MachineState, kind: int) -> ExecEvent:
    if kind == EV_CALL:
        code_site = st.ev_site
        return ExecEvent(EV_CALL, st.executed, site=code_site,
                         callee_entry=st.ev_callee_entry,
                         caller_rbp=st.ev_caller_rbp,
                         region=(st.ev_lo, st.ev_hi))
    if kind == EV_OUT:
        return ExecEvent(EV_OUT, st.executed, value=st.ev_value)
    if kind == EV_HALT:
        return ExecEvent(EV_HALT, st.executed)
    return ExecEvent(EV_TICK, st.executed)


def step(state: MachineState, program: Program) -> list[ExecEvent]:
    """Execute one instruction and return the events it produced.

    Every instruction yields exactly one event: EV_CALL for calls,
    EV_OUT for out, EV_HALT for halt, EV_TICK otherwise.
    """
    if state.halted:
        raise MachineError("machine is halted", state.regs.rip, state.executed)
    kind = _exec_one(state, compile_program(program))
    return [_make_event(state, kind)]


def run_until(state: MachineState, program: Program,
              stop: Callable[[int], bool] | None = None,
              max_steps: int | None = None,
              collect: bool = True) -> list[ExecEvent]:
    """Step until halted or ``stop(executed)`` is true.

    ``stop`` is evaluated before each instruction. With collect=False the
    event list is skipped (the fast path for long replays); the machine
    state evolves identically either way.
    """
    code = compile_program(program)
    events: list[ExecEvent] = []
    steps = 0
    while not state.halted:
        if stop is not None and stop(state.executed):
            break
        if max_steps is not None and steps >= max_steps:
            break
        kind = _exec_one(state, code)
        steps += 1
        if collect:
            events.append(_make_event(state, kind))
    return events


def snapshot_region(state: MachineState, lo: int, hi: int) -> bytes:
    """Copy the inclusive byte range [lo, hi] out of the stack."""
    if lo > hi:
        raise InvalidAddress(f"empty region [{lo:#x}, {hi:#x}]")
    if lo < state.stack_floor or hi >= state.stack_base:
        raise InvalidAddress(f"region [{lo:#x}, {hi:#x}] outside stack")
    floor = state.stack_floor
    return bytes(state.stack[lo - floor:hi - floor + 1])


def write_region(state: MachineState, lo: int, payload: bytes) -> None:
    """Write bytes back into the stack at absolute address lo."""
    hi = lo + len(payload) - 1
    if lo < state.stack_floor or hi >= state.stack_base:
        raise InvalidAddress(f"region [{lo:#x}, {hi:#x}] outside stack")
    floor = state.stack_floor
    state.stack[lo - floor:hi - floor + 1] = payload


def read_word(state: MachineState, addr: int) -> int:
    if addr < state.stack_floor or addr + 8 > state.stack_base:
        raise InvalidAddress(f"read at {addr:#x}")
    off = addr - state.stack_floor
    return int.from_bytes(state.stack[off:off + 8], "little")


def caller_chain(state: MachineState) -> list[int]:
    """Walk saved frame pointers from the current rbp; outermost first.

    Independent of any checkpoint bookkeeping: reads the in-memory chain
    the prologues built (the entry prologue pushed the initial rbp of 0,
    which terminates the walk).
    """
    chain = []
    rbp = state.regs.gpr[RBP]
    while rbp != 0:
        chain.append(rbp)
        rbp = read_word(state, rbp)
    chain.reverse()
    return chain
