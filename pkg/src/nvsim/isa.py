"""Toy instruction set: textual assembly format, loader and validator.

Assembly grammar (one item per line, ``#`` starts a comment):

    .entry NAME                       entry function (default: main)
    .func NAME frame=N [pseudo]       begin function, N = prologue sub amount
    .endfunc                          end function
    .loop head=LBL trips=N depth=D    loop annotation (inside .func;
                                      trips optional for unbounded loops)
    LBL:                              label (line of its own)
    push rN | pop rN
    mov rD, IMM | mov rD, rS
    sub rsp, N | add rsp, N           stack pointer adjust
    add|sub|mul|cmp rD, rS|IMM        arithmetic (cmp only sets flags)
    store rS, OFF                     mem[rbp-OFF .. rbp-OFF+7] = rS
    load rD, OFF                      rD = mem[rbp-OFF .. rbp-OFF+7]
    jmp LBL
    je|jne|jl|jle|jg|jge LBL          conditional on last cmp
    call FUNC | pcall FUNC            pcall targets pseudo functions
    ret                               pops the return address only
    out rN
    halt                              entry function only

Registers are r0..r15 (8 bytes each); rsp is an alias for r4 and rbp for
r5, matching the usual encoding. Every function body must start with the
prologue ``push rbp; mov rbp, rsp`` followed by ``sub rsp, frame`` when
frame > 0. ``ret`` pops only the return address, so epilogues are
explicit (``mov rsp, rbp; pop rbp; ret``). Word size is 8 bytes and the
stack grows downward.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class ProgramError(Exception):
    """Base class for loader errors."""


class AsmSyntaxError(ProgramError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line
        self.col = col


class UnresolvedLabel(ProgramError):
    pass


class RecursionDetected(ProgramError):
    def __init__(self, cycle: list[str]):
        super().__init__("recursive call chain: " + " -> ".join(cycle))
        self.cycle = cycle


class MissingPrologue(ProgramError):
    pass


class Op(enum.IntEnum):
    PUSH = 0
    POP = 1
    MOV_IMM = 2
    MOV_REG = 3
    SUB_RSP = 4
    ADD_RSP = 5
    STORE = 6
    LOAD = 7
    ADD = 8
    SUB = 9
    MUL = 10
    CMP = 11
    JMP = 12
    JCOND = 13
    CALL = 14
    PCALL = 15
    RET = 16
    OUT = 17
    HALT = 18


class Cond(enum.IntEnum):
    EQ = 0
    NE = 1
    LT = 2
    LE = 3
    GT = 4
    GE = 5


RSP = 4
RBP = 5

MASK64 = (1 << 64) - 1

_COND_NAMES = {"je": Cond.EQ, "jne": Cond.NE, "jl": Cond.LT,
               "jle": Cond.LE, "jg": Cond.GT, "jge": Cond.GE}
_COND_MNEMONIC = {v: k for k, v in _COND_NAMES.items()}

# instructions that may change the stack pointer
STACK_OPS = frozenset({Op.PUSH, Op.POP, Op.SUB_RSP, Op.ADD_RSP,
                       Op.CALL, Op.PCALL, Op.RET, Op.MOV_REG})


@dataclass(frozen=True)
class Instruction:
    op: Op
    rd: int | None = None     # destination / single register operand
    rs: int | None = None     # source register
    imm: int | None = None    # immediate / byte count / frame offset
    label: str | None = None  # jump or call target
    cond: Cond | None = None  # JCOND only


@dataclass
class FunctionDef:
    name: str
    body: list[Instruction]
    frame_bytes: int
    is_pseudo: bool = False
    labels: dict[str, int] = field(default_factory=dict)


@dataclass
class LoopAnnotation:
    func: str
    head_label: str
    back_edge_index: int
    static_trip_count: int | None
    nesting_depth: int

    @property
    def head_index(self) -> int:
        # resolved by the loader; stored alongside for span checks
        return self._head_index

    _head_index: int = field(default=0, repr=False, compare=False)


@dataclass
class Program:
    functions: dict[str, FunctionDef]
    entry: str
    loops: list[LoopAnnotation] = field(default_factory=list)


def parse_register(tok: str, line: int) -> int:
    t = tok.lower()
    if t == "rsp":
        return RSP
    if t == "rbp":
        return RBP
    if t.startswith("r") and t[1:].isdigit():
        n = int(t[1:])
        if 0 <= n < 16:
            return n
    raise AsmSyntaxError(f"unknown register {tok!r}", line)


def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmSyntaxError(f"expected a number, got {tok!r}", line) from None


def _split_operands(rest: str) -> list[str]:
    return [t.strip() for t in rest.split(",") if t.strip()]


def _is_reg(tok: str) -> bool:
    t = tok.lower()
    return t in ("rsp", "rbp") or (t.startswith("r") and t[1:].isdigit())


def _parse_instruction(mnem: str, rest: str, line: int) -> Instruction:
    ops = _split_operands(rest)

    def need(n):
        if len(ops) != n:
            raise AsmSyntaxError(f"{mnem} expects {n} operand(s)", line)

    if mnem == "push":
        need(1)
        return Instruction(Op.PUSH, rd=parse_register(ops[0], line))
    if mnem == "pop":
        need(1)
        return Instruction(Op.POP, rd=parse_register(ops[0], line))
    if mnem == "mov":
        need(2)
        rd = parse_register(ops[0], line)
        if _is_reg(ops[1]):
            return Instruction(Op.MOV_REG, rd=rd, rs=parse_register(ops[1], line))
        return Instruction(Op.MOV_IMM, rd=rd, imm=_parse_int(ops[1], line) & MASK64)
    if mnem in ("add", "sub", "mul", "cmp"):
        need(2)
        rd = parse_register(ops[0], line)
        if rd == RSP and mnem in ("add", "sub"):
            if _is_reg(ops[1]):
                raise AsmSyntaxError(f"{mnem} rsp needs an immediate", line)
            n = _parse_int(ops[1], line)
            if n < 0:
                raise AsmSyntaxError("rsp adjust must be non-negative", line)
            return Instruction(Op.SUB_RSP if mnem == "sub" else Op.ADD_RSP, imm=n)
        opcode = {"add": Op.ADD, "sub": Op.SUB, "mul": Op.MUL, "cmp": Op.CMP}[mnem]
        if _is_reg(ops[1]):
            return Instruction(opcode, rd=rd, rs=parse_register(ops[1], line))
        return Instruction(opcode, rd=rd, imm=_parse_int(ops[1], line) & MASK64)
    if mnem in ("store", "load"):
        need(2)
        reg = parse_register(ops[0], line)
        off = _parse_int(ops[1], line)
        return Instruction(Op.STORE if mnem == "store" else Op.LOAD, rd=reg, imm=off)
    if mnem == "jmp":
        need(1)
        return Instruction(Op.JMP, label=ops[0])
    if mnem in _COND_NAMES:
        need(1)
        return Instruction(Op.JCOND, cond=_COND_NAMES[mnem], label=ops[0])
    if mnem in ("call", "pcall"):
        need(1)
        return Instruction(Op.CALL if mnem == "call" else Op.PCALL, label=ops[0])
    if mnem == "ret":
        need(0)
        return Instruction(Op.RET)
    if mnem == "out":
        need(1)
        return Instruction(Op.OUT, rd=parse_register(ops[0], line))
    if mnem == "halt":
        need(0)
        return Instruction(Op.HALT)
    raise AsmSyntaxError(f"unknown mnemonic {mnem!r}", line)


def _parse_kv(parts: list[str], allowed: dict[str, bool], line: int) -> dict[str, str]:
    # allowed maps key -> required
    out = {}
    for p in parts:
        if "=" not in p:
            raise AsmSyntaxError(f"malformed directive argument {p!r}", line)
        k, v = p.split("=", 1)
        if k not in allowed:
            raise AsmSyntaxError(f"unknown directive argument {k!r}", line)
        out[k] = v
    for k, required in allowed.items():
        if required and k not in out:
            raise AsmSyntaxError(f"missing directive argument {k!r}", line)
    return out


def parse_program(text: str) -> Program:
    """Parse assembly source into a validated Program."""
    functions: dict[str, FunctionDef] = {}
    loops: list[LoopAnnotation] = []
    entry: str | None = None

    cur_name: str | None = None
    cur_body: list[Instruction] = []
    cur_labels: dict[str, int] = {}
    cur_frame = 0
    cur_pseudo = False
    cur_loops: list[tuple[int, dict[str, str]]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            parts = line.split()
            directive = parts[0]
            if directive == ".entry":
                if len(parts) != 2:
                    raise AsmSyntaxError(".entry expects a name", lineno)
                entry = parts[1]
            elif directive == ".func":
                if cur_name is not None:
                    raise AsmSyntaxError("nested .func", lineno)
                if len(parts) < 2:
                    raise AsmSyntaxError(".func expects a name", lineno)
                cur_name = parts[1]
                if cur_name in functions:
                    raise AsmSyntaxError(f"duplicate function {cur_name!r}", lineno)
                cur_pseudo = "pseudo" in parts[2:]
                kv = _parse_kv([p for p in parts[2:] if p != "pseudo"],
                               {"frame": True}, lineno)
                cur_frame = _parse_int(kv["frame"], lineno)
                if cur_frame < 0:
                    raise AsmSyntaxError("frame must be non-negative", lineno)
                cur_body = []
                cur_labels = {}
                cur_loops = []
            elif directive == ".endfunc":
                if cur_name is None:
                    raise AsmSyntaxError(".endfunc outside .func", lineno)
                functions[cur_name] = FunctionDef(
                    cur_name, cur_body, cur_frame, cur_pseudo, cur_labels)
                for dline, kv in cur_loops:
                    trips = int(kv["trips"]) if "trips" in kv else None
                    loops.append(LoopAnnotation(
                        func=cur_name, head_label=kv["head"],
                        back_edge_index=-1, static_trip_count=trips,
                        nesting_depth=int(kv.get("depth", "1"))))
                cur_name = None
            elif directive == ".loop":
                if cur_name is None:
                    raise AsmSyntaxError(".loop outside .func", lineno)
                kv = _parse_kv(parts[1:], {"head": True, "trips": False,
                                           "depth": False}, lineno)
                if "trips" in kv and _parse_int(kv["trips"], lineno) < 1:
                    raise AsmSyntaxError("trips must be positive", lineno)
                if "depth" in kv and _parse_int(kv["depth"], lineno) < 1:
                    raise AsmSyntaxError("depth must be positive", lineno)
                cur_loops.append((lineno, kv))
            else:
                raise AsmSyntaxError(f"unknown directive {directive!r}", lineno)
            continue
        if cur_name is None:
            raise AsmSyntaxError("instruction outside .func", lineno)
        if line.endswith(":") and " " not in line[:-1]:
            label = line[:-1]
            if not label or not label[0].isalpha():
                raise AsmSyntaxError(f"bad label {line!r}", lineno)
            if label in cur_labels:
                raise AsmSyntaxError(f"duplicate label {label!r}", lineno)
            cur_labels[label] = len(cur_body)
            continue
        mnem, _, rest = line.partition(" ")
        cur_body.append(_parse_instruction(mnem.lower(), rest, lineno))

    if cur_name is not None:
        raise AsmSyntaxError(f"unterminated .func {cur_name!r}")
    if not functions:
        raise AsmSyntaxError("no functions defined")
    if entry is None:
        entry = "main" if "main" in functions else next(iter(functions))

    program = Program(functions=functions, entry=entry, loops=loops)
    validate_program(program)
    return program


def _resolve_back_edges(p: Program) -> None:
    for loop in p.loops:
        fn = p.functions.get(loop.func)
        if fn is None or loop.head_label not in fn.labels:
            raise UnresolvedLabel(
                f"loop head {loop.head_label!r} not found in {loop.func!r}")
        head = fn.labels[loop.head_label]
        loop._head_index = head
        back = -1
        for i, ins in enumerate(fn.body):
            if ins.op in (Op.JMP, Op.JCOND) and ins.label == loop.head_label and i >= head:
                back = i
        if back < 0:
            raise AsmSyntaxError(
                f"loop {loop.head_label!r} in {loop.func!r} has no back edge")
        loop.back_edge_index = back


def _check_call_graph(p: Program) -> None:
    graph = {name: sorted({ins.label for ins in fn.body
                           if ins.op in (Op.CALL, Op.PCALL)})
             for name, fn in p.functions.items()}
    state: dict[str, int] = {}  # 0 visiting, 1 done
    stack: list[str] = []

    def visit(name: str) -> None:
        state[name] = 0
        stack.append(name)
        for callee in graph[name]:
            if callee not in graph:
                raise UnresolvedLabel(f"call target {callee!r} is not a function")
            if state.get(callee) == 0:
                cycle = stack[stack.index(callee):] + [callee]
                raise RecursionDetected(cycle)
            if callee not in state:
                visit(callee)
        stack.pop()
        state[name] = 1

    for name in p.functions:
        if name not in state:
            visit(name)


def validate_program(p: Program) -> None:
    """Check every loader invariant; raises a ProgramError subclass."""
    if p.entry not in p.functions:
        raise UnresolvedLabel(f"entry function {p.entry!r} not defined")

    for name, fn in p.functions.items():
        body = fn.body
        if len(body) < 2 or body[0].op != Op.PUSH or body[0].rd != RBP \
                or body[1].op != Op.MOV_REG or body[1].rd != RBP or body[1].rs != RSP:
            raise MissingPrologue(
                f"{name!r} must start with: push rbp; mov rbp, rsp")
        if fn.frame_bytes > 0:
            if len(body) < 3 or body[2].op != Op.SUB_RSP or body[2].imm != fn.frame_bytes:
                raise MissingPrologue(
                    f"{name!r} declares frame={fn.frame_bytes} but prologue "
                    f"does not reserve it")
        last = body[-1]
        if name == p.entry:
            if last.op not in (Op.HALT, Op.JMP):
                raise AsmSyntaxError(f"entry {name!r} must end in halt")
        else:
            if last.op not in (Op.RET, Op.JMP):
                raise AsmSyntaxError(f"{name!r} must end in ret")
        for idx, ins in enumerate(body):
            if ins.op == Op.HALT and name != p.entry:
                raise AsmSyntaxError(f"halt outside entry function ({name!r})")
            if ins.op in (Op.STORE, Op.LOAD):
                if ins.imm < 8 or ins.imm > fn.frame_bytes:
                    raise AsmSyntaxError(
                        f"{name!r}[{idx}]: frame offset {ins.imm} outside "
                        f"frame of {fn.frame_bytes} bytes")
            if ins.op in (Op.JMP, Op.JCOND) and ins.label not in fn.labels:
                raise UnresolvedLabel(
                    f"{name!r}[{idx}]: jump target {ins.label!r} not found")
            if ins.op == Op.PCALL:
                target = p.functions.get(ins.label)
                if target is not None and not target.is_pseudo:
                    raise AsmSyntaxError(
                        f"{name!r}[{idx}]: pcall target {ins.label!r} is not "
                        f"a pseudo function")
        for label, pos in fn.labels.items():
            if pos > len(body):
                raise AsmSyntaxError(f"label {label!r} out of range in {name!r}")

    _check_call_graph(p)
    _resolve_back_edges(p)

    # loop nesting sanity: overlapping loops in one function must nest
    byfunc: dict[str, list[LoopAnnotation]] = {}
    for loop in p.loops:
        byfunc.setdefault(loop.func, []).append(loop)
    for name, anns in byfunc.items():
        for a in anns:
            for b in anns:
                if a is b:
                    continue
                a0, a1 = a._head_index, a.back_edge_index
                b0, b1 = b._head_index, b.back_edge_index
                if a0 <= b0 and b1 <= a1:
                    if b.nesting_depth <= a.nesting_depth:
                        raise AsmSyntaxError(
                            f"loop {b.head_label!r} nested in {a.head_label!r} "
                            f"must have greater depth")
                elif not (a1 < b0 or b1 < a0) and not (b0 <= a0 and a1 <= b1):
                    raise AsmSyntaxError(
                        f"loops {a.head_label!r} and {b.head_label!r} in "
                        f"{name!r} overlap without nesting")


def format_instruction(ins: Instruction) -> str:
    def reg(n):
        return {RSP: "rsp", RBP: "rbp"}.get(n, f"r{n}")

    op = ins.op
    if op == Op.PUSH:
        return f"push {reg(ins.rd)}"
    if op == Op.POP:
        return f"pop {reg(ins.rd)}"
    if op == Op.MOV_IMM:
        return f"mov {reg(ins.rd)}, {ins.imm}"
    if op == Op.MOV_REG:
        return f"mov {reg(ins.rd)}, {reg(ins.rs)}"
    if op == Op.SUB_RSP:
        return f"sub rsp, {ins.imm}"
    if op == Op.ADD_RSP:
        return f"add rsp, {ins.imm}"
    if op in (Op.ADD, Op.SUB, Op.MUL, Op.CMP):
        mnem = {Op.ADD: "add", Op.SUB: "sub", Op.MUL: "mul", Op.CMP: "cmp"}[op]
        src = reg(ins.rs) if ins.rs is not None else str(ins.imm)
        return f"{mnem} {reg(ins.rd)}, {src}"
    if op == Op.STORE:
        return f"store {reg(ins.rd)}, {ins.imm}"
    if op == Op.LOAD:
        return f"load {reg(ins.rd)}, {ins.imm}"
    if op == Op.JMP:
        return f"jmp {ins.label}"
    if op == Op.JCOND:
        return f"{_COND_MNEMONIC[ins.cond]} {ins.label}"
    if op == Op.CALL:
        return f"call {ins.label}"
    if op == Op.PCALL:
        return f"pcall {ins.label}"
    if op == Op.RET:
        return "ret"
    if op == Op.OUT:
        return f"out {reg(ins.rd)}"
    if op == Op.HALT:
        return "halt"
    raise ValueError(f"unprintable instruction {ins!r}")


def print_program(p: Program) -> str:
    """Render a Program back to source text; parse(print(p)) == p."""
    lines: list[str] = [f".entry {p.entry}"]
    for name, fn in p.functions.items():
        head = f".func {name} frame={fn.frame_bytes}"
        if fn.is_pseudo:
            head += " pseudo"
        lines.append(head)
        by_pos: dict[int, list[str]] = {}
        for label, pos in fn.labels.items():
            by_pos.setdefault(pos, []).append(label)
        for idx, ins in enumerate(fn.body):
            for label in by_pos.get(idx, ()):
                lines.append(f"{label}:")
            lines.append("    " + format_instruction(ins))
        for label in by_pos.get(len(fn.body), ()):
            lines.append(f"{label}:")
        for loop in p.loops:
            if loop.func == name:
                parts = [f".loop head={loop.head_label}"]
                if loop.static_trip_count is not None:
                    parts.append(f"trips={loop.static_trip_count}")
                parts.append(f"depth={loop.nesting_depth}")
                lines.append(" ".join(parts))
        lines.append(".endfunc")
    return "\n".join(lines) + "\n"


def static_instruction_count(p: Program) -> int:
    """Total instruction count across all functions."""
    return sum(len(fn.body) for fn in p.functions.values())
