"""Static pass that plants pseudo function calls as checkpoint positions.

Placement rules, applied per function:

  * a call-free loop nest gets one pseudo call at the top of the
    outermost loop body;
  * a call-free single loop with a known small trip count (at most
    small_loop_max) gets one pseudo call just after the loop;
  * a call-free single loop with a larger trip count gets one pseudo
    call at the top of the body (set large_loop_inside=False to place it
    after the loop instead);
  * outside loops, any stretch of straight-line code that would run
    threshold instructions without reaching a call gets a pseudo call.

The straight-line rule spaces insertions so that the *dynamic* gap
between call events never exceeds the threshold: after an inserted call
the counter restarts at the pseudo body length (4), since those
instructions execute before the next stretch begins. No insertion is
made when the next instruction is already a call, which also makes the
pass idempotent.

The pseudo function itself is observationally inert:

    push rbp; mov rbp, rsp; pop rbp; ret
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .isa import (AsmSyntaxError, FunctionDef, Instruction, LoopAnnotation,
                  Op, Program, ProgramError, RBP, RSP, validate_program)

PSEUDO_BODY_LEN = 4


class AnnotationMissing(ProgramError):
    pass


class PlacementRule(enum.Enum):
    STRAIGHT_LINE_THRESHOLD = "straight-line-threshold"
    OUTSIDE_SMALL_LOOP = "outside-small-loop"
    INSIDE_LARGE_LOOP = "inside-large-loop"
    INSIDE_OUTERMOST_LOOP = "inside-outermost-loop"


@dataclass(frozen=True)
class TransformConfig:
    threshold: int = 20
    small_loop_max: int = 10
    large_loop_inside: bool = True
    pseudo_name: str = "pseudo"

    def __post_init__(self):
        if self.threshold < 2:
            raise ValueError("threshold must be >= 2")
        if self.small_loop_max < 1:
            raise ValueError("small_loop_max must be >= 1")


@dataclass
class PlacementReport:
    insertions: list[tuple[str, int, PlacementRule]] = field(default_factory=list)
    pseudo_function: str | None = None


def pseudo_body() -> list[Instruction]:
    return [Instruction(Op.PUSH, rd=RBP),
            Instruction(Op.MOV_REG, rd=RBP, rs=RSP),
            Instruction(Op.POP, rd=RBP),
            Instruction(Op.RET)]


def _pick_pseudo_name(p: Program, base: str) -> str | None:
    """An existing inert pseudo function is reused; else a fresh name."""
    for name, fn in p.functions.items():
        if fn.is_pseudo and fn.frame_bytes == 0 and [i.op for i in fn.body] == \
                [Op.PUSH, Op.MOV_REG, Op.POP, Op.RET]:
            return name
    name = base
    n = 2
    while name in p.functions:
        name = f"{base}{n}"
        n += 1
    return name


@dataclass
class _Insert:
    index: int          # body position the pseudo call goes in front of
    rule: PlacementRule
    bind_labels: bool   # True: labels at index move onto the call


def _loop_spans(p: Program, fname: str) -> list[LoopAnnotation]:
    return [lp for lp in p.loops if lp.func == fname]


def _plan_function(p: Program, fname: str, cfg: TransformConfig) -> list[_Insert]:
    fn = p.functions[fname]
    body = fn.body
    calls = {i for i, ins in enumerate(body) if ins.op in (Op.CALL, Op.PCALL)}
    loops = _loop_spans(p, fname)
    inserts: list[_Insert] = []

    in_loop = [False] * (len(body) + 1)
    for lp in loops:
        for i in range(lp._head_index, lp.back_edge_index + 1):
            in_loop[i] = True

    # loop rules: handled per outermost loop
    outermost = [lp for lp in loops
                 if not any(o is not lp and o._head_index <= lp._head_index
                            and lp.back_edge_index <= o.back_edge_index
                            for o in loops)]
    for lp in outermost:
        span = range(lp._head_index, lp.back_edge_index + 1)
        if any(i in calls for i in span):
            continue  # real calls already provide triggers
        nested = [o for o in loops if o is not lp
                  and lp._head_index <= o._head_index
                  and o.back_edge_index <= lp.back_edge_index]
        if nested:
            inserts.append(_Insert(lp._head_index,
                                   PlacementRule.INSIDE_OUTERMOST_LOOP, True))
            continue
        trips = lp.static_trip_count
        if trips is None:
            raise AnnotationMissing(
                f"call-free loop {lp.head_label!r} in {fname!r} needs a "
                f"trips annotation to choose a placement")
        after = lp.back_edge_index + 1
        already_after = after < len(body) and body[after].op in (Op.CALL, Op.PCALL)
        if trips <= cfg.small_loop_max:
            if not already_after:
                inserts.append(_Insert(after, PlacementRule.OUTSIDE_SMALL_LOOP,
                                       False))
        elif cfg.large_loop_inside:
            inserts.append(_Insert(lp._head_index,
                                   PlacementRule.INSIDE_LARGE_LOOP, True))
        else:
            if not already_after:
                inserts.append(_Insert(after, PlacementRule.OUTSIDE_SMALL_LOOP,
                                       False))

    # straight-line rule outside loops
    jump_targets = {fn.labels[ins.label] for ins in body
                    if ins.op in (Op.JMP, Op.JCOND)}
    counter = 0
    for i, ins in enumerate(body):
        if in_loop[i] or i in jump_targets:
            counter = 0
        if in_loop[i]:
            continue
        if ins.op in (Op.CALL, Op.PCALL):
            counter = PSEUDO_BODY_LEN
            continue
        if ins.op in (Op.JMP, Op.JCOND, Op.RET, Op.HALT):
            counter = 0
            continue
        counter += 1
        if counter >= cfg.threshold:
            nxt = body[i + 1] if i + 1 < len(body) else None
            if nxt is not None and nxt.op in (Op.CALL, Op.PCALL):
                counter = PSEUDO_BODY_LEN
            else:
                inserts.append(_Insert(i + 1,
                                       PlacementRule.STRAIGHT_LINE_THRESHOLD,
                                       False))
                counter = PSEUDO_BODY_LEN

    inserts.sort(key=lambda ins: ins.index)
    return inserts


def _apply_inserts(fn: FunctionDef, inserts: list[_Insert],
                   pseudo_name: str) -> FunctionDef:
    call = Instruction(Op.PCALL, label=pseudo_name)
    new_body: list[Instruction] = []
    shift_at: list[tuple[int, bool]] = []  # original index, bind_labels
    k = 0
    for i in range(len(fn.body) + 1):
        while k < len(inserts) and inserts[k].index == i:
            shift_at.append((i, inserts[k].bind_labels))
            new_body.append(call)
            k += 1
        if i < len(fn.body):
            new_body.append(fn.body[i])

    def new_pos(old: int, is_label: bool) -> int:
        pos = old
        for at, bind in shift_at:
            if at < old:
                pos += 1
            elif at == old and is_label and not bind:
                pos += 1
        return pos

    new_labels = {name: new_pos(idx, True) for name, idx in fn.labels.items()}
    return FunctionDef(fn.name, new_body, fn.frame_bytes, fn.is_pseudo,
                       new_labels)


def insert_pseudo_calls(p: Program, cfg: TransformConfig | None = None
                        ) -> tuple[Program, PlacementReport]:
    """Insert pseudo calls; returns the new program and what was placed."""
    cfg = cfg or TransformConfig()
    validate_program(p)
    report = PlacementReport()

    plans = {name: _plan_function(p, name, cfg) for name in p.functions}
    total = sum(len(v) for v in plans.values())
    if total == 0:
        return p, report

    pseudo_name = _pick_pseudo_name(p, cfg.pseudo_name)
    new_functions: dict[str, FunctionDef] = {}
    for name, fn in p.functions.items():
        inserts = plans[name]
        if inserts:
            new_functions[name] = _apply_inserts(fn, inserts, pseudo_name)
            for ins in inserts:
                report.insertions.append((name, ins.index, ins.rule))
        else:
            new_functions[name] = FunctionDef(fn.name, list(fn.body),
                                              fn.frame_bytes, fn.is_pseudo,
                                              dict(fn.labels))
    if pseudo_name not in new_functions:
        new_functions[pseudo_name] = FunctionDef(
            pseudo_name, pseudo_body(), 0, True, {})
        report.pseudo_function = pseudo_name

    new_loops = []
    for lp in p.loops:
        new_loops.append(LoopAnnotation(
            func=lp.func, head_label=lp.head_label, back_edge_index=-1,
            static_trip_count=lp.static_trip_count,
            nesting_depth=lp.nesting_depth))

    out = Program(functions=new_functions, entry=p.entry, loops=new_loops)
    validate_program(out)  # also re-resolves loop spans and back edges
    return out, report
