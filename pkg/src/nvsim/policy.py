"""Checkpoint trigger policies.

Four trigger disciplines over the machine's event stream:

  log        every executed instruction, whole live stack
  step       every S-th executed instruction, whole live stack
  call       every call, caller frame only
  incre-call calls, but a site inside an annotated loop fires only when
             its invocation count is a power of the base or equals the
             loop's trip count (sites outside loops always fire)

The per-site invocation count lives in MachineState.call_site_counters
and keeps growing across loop re-entries; the simplest reading of the
loop-time counter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .isa import Program
from .machine import (EV_CALL, EV_HALT, EV_OUT, EV_TICK, ExecEvent,
                      MachineState, compile_program)

REGISTER_COST_BYTES = 156


class PolicyKind(enum.Enum):
    LOG = "log"
    STEP = "step"
    CALL = "call"
    INCRE_CALL = "incre-call"


class TriggerReason(enum.Enum):
    EVERY_INSTRUCTION = "every-instruction"
    STEP_BOUNDARY = "step-boundary"
    CALL_SITE = "call-site"
    POWER_OF_BASE = "power-of-base-iteration"
    LAST_ITERATION = "last-iteration"


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    step: int = 20
    base: int = 2
    register_cost_bytes: int = REGISTER_COST_BYTES

    def __post_init__(self):
        if self.kind is PolicyKind.STEP and self.step < 1:
            raise ValueError("step must be >= 1")
        if self.kind is PolicyKind.INCRE_CALL and self.base < 2:
            raise ValueError("base must be >= 2")

    @property
    def name(self) -> str:
        if self.kind is PolicyKind.STEP:
            return f"step({self.step})"
        if self.kind is PolicyKind.INCRE_CALL:
            return f"incre-call({self.base})"
        return self.kind.value


@dataclass(frozen=True)
class TriggerDecision:
    fire: bool
    region: tuple[int, int] | None = None
    reason: TriggerReason | None = None


def is_power_of(n: int, base: int) -> bool:
    if n < 1:
        return False
    while n % base == 0:
        n //= base
    return n == 1


def call_site_fire(cfg: PolicyConfig, site: int, num: int,
                   program: Program) -> TriggerReason | None:
    """Incre-call rule for one call site; None means no trigger."""
    trips = compile_program(program).site_loop_trips.get(site)
    if trips is None:
        return TriggerReason.CALL_SITE  # lexically outside any loop
    if is_power_of(num, cfg.base):
        return TriggerReason.POWER_OF_BASE
    if trips and num == trips:
        return TriggerReason.LAST_ITERATION
    return None


def decide(cfg: PolicyConfig, ev: ExecEvent, state: MachineState,
           program: Program) -> TriggerDecision:
    """Map one execution event to a checkpoint decision."""
    kind = cfg.kind
    if kind is PolicyKind.LOG:
        if ev.kind in (EV_TICK, EV_CALL, EV_HALT, EV_OUT):
            region = state.live_region()
            if region is not None:
                return TriggerDecision(True, region,
                                       TriggerReason.EVERY_INSTRUCTION)
        return TriggerDecision(False)
    if kind is PolicyKind.STEP:
        if ev.at % cfg.step == 0:
            region = state.live_region()
            if region is not None:
                return TriggerDecision(True, region,
                                       TriggerReason.STEP_BOUNDARY)
        return TriggerDecision(False)
    if ev.kind != EV_CALL:
        return TriggerDecision(False)
    if kind is PolicyKind.CALL:
        return TriggerDecision(True, ev.region, TriggerReason.CALL_SITE)
    num = state.call_site_counters.get(ev.site, 0)
    reason = call_site_fire(cfg, ev.site, num, program)
    if reason is None:
        return TriggerDecision(False)
    return TriggerDecision(True, ev.region, reason)


def expected_trigger_count(trips: int, base: int = 2) -> int:
    """Triggers for one annotated loop executed to completion.

    Counts the powers of the base up to trips, plus the final iteration
    when it is not itself a power.
    """
    if trips < 1:
        raise ValueError("trips must be >= 1")
    count = 0
    p = 1
    while p <= trips:
        count += 1
        p *= base
    if not is_power_of(trips, base):
        count += 1
    return count
