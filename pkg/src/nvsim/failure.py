"""Power-failure injection and the checkpointing simulation driver.

A failure plan names one of three interruption points:

  at:K         before the instruction following the K-th executes
  backup:N@B   during the N-th checkpoint commit, after B post-header bytes
  cleanup:N@R  during the N-th cleanup, after R records reclaimed

Failures at instruction boundaries model the paper-style reduction: a
failure mid-instruction is the same as the instruction never executing.
Only NVM store contents survive; registers, stack, counters and pending
output are discarded.

Sampling uses Python's Mersenne Twister (``random.Random``) seeded
explicitly; the generator identifier for reports is "python-mt19937".
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .isa import Program
from .machine import (EV_CALL, EV_HALT, MachineState, compile_program,
                      fresh_state, snapshot_region, _exec_one)
from .nvm import (CheckpointRecord, FrameTag, NvmStore, apply_invalidation,
                  cleanup, commit_checkpoint)
from .policy import PolicyConfig, PolicyKind, call_site_fire

RNG_ALGORITHM = "python-mt19937"

AT_INSTRUCTION = "instruction"
DURING_BACKUP = "backup"
DURING_CLEANUP = "cleanup"


@dataclass(frozen=True)
class FailurePlan:
    kind: str                 # instruction | backup | cleanup
    index: int                # executed count / nth commit / nth cleanup
    offset: int = 0           # byte offset / records reclaimed
    seed: int | None = None   # present when sampled

    def __post_init__(self):
        if self.kind not in (AT_INSTRUCTION, DURING_BACKUP, DURING_CLEANUP):
            raise ValueError(f"unknown failure kind {self.kind!r}")
        if self.index < 0:
            raise ValueError("index must be non-negative")

    def describe(self) -> str:
        if self.kind == AT_INSTRUCTION:
            return f"at:{self.index}"
        if self.kind == DURING_BACKUP:
            return f"backup:{self.index}@{self.offset}"
        return f"cleanup:{self.index}@{self.offset}"


def parse_plan(text: str) -> FailurePlan:
    head, _, rest = text.partition(":")
    if head == "at":
        return FailurePlan(AT_INSTRUCTION, int(rest))
    if head in ("backup", "cleanup"):
        n, _, off = rest.partition("@")
        kind = DURING_BACKUP if head == "backup" else DURING_CLEANUP
        return FailurePlan(kind, int(n), int(off) if off else 0)
    raise ValueError(f"bad plan {text!r}; use at:K, backup:N@B or cleanup:N@R")


def sample_plans(run_length: int, n: int, seed: int) -> list[FailurePlan]:
    """n distinct instruction-boundary failure points in [0, run_length)."""
    if n == 0:
        return []
    if run_length < n:
        raise ValueError(f"cannot pick {n} distinct points from a "
                         f"{run_length}-instruction run")
    rng = random.Random(seed)
    return [FailurePlan(AT_INSTRUCTION, k, seed=seed)
            for k in rng.sample(range(run_length), n)]


def sample_backup_plans(checkpoint_sizes: list[int], n: int,
                        seed: int) -> list[FailurePlan]:
    """n mid-commit failures; sizes are per-commit post-header byte counts."""
    rng = random.Random(seed)
    plans = []
    for _ in range(n):
        nth = rng.randrange(1, len(checkpoint_sizes) + 1)
        off = rng.randrange(0, checkpoint_sizes[nth - 1])
        plans.append(FailurePlan(DURING_BACKUP, nth, off, seed=seed))
    return plans


def sample_cleanup_plans(cleanup_sizes: list[int], n: int,
                         seed: int) -> list[FailurePlan]:
    """n mid-cleanup failures; sizes are records per cleanup invocation."""
    rng = random.Random(seed)
    plans = []
    for _ in range(n):
        nth = rng.randrange(1, len(cleanup_sizes) + 1)
        done = rng.randrange(0, cleanup_sizes[nth - 1])
        plans.append(FailurePlan(DURING_CLEANUP, nth, done, seed=seed))
    return plans


@dataclass
class SimMetrics:
    """Reference data recorded alongside a run; not available to recovery."""
    executed: int = 0
    halted: bool = False
    failed: bool = False
    checkpoints: int = 0
    commits: int = 0
    headline_bytes: int = 0
    total_bytes: int = 0
    executed_at_last_ckpt: int = 0
    output_len_at_last_ckpt: int = 0
    output: list[int] = field(default_factory=list)
    checkpoints_by_site: dict[int, int] = field(default_factory=dict)
    commit_sizes: list[int] = field(default_factory=list)  # post-header bytes
    cleanup_sizes: list[int] = field(default_factory=list)  # records/cleanup


def run_simulation(program: Program, policy: PolicyConfig,
                   plan: FailurePlan | None = None,
                   store: NvmStore | None = None,
                   tagtable: list[FrameTag] | None = None,
                   state: MachineState | None = None,
                   observer=None,
                   max_steps: int = 50_000_000
                   ) -> tuple[NvmStore, list[FrameTag], SimMetrics]:
    """Run to halt or to the planned failure, checkpointing as configured.

    ``observer(state, store, tagtable, record)`` is called after every
    complete commit once invalidation and cleanup have settled.
    """
    code = compile_program(program)
    st = state if state is not None else fresh_state(program)
    store = store if store is not None else NvmStore()
    tags = tagtable if tagtable is not None else []
    m = SimMetrics()

    fail_at = plan.index if plan is not None and plan.kind == AT_INSTRUCTION else None
    backup_n = plan.index if plan is not None and plan.kind == DURING_BACKUP else 0
    cleanup_n = plan.index if plan is not None and plan.kind == DURING_CLEANUP else 0

    pk = policy.kind
    step_s = policy.step
    is_log = pk is PolicyKind.LOG
    is_step = pk is PolicyKind.STEP
    is_call = pk is PolicyKind.CALL
    base = policy.base
    stack = st.stack
    floor = st.stack_floor
    steps = 0

    while not st.halted:
        if fail_at is not None and st.executed >= fail_at:
            m.failed = True
            break
        if steps >= max_steps:
            raise RuntimeError(f"run exceeded {max_steps} steps")
        kind = _exec_one(st, code)
        steps += 1

        fire = False
        lo = hi = 0
        if is_log:
            rsp = st.regs.gpr[4]
            if rsp < st.stack_base:
                fire = True
                lo, hi = rsp, st.stack_base - 1
        elif is_step:
            if st.executed % step_s == 0:
                rsp = st.regs.gpr[4]
                if rsp < st.stack_base:
                    fire = True
                    lo, hi = rsp, st.stack_base - 1
        elif kind == EV_CALL:
            if is_call:
                fire = True
            else:
                fire = call_site_fire(policy, st.ev_site, st.ev_num,
                                      program) is not None
            lo, hi = st.ev_lo, st.ev_hi

        if fire:
            m.commits += 1
            interrupt = None
            dying = False
            if backup_n and m.commits == backup_n:
                interrupt = plan.offset
                dying = True
            payload = bytes(stack[lo - floor:hi - floor + 1])
            rec = commit_checkpoint(
                store, tags, payload, st.regs.gpr[5], (lo, hi),
                st.regs.rip, st.regs.pack(), interrupt=interrupt,
                executed_at=st.executed)
            m.commit_sizes.append(rec.body_len)
            if rec.complete:
                m.checkpoints += 1
                m.executed_at_last_ckpt = st.executed
                m.output_len_at_last_ckpt = len(st.output)
                site = st.ev_site if kind == EV_CALL else -1
                m.checkpoints_by_site[site] = \
                    m.checkpoints_by_site.get(site, 0) + 1
                signal = apply_invalidation(tags, store, rec.tag)
                if signal is not None:
                    n_cleanups = len(m.cleanup_sizes) + 1
                    cl_interrupt = None
                    if cleanup_n and n_cleanups == cleanup_n:
                        cl_interrupt = plan.offset
                        dying = True
                    m.cleanup_sizes.append(len(signal.invalid_epochs))
                    cleanup(store, signal, interrupt=cl_interrupt)
                if observer is not None and not dying:
                    observer(st, store, tags, rec)
            if dying:
                m.failed = True
                break
        if kind == EV_HALT:
            break

    m.executed = st.executed
    m.halted = st.halted
    m.output = list(st.output)
    m.headline_bytes = store.bytes_written_headline
    m.total_bytes = store.bytes_written_total
    return store, tags, m


def execute_with_failure(program: Program, policy: PolicyConfig,
                         plan: FailurePlan,
                         store: NvmStore | None = None
                         ) -> tuple[NvmStore, SimMetrics]:
    """Run under the plan; the store comes back exactly as the failure
    left it (volatile state is dropped on the floor)."""
    store, _tags, metrics = run_simulation(program, policy, plan, store=store)
    return store, metrics


def reference_run(program: Program, policy: PolicyConfig,
                  store: NvmStore | None = None
                  ) -> tuple[NvmStore, SimMetrics]:
    """Failure-free run; the byte-metric baseline."""
    store, _tags, metrics = run_simulation(program, policy, None, store=store)
    return store, metrics
