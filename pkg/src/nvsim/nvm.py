"""Non-volatile checkpoint store, tag table, atomic commit and cleanup.

Record layout and byte accounting (fixed so counters are reproducible):

    40-byte tag header   epoch, rbp, lo, hi, resume rip (8 bytes each)
    156-byte registers   full register file image
    payload              hi - lo + 1 stack bytes
    1-byte valid tail    written last; present <=> the record is complete

A commit writes the header first, then registers, payload and tail in
order. An interrupted commit keeps the bytes written so far; a record
without its tail is never visible to recovery. The ``interrupt`` offset
counts bytes after the header (offset 0 leaves a header-only stub).

The headline byte counter tracks registers + payload only (the cost the
backup itself pays); the total counter additionally includes headers and
tails. Cleanup writes and validity-flag flips are charged to neither.

The store itself is the only state that survives a power failure. The
tag table handed around with it models the NV controller's volatile tag
list; recovery rebuilds it from the store.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

TAG_HEADER_BYTES = 40
REGISTER_IMAGE_BYTES = 156
VALID_TAIL_BYTES = 1

DEFAULT_CAPACITY = 1 << 20


class NvmOverflow(Exception):
    pass


class CorruptRecord(Exception):
    pass


@dataclass
class FrameTag:
    epoch_id: int
    valid: bool
    rbp_value: int
    region: tuple[int, int]
    resume_rip: int
    register_snapshot: bytes
    executed_at: int = 0  # simulation bookkeeping, outside byte accounting


@dataclass
class CheckpointRecord:
    tag: FrameTag
    payload: bytes
    written: int  # bytes written after the header

    @property
    def body_len(self) -> int:
        return REGISTER_IMAGE_BYTES + len(self.payload) + VALID_TAIL_BYTES

    @property
    def complete(self) -> bool:
        return self.written >= self.body_len

    @property
    def valid_tail(self) -> bool:
        return self.complete

    @property
    def footprint(self) -> int:
        return TAG_HEADER_BYTES + self.written

    @property
    def headline_bytes(self) -> int:
        # registers + payload actually written; excludes header and tail
        return min(self.written, REGISTER_IMAGE_BYTES + len(self.payload))


@dataclass
class CleanSignal:
    invalid_epochs: list[int]


@dataclass
class NvmStore:
    capacity_bytes: int = DEFAULT_CAPACITY
    records: list[CheckpointRecord] = field(default_factory=list)
    bytes_written_total: int = 0
    bytes_written_headline: int = 0
    used_bytes: int = 0
    last_epoch: int = 0

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.used_bytes

    def find(self, epoch: int) -> CheckpointRecord | None:
        for rec in self.records:
            if rec.tag.epoch_id == epoch:
                return rec
        return None

    def clone(self) -> "NvmStore":
        """Deep copy; used to freeze the store at an injected failure."""
        dup = NvmStore(self.capacity_bytes)
        dup.bytes_written_total = self.bytes_written_total
        dup.bytes_written_headline = self.bytes_written_headline
        dup.used_bytes = self.used_bytes
        dup.last_epoch = self.last_epoch
        for rec in self.records:
            tag = FrameTag(rec.tag.epoch_id, rec.tag.valid, rec.tag.rbp_value,
                           rec.tag.region, rec.tag.resume_rip,
                           rec.tag.register_snapshot, rec.tag.executed_at)
            dup.records.append(CheckpointRecord(tag, rec.payload, rec.written))
        return dup


def commit_checkpoint(store: NvmStore, tagtable: list[FrameTag],
                      payload: bytes, rbp: int, region: tuple[int, int],
                      resume_rip: int, registers: bytes,
                      interrupt: int | None = None,
                      executed_at: int = 0) -> CheckpointRecord:
    """Append one checkpoint record; returns it (possibly incomplete).

    ``interrupt`` cuts the write after that many post-header bytes,
    modelling a power failure in mid-commit. Raises NvmOverflow when the
    full record cannot fit even after reclaiming invalid records.
    """
    if len(registers) != REGISTER_IMAGE_BYTES:
        raise ValueError("register image must be 156 bytes")
    lo, hi = region
    if hi - lo + 1 != len(payload):
        raise ValueError("payload length does not match region")

    full = TAG_HEADER_BYTES + REGISTER_IMAGE_BYTES + len(payload) + VALID_TAIL_BYTES
    if full > store.free_bytes:
        reclaim_invalid(store)
        if full > store.free_bytes:
            raise NvmOverflow(
                f"record of {full} bytes does not fit in "
                f"{store.free_bytes} free bytes (capacity "
                f"{store.capacity_bytes})")

    store.last_epoch += 1
    epoch = store.last_epoch
    tag = FrameTag(epoch, True, rbp, region, resume_rip, registers,
                   executed_at)
    body_len = REGISTER_IMAGE_BYTES + len(payload) + VALID_TAIL_BYTES
    written = body_len if interrupt is None else min(interrupt, body_len)
    rec = CheckpointRecord(tag, payload, written)
    store.records.append(rec)
    store.used_bytes += rec.footprint
    store.bytes_written_total += TAG_HEADER_BYTES + written
    store.bytes_written_headline += rec.headline_bytes
    if rec.complete:
        tagtable.append(tag)
    return rec


def apply_invalidation(tagtable: list[FrameTag], store: NvmStore,
                       new_tag: FrameTag) -> CleanSignal | None:
    """Equal-rbp rule: a repeated frame pointer retires older epochs.

    When a prior valid tag s carries the same rbp as the new checkpoint,
    every epoch in [s.epoch, new.epoch) is marked invalid in the store
    and dropped from the tag table. Returns the clean signal for those
    epochs, or None when the rbp is new.
    """
    match = None
    for tag in tagtable:
        if tag.epoch_id < new_tag.epoch_id and tag.rbp_value == new_tag.rbp_value:
            match = tag
            break
    if match is None:
        return None
    lo_epoch = match.epoch_id
    hi_epoch = new_tag.epoch_id
    doomed = []
    for rec in store.records:
        if lo_epoch <= rec.tag.epoch_id < hi_epoch and rec.tag.valid:
            rec.tag.valid = False
            doomed.append(rec.tag.epoch_id)
    tagtable[:] = [t for t in tagtable
                   if not (lo_epoch <= t.epoch_id < hi_epoch)]
    if not doomed:
        return None
    return CleanSignal(sorted(doomed))


def cleanup(store: NvmStore, signal: CleanSignal,
            interrupt: int | None = None) -> int:
    """Physically reclaim the records named by the clean signal.

    ``interrupt`` stops after that many records (partial cleanup after a
    power failure). Already-reclaimed epochs are skipped; reclaimed space
    returns to free_bytes. Returns the number of bytes reclaimed.
    """
    for epoch in signal.invalid_epochs:
        rec = store.find(epoch)
        if rec is not None and rec.tag.valid:
            raise ValueError(f"epoch {epoch} is not marked invalid")
    reclaimed = 0
    done = 0
    for epoch in signal.invalid_epochs:
        if interrupt is not None and done >= interrupt:
            break
        rec = store.find(epoch)
        if rec is None:
            continue
        store.records.remove(rec)
        store.used_bytes -= rec.footprint
        reclaimed += rec.footprint
        done += 1
    return reclaimed


def reclaim_invalid(store: NvmStore) -> int:
    """Reclaim every invalid record; the overflow-pressure fallback."""
    doomed = [r for r in store.records if not r.tag.valid and r.complete]
    # incomplete stubs are dead weight too; nothing can ever read them
    doomed += [r for r in store.records if not r.complete]
    reclaimed = 0
    for rec in doomed:
        store.records.remove(rec)
        store.used_bytes -= rec.footprint
        reclaimed += rec.footprint
    return reclaimed


def live_valid_set(store: NvmStore) -> list[CheckpointRecord]:
    """Complete, valid records in epoch order; what recovery consumes."""
    live = [r for r in store.records if r.complete and r.tag.valid]
    live.sort(key=lambda r: r.tag.epoch_id)
    return live


def rebuild_tagtable(store: NvmStore) -> list[FrameTag]:
    return [rec.tag for rec in live_valid_set(store)]


def stale_epochs(store: NvmStore) -> list[int]:
    """Invalid-but-unreclaimed epochs; recovery reports these for cleanup."""
    return sorted(r.tag.epoch_id for r in store.records
                  if r.complete and not r.tag.valid)


# -- store dump format: JSON lines, one record per line ------------------

def dump_store(store: NvmStore, path) -> None:
    import json

    with open(path, "w") as fh:
        header = {"kind": "nvmstore", "capacity": store.capacity_bytes,
                  "total": store.bytes_written_total,
                  "headline": store.bytes_written_headline,
                  "last_epoch": store.last_epoch}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in store.records:
            t = rec.tag
            row = {"epoch": t.epoch_id, "valid": t.valid,
                   "rbp": t.rbp_value, "lo": t.region[0], "hi": t.region[1],
                   "resume_rip": t.resume_rip, "executed_at": t.executed_at,
                   "registers": t.register_snapshot.hex(),
                   "payload": rec.payload.hex(), "written": rec.written}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_store(path) -> NvmStore:
    import json

    with open(path) as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise CorruptRecord("empty store dump")
    header = json.loads(lines[0])
    if header.get("kind") != "nvmstore":
        raise CorruptRecord("missing store header line")
    store = NvmStore(header["capacity"])
    store.bytes_written_total = header["total"]
    store.bytes_written_headline = header["headline"]
    store.last_epoch = header["last_epoch"]
    for line in lines[1:]:
        row = json.loads(line)
        tag = FrameTag(row["epoch"], row["valid"], row["rbp"],
                       (row["lo"], row["hi"]), row["resume_rip"],
                       bytes.fromhex(row["registers"]), row["executed_at"])
        rec = CheckpointRecord(tag, bytes.fromhex(row["payload"]),
                               row["written"])
        store.records.append(rec)
        store.used_bytes += rec.footprint
    return store
