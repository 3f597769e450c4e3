"""Replica sets: quorum-counted forces and epoch-fenced recovery.

A set holds one local region plus remote endpoints.  Forcing a byte range
means persisting it on enough copies to survive any tolerated failure: a
force acks once W copies confirm, and recovery insists on reading R =
N - W + 1, so any readable quorum overlaps every acked force in at least
one copy.

Recovery picks the most advanced max-epoch copy as the source, rewrites
stale or corrupt copies from it, and commits each repair by writing that
copy's superline with the bumped epoch.  Content goes first, the
superline last, per copy: a crash mid-recovery then leaves every copy
either untouched or fully repaired at the new epoch, and running
recovery again converges to the same state.  Copies left at the old
epoch lose to the new one when the next recovery compares epochs, so
half-finished repairs never masquerade as the freshest copy.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

from .log import (
    RECORD_AREA,
    HEADER_SIZE,
    LogConfig,
    ScannedRecord,
    Superline,
    read_superline,
    scan_records,
    superline_cell,
)
from .pmem import Region
from .primitives import crc32
from .transport import TransportError

logger = logging.getLogger(__name__)

LOCAL = "local"


class ReplicationError(Exception):
    pass


class QuorumError(ReplicationError):
    """Fewer than W copies acked a force; the log must stop acking."""


class RecoveryError(ReplicationError):
    """Recovery could not reach the quorums it needs."""


class DivergedError(RecoveryError):
    """Two max-epoch copies disagree on a payload they both hold."""


@dataclass
class CopyView:
    """Everything recovery learned about one copy in its read pass."""

    name: str
    endpoint: object  # None for the local copy
    reachable: bool
    superline: Optional[Superline] = None
    cell_index: int = 0
    records: list = field(default_factory=list)
    tail_offset: int = 0
    tail_lsn: int = 0
    image: Optional[bytes] = None

    @property
    def readable(self) -> bool:
        return self.superline is not None

    def payload(self, rec: ScannedRecord) -> bytes:
        base = rec.offset + HEADER_SIZE
        return self.image[base:base + rec.length]


class MembershipStub:
    """Stand-in for an external coordinator: tracks the primary and hands
    out a fresh generation per election."""

    def __init__(self):
        self.generation = 0
        self.primary: Optional[str] = None

    def elect(self, node_id: str) -> int:
        self.generation += 1
        self.primary = node_id
        return self.generation

    def is_primary(self, node_id: str) -> bool:
        return node_id == self.primary


class ReplicaSet:
    """One local region plus remote endpoints, written as a unit.

    ``durable_local`` says whether the local region counts as one of the
    N copies; when false it is staging only and every durable copy is
    remote.
    """

    def __init__(self, region: Region, remotes, config: LogConfig,
                 generation: Optional[int] = None):
        self.region = region
        self.remotes = list(remotes)
        self.config = config
        # the election generation that authorized this primary; recovery
        # stamps it into the repaired superlines, so epochs written by
        # different elections can never collide
        self.generation = generation
        self.durable_local = config.mode != "remote_only"
        # test hook, called between recovery steps; raising from it
        # emulates the recovering process dying at that point
        self.fault_hook = None
        # copy names the most recent recover() successfully rewrote
        self.last_repaired: list = []
        copies = len(self.remotes) + (1 if self.durable_local else 0)
        if copies != config.replicas:
            raise ValueError(
                f"{copies} copies wired up, config expects {config.replicas}")

    # -- write path ------------------------------------------------------

    def force_ranges(self, ranges) -> int:
        """Persist staged ranges on every copy; ack at W, else raise.

        Failed endpoints close themselves; the force still succeeds as
        long as W copies (local included when durable) confirm.
        """
        tasks: list = []
        if self.config.flush_order == "local_first":
            tasks = [LOCAL] + self.remotes
        elif self.config.flush_order == "remote_first":
            tasks = self.remotes + [LOCAL]
        else:  # parallel: emulated round-robin, local between remotes
            tasks = self.remotes[:1] + [LOCAL] + self.remotes[1:]
        acks = 0
        failures = []
        for task in tasks:
            if task is LOCAL:
                if self.durable_local:
                    for offset, length in ranges:
                        self.region.persist(offset, length)
                    acks += 1
                continue
            try:
                for offset, length in ranges:
                    task.write_and_force(offset,
                                         self.region.read(offset, length))
                acks += 1
            except TransportError as err:
                failures.append(f"{task.replica_id}: {err}")
        if acks < self.config.write_quorum:
            raise QuorumError(
                f"{acks} acks, need {self.config.write_quorum}; "
                + "; ".join(failures))
        return acks

    def live_remotes(self) -> list:
        return [ep for ep in self.remotes if ep.state == "connected"]

    def close(self) -> None:
        for ep in self.remotes:
            if ep.state == "connected":
                ep.close()

    # -- recovery --------------------------------------------------------

    def recover(self, config: LogConfig) -> int:
        """Bring every reachable copy to one consistent state, new epoch.

        Raises RecoveryError when fewer than R copies are readable or
        fewer than W repairs stick, and DivergedError when two max-epoch
        copies contradict each other (which the write path is supposed
        to make impossible).
        """
        copies = self._read_copies(config)
        readable = [c for c in copies if c.readable]
        if len(readable) < config.read_quorum:
            raise RecoveryError(
                f"{len(readable)} readable copies, "
                f"need {config.read_quorum} of {config.replicas}")
        top_epoch = max(c.superline.epoch for c in readable)
        candidates = [c for c in readable if c.superline.epoch == top_epoch]
        source = max(candidates,
                     key=lambda c: (c.superline.start_lsn, c.tail_lsn))
        self._check_divergence(source, candidates)

        # A failed attempt may leave its epoch on a minority of copies.
        # Deriving the next epoch from what those copies show would let
        # two attempts that see different minorities pick the same
        # number; the election generation is the one counter every
        # attempt shares, so it becomes the epoch.
        if self.generation is None:
            new_epoch = top_epoch + 1
        elif self.generation > top_epoch:
            new_epoch = self.generation
        else:
            raise RecoveryError(
                f"generation {self.generation} is not above epoch "
                f"{top_epoch}; a newer primary has been here")
        canonical = Superline(new_epoch, source.superline.head_offset,
                              source.superline.start_lsn)
        content = self._content_ranges(source)
        successes = 0
        self.last_repaired = []
        for copy in copies:
            if not copy.reachable:
                continue
            try:
                self._repair(copy, source, canonical, content,
                             source.tail_offset)
                successes += 1
                self.last_repaired.append(copy.name)
            except TransportError as err:
                logger.info("repair of %s failed: %s", copy.name, err)
            if self.fault_hook is not None:
                self.fault_hook("repaired", copy.name)
        if successes < config.write_quorum:
            raise RecoveryError(
                f"only {successes} copies repaired, "
                f"need {config.write_quorum}")
        if not self.durable_local:
            self._sync_staging(canonical, content, source.tail_offset)
        return new_epoch

    def _read_copies(self, config: LogConfig) -> list[CopyView]:
        copies = []
        if self.durable_local:
            image = bytes(self.region.read(0, config.capacity))
            copies.append(self._view(LOCAL, None, image, config))
        for ep in self.remotes:
            try:
                image = bytes(ep.remote_read(0, config.capacity))
            except TransportError as err:
                logger.info("copy %s unreadable: %s", ep.replica_id, err)
                copies.append(CopyView(ep.replica_id, ep, reachable=False))
                continue
            copies.append(self._view(ep.replica_id, ep, image, config))
        return copies

    def _view(self, name, endpoint, image: bytes,
              config: LogConfig) -> CopyView:
        scratch = Region(config.capacity)
        scratch.store(0, image)
        found = read_superline(scratch)
        if found is None:
            return CopyView(name, endpoint, reachable=True, image=image)
        line, index = found
        scan = scan_records(scratch, line)
        return CopyView(name, endpoint, reachable=True, superline=line,
                        cell_index=index, records=scan.records,
                        tail_offset=scan.tail_offset,
                        tail_lsn=scan.next_lsn, image=image)

    @staticmethod
    def _check_divergence(source: CopyView, candidates) -> None:
        """Same-epoch copies must agree wherever their LSN ranges overlap."""
        by_lsn = {rec.lsn: rec for rec in source.records}
        for copy in candidates:
            if copy is source:
                continue
            for rec in copy.records:
                mine = by_lsn.get(rec.lsn)
                if mine is None:
                    continue
                if copy.payload(rec) != source.payload(mine):
                    raise DivergedError(
                        f"copies {source.name} and {copy.name} disagree "
                        f"at lsn {rec.lsn}")

    @staticmethod
    def _content_ranges(source: CopyView) -> list[tuple[int, bytes]]:
        head = source.superline.head_offset
        tail = source.tail_offset
        image = source.image
        if tail >= head:
            return [(head, image[head:tail])]
        return [(head, image[head:]), (RECORD_AREA, image[RECORD_AREA:tail])]

    def _repair(self, copy: CopyView, source: CopyView, canonical: Superline,
                content, tail: int) -> None:
        """Rewrite one copy from the source, then commit its new epoch.

        The superline write lands in the buffer the copy is not using, so
        a crash anywhere in here leaves the copy valid at either the old
        state or the repaired one.  A zeroed header at the canonical tail
        ends the record walk there: without it, a repaired copy's own
        stale records could chain seamlessly onto the canonical suffix
        and resurface in a later recovery.
        """
        write = self._writer_for(copy)
        if copy is not source:
            for offset, data in content:
                if data:
                    write(offset, data)
            write(tail, bytes(HEADER_SIZE))
            if self.fault_hook is not None:
                self.fault_hook("content-written", copy.name)
        if copy.endpoint is not None and copy is source:
            copy.endpoint.epoch_write(canonical.epoch)
            return
        payload = canonical.pack()
        buf = payload + struct.pack("<I", crc32(payload))
        spare = 1 - copy.cell_index if copy.readable else 0
        write(spare * self._cell_stride(), buf)

    def _writer_for(self, copy: CopyView):
        if copy.endpoint is None:
            def write(offset: int, data: bytes) -> None:
                self.region.store(offset, data)
                self.region.persist(offset, len(data))
            return write
        return copy.endpoint.write_and_force

    def _cell_stride(self) -> int:
        return superline_cell(self.region)._stride

    def _sync_staging(self, canonical: Superline, content, tail: int) -> None:
        """Mirror the repaired state into the local staging region."""
        for offset, data in content:
            if data:
                self.region.store(offset, data)
        self.region.store(tail, bytes(HEADER_SIZE))
        payload = canonical.pack()
        stride = self._cell_stride()
        self.region.store(0, payload + struct.pack("<I", crc32(payload)))
        self.region.store(stride, bytes(stride))


def solo_set(region: Region, config: Optional[LogConfig] = None) -> ReplicaSet:
    """A one-copy set: plain local persistence, no remotes."""
    return ReplicaSet(region, [], config or LogConfig(region.capacity))
