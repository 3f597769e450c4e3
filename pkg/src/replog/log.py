"""Append-only circular log with checksummed records and a replicated head.

On-media layout (all integers little-endian, offsets from region base):

    0     superline cell, two alternating buffers plus an index line
    192   record area, 8-byte-aligned extents up to the region capacity

Superline payload (32 bytes per cell buffer, 4-byte CRC trailer follows):

    0   magic       8B
    8   epoch       8B   bumped by every recovery, never reused
    16  head_offset 8B   offset of the oldest live record
    24  start_lsn   8B   LSN expected at head_offset

Record header (24 bytes, payload follows, extent padded to 8 bytes):

    0   lsn         8B
    8   length      4B   payload bytes
    12  payload_crc 4B
    16  flags       1B   bit0 live, bit1 wrap marker
    17  pad         7B

The tail is deliberately not stored anywhere.  Appends touch only record
extents, and an open rediscovers the tail by walking records from the head
until a check fails: the LSN must match the expected consecutive value, the
live flag must be set, and the payload CRC must match.  A wrap marker is
planted when a record will not fit before the region end; it carries the
LSN of the record that wrapped and a checksum over its own header so a torn
marker can never impersonate a record.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .pmem import Region
from .primitives import AtomicCell, crc32

MAGIC = b"rlog\xC5\x01\x00\x00"

RECORD_AREA = 192
SUPER_PAYLOAD = 32
HEADER_SIZE = 24
FLAGS_OFFSET = 16
FLAG_LIVE = 0x01
FLAG_SKIP = 0x02
ALIGN = 8

_SUPER = struct.Struct("<8sQQQ")
# lsn, payload length, payload crc, flags, writing epoch (truncated to
# 32 bits).  The epoch stamp is what keeps a scan from chaining onto
# records a superseded session left behind the tail: epochs along the
# walk may never decrease, and may never exceed the superline's.
_HEADER = struct.Struct("<QIIB3xI")

FORCED = "forced"
DEFERRED = "deferred"


class LogError(Exception):
    pass


class StateError(LogError):
    """An operation was called in the wrong record lifecycle state."""


class LogFull(LogError):
    """Not enough reclaimed space for the reservation; never blocks."""


class RecordTooLarge(LogError):
    pass


class ForceTimeout(LogError):
    """force gave up waiting for earlier records to complete."""


class CorruptLog(LogError):
    """No usable superline; the region does not hold an openable log."""


# -- force policies ------------------------------------------------------


class ForcePolicy:
    pass


@dataclass(frozen=True)
class Sync(ForcePolicy):
    """Every append persists and replicates before returning."""


@dataclass(frozen=True)
class GroupCommit(ForcePolicy):
    """Force once per ``group_size`` completions, via a shared counter."""

    group_size: int = 64


@dataclass(frozen=True)
class Frequency(ForcePolicy):
    """Only LSNs divisible by ``freq`` lead a force; the rest defer.

    ``max_threads`` is the writer-count bound used when reporting the
    completed-but-unforced window limit (freq * max_threads).
    """

    freq: int = 8
    max_threads: int = 0

    def window_bound(self, threads: Optional[int] = None) -> int:
        t = threads if threads is not None else self.max_threads
        return self.freq * t


def parse_policy(text: str) -> ForcePolicy:
    """Parse "sync", "group:N" or "freq:N[:T]" into a policy."""
    parts = text.strip().lower().split(":")
    if parts[0] == "sync":
        return Sync()
    if parts[0] == "group":
        return GroupCommit(group_size=int(parts[1]))
    if parts[0] == "freq":
        threads = int(parts[2]) if len(parts) > 2 else 0
        return Frequency(freq=int(parts[1]), max_threads=threads)
    raise ValueError(f"unknown force policy {text!r}")


@dataclass
class LogConfig:
    capacity: int
    mode: str = "local"  # local | local_remote | remote_only
    replicas: int = 1
    write_quorum: int = 1
    policy: ForcePolicy = field(default_factory=Sync)
    flush_order: str = "remote_first"  # remote_first | local_first | parallel
    force_wait_timeout: Optional[float] = 5.0

    def __post_init__(self):
        if self.mode not in ("local", "local_remote", "remote_only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.flush_order not in ("remote_first", "local_first", "parallel"):
            raise ValueError(f"unknown flush order {self.flush_order!r}")
        if not 1 <= self.write_quorum <= self.replicas:
            raise ValueError("need 1 <= write_quorum <= replicas")
        if self.mode == "local" and self.replicas != 1:
            raise ValueError("local mode has exactly one copy")

    @property
    def read_quorum(self) -> int:
        # smallest R with R + W > N, so any readable set meets any write set
        return self.replicas - self.write_quorum + 1

    @property
    def max_record(self) -> int:
        # the second header's worth of slack keeps every tail gap either
        # zero or large enough to hold a wrap marker
        area = self.capacity - RECORD_AREA
        return min(self.capacity // 4, area - 2 * HEADER_SIZE)


# -- on-media codecs -----------------------------------------------------


@dataclass(frozen=True)
class Superline:
    epoch: int
    head_offset: int
    start_lsn: int

    def pack(self) -> bytes:
        return _SUPER.pack(MAGIC, self.epoch, self.head_offset, self.start_lsn)

    @classmethod
    def parse(cls, raw: bytes) -> Optional["Superline"]:
        magic, epoch, head, start = _SUPER.unpack(raw)
        if magic != MAGIC:
            return None
        return cls(epoch, head, start)


def _prefer_superline(a: bytes, b: bytes) -> int:
    pa, pb = Superline.parse(a), Superline.parse(b)
    if pa is None:
        return 1
    if pb is None:
        return 0
    return 0 if (pa.epoch, pa.start_lsn) >= (pb.epoch, pb.start_lsn) else 1


def superline_cell(region: Region, sink=None) -> AtomicCell:
    cell = AtomicCell(region, 0, SUPER_PAYLOAD, prefer=_prefer_superline,
                      sink=sink)
    assert cell.footprint <= RECORD_AREA
    return cell


def read_superline(region: Region) -> Optional[tuple[Superline, int]]:
    """Pick the newest valid superline buffer by (epoch, start_lsn)."""
    cell = superline_cell(region)
    best = None
    for index in (0, 1):
        payload = cell._buffer_payload(index)
        if payload is None:
            continue
        line = Superline.parse(payload)
        if line is None:
            continue
        key = (line.epoch, line.start_lsn)
        if best is None or key > best[0]:
            best = (key, line, index)
    if best is None:
        return None
    return best[1], best[2]


def pack_header(lsn: int, length: int, payload_crc: int, flags: int,
                epoch: int) -> bytes:
    return _HEADER.pack(lsn, length, payload_crc, flags, epoch & 0xFFFFFFFF)


def marker_check(lsn: int, length: int, epoch: int) -> int:
    """Self-checksum of a wrap marker header (it has no payload to sum)."""
    return crc32(struct.pack("<QIBI", lsn, length, FLAG_LIVE | FLAG_SKIP,
                             epoch & 0xFFFFFFFF))


def extent_size(length: int) -> int:
    return HEADER_SIZE + (length + ALIGN - 1) // ALIGN * ALIGN


@dataclass(frozen=True)
class ScannedRecord:
    lsn: int
    offset: int
    length: int


@dataclass(frozen=True)
class ScanResult:
    records: list[ScannedRecord]
    tail_offset: int
    next_lsn: int
    reason: str


def scan_records(region: Region, line: Superline) -> ScanResult:
    """Walk records from the head; the recovery-time source of truth.

    The walk stops at the first entry that fails validation, which is
    exactly where the next session's tail belongs.  An entry that
    validates but has its live flag cleared was retired out of order;
    its extent still occupies the area, so it is skipped, not a stop.

    Epochs must be non-decreasing along the walk and never exceed the
    superline's: a record whose LSN, CRC and flags all line up can still
    be a leftover from a superseded session, and only its older epoch
    stamp gives it away.
    """
    capacity = region.capacity
    offset = line.head_offset
    expected = line.start_lsn
    floor = 0
    bound = line.epoch & 0xFFFFFFFF
    records: list[ScannedRecord] = []
    wraps = 0
    while True:
        if offset == capacity:
            offset = RECORD_AREA
        raw = region.read(offset, HEADER_SIZE)
        lsn, length, check, flags, epoch = _HEADER.unpack(raw)
        if flags == FLAG_LIVE | FLAG_SKIP:
            if (lsn != expected or check != marker_check(lsn, length, epoch)
                    or not floor <= epoch <= bound):
                return ScanResult(records, offset, expected, "torn-marker")
            if offset == RECORD_AREA or wraps:
                return ScanResult(records, offset, expected, "marker-loop")
            wraps += 1
            floor = epoch
            offset = RECORD_AREA
            continue
        if lsn != expected:
            return ScanResult(records, offset, expected, "lsn-mismatch")
        if not floor <= epoch <= bound:
            return ScanResult(records, offset, expected, "stale-epoch")
        if offset + extent_size(length) > capacity:
            return ScanResult(records, offset, expected, "bad-length")
        payload = region.read(offset + HEADER_SIZE, length)
        if crc32(payload) != check:
            return ScanResult(records, offset, expected, "crc-mismatch")
        if flags & FLAG_LIVE:
            records.append(ScannedRecord(lsn, offset, length))
        floor = epoch
        expected += 1
        offset += extent_size(length)


def iter_payloads(region: Region, line: Superline) -> Iterator[tuple[int, bytes]]:
    for rec in scan_records(region, line).records:
        yield rec.lsn, region.read(rec.offset + HEADER_SIZE, rec.length)


# -- the log -------------------------------------------------------------


@dataclass
class Reservation:
    """Handle for one record from reserve to cleanup."""

    lsn: int
    offset: int
    length: int
    extent: int
    state: str = "reserved"  # reserved | completed | forced | cleaned

    @property
    def payload_offset(self) -> int:
        return self.offset + HEADER_SIZE


class Log:
    """One primary's view of the log.

    ``store`` is the durability backend: it owns the staging region and
    knows how to make byte ranges durable (persist locally, replicate, or
    both).  Reserve and the force leader section are the only serialized
    points; copy and complete run fully concurrently.
    """

    def __init__(self, store, config: LogConfig, *, epoch: int, head: int,
                 start_lsn: int, tail: int, next_lsn: int,
                 recovered: Optional[list] = None, cell_index: int = 0):
        self._store = store
        self.config = config
        self.region: Region = store.region
        self._area = config.capacity - RECORD_AREA
        self._cell = superline_cell(self.region, sink=self._force_one)
        self._cell._index = cell_index
        self._epoch = epoch
        self._head = head
        self._start_lsn = start_lsn
        self._tail = tail if tail != config.capacity else RECORD_AREA
        self._next_lsn = next_lsn
        self._live_bytes = (self._tail - self._head) % self._area
        self._force_cursor = self._tail
        self._reserve_lock = threading.Lock()
        self._force_lock = threading.Lock()
        self._state = threading.Condition()
        self._reservations: dict[int, Reservation] = {}
        self._done_out_of_order: set[int] = set()
        self._completed_upto = next_lsn - 1
        self._max_completed = next_lsn - 1
        self._last_forced = next_lsn - 1
        self._group_lock = threading.Lock()
        self._group_pending = 0
        for rec in recovered or []:
            res = Reservation(rec.lsn, rec.offset, rec.length,
                              extent_size(rec.length), state="forced")
            self._reservations[rec.lsn] = res

    # -- construction ----------------------------------------------------

    @classmethod
    def create(cls, store, config: LogConfig) -> "Log":
        """Initialize fresh media: superline pair forced to quorum.

        The superline area is wiped and a zeroed header lands at the
        area base first, so a recycled region's old superline cannot
        outrank the fresh one and its old records cannot chain onto the
        new, empty log.
        """
        if config.capacity != store.region.capacity:
            raise ValueError("config capacity does not match the region")
        if config.max_record < ALIGN:
            raise ValueError("capacity too small for any record")
        epoch = getattr(store, "generation", None) or 1
        log = cls(store, config, epoch=epoch, head=RECORD_AREA, start_lsn=1,
                  tail=RECORD_AREA, next_lsn=1)
        store.region.store(0, bytes(RECORD_AREA + HEADER_SIZE))
        store.force_ranges([(0, RECORD_AREA + HEADER_SIZE)])
        log._write_superline(Superline(epoch, RECORD_AREA, 1))
        return log

    @classmethod
    def open(cls, store, config: LogConfig) -> "Log":
        """Recover to a consistent state, then rediscover the tail."""
        epoch = store.recover(config)
        found = read_superline(store.region)
        if found is None:
            raise CorruptLog("no valid superline after recovery")
        line, index = found
        scan = scan_records(store.region, line)
        return cls(store, config, epoch=epoch, head=line.head_offset,
                   start_lsn=line.start_lsn, tail=scan.tail_offset,
                   next_lsn=scan.next_lsn, recovered=scan.records,
                   cell_index=index)

    @classmethod
    def create_local(cls, region: Region, config: LogConfig) -> "Log":
        from .replication import solo_set
        return cls.create(solo_set(region), config)

    @classmethod
    def open_local(cls, region: Region, config: LogConfig) -> "Log":
        from .replication import solo_set
        return cls.open(solo_set(region), config)

    # -- inspection ------------------------------------------------------

    @property
    def epoch(self) -> int:
        return self._epoch

    @property
    def head_offset(self) -> int:
        return self._head

    @property
    def start_lsn(self) -> int:
        return self._start_lsn

    @property
    def tail_offset(self) -> int:
        return self._tail

    @property
    def next_lsn(self) -> int:
        return self._next_lsn

    @property
    def last_forced_lsn(self) -> int:
        return self._last_forced

    @property
    def max_completed_lsn(self) -> int:
        return self._max_completed

    @property
    def completed_upto(self) -> int:
        """Highest LSN below which every record is completed."""
        with self._state:
            return self._completed_upto

    def window(self) -> int:
        """Completed records that a crash right now could lose."""
        with self._state:
            return self._max_completed - self._last_forced

    def free_bytes(self) -> int:
        with self._reserve_lock:
            return self._area - ALIGN - self._live_bytes

    def reservation(self, lsn: int) -> Optional[Reservation]:
        return self._reservations.get(lsn)

    def records(self) -> Iterator[tuple[int, bytes]]:
        """Valid records currently on media, in LSN order."""
        return iter_payloads(self.region,
                             Superline(self._epoch, self._head, self._start_lsn))

    # -- write pipeline --------------------------------------------------

    def reserve(self, length: int) -> Reservation:
        """Claim the next LSN and a contiguous extent; never blocks."""
        if length <= 0:
            raise RecordTooLarge("records need at least one byte")
        if length > self.config.max_record:
            raise RecordTooLarge(
                f"{length} bytes exceeds the {self.config.max_record}-byte cap")
        extent = extent_size(length)
        with self._reserve_lock:
            remaining = self.config.capacity - self._tail
            leftover = remaining - extent
            # Extents never split at the wrap.  A marker fills the tail gap
            # whenever the record will not fit, or would leave a gap too
            # small to hold a future marker header.
            marker = remaining if (leftover < 0 or 0 < leftover < HEADER_SIZE) else 0
            needed = extent + marker
            if self._live_bytes + needed > self._area - ALIGN:
                raise LogFull(f"{needed} bytes needed, "
                              f"{self._area - ALIGN - self._live_bytes} free")
            lsn = self._next_lsn
            self._next_lsn += 1
            if marker:
                gap = marker - HEADER_SIZE
                self.region.store(self._tail, pack_header(
                    lsn, gap, marker_check(lsn, gap, self._epoch),
                    FLAG_LIVE | FLAG_SKIP, self._epoch))
                offset = RECORD_AREA
            else:
                offset = self._tail
            new_tail = offset + extent
            self._tail = RECORD_AREA if new_tail == self.config.capacity else new_tail
            self._live_bytes += needed
            res = Reservation(lsn, offset, length, extent)
            self._reservations[lsn] = res
            return res

    def copy(self, res: Reservation, data: bytes, at: int = 0) -> None:
        """Stage payload bytes; chunks may land in any order."""
        if res.state != "reserved":
            raise StateError(f"copy into a {res.state} record")
        if at < 0 or at + len(data) > res.length:
            raise StateError("copy outside the reserved extent")
        self.region.store(res.payload_offset + at, data)

    def complete(self, res: Reservation) -> None:
        """Checksum the payload and stage the record header; no forcing."""
        if res.state != "reserved":
            raise StateError(f"complete on a {res.state} record")
        payload = self.region.read(res.payload_offset, res.length)
        self.region.store(res.offset, pack_header(
            res.lsn, res.length, crc32(payload), FLAG_LIVE, self._epoch))
        with self._state:
            res.state = "completed"
            self._done_out_of_order.add(res.lsn)
            while self._completed_upto + 1 in self._done_out_of_order:
                self._completed_upto += 1
                self._done_out_of_order.remove(self._completed_upto)
            if res.lsn > self._max_completed:
                self._max_completed = res.lsn
            self._state.notify_all()

    def force(self, res: Reservation, freq: int = 1,
              timeout: Optional[float] = None) -> str:
        """Make every record up to this one durable, or defer to a leader.

        With ``freq`` > 1 only LSNs divisible by ``freq`` lead a force; all
        other calls return DEFERRED immediately and rely on a later leader.
        The leader waits (bounded) until every earlier record completes,
        then persists and replicates the whole gap since the last force.
        """
        if res.state == "reserved":
            raise StateError("force before complete")
        if freq > 1 and res.lsn % freq != 0 and res.state == "completed":
            return DEFERRED
        if timeout is None:
            timeout = self.config.force_wait_timeout
        with self._state:
            done = self._state.wait_for(
                lambda: self._completed_upto >= res.lsn, timeout)
            if not done:
                raise ForceTimeout(
                    f"records below {res.lsn} still incomplete after "
                    f"{timeout}s (completed up to {self._completed_upto})")
        with self._force_lock:
            if self._last_forced >= res.lsn:
                return FORCED
            first = self._last_forced + 1
            ranges, cursor = self._ranges(first, res.lsn)
            self._store.force_ranges(ranges)
            # only now: a failed force must retry from the same cursor
            self._force_cursor = cursor
            with self._state:
                for lsn in range(first, res.lsn + 1):
                    covered = self._reservations.get(lsn)
                    if covered is not None and covered.state == "completed":
                        covered.state = "forced"
                self._last_forced = res.lsn
                self._state.notify_all()
        return FORCED

    def append(self, data: bytes) -> Reservation:
        """reserve + copy + complete + force-per-policy, in that order."""
        res = self.reserve(len(data))
        self.copy(res, data)
        self.complete(res)
        policy = self.config.policy
        if isinstance(policy, Frequency):
            self.force(res, policy.freq)
        elif isinstance(policy, GroupCommit):
            with self._group_lock:
                self._group_pending += 1
                lead = self._group_pending >= policy.group_size
                if lead:
                    self._group_pending = 0
            if lead:
                self.force(res, 1)
        else:
            self.force(res, 1)
        return res

    def _ranges(self, first_lsn: int, last_lsn: int):
        """Contiguous byte ranges covering records first..last plus markers.

        Ranges start where the previous force ended, not at the first
        record: when a wrap falls exactly on a force boundary the marker
        bytes belong to no record's extent, and skipping them would leave
        a torn marker on media that recovery reads as the tail.  Returns
        (ranges, cursor); the caller commits the cursor on success.
        """
        start = cursor = self._force_cursor
        ranges = []
        for lsn in range(first_lsn, last_lsn + 1):
            res = self._reservations[lsn]
            if res.offset != cursor:
                # wrapped: marker bytes (if any) run from cursor to the end
                assert res.offset == RECORD_AREA
                ranges.append((start, self.config.capacity - start))
                start = res.offset
            cursor = res.offset + res.extent
        ranges.append((start, cursor - start))
        if cursor == self.config.capacity:
            cursor = RECORD_AREA
        return ranges, cursor

    def _force_one(self, offset: int, length: int) -> None:
        self._store.force_ranges([(offset, length)])

    # -- reclamation -----------------------------------------------------

    def cleanup(self, res: Reservation) -> None:
        """Retire a forced record and reclaim space when the head moves.

        The superline advance is forced before the record's live flag is
        cleared: if the order were reversed, a crash that kept the cleared
        flag but lost the new head would hide every later record from
        recovery.
        """
        if res.state != "forced":
            raise StateError(f"cleanup on a {res.state} record")
        with self._reserve_lock:
            if res.offset == self._head:
                new_head, new_start = self._reclaim_scan(res)
                self._write_superline(
                    Superline(self._epoch, new_head, new_start))
                self._head, self._start_lsn = new_head, new_start
                self._live_bytes = (self._tail - self._head) % self._area
            flags_at = res.offset + FLAGS_OFFSET
            self.region.store(flags_at, b"\x00")
            self._store.force_ranges([(flags_at, 1)])
            res.state = "cleaned"
            self._reservations.pop(res.lsn, None)

    def _reclaim_scan(self, res: Reservation) -> tuple[int, int]:
        """New (head, start_lsn) after dropping the contiguous dead prefix."""
        offset = self._head
        start = self._start_lsn
        while offset != self._tail:
            if offset == self.config.capacity:
                offset = RECORD_AREA
                continue
            raw = self.region.read(offset, HEADER_SIZE)
            lsn, length, _, flags, _ = _HEADER.unpack(raw)
            if flags == FLAG_LIVE | FLAG_SKIP:
                offset = self.config.capacity
                continue
            live = self._reservations.get(lsn)
            if lsn != res.lsn and live is not None and live.state != "cleaned":
                return offset, lsn
            start = lsn + 1
            offset += extent_size(length)
        return (self._tail, self._next_lsn)

    def cleanup_all(self) -> None:
        """Drop every record; the LSN sequence and epoch carry on."""
        with self._reserve_lock:
            with self._state:
                busy = [r.lsn for r in self._reservations.values()
                        if r.state in ("reserved", "completed")]
            if busy:
                raise StateError(f"records {busy} still in flight")
            self._write_superline(
                Superline(self._epoch, RECORD_AREA, self._next_lsn))
            self._head = self._tail = RECORD_AREA
            self._start_lsn = self._next_lsn
            self._live_bytes = 0
            for res in self._reservations.values():
                res.state = "cleaned"
            self._reservations.clear()

    def _write_superline(self, line: Superline) -> None:
        self._cell.write(line.pack())
