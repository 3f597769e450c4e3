"""Checksummed write-once slots and crash-atomic cells.

Both primitives live on a Region and follow the same discipline: stage all
bytes with plain stores, then make them durable with a single force call.
The force is pluggable (a ``sink``) so the same code path can persist
locally, replicate to backups, or both.
"""

from __future__ import annotations

import struct
import zlib
from typing import Callable, Optional

from .pmem import Region


def crc32(data: bytes) -> int:
    """CRC-32 (polynomial 0x04C11DB7, reflected, init and xorout 0xFFFFFFFF)."""
    return zlib.crc32(data) & 0xFFFFFFFF


class IntegrityError(Exception):
    """A checksummed structure failed validation."""


class BadHeader(IntegrityError):
    """Header check failed; the size field cannot be trusted."""


class BadData(IntegrityError):
    """Header was fine but the payload checksum did not match."""


class CellCorrupt(IntegrityError):
    """No buffer of an atomic cell holds a valid payload."""


Sink = Callable[[int, int], None]


_SLOT_HEADER = struct.Struct("<III")  # size, meta, check
_U32 = struct.Struct("<I")

SLOT_HEADER_SIZE = _SLOT_HEADER.size


class IntegritySlot:
    """Write-once record slot: 12-byte header, payload, 4-byte CRC trailer.

    Header layout is {size: u32, meta: u32, check: u32} packed little-endian.
    ``check`` is either the CRC-32 of the first 8 header bytes or a value the
    caller already knows out of band (a sequence number, say), in which case
    validation costs one compare instead of a checksum.

    A write stages header, payload and trailer with no ordering between
    them, then issues exactly one sink call covering the whole extent.  A
    reader validates the header before trusting the size field and the
    payload CRC before returning bytes, so a torn or corrupted slot surfaces
    as an error, never as wrong data.
    """

    def __init__(self, region: Region, base: int, capacity: int,
                 sink: Optional[Sink] = None):
        if capacity < SLOT_HEADER_SIZE + _U32.size:
            raise ValueError("slot too small for header and trailer")
        self.region = region
        self.base = base
        self.capacity = capacity
        self._sink = sink if sink is not None else region.persist

    @property
    def max_payload(self) -> int:
        return self.capacity - SLOT_HEADER_SIZE - _U32.size

    def write(self, data: bytes, meta: int = 0,
              check: Optional[int] = None) -> None:
        """Stage header + payload + trailer, then force once."""
        size = len(data)
        if size > self.max_payload:
            raise ValueError(f"payload of {size} bytes exceeds slot capacity")
        if check is None:
            check = crc32(struct.pack("<II", size, meta))
        self.region.store(self.base, _SLOT_HEADER.pack(size, meta, check))
        self.region.store(self.base + SLOT_HEADER_SIZE, data)
        self.region.store(self.base + SLOT_HEADER_SIZE + size,
                          _U32.pack(crc32(data)))
        self._sink(self.base, SLOT_HEADER_SIZE + size + _U32.size)

    def read(self, expected_check: Optional[int] = None) -> tuple[bytes, int]:
        """Return (payload, meta); raises BadHeader/BadData on any mismatch."""
        raw = self.region.read(self.base, SLOT_HEADER_SIZE)
        size, meta, check = _SLOT_HEADER.unpack(raw)
        if expected_check is None:
            if check != crc32(raw[:8]):
                raise BadHeader("header checksum mismatch")
        elif check != expected_check:
            raise BadHeader(
                f"header check {check:#x} != expected {expected_check:#x}")
        if size > self.max_payload:
            raise BadHeader(f"size field {size} exceeds slot capacity")
        payload = self.region.read(self.base + SLOT_HEADER_SIZE, size)
        (stored,) = _U32.unpack(
            self.region.read(self.base + SLOT_HEADER_SIZE + size, _U32.size))
        if stored != crc32(payload):
            raise BadData("payload checksum mismatch")
        return payload, meta


class AtomicCell:
    """In-place updatable value built from two checksummed buffers.

    The cell alternates writes between the buffers; a crash at any point
    leaves at least one buffer holding a complete old or new payload.  Which
    buffer is current is volatile by default and re-derived from content on
    recovery via the ``prefer`` rule; with ``persist_index=True`` the index
    is stored in its own cache line and forced after the data, trading an
    extra force per write for rule-free recovery.
    """

    def __init__(self, region: Region, base: int, payload_size: int, *,
                 persist_index: bool = False,
                 prefer: Optional[Callable[[bytes, bytes], int]] = None,
                 sink: Optional[Sink] = None):
        if not persist_index and prefer is None:
            raise ValueError(
                "a volatile-index cell needs a prefer rule to pick between "
                "two valid buffers on recovery")
        self.region = region
        self.base = base
        self.payload_size = payload_size
        line = region.cache_line_size
        stride = payload_size + _U32.size
        self._stride = (stride + line - 1) // line * line
        # The index byte sits on its own line so forcing it can never tear
        # or revert buffer content.
        self._index_offset = base + 2 * self._stride
        self.footprint = 2 * self._stride + line
        self.persist_index = persist_index
        self._prefer = prefer
        self._sink = sink if sink is not None else region.persist
        self._index = 0

    def buffer_offset(self, index: int) -> int:
        return self.base + index * self._stride

    @property
    def index(self) -> int:
        return self._index

    def write(self, data: bytes) -> None:
        """Stage the spare buffer, force it, then flip the index."""
        if len(data) != self.payload_size:
            raise ValueError("cell payloads are fixed-size")
        target = 1 - self._index
        off = self.buffer_offset(target)
        self.region.store(off, data)
        self.region.store(off + self.payload_size, _U32.pack(crc32(data)))
        self._sink(off, self.payload_size + _U32.size)
        self._index = target
        if self.persist_index:
            self.region.store(self._index_offset, bytes([target]))
            self._sink(self._index_offset, 1)

    def read(self) -> bytes:
        payload = self._buffer_payload(self._index)
        if payload is None:
            raise CellCorrupt(f"buffer {self._index} failed validation")
        return payload

    def _buffer_payload(self, index: int) -> Optional[bytes]:
        off = self.buffer_offset(index)
        payload = self.region.read(off, self.payload_size)
        (stored,) = _U32.unpack(
            self.region.read(off + self.payload_size, _U32.size))
        if stored != crc32(payload):
            return None
        return payload

    def recover_index(self) -> int:
        """Re-derive which buffer is current after reopening the region."""
        if self.persist_index:
            stored = self.region.read(self._index_offset, 1)[0] & 1
            if self._buffer_payload(stored) is None:
                raise CellCorrupt("indexed buffer failed validation")
            self._index = stored
            return stored
        first = self._buffer_payload(0)
        second = self._buffer_payload(1)
        if first is None and second is None:
            raise CellCorrupt("both buffers failed validation")
        if second is None:
            self._index = 0
        elif first is None:
            self._index = 1
        else:
            self._index = self._prefer(first, second) & 1
        return self._index
