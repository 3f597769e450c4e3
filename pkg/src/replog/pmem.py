"""Emulated persistent memory with explicit crash semantics.

A region keeps two byte images.  ``volatile_image`` is what stores and loads
see immediately; ``persistent_image`` is what survives a crash.  Stores mark
the cache lines they touch dirty, and ``persist`` flushes a byte range from
the volatile image to the persistent one.  A simulated crash resolves every
dirty line to either its fully-old or fully-new content (never a mix inside
one line), which also makes any 8-byte-aligned 8-byte store crash-atomic.

Everything is deterministic: the sequence of operations plus the seeds in
play fully determine both images, so any failure can be replayed exactly.
"""

from __future__ import annotations

import base64
import json
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

CACHE_LINE = 64

# Mask applied to bytes hit by an injected media error.  Flipping every bit
# guarantees the stored value changes, which keeps corruption oracles exact.
MEDIA_ERROR_MASK = 0xFF


class RangeError(ValueError):
    """Access outside the region, or a malformed offset/length pair."""


class CrashPoint(RuntimeError):
    """Raised by an armed region when the configured media event is reached."""

    def __init__(self, event_index: int):
        super().__init__(f"simulated crash at media event {event_index}")
        self.event_index = event_index


@dataclass(frozen=True)
class FaultPlan:
    """Describes how a simulated crash resolves dirty lines.

    ``survival`` maps line index -> bool; lines absent from the map are
    dropped.  When ``survival`` is None, each dirty line survives
    independently with probability ``survival_prob`` drawn from ``seed``.
    ``media_errors`` is a list of (offset, length) byte ranges whose
    persistent content is XOR-corrupted after line resolution.
    """

    seed: int = 0
    survival: Optional[Mapping[int, bool]] = None
    survival_prob: float = 0.0
    media_errors: tuple = ()

    @classmethod
    def drop_all(cls) -> "FaultPlan":
        return cls()

    @classmethod
    def keep_all(cls) -> "FaultPlan":
        return cls(survival_prob=1.0)

    @classmethod
    def random(cls, seed: int, survival_prob: float = 0.5) -> "FaultPlan":
        return cls(seed=seed, survival_prob=survival_prob)

    def survives(self, line: int, rng: random.Random) -> bool:
        if self.survival is not None:
            return bool(self.survival.get(line, False))
        return rng.random() < self.survival_prob


@dataclass(frozen=True)
class MediaEvent:
    """One entry in a region's store/persist event stream."""

    kind: str  # "store" | "persist"
    offset: int
    length: int
    data: bytes = b""


class Region:
    """One emulated persistence domain.

    Concurrent ``store``/``persist``/``read`` calls are safe; callers racing
    on overlapping ranges get some interleaving of whole operations.
    ``simulate_crash`` assumes it has exclusive access.
    """

    def __init__(
        self,
        capacity: int,
        *,
        cache_line_size: int = CACHE_LINE,
        eviction_rate: float = 0.0,
        eviction_seed: int = 0,
    ):
        if capacity <= 0 or capacity % cache_line_size != 0:
            raise ValueError(
                f"capacity {capacity} must be a positive multiple of the "
                f"{cache_line_size}-byte cache line"
            )
        self.capacity = capacity
        self.cache_line_size = cache_line_size
        self._volatile = bytearray(capacity)
        self._persistent = bytearray(capacity)
        self._dirty: set[int] = set()
        self._lock = threading.Lock()
        self._recorder: Optional[list] = None
        self._trace: Optional[list] = None
        self._crash_after: Optional[int] = None
        self.event_count = 0
        self._eviction_rate = eviction_rate
        self._eviction_rng = random.Random(eviction_seed)

    # -- inspection ------------------------------------------------------

    @property
    def volatile_image(self) -> bytes:
        return bytes(self._volatile)

    @property
    def persistent_image(self) -> bytes:
        return bytes(self._persistent)

    @property
    def dirty_lines(self) -> frozenset:
        return frozenset(self._dirty)

    def line_span(self, offset: int, length: int) -> range:
        """Indexes of every cache line overlapping [offset, offset+length)."""
        first = offset // self.cache_line_size
        last = (offset + length - 1) // self.cache_line_size
        return range(first, last + 1)

    def _check(self, offset: int, length: int) -> None:
        if length < 0 or offset < 0 or offset + length > self.capacity:
            raise RangeError(
                f"range [{offset}, {offset + length}) outside region of "
                f"{self.capacity} bytes"
            )

    # -- event plumbing --------------------------------------------------

    def record_to(self, events: Optional[list]) -> None:
        """Append every subsequent store/persist MediaEvent to ``events``."""
        self._recorder = events

    def trace_to(self, events: Optional[list]) -> None:
        """Like record_to but without payload bytes; cheap enough to leave on."""
        self._trace = events

    def arm_crash(self, after_events: int) -> None:
        """Raise CrashPoint on the media event that would follow ``after_events``."""
        self._crash_after = after_events

    def disarm(self) -> None:
        self._crash_after = None

    def _event(self, kind: str, offset: int, length: int, data: bytes) -> None:
        if self._crash_after is not None and self.event_count >= self._crash_after:
            raise CrashPoint(self.event_count)
        self.event_count += 1
        if self._recorder is not None:
            self._recorder.append(MediaEvent(kind, offset, length, data))
        if self._trace is not None:
            self._trace.append((kind, offset, length))

    # -- the memory model ------------------------------------------------

    def store(self, offset: int, data: bytes) -> None:
        """Write bytes to the volatile image and mark their lines dirty.

        Nothing reaches the persistent image until the lines are persisted,
        spontaneously evicted, or kept alive by a lucky crash.
        """
        length = len(data)
        if length == 0:
            return
        self._check(offset, length)
        self._event("store", offset, length, bytes(data))
        with self._lock:
            self._volatile[offset : offset + length] = data
            self._dirty.update(self.line_span(offset, length))
            if self._eviction_rate > 0.0 and self._dirty:
                if self._eviction_rng.random() < self._eviction_rate:
                    victim = self._eviction_rng.choice(sorted(self._dirty))
                    self._persist_lines(victim, victim)

    def read(self, offset: int, length: int) -> bytes:
        self._check(offset, length)
        with self._lock:
            return bytes(self._volatile[offset : offset + length])

    def persist(self, offset: int, length: int) -> None:
        """Flush every line overlapping the range, then order the flush.

        After return the persistent image holds the flushed bytes and they
        can no longer be lost to a crash (until re-dirtied).
        """
        if length == 0:
            return
        self._check(offset, length)
        self._event("persist", offset, length, b"")
        span = self.line_span(offset, length)
        with self._lock:
            self._persist_lines(span.start, span.stop - 1)

    def _persist_lines(self, first: int, last: int) -> None:
        a = first * self.cache_line_size
        b = (last + 1) * self.cache_line_size
        self._persistent[a:b] = self._volatile[a:b]
        self._dirty.difference_update(range(first, last + 1))

    def simulate_crash(self, plan: Optional[FaultPlan] = None) -> "Region":
        """Resolve a crash and return the region a restart would observe.

        Each dirty line independently keeps its new content or reverts to
        the persistent copy, per the plan.  Media errors are then applied to
        the persistent image, and the returned region starts with volatile
        image equal to persistent image and no dirty lines.  ``self`` is
        left untouched so one pre-crash state can be resolved many ways.
        """
        if plan is None:
            plan = FaultPlan()
        rng = random.Random(plan.seed)
        size = self.cache_line_size
        persistent = bytearray(self._persistent)
        for line in sorted(self._dirty):
            if plan.survives(line, rng):
                a = line * size
                persistent[a : a + size] = self._volatile[a : a + size]
        for offset, length in plan.media_errors:
            self._check(offset, length)
            for i in range(offset, offset + length):
                persistent[i] ^= MEDIA_ERROR_MASK
        survivor = Region(self.capacity, cache_line_size=size)
        survivor._persistent = persistent
        survivor._volatile = bytearray(persistent)
        return survivor

    # -- copies and files ------------------------------------------------

    def clone(self) -> "Region":
        """Independent deep copy; event plumbing and eviction state reset."""
        other = Region(self.capacity, cache_line_size=self.cache_line_size)
        other._volatile = bytearray(self._volatile)
        other._persistent = bytearray(self._persistent)
        other._dirty = set(self._dirty)
        return other

    def replay(self, events, upto: Optional[int] = None) -> "Region":
        """Clone this region and re-apply the first ``upto`` recorded events."""
        other = self.clone()
        for event in events[:upto]:
            if event.kind == "store":
                other.store(event.offset, event.data)
            else:
                other.persist(event.offset, event.length)
        return other

    def save(self, path) -> None:
        """Write the region to ``path`` plus a ``.meta`` sidecar.

        The raw file is the little-endian volatile image; the sidecar keeps
        the dirty-line set together with each dirty line's old persistent
        content, so another process can reconstruct both images exactly.
        """
        path = Path(path)
        path.write_bytes(bytes(self._volatile))
        dirty = {}
        size = self.cache_line_size
        for line in sorted(self._dirty):
            a = line * size
            old = bytes(self._persistent[a : a + size])
            dirty[str(line)] = base64.b64encode(old).decode("ascii")
        meta = {
            "capacity": self.capacity,
            "cache_line_size": size,
            "dirty": dirty,
        }
        path.with_suffix(path.suffix + ".meta").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path) -> "Region":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".meta").read_text())
        region = cls(meta["capacity"], cache_line_size=meta["cache_line_size"])
        region._volatile = bytearray(path.read_bytes())
        region._persistent = bytearray(region._volatile)
        size = region.cache_line_size
        for line_str, encoded in meta["dirty"].items():
            line = int(line_str)
            a = line * size
            region._persistent[a : a + size] = base64.b64decode(encoded)
            region._dirty.add(line)
        return region


def enumerate_crash_images(initial: Region, events, max_exhaustive_lines: int = 6,
                           sample_rng: Optional[random.Random] = None,
                           samples_above_cap: int = 16):
    """Yield (event_prefix_len, survival_map, crashed_region) triples.

    Walks every crash point in the event stream.  At each point the dirty
    lines are resolved through every survival subset when there are at most
    ``max_exhaustive_lines`` of them; beyond that, all-drop and all-keep are
    always covered and the rest is sampled.
    """
    for prefix in range(len(events) + 1):
        staged = initial.replay(events, prefix)
        dirty = sorted(staged._dirty)
        n = len(dirty)
        if n <= max_exhaustive_lines:
            masks = range(1 << n)
        else:
            rng = sample_rng or random.Random(prefix)
            masks = {0, (1 << n) - 1}
            while len(masks) < 2 + samples_above_cap:
                masks.add(rng.randrange(1 << n))
            masks = sorted(masks)
        for mask in masks:
            survival = {dirty[i]: bool(mask >> i & 1) for i in range(n)}
            plan = FaultPlan(survival=survival)
            yield prefix, survival, staged.simulate_crash(plan)
