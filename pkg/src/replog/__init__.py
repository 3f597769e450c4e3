"""Replicated append-only log on an emulated persistence domain."""

from .pmem import CACHE_LINE, CrashPoint, FaultPlan, MediaEvent, RangeError, Region
from .primitives import (
    AtomicCell,
    BadData,
    BadHeader,
    CellCorrupt,
    IntegrityError,
    IntegritySlot,
    crc32,
)
from .log import (
    DEFERRED,
    FORCED,
    CorruptLog,
    ForcePolicy,
    ForceTimeout,
    Frequency,
    GroupCommit,
    Log,
    LogConfig,
    LogError,
    LogFull,
    RecordTooLarge,
    Reservation,
    StateError,
    Sync,
    parse_policy,
)
from .replication import (
    DivergedError,
    RecoveryError,
    ReplicaSet,
    ReplicationError,
    solo_set,
)

__version__ = "0.1.0"
