"""Trial machinery: seeded crash tests, window sampling, policy benches.

Crash trials interleave several logical writers through one scheduler so
a whole campaign is a pure function of its seed.  Each trial runs its
workload twice: the first pass counts media events, the second arms a
crash at a seeded event index, resolves the dirty lines through a seeded
fault plan, recovers, and checks the durability contract:

* recovered records are a gapless prefix of what was written,
* every record whose force returned forced is present and intact,
* nothing recovered differs from what the writer staged,
* completed-but-lost records stay within the policy's window bound.
"""

from __future__ import annotations

import csv
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .log import (
    FORCED,
    Frequency,
    GroupCommit,
    Log,
    LogConfig,
    LogFull,
    ForcePolicy,
    Sync,
)
from .pmem import CrashPoint, FaultPlan, Region

_FORCE_WAIT_LIMIT = 10_000  # scheduler steps before a leader gives up


@dataclass
class TrialReport:
    """One crash trial, condensed to what the verdict needs."""

    seed: int
    writers: int
    freq: int
    crash_event: int
    forced_lsn: int
    completed: int
    recovered_tail: int
    lost_completed: int
    bound: int
    passed: bool
    violation: str = ""


@dataclass
class WindowSummary:
    freq: int
    threads: int
    bound: int
    samples: int
    max_window: int
    below_half: float  # fraction of samples under bound / 2


@dataclass
class BenchResult:
    policy: str
    threads: int
    record_size: int
    ops: int
    seconds: float
    ops_per_sec: float
    p50_us: float
    p95_us: float
    p99_us: float


@dataclass
class _Truth:
    """What the writers know they did, frozen at the crash."""

    written: dict = field(default_factory=dict)
    completed: set = field(default_factory=set)
    forced: int = 0


def _payload(seed: int, lsn: int, size: int) -> bytes:
    return random.Random(seed * 1_000_003 + lsn).randbytes(size)


def _interleave(writers, rng: random.Random,
                on_step: Optional[Callable[[int], None]] = None) -> None:
    """Advance a random runnable writer per step until all are done."""
    live = list(writers)
    tick = 0
    while live:
        gen = live[rng.randrange(len(live))]
        try:
            next(gen)
        except StopIteration:
            live.remove(gen)
        tick += 1
        if on_step is not None:
            on_step(tick)


def _pipeline_writer(log: Log, sizes, seed: int, freq: int,
                     rng: random.Random, truth: _Truth,
                     on_op_end: Optional[Callable[[], None]] = None):
    """One logical writer: the four-step pipeline with chunked copies."""
    for size in sizes:
        try:
            res = log.reserve(size)
        except LogFull:
            return
        data = _payload(seed, res.lsn, size)
        truth.written[res.lsn] = data
        yield
        cuts = sorted({0, size, *rng.sample(range(size), rng.randrange(3))})
        pieces = [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]
        rng.shuffle(pieces)
        for lo, hi in pieces:
            log.copy(res, data[lo:hi], at=lo)
            yield
        log.complete(res)
        truth.completed.add(res.lsn)
        yield
        if res.lsn % freq == 0:
            # a leader must not enter the blocking wait while earlier
            # records sit unfinished with no thread of their own
            for _ in range(_FORCE_WAIT_LIMIT):
                if log.completed_upto >= res.lsn:
                    break
                yield
            if log.completed_upto >= res.lsn:
                if log.force(res, freq) == FORCED:
                    truth.forced = max(truth.forced, res.lsn)
        if on_op_end is not None:
            on_op_end()
        yield


def _run_workload(capacity: int, policy: ForcePolicy, jobs, seed: int,
                  freq: int) -> Region:
    """Create a log and run the interleaved writers to completion."""
    region = Region(capacity)
    log = Log.create_local(region, LogConfig(capacity, policy=policy))
    truth = _Truth()
    rng = random.Random(f"{seed}:sched")
    writers = [_pipeline_writer(log, sizes, seed, freq, rng, truth)
               for sizes in jobs]
    _interleave(writers, rng)
    return region


def run_crash_trial(seed: int, capacity: int = 1 << 17,
                    writers: Optional[int] = None,
                    freq: Optional[int] = None,
                    records: Optional[int] = None,
                    size_range: tuple[int, int] = (64, 4096)) -> TrialReport:
    """One seeded crash trial; every parameter defaults to a seeded draw."""
    wl = random.Random(f"{seed}:workload")
    env = random.Random(f"{seed}:crash")
    if writers is None:
        writers = wl.randint(1, 16)
    if freq is None:
        freq = 1 if wl.random() < 0.5 else wl.choice((2, 4, 8, 16))
    if records is None:
        records = wl.randint(2, 12)
    sizes = [wl.randint(*size_range) for _ in range(records)]
    jobs = [sizes[i::writers] for i in range(writers)]
    policy = Sync() if freq == 1 else Frequency(freq, max_threads=writers)
    bound = freq * writers

    # pass 1: count the media events this exact schedule generates, so
    # the crash point can be drawn uniformly over the workload's own
    # events rather than create's
    base = _creation_events(capacity, policy)
    total = _run_workload(capacity, policy, jobs, seed, freq).event_count
    if total <= base:
        return TrialReport(seed, writers, freq, -1, 0, 0, 0, 0, bound, True)

    crash_at = env.randint(base, total - 1)
    return _finish_trial(seed, capacity, policy, jobs, freq, writers,
                         crash_at, bound, env)


def _creation_events(capacity: int, policy: ForcePolicy) -> int:
    region = Region(capacity)
    Log.create_local(region, LogConfig(capacity, policy=policy))
    return region.event_count


def _finish_trial(seed, capacity, policy, jobs, freq, writers, crash_at,
                  bound, env: random.Random) -> TrialReport:
    region = Region(capacity)
    config = LogConfig(capacity, policy=policy)
    log = Log.create_local(region, config)
    region.arm_crash(crash_at)
    truth = _Truth()
    rng = random.Random(f"{seed}:sched")
    gens = [_pipeline_writer(log, sizes, seed, freq, rng, truth)
            for sizes in jobs]
    try:
        _interleave(gens, rng)
        raise AssertionError("armed crash never fired")
    except CrashPoint:
        region.disarm()

    plan = FaultPlan.random(env.getrandbits(32),
                            survival_prob=env.choice((0.0, 0.3, 0.5, 0.8, 1.0)))
    crashed = region.simulate_crash(plan)
    recovered = dict(Log.open_local(crashed, config).records())
    return _verdict(seed, writers, freq, crash_at, bound, truth, recovered)


def _verdict(seed, writers, freq, crash_at, bound, truth: _Truth,
             recovered: dict) -> TrialReport:
    lsns = sorted(recovered)
    tail = lsns[-1] if lsns else 0
    lost = sum(1 for lsn in truth.completed if lsn not in recovered)
    report = TrialReport(seed, writers, freq, crash_at, truth.forced,
                         len(truth.completed), tail, lost, bound, True)

    def fail(text: str) -> TrialReport:
        report.passed = False
        report.violation = text
        return report

    if lsns != list(range(1, len(lsns) + 1)):
        return fail(f"recovered lsns not a prefix: {lsns}")
    if tail < truth.forced:
        return fail(f"forced through {truth.forced} but recovered {tail}")
    for lsn, data in recovered.items():
        if truth.written.get(lsn) != data:
            return fail(f"recovered lsn {lsn} differs from what was staged")
    if lost > bound:
        return fail(f"lost {lost} completed records, bound {bound}")
    return report


def crash_campaign(trials: int, seed: int = 0, **overrides) -> list[TrialReport]:
    return [run_crash_trial(seed + i, **overrides) for i in range(trials)]


# -- vulnerability windows -------------------------------------------------


def window_trial(freq: int, threads: int, total_records: int, seed: int = 0,
                 capacity: int = 1 << 19,
                 size_range: tuple[int, int] = (64, 512)):
    """Sample window sizes over one interleaved run; returns (samples, summary).

    The bound is checked against every scheduler step, the harshest
    probe there is; the distribution is taken per finished append, which
    is what a sampler polling at operation granularity would see.
    """
    from .log import RECORD_AREA, extent_size

    wl = random.Random(f"{seed}:window")
    sizes = [wl.randint(*size_range) for _ in range(total_records)]
    jobs = [sizes[i::threads] for i in range(threads)]
    policy = Frequency(freq, max_threads=threads)
    need = 2 * RECORD_AREA + total_records * extent_size(size_range[1])
    capacity = max(capacity, 1 << (need - 1).bit_length())
    region = Region(capacity)
    config = LogConfig(capacity, policy=policy)
    log = Log.create_local(region, config)
    truth = _Truth()
    rng = random.Random(f"{seed}:sched")
    samples: list[tuple[int, int]] = []
    step_max = 0
    tick = 0

    def on_op_end() -> None:
        samples.append((tick, log.window()))

    writers = [_pipeline_writer(log, s, seed, freq, rng, truth, on_op_end)
               for s in jobs]

    def on_step(t: int) -> None:
        nonlocal tick, step_max
        tick = t
        step_max = max(step_max, log.window())

    _interleave(writers, rng, on_step=on_step)
    bound = policy.window_bound(threads)
    windows = [w for _, w in samples]
    below = sum(1 for w in windows if w < bound / 2)
    summary = WindowSummary(freq, threads, bound, len(windows),
                            max(step_max, max(windows, default=0)),
                            below / len(windows) if windows else 1.0)
    return samples, summary


# -- steady-state media tracing -------------------------------------------


def superline_writes_during_appends(appends: int, seed: int = 0,
                                    capacity: int = 1 << 20,
                                    record_size: int = 64) -> int:
    """Count media writes that touch the superline area while appending."""
    from .log import RECORD_AREA

    region = Region(capacity)
    log = Log.create_local(region, LogConfig(capacity))
    trace: list = []
    region.trace_to(trace)
    data = bytes(record_size)
    for _ in range(appends):
        log.append(data)
    region.trace_to(None)
    return sum(1 for kind, offset, length in trace
               if kind == "store" and offset < RECORD_AREA)


# -- append / four-step equivalence ---------------------------------------


def image_equivalence(seed: int, capacity: int = 1 << 16) -> tuple[bool, str]:
    """Run one workload via append and via the four explicit steps.

    Returns (identical, detail).  Both logs see the same byte stream and
    the same force pattern, so the persistent images must match exactly.
    """
    rng = random.Random(f"{seed}:equiv")
    freq = rng.choice((1, 1, 2, 4, 8))
    policy = Sync() if freq == 1 else Frequency(freq)
    count = rng.randint(1, 20)
    sizes = [rng.randint(1, 1500) for _ in range(count)]
    payloads = [_payload(seed, i + 1, s) for i, s in enumerate(sizes)]

    region_a = Region(capacity)
    log_a = Log.create_local(region_a, LogConfig(capacity, policy=policy))
    for data in payloads:
        log_a.append(data)

    region_b = Region(capacity)
    log_b = Log.create_local(region_b, LogConfig(capacity, policy=policy))
    for data in payloads:
        res = log_b.reserve(len(data))
        split = rng.randrange(len(data) + 1)
        log_b.copy(res, data[split:], at=split)
        log_b.copy(res, data[:split])
        log_b.complete(res)
        log_b.force(res, freq)

    if region_a.persistent_image != region_b.persistent_image:
        return False, f"persistent images differ (seed {seed})"
    if region_a.volatile_image != region_b.volatile_image:
        return False, f"volatile images differ (seed {seed})"
    return True, ""


# -- force-policy bench ----------------------------------------------------


def bench_policy(policy: ForcePolicy, threads: int, record_size: int,
                 ops_per_thread: int, capacity: int = 1 << 23) -> BenchResult:
    """Timed append loop on real threads; wall-clock, not deterministic."""
    from .log import RECORD_AREA, extent_size

    need = 2 * RECORD_AREA + threads * ops_per_thread * extent_size(record_size)
    capacity = max(capacity, 1 << (need - 1).bit_length())
    region = Region(capacity)
    log = Log.create_local(region, LogConfig(capacity, policy=policy))
    data = bytes(record_size)
    lat: list[list[float]] = [[] for _ in range(threads)]
    errors: list[BaseException] = []

    def worker(idx: int) -> None:
        times = lat[idx]
        try:
            for _ in range(ops_per_thread):
                t0 = time.perf_counter()
                log.append(data)
                times.append(time.perf_counter() - t0)
        except BaseException as exc:
            errors.append(exc)

    pool = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
    t0 = time.perf_counter()
    for t in pool:
        t.start()
    for t in pool:
        t.join()
    wall = time.perf_counter() - t0
    if errors:
        raise errors[0]
    last = log.reservation(log.max_completed_lsn)
    if last is not None and last.state == "completed":
        log.force(last, 1)

    every = sorted(x for per in lat for x in per)
    ops = len(every)

    def pct(p: float) -> float:
        return every[min(ops - 1, int(p * ops))] * 1e6 if every else 0.0

    return BenchResult(_policy_name(policy), threads, record_size, ops, wall,
                       ops / wall if wall else 0.0,
                       pct(0.50), pct(0.95), pct(0.99))


def _policy_name(policy: ForcePolicy) -> str:
    if isinstance(policy, Sync):
        return "sync"
    if isinstance(policy, GroupCommit):
        return f"group:{policy.group_size}"
    return f"freq:{policy.freq}"


# -- CSV output ------------------------------------------------------------

TRIAL_FIELDS = ["seed", "writers", "freq", "crash_event", "forced_lsn",
                "completed", "recovered_tail", "lost_completed", "bound",
                "passed", "violation"]
WINDOW_FIELDS = ["tick", "window"]
BENCH_FIELDS = ["policy", "threads", "record_size", "ops", "seconds",
                "ops_per_sec", "p50_us", "p95_us", "p99_us"]


def write_csv(path: str, fields: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            if not isinstance(row, tuple):
                row = tuple(getattr(row, f) for f in fields)
            writer.writerow(row)
