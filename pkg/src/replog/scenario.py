"""Scripted and fuzzed cluster runs on the simulated network.

A cluster is a handful of named machines, each owning one region.  The
elected primary opens the log with its own region as the local copy and
endpoints to every other machine.  Scenario files (TOML) drive the
cluster through elections, appends, crashes, partitions and explicit
expectations; the fuzzer drives it through seeded random schedules and
checks the durability contract after every recovery:

* recovered records form a gapless LSN range,
* every record acked to a client is in it,
* every payload matches what was written,
* no two copies ever hold different payloads for one LSN.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .log import RECORD_AREA, Log, LogConfig, parse_policy, read_superline
from .pmem import FaultPlan, Region
from .replication import (
    DivergedError,
    LOCAL,
    MembershipStub,
    QuorumError,
    RecoveryError,
    ReplicaSet,
    ReplicationError,
)
from .transport import NetworkConditions, SimNetwork, TransportError

logger = logging.getLogger(__name__)


class ScenarioError(Exception):
    """A scripted expectation failed or an event was malformed."""


class RecoveryCrash(Exception):
    """Raised by an installed fault hook: the recoverer died mid-repair."""


@dataclass
class ScenarioResult:
    name: str
    steps: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def note(self, text: str) -> None:
        self.steps.append(text)

    def fail(self, text: str) -> None:
        self.failures.append(text)
        self.steps.append("FAIL " + text)


class SimCluster:
    """Named machines, one elected primary, scripted faults."""

    def __init__(self, nodes, capacity: int = 1 << 16, write_quorum: int = 2,
                 policy: str = "sync", seed: int = 0,
                 conditions: Optional[NetworkConditions] = None,
                 force_wait_timeout: float = 1.0):
        if len(nodes) < 2:
            raise ValueError("a cluster needs at least two machines")
        self.names = list(nodes)
        self.capacity = capacity
        self.seed = seed
        self.membership = MembershipStub()
        self.net = SimNetwork(conditions or NetworkConditions(seed=seed),
                              membership=self.membership)
        for name in self.names:
            self.net.add_node(name, Region(capacity))
        self.config = LogConfig(
            capacity, mode="local_remote", replicas=len(self.names),
            write_quorum=write_quorum, policy=parse_policy(policy),
            force_wait_timeout=force_wait_timeout)
        self.log: Optional[Log] = None
        self.rset: Optional[ReplicaSet] = None

    # -- machinery -------------------------------------------------------

    def region(self, name: str) -> Region:
        return self.net.node(name).region

    @property
    def primary(self) -> Optional[str]:
        return self.membership.primary

    def elect(self, name: str) -> int:
        """Choose a primary and fence every older generation."""
        if name not in self.names:
            raise ScenarioError(f"unknown machine {name!r}")
        generation = self.membership.elect(name)
        self.net.fence_all(generation)
        self.log = None
        return generation

    def _build_set(self) -> ReplicaSet:
        primary = self.primary
        if primary is None:
            raise ScenarioError("no primary elected")
        remotes = [self.net.connect(primary, other)
                   for other in self.names if other != primary]
        return ReplicaSet(self.region(primary), remotes, self.config,
                          generation=self.membership.generation)

    def create_log(self) -> Log:
        self.rset = self._build_set()
        self.log = Log.create(self.rset, self.config)
        return self.log

    def open_log(self, fault_hook=None) -> Log:
        """Fail-over entry: recover on the current primary."""
        self.rset = self._build_set()
        self.rset.fault_hook = fault_hook
        try:
            self.log = Log.open(self.rset, self.config)
        finally:
            self.rset.fault_hook = None
        return self.log

    def append(self, payload: bytes):
        if self.log is None:
            raise ScenarioError("no open log")
        return self.log.append(payload)

    def crash_machine(self, name: str, seed: int) -> None:
        """Power-fail one machine: volatile state resolves per the plan."""
        node = self.net.node(name)
        node.alive = False
        node.region = node.region.simulate_crash(FaultPlan.random(seed))
        if name == self.primary:
            self.log = None

    def restart_machine(self, name: str) -> None:
        self.net.node(name).alive = True

    def partition(self, a: str, b: str) -> None:
        self.net.partition(a, b)

    def heal(self, a: Optional[str] = None, b: Optional[str] = None) -> None:
        if a is None:
            self.net.heal_all()
        else:
            self.net.heal(a, b)


# -- scripted scenarios ---------------------------------------------------


def load_scenario(path: str) -> tuple[dict, list[dict]]:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    cluster = doc.get("cluster", {})
    events = doc.get("event", [])
    if not events:
        raise ScenarioError(f"{path} has no [[event]] entries")
    return cluster, events


def run_scenario(path: str, name: Optional[str] = None) -> ScenarioResult:
    cluster_kw, events = load_scenario(path)
    conditions = None
    if "drop_prob" in cluster_kw or "latency" in cluster_kw:
        conditions = NetworkConditions(
            seed=cluster_kw.get("seed", 0),
            drop_prob=cluster_kw.pop("drop_prob", 0.0),
            latency=tuple(cluster_kw.pop("latency", (1, 1))))
    cluster = SimCluster(conditions=conditions, **cluster_kw)
    result = ScenarioResult(name or path)
    for index, event in enumerate(events):
        op = event.get("op")
        try:
            _run_event(cluster, dict(event), result)
        except ScenarioError as err:
            result.fail(f"event {index} ({op}): {err}")
            break
        except Exception as err:  # unexpected: surface, keep the trail
            result.fail(f"event {index} ({op}): {type(err).__name__}: {err}")
            break
    return result


def _run_event(cluster: SimCluster, event: dict, result: ScenarioResult):
    op = event.pop("op")
    expect_error = event.pop("expect_error", None)
    try:
        outcome = _dispatch(cluster, op, event, result)
    except (ReplicationError, TransportError) as err:
        kind = type(err).__name__
        if expect_error and expect_error in kind:
            result.note(f"{op}: failed with {kind} as expected")
            return
        raise ScenarioError(f"unexpected {kind}: {err}")
    if expect_error:
        raise ScenarioError(
            f"expected {expect_error}, but {op} succeeded")
    if outcome:
        result.note(outcome)


def _dispatch(cluster: SimCluster, op: str, event: dict,
              result: ScenarioResult) -> str:
    if op == "elect":
        generation = cluster.elect(event["node"])
        return f"elected {event['node']} at generation {generation}"
    if op == "create":
        cluster.create_log()
        return f"created log on {cluster.primary}"
    if op == "open":
        log = cluster.open_log()
        return (f"opened on {cluster.primary}: epoch {log.epoch}, "
                f"{sum(1 for _ in log.records())} records")
    if op == "append":
        data = event["data"].encode()
        for i in range(event.get("repeat", 1)):
            res = cluster.append(data)
        return f"appended through lsn {res.lsn}"
    if op == "cleanup":
        log = cluster.log
        upto = event["upto"]
        while log.start_lsn <= upto:
            res = log.reservation(log.start_lsn)
            if res is None:
                break
            log.cleanup(res)
        return f"cleaned up through lsn {upto}"
    if op == "crash_machine":
        cluster.crash_machine(event["node"], event.get("seed", 0))
        return f"crashed {event['node']}"
    if op == "restart_machine":
        cluster.restart_machine(event["node"])
        return f"restarted {event['node']}"
    if op == "partition":
        cluster.partition(event["a"], event["b"])
        return f"partitioned {event['a']} | {event['b']}"
    if op == "heal":
        cluster.heal(event.get("a"), event.get("b"))
        return "healed"
    if op == "expect_records":
        return _expect_records(cluster, event)
    if op == "expect_epoch":
        got = cluster.log.epoch if cluster.log else None
        if got != event["value"]:
            raise ScenarioError(f"epoch {got}, expected {event['value']}")
        return f"epoch is {got}"
    if op == "expect_copies_identical":
        return _expect_copies_identical(cluster, event)
    raise ScenarioError(f"unknown op {op!r}")


def _expect_records(cluster: SimCluster, event: dict) -> str:
    if cluster.log is None:
        raise ScenarioError("no open log to inspect")
    got = list(cluster.log.records())
    if "count" in event and len(got) != event["count"]:
        raise ScenarioError(f"{len(got)} records, expected {event['count']}")
    if "lsns" in event and [l for l, _ in got] != list(event["lsns"]):
        raise ScenarioError(
            f"lsns {[l for l, _ in got]}, expected {event['lsns']}")
    if "data" in event:
        want = [d.encode() for d in event["data"]]
        if [d for _, d in got] != want:
            raise ScenarioError("payloads differ from expectation")
    return f"records as expected ({len(got)})"


def _expect_copies_identical(cluster: SimCluster, event: dict) -> str:
    log = cluster.log
    if log is None:
        raise ScenarioError("no open log to compare against")
    names = event.get("nodes", cluster.names)
    head, tail = log.head_offset, log.tail_offset
    spans = [(head, (tail if tail >= head else cluster.capacity) - head)]
    if tail < head:
        spans.append((RECORD_AREA, tail - RECORD_AREA))
    base = None
    for name in names:
        region = cluster.region(name)
        image = b"".join(region.read(off, n) for off, n in spans if n)
        if base is None:
            base = (name, image)
        elif image != base[1]:
            raise ScenarioError(f"{name} differs from {base[0]}")
    return f"{len(names)} copies byte-identical over the live span"


# -- schedule fuzzing ------------------------------------------------------


@dataclass
class FuzzReport:
    seed: int
    ops: int = 0
    appends: int = 0
    acked: int = 0
    recoveries: int = 0
    recovery_crashes: int = 0
    machine_crashes: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def fuzz_schedule(seed: int, machines: int = 3, write_quorum: Optional[int] = None,
                  steps: int = 40, capacity: int = 1 << 15,
                  drop_prob: float = 0.08,
                  recovery_crash_prob: float = 0.25) -> FuzzReport:
    """Drive one seeded random schedule and check the contract throughout.

    Unacked records may come or go; acked ones must survive every
    recovery, in order, with their exact payloads, and repaired copies
    must agree byte for byte.
    """
    rng = random.Random(seed)
    names = [f"m{i}" for i in range(machines)]
    quorum = write_quorum if write_quorum is not None else machines - 1
    cluster = SimCluster(
        names, capacity=capacity, write_quorum=quorum, seed=seed,
        conditions=NetworkConditions(seed=seed))
    report = FuzzReport(seed)
    written: dict[int, bytes] = {}
    committed: dict[int, bytes] = {}
    attempts = 0
    stuck = 0

    # bootstrap on a calm network, then let the weather in
    cluster.elect(names[0])
    cluster.create_log()
    cluster.net.conditions.drop_prob = drop_prob

    def payload(lsn: int) -> bytes:
        # the attempt counter keeps two writes of one LSN distinguishable,
        # so a superseded attempt resurfacing is caught as a phantom
        return f"s{seed}-l{lsn}-a{attempts}".encode() * (1 + lsn % 4)

    def verify_recovered(log: Log) -> None:
        got = dict(log.records())
        lsns = sorted(got)
        if lsns != list(range(log.start_lsn, log.start_lsn + len(lsns))):
            report.violations.append(f"recovered lsns not contiguous: {lsns}")
            return
        for lsn, data in committed.items():
            if lsn not in got:
                report.violations.append(f"acked lsn {lsn} lost")
            elif got[lsn] != data:
                report.violations.append(f"acked lsn {lsn} corrupted")
        for lsn in lsns:
            if lsn in committed:
                continue
            if lsn not in written or got[lsn] != written[lsn]:
                report.violations.append(f"phantom record at lsn {lsn}")
            else:
                committed[lsn] = got[lsn]  # repaired onto a quorum
        for lsn in list(written):
            if lsn >= log.next_lsn:
                del written[lsn]  # the slot will be rewritten

    def verify_copies_agree() -> None:
        # every copy the recovery rewrote must now read back the same
        # live span and superline; anything less and a later fail-over
        # could pick a different history
        log = cluster.log
        repaired = sorted({cluster.primary if n == LOCAL else n
                           for n in cluster.rset.last_repaired})
        head, tail = log.head_offset, log.tail_offset
        spans = [(head, (tail if tail >= head else capacity) - head)]
        if tail < head:
            spans.append((RECORD_AREA, tail - RECORD_AREA))
        base = None
        for name in repaired:
            region = cluster.region(name)
            found = read_superline(region)
            if found is None or found[0].epoch != log.epoch:
                report.violations.append(f"{name} superline not repaired")
                return
            image = b"".join(region.read(off, n) for off, n in spans if n)
            if base is None:
                base = (name, image)
            elif image != base[1]:
                report.violations.append(
                    f"repaired copies diverge: {name} vs {base[0]}")
                return

    def fail_over() -> None:
        nonlocal stuck
        target = rng.choice(names)
        cluster.elect(target)
        # usually bring only some machines back; after repeated failed
        # attempts restore everything so the schedule cannot stall
        for name in names:
            if stuck >= 2 or rng.random() < 0.75:
                cluster.restart_machine(name)
        if stuck >= 2 or rng.random() < 0.85:
            cluster.heal()
        hook = None
        if rng.random() < recovery_crash_prob:
            crash_at = rng.randint(1, machines)
            seen = []

            def hook(stage, name):
                seen.append((stage, name))
                if len(seen) == crash_at:
                    raise RecoveryCrash(f"{stage} on {name}")

        try:
            cluster.open_log(fault_hook=hook)
            report.recoveries += 1
            stuck = 0
            verify_recovered(cluster.log)
            verify_copies_agree()
        except RecoveryCrash:
            report.recovery_crashes += 1
            stuck += 1
        except DivergedError as err:
            report.violations.append(f"divergence: {err}")
        except RecoveryError:
            stuck += 1  # not enough copies up; a later election retries

    for _ in range(steps):
        report.ops += 1
        roll = rng.random()
        if cluster.log is None:
            fail_over()
            continue
        if roll < 0.55:
            report.appends += 1
            attempts += 1
            lsn = cluster.log.next_lsn
            written[lsn] = payload(lsn)
            try:
                res = cluster.append(written[lsn])
                committed[res.lsn] = written[res.lsn]
                report.acked += 1
            except (ReplicationError, TransportError):
                pass  # unacked; may or may not survive
        elif roll < 0.7:
            victim = rng.choice(names)
            report.machine_crashes += 1
            cluster.crash_machine(victim, rng.getrandbits(32))
            if rng.random() < 0.8:
                cluster.restart_machine(victim)
        elif roll < 0.8:
            a, b = rng.sample(names, 2)
            cluster.partition(a, b)
            if rng.random() < 0.7:
                cluster.heal(a, b)
        else:
            fail_over()

    # settle: everything up on a calm network; one final recovery must
    # see every ack
    for name in names:
        cluster.restart_machine(name)
    cluster.heal()
    cluster.net.conditions.drop_prob = 0.0
    cluster.elect(rng.choice(names))
    try:
        cluster.open_log()
        report.recoveries += 1
        verify_recovered(cluster.log)
        verify_copies_agree()
    except RecoveryError as err:
        report.violations.append(f"final recovery failed: {err}")
    except DivergedError as err:
        report.violations.append(f"divergence: {err}")
    return report
