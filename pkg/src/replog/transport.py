"""Primary-to-backup transport: one-sided writes with a forced-durability ack.

The one operation that matters is ``write_and_force``: ship bytes to a
backup's region at the same offset they occupy locally, have the backup
persist them, and return only after the durability ack.  One round trip per
force.  A timed-out endpoint closes permanently; reconnecting means a new
connection with a fresh generation, and backups refuse any generation below
their floor, which is how a deposed primary gets fenced.

Two implementations share the message model: an in-process simulated
network with seeded latency, drops and partitions (fully deterministic),
and a TCP version whose frames are {type: u32, offset: u64, length: u32,
payload}, little-endian.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional
from zlib import crc32 as _link_hash

from .log import Superline, read_superline, superline_cell
from .pmem import Region

logger = logging.getLogger(__name__)

DEFAULT_SIM_TIMEOUT_TICKS = 1000
DEFAULT_SOCKET_TIMEOUT = 1.0

STATUS_OK = 0
STATUS_FENCED = 1
STATUS_ERROR = 2


class TransportError(Exception):
    pass


class ReplicaTimeout(TransportError):
    """The backup did not ack in time; the endpoint is now closed."""


class ConnectionClosed(TransportError):
    """The endpoint was already closed (timeout, fence, or explicit)."""


class FencedError(TransportError):
    """The backup refused this connection's generation."""


class NotPrimaryError(TransportError):
    """Membership refused a connection from a non-primary node."""


# -- backup-side message application ------------------------------------


class BackupNode:
    """Backup-side state shared by the sim and socket servers."""

    def __init__(self, node_id: str, region: Region):
        self.node_id = node_id
        self.region = region
        self.alive = True
        self.min_generation = 0
        self._lock = threading.Lock()

    def check_generation(self, generation: int) -> bool:
        return generation >= self.min_generation

    def fence(self, min_generation: int) -> None:
        """Refuse every connection generation below the new floor."""
        with self._lock:
            if min_generation > self.min_generation:
                self.min_generation = min_generation

    def apply_write_and_force(self, offset: int, payload: bytes) -> int:
        with self._lock:
            self.region.store(offset, payload)
            self.region.persist(offset, len(payload))
        return STATUS_OK

    def apply_read(self, offset: int, length: int) -> bytes:
        with self._lock:
            return self.region.read(offset, length)

    def apply_epoch_write(self, epoch: int) -> int:
        """Rewrite this copy's superline with a new epoch, atomically."""
        with self._lock:
            found = read_superline(self.region)
            if found is None:
                return STATUS_ERROR
            line, index = found
            cell = superline_cell(self.region)
            cell._index = index
            cell.write(Superline(epoch, line.head_offset,
                                 line.start_lsn).pack())
        return STATUS_OK


# -- simulated network ---------------------------------------------------


@dataclass
class NetworkConditions:
    """Seeded fault model for the simulated network.

    Latency is one uniform draw per message in ticks; a draw above the
    endpoint's timeout, or a drop, closes the endpoint the way a lost ack
    would.  ``per_link`` overrides the latency range for one (src, dst).
    """

    seed: int = 0
    drop_prob: float = 0.0
    latency: tuple[int, int] = (1, 1)
    per_link: dict = field(default_factory=dict)


class SimEndpoint:
    """Primary-side handle for one backup over the simulated network."""

    def __init__(self, net: "SimNetwork", src: str, dst: str,
                 generation: int, timeout_ticks: int):
        self.net = net
        self.src = src
        self.replica_id = dst
        self.generation = generation
        self.timeout_ticks = timeout_ticks
        self.state = "connected"

    def write_and_force(self, offset: int, payload: bytes) -> None:
        self.net.deliver(self, "write", offset, payload)

    def remote_read(self, offset: int, length: int) -> bytes:
        return self.net.deliver(self, "read", offset, length)

    def epoch_write(self, epoch: int) -> None:
        self.net.deliver(self, "epoch", epoch, None)

    def close(self) -> None:
        self.state = "closed"


class SimNetwork:
    """Deterministic in-process network between one primary and backups.

    Every link gets its own RNG stream derived from the seed and the link
    name, so fault outcomes depend only on the per-link message sequence,
    not on cross-link interleaving.
    """

    def __init__(self, conditions: Optional[NetworkConditions] = None,
                 membership=None):
        self.conditions = conditions or NetworkConditions()
        self.membership = membership
        self.nodes: dict[str, BackupNode] = {}
        self.partitions: set[frozenset] = set()
        self.now = 0
        self._rngs: dict[tuple[str, str], "random.Random"] = {}
        self._lock = threading.Lock()

    def add_node(self, node_id: str, region: Region) -> BackupNode:
        node = BackupNode(node_id, region)
        self.nodes[node_id] = node
        return node

    def node(self, node_id: str) -> BackupNode:
        return self.nodes[node_id]

    def partition(self, a: str, b: str) -> None:
        self.partitions.add(frozenset((a, b)))

    def heal(self, a: str, b: str) -> None:
        self.partitions.discard(frozenset((a, b)))

    def heal_all(self) -> None:
        self.partitions.clear()

    def fence_all(self, min_generation: int) -> None:
        for node in self.nodes.values():
            node.fence(min_generation)

    def connect(self, src: str, dst: str, *, generation: Optional[int] = None,
                timeout_ticks: int = DEFAULT_SIM_TIMEOUT_TICKS) -> SimEndpoint:
        """New connection; a closed endpoint is never resurrected."""
        if self.membership is not None:
            if not self.membership.is_primary(src):
                raise NotPrimaryError(f"{src} is not the primary")
            generation = self.membership.generation
        return SimEndpoint(self, src, dst, generation or 0, timeout_ticks)

    def _link_rng(self, src: str, dst: str):
        import random
        key = (src, dst)
        if key not in self._rngs:
            token = f"{self.conditions.seed}:{src}:{dst}".encode()
            self._rngs[key] = random.Random(_link_hash(token))
        return self._rngs[key]

    def _time_out(self, endpoint: SimEndpoint) -> None:
        endpoint.state = "timed_out"
        raise ReplicaTimeout(
            f"{endpoint.replica_id} unreachable from {endpoint.src}; "
            f"endpoint closed")

    def deliver(self, endpoint: SimEndpoint, kind: str, offset: int, arg):
        with self._lock:
            if endpoint.state != "connected":
                raise ConnectionClosed(
                    f"endpoint to {endpoint.replica_id} is {endpoint.state}")
            node = self.nodes.get(endpoint.replica_id)
            rng = self._link_rng(endpoint.src, endpoint.replica_id)
            reachable = (
                node is not None and node.alive
                and frozenset((endpoint.src, endpoint.replica_id))
                not in self.partitions)
            if not reachable:
                self._time_out(endpoint)
            cond = self.conditions
            if cond.drop_prob and rng.random() < cond.drop_prob:
                self._time_out(endpoint)
            lo, hi = cond.per_link.get(
                (endpoint.src, endpoint.replica_id), cond.latency)
            latency = rng.randint(lo, hi)
            if latency > endpoint.timeout_ticks:
                self._time_out(endpoint)
            self.now += latency
            if not node.check_generation(endpoint.generation):
                endpoint.state = "fenced"
                raise FencedError(
                    f"generation {endpoint.generation} below "
                    f"{node.min_generation} on {node.node_id}")
            if kind == "write":
                node.apply_write_and_force(offset, arg)
            elif kind == "read":
                return node.apply_read(offset, arg)
            elif kind == "epoch":
                status = node.apply_epoch_write(offset)
                if status != STATUS_OK:
                    raise TransportError(
                        f"epoch write refused by {node.node_id}")
            else:
                raise ValueError(kind)


# -- socket transport -----------------------------------------------------

MSG_WRITE_AND_FORCE = 1
MSG_FORCE_ACK = 2
MSG_READ_REQ = 3
MSG_READ_RESP = 4
MSG_EPOCH_WRITE = 5
MSG_EPOCH_ACK = 6
MSG_HELLO = 7
MSG_CTRL_ACK = 8
MSG_FENCE = 9
MSG_SHUTDOWN = 10

_FRAME = struct.Struct("<IQI")  # type, offset, length


def send_frame(sock, kind: int, offset: int, payload: bytes = b"") -> None:
    sock.sendall(_FRAME.pack(kind, offset, len(payload)) + payload)


def recv_frame(sock) -> tuple[int, int, bytes]:
    header = _recv_exact(sock, _FRAME.size)
    kind, offset, length = _FRAME.unpack(header)
    payload = _recv_exact(sock, length) if length else b""
    return kind, offset, payload


def _recv_exact(sock, count: int) -> bytes:
    chunks = []
    while count:
        chunk = sock.recv(count)
        if not chunk:
            raise ConnectionClosed("peer went away mid-frame")
        chunks.append(chunk)
        count -= len(chunk)
    return b"".join(chunks)


class BackupServer:
    """Serves one backup region over TCP, one thread per connection."""

    def __init__(self, region: Region, host: str = "127.0.0.1", port: int = 0,
                 min_generation: int = 0, backing=None):
        self.node = BackupNode("server", region)
        self.node.min_generation = min_generation
        self.backing = backing
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._listener.accept()
                except socket.timeout:
                    continue
                worker = threading.Thread(target=self._serve, args=(conn,),
                                          daemon=True)
                worker.start()
        finally:
            self._listener.close()
            if self.backing is not None:
                self.node.region.save(self.backing)

    def _serve(self, conn) -> None:
        with conn:
            self._serve_connection(conn)

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self) -> None:
        self._stop.set()

    def _serve_connection(self, conn) -> None:
        generation = 0
        while not self._stop.is_set():
            try:
                kind, offset, payload = recv_frame(conn)
            except (ConnectionClosed, OSError):
                return
            if kind == MSG_HELLO:
                generation = offset
                ok = self.node.check_generation(generation)
                send_frame(conn, MSG_CTRL_ACK, offset,
                           bytes([STATUS_OK if ok else STATUS_FENCED]))
                if not ok:
                    return
            elif not self.node.check_generation(generation):
                # fenced between messages: refuse and drop the connection
                ack = {MSG_WRITE_AND_FORCE: MSG_FORCE_ACK,
                       MSG_EPOCH_WRITE: MSG_EPOCH_ACK}.get(kind, MSG_CTRL_ACK)
                send_frame(conn, ack, offset, bytes([STATUS_FENCED]))
                return
            elif kind == MSG_WRITE_AND_FORCE:
                status = self.node.apply_write_and_force(offset, payload)
                send_frame(conn, MSG_FORCE_ACK, offset, bytes([status]))
            elif kind == MSG_READ_REQ:
                (length,) = struct.unpack("<I", payload)
                data = self.node.apply_read(offset, length)
                send_frame(conn, MSG_READ_RESP, offset,
                           bytes([STATUS_OK]) + data)
            elif kind == MSG_EPOCH_WRITE:
                status = self.node.apply_epoch_write(offset)
                send_frame(conn, MSG_EPOCH_ACK, offset, bytes([status]))
            elif kind == MSG_FENCE:
                self.node.fence(offset)
                send_frame(conn, MSG_CTRL_ACK, offset, bytes([STATUS_OK]))
            elif kind == MSG_SHUTDOWN:
                send_frame(conn, MSG_CTRL_ACK, offset, bytes([STATUS_OK]))
                self.shutdown()
                return
            else:
                send_frame(conn, MSG_CTRL_ACK, offset, bytes([STATUS_ERROR]))


class SocketEndpoint:
    """Client side of the TCP transport; mirrors SimEndpoint's contract."""

    def __init__(self, host: str, port: int, *, generation: int = 0,
                 timeout: float = DEFAULT_SOCKET_TIMEOUT,
                 replica_id: Optional[str] = None):
        self.replica_id = replica_id or f"{host}:{port}"
        self.generation = generation
        self.state = "connected"
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(timeout)
        try:
            status = self._roundtrip(MSG_HELLO, generation)[2][0]
        except TransportError:
            raise
        if status != STATUS_OK:
            self.state = "fenced"
            self._sock.close()
            raise FencedError(f"generation {generation} refused by "
                              f"{self.replica_id}")

    def _roundtrip(self, kind: int, offset: int, payload: bytes = b""):
        if self.state != "connected":
            raise ConnectionClosed(f"endpoint is {self.state}")
        try:
            send_frame(self._sock, kind, offset, payload)
            return recv_frame(self._sock)
        except socket.timeout:
            self.state = "timed_out"
            self._sock.close()
            raise ReplicaTimeout(f"{self.replica_id} did not ack in time")
        except OSError as err:
            self.state = "closed"
            self._sock.close()
            raise ConnectionClosed(str(err))

    def _checked(self, kind: int, offset: int, payload: bytes, ack_kind: int):
        got_kind, _, body = self._roundtrip(kind, offset, payload)
        if got_kind != ack_kind:
            self.state = "closed"
            self._sock.close()
            raise TransportError(f"expected ack {ack_kind}, got {got_kind}")
        status = body[0]
        if status == STATUS_FENCED:
            self.state = "fenced"
            self._sock.close()
            raise FencedError(f"fenced by {self.replica_id}")
        if status != STATUS_OK:
            raise TransportError(f"status {status} from {self.replica_id}")
        return body[1:]

    def write_and_force(self, offset: int, payload: bytes) -> None:
        self._checked(MSG_WRITE_AND_FORCE, offset, payload, MSG_FORCE_ACK)

    def remote_read(self, offset: int, length: int) -> bytes:
        body = self._checked(MSG_READ_REQ, offset, struct.pack("<I", length),
                             MSG_READ_RESP)
        return body

    def epoch_write(self, epoch: int) -> None:
        self._checked(MSG_EPOCH_WRITE, epoch, b"", MSG_EPOCH_ACK)

    def fence(self, min_generation: int) -> None:
        self._checked(MSG_FENCE, min_generation, b"", MSG_CTRL_ACK)

    def request_shutdown(self) -> None:
        self._checked(MSG_SHUTDOWN, 0, b"", MSG_CTRL_ACK)

    def close(self) -> None:
        if self.state == "connected":
            self.state = "closed"
            self._sock.close()
