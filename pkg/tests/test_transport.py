"""Simulated and TCP transports: acks, timeouts, fencing, framing."""

import io
import struct
import subprocess
import sys

import pytest

from replog.log import Log, LogConfig, Superline, read_superline
from replog.pmem import Region
from replog.transport import (
    MSG_FORCE_ACK,
    MSG_HELLO,
    MSG_WRITE_AND_FORCE,
    BackupServer,
    ConnectionClosed,
    FencedError,
    NetworkConditions,
    NotPrimaryError,
    ReplicaTimeout,
    SimNetwork,
    SocketEndpoint,
    recv_frame,
    send_frame,
)
from replog.replication import MembershipStub

CAP = 4096


class TestSimNetwork:
    def test_write_lands_durably_on_ack(self):
        net = SimNetwork()
        node = net.add_node("b", Region(CAP))
        ep = net.connect("p", "b")
        ep.write_and_force(256, b"hello")
        # the ack already implies persistence, not just arrival
        assert bytes(node.region.persistent_image[256:261]) == b"hello"

    def test_remote_read(self):
        net = SimNetwork()
        node = net.add_node("b", Region(CAP))
        node.region.store(100, b"fetchme")
        ep = net.connect("p", "b")
        assert ep.remote_read(100, 7) == b"fetchme"

    def test_dead_node_times_out_and_closes(self):
        net = SimNetwork()
        node = net.add_node("b", Region(CAP))
        ep = net.connect("p", "b")
        node.alive = False
        with pytest.raises(ReplicaTimeout):
            ep.write_and_force(256, b"x")
        assert ep.state == "timed_out"
        # no resurrection: the node coming back does not reopen the endpoint
        node.alive = True
        with pytest.raises(ConnectionClosed):
            ep.write_and_force(256, b"x")

    def test_partition_behaves_like_timeout(self):
        net = SimNetwork()
        net.add_node("b", Region(CAP))
        ep = net.connect("p", "b")
        net.partition("p", "b")
        with pytest.raises(ReplicaTimeout):
            ep.remote_read(0, 1)
        net.heal("p", "b")
        ep2 = net.connect("p", "b")
        ep2.remote_read(0, 1)

    def test_drops_are_deterministic_per_seed(self):
        def run(seed):
            net = SimNetwork(NetworkConditions(seed=seed, drop_prob=0.3))
            net.add_node("b", Region(CAP))
            outcomes = []
            for i in range(20):
                ep = net.connect("p", "b")
                try:
                    ep.write_and_force(192, bytes([i]))
                    outcomes.append(True)
                except ReplicaTimeout:
                    outcomes.append(False)
            return outcomes

        first = run(5)
        assert first == run(5)
        assert first != run(6)
        assert False in first and True in first

    def test_latency_above_timeout_closes(self):
        net = SimNetwork(NetworkConditions(latency=(50, 50)))
        net.add_node("b", Region(CAP))
        ep = net.connect("p", "b", timeout_ticks=10)
        with pytest.raises(ReplicaTimeout):
            ep.write_and_force(192, b"slow")
        ok = net.connect("p", "b", timeout_ticks=100)
        ok.write_and_force(192, b"slow")

    def test_generation_fencing(self):
        net = SimNetwork()
        node = net.add_node("b", Region(CAP))
        old = net.connect("p", "b", generation=1)
        old.write_and_force(192, b"pre")
        node.fence(2)
        with pytest.raises(FencedError):
            old.write_and_force(192, b"post")
        assert old.state == "fenced"
        new = net.connect("p2", "b", generation=2)
        new.write_and_force(192, b"post")

    def test_membership_gates_connect(self):
        stub = MembershipStub()
        net = SimNetwork(membership=stub)
        net.add_node("b", Region(CAP))
        stub.elect("p1")
        ep = net.connect("p1", "b")
        assert ep.generation == 1
        with pytest.raises(NotPrimaryError):
            net.connect("p2", "b")
        stub.elect("p2")
        assert net.connect("p2", "b").generation == 2

    def test_epoch_write_updates_superline_atomically(self):
        region = Region(CAP)
        Log.create_local(region, LogConfig(CAP))
        net = SimNetwork()
        net.add_node("b", region)
        ep = net.connect("p", "b")
        ep.epoch_write(9)
        line, _ = read_superline(region)
        assert line == Superline(9, 192, 1)


class FakeSocket:
    def __init__(self, data=b""):
        self.rx = io.BytesIO(data)
        self.sent = b""

    def sendall(self, data):
        self.sent += data

    def recv(self, count):
        return self.rx.read(count)


class TestFraming:
    def test_frame_layout_is_type_offset_length_payload(self):
        sock = FakeSocket()
        send_frame(sock, MSG_WRITE_AND_FORCE, 0x1122334455, b"abc")
        assert sock.sent == struct.pack(
            "<IQI", MSG_WRITE_AND_FORCE, 0x1122334455, 3) + b"abc"

    def test_roundtrip(self):
        sock = FakeSocket()
        send_frame(sock, MSG_FORCE_ACK, 77, b"\x00")
        back = FakeSocket(sock.sent)
        assert recv_frame(back) == (MSG_FORCE_ACK, 77, b"\x00")

    def test_truncated_frame_raises(self):
        sock = FakeSocket()
        send_frame(sock, MSG_HELLO, 1, b"full")
        broken = FakeSocket(sock.sent[:-2])
        with pytest.raises(ConnectionClosed):
            recv_frame(broken)


@pytest.fixture
def server():
    srv = BackupServer(Region(CAP))
    srv.serve_in_thread()
    yield srv
    srv.shutdown()


class TestSocketTransport:
    def test_write_read_epoch(self, server):
        ep = SocketEndpoint("127.0.0.1", server.port)
        ep.write_and_force(320, b"over tcp")
        assert ep.remote_read(320, 8) == b"over tcp"
        assert bytes(server.node.region.persistent_image[320:328]) == b"over tcp"
        ep.close()

    def test_hello_fenced_below_floor(self, server):
        server.node.fence(4)
        with pytest.raises(FencedError):
            SocketEndpoint("127.0.0.1", server.port, generation=3)
        ep = SocketEndpoint("127.0.0.1", server.port, generation=4)
        ep.write_and_force(192, b"allowed")
        ep.close()

    def test_fence_mid_connection(self, server):
        ep = SocketEndpoint("127.0.0.1", server.port, generation=1)
        ep.write_and_force(192, b"ok")
        server.node.fence(2)
        with pytest.raises(FencedError):
            ep.write_and_force(192, b"stale")
        assert ep.state == "fenced"

    def test_timeout_closes_endpoint(self, server):
        ep = SocketEndpoint("127.0.0.1", server.port, timeout=0.2)
        server.node._lock.acquire()  # wedge the backup
        try:
            with pytest.raises(ReplicaTimeout):
                ep.write_and_force(192, b"stuck")
        finally:
            server.node._lock.release()
        assert ep.state == "timed_out"
        with pytest.raises(ConnectionClosed):
            ep.write_and_force(192, b"later")

    def test_concurrent_connections(self, server):
        first = SocketEndpoint("127.0.0.1", server.port)
        second = SocketEndpoint("127.0.0.1", server.port)
        first.write_and_force(192, b"one")
        second.write_and_force(256, b"two")
        assert first.remote_read(256, 3) == b"two"
        first.close()
        second.close()


class TestBackupProcess:
    def test_separate_process_serves_and_saves(self, tmp_path):
        backing = tmp_path / "replica.img"
        proc = subprocess.Popen(
            [sys.executable, "-m", "replog.backup_server",
             "--capacity", str(CAP), "--backing", str(backing)],
            stdout=subprocess.PIPE, text=True,
            cwd="/root/pkg")
        try:
            line = proc.stdout.readline()
            assert line.startswith("listening ")
            port = int(line.split()[1])
            ep = SocketEndpoint("127.0.0.1", port)
            ep.write_and_force(640, b"cross-process")
            assert ep.remote_read(640, 13) == b"cross-process"
            ep.request_shutdown()
            proc.wait(timeout=10)
        finally:
            if proc.poll() is None:
                proc.kill()
        # state survived into the backing image for the next incarnation
        region = Region.load(str(backing))
        assert region.read(640, 13) == b"cross-process"
