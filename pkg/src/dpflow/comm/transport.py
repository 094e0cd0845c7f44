"""Point-to-point transports.

Both transports deliver messages per (src, dest, tag) channel reliably and in
FIFO order; ``recv`` blocks until a matching message arrives, the world is
aborted, or the timeout expires.

Socket wire format, per message, little-endian::

    u32 magic 0x4D544658 | u32 tag | u32 dtype code | u64 payload length | payload
"""

from __future__ import annotations

import abc
import json
import queue
import socket
import struct
import threading
import time

MAGIC = 0x4D544658
FRAME = struct.Struct("<IIIQ")
HELLO = struct.Struct("<III")  # magic, rank, listen port

DTYPE_F64, DTYPE_F32, DTYPE_U8 = 0, 1, 2
CONTROL_TAG = 0xFFFFFFFF

DEFAULT_TIMEOUT = 120.0
_POLL = 0.05


class CommError(RuntimeError):
    pass


class ProtocolError(CommError):
    """Ranks disagree on a collective (length, dtype or sequence mismatch)."""


class CommTimeout(CommError):
    pass


class WorldAborted(CommError):
    """Another rank failed; this rank gave up waiting."""


class Transport(abc.ABC):
    rank: int
    size: int

    @abc.abstractmethod
    def send(self, dest: int, tag: int, payload: bytes, dtype_code: int = DTYPE_U8) -> None: ...

    @abc.abstractmethod
    def recv(self, src: int, tag: int) -> bytes: ...

    def close(self) -> None:
        pass


class _Mailboxes:
    """Per-(src, tag) queues feeding one receiving rank."""

    def __init__(self, timeout: float, aborted: threading.Event):
        self._queues: dict[tuple[int, int], queue.Queue] = {}
        self._lock = threading.Lock()
        self.timeout = timeout
        self.aborted = aborted

    def channel(self, src: int, tag: int) -> queue.Queue:
        key = (src, tag)
        with self._lock:
            q = self._queues.get(key)
            if q is None:
                q = self._queues[key] = queue.Queue()
            return q

    def get(self, src: int, tag: int, me: int, gone=None) -> bytes:
        q = self.channel(src, tag)
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                return q.get(timeout=_POLL)
            except queue.Empty:
                pass
            if self.aborted.is_set():
                raise WorldAborted(f"rank {me}: world aborted while waiting on rank {src} tag {tag}")
            if gone is not None and src in gone and q.empty():
                raise WorldAborted(f"rank {me}: rank {src} disconnected while awaited on tag {tag}")
            if time.monotonic() > deadline:
                raise CommTimeout(f"rank {me}: no message from rank {src} tag {tag} within {self.timeout}s")


class InprocFabric:
    """Shared mailboxes for ranks running as threads of one process."""

    def __init__(self, size: int, timeout: float = DEFAULT_TIMEOUT):
        if size < 1:
            raise ValueError("world size must be >= 1")
        self.size = size
        self.aborted = threading.Event()
        self.boxes = [_Mailboxes(timeout, self.aborted) for _ in range(size)]

    def transport(self, rank: int) -> "InprocTransport":
        return InprocTransport(self, rank)

    def abort(self) -> None:
        self.aborted.set()


class InprocTransport(Transport):
    def __init__(self, fabric: InprocFabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self.size = fabric.size

    def send(self, dest, tag, payload, dtype_code=DTYPE_U8):
        if not 0 <= dest < self.size:
            raise CommError(f"rank {self.rank}: bad destination {dest}")
        self.fabric.boxes[dest].channel(self.rank, tag).put(bytes(payload))

    def recv(self, src, tag):
        return self.fabric.boxes[self.rank].get(src, tag, self.rank)


# ---------------------------------------------------------------- sockets


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def write_frame(sock: socket.socket, tag: int, payload: bytes, dtype_code: int = DTYPE_U8) -> None:
    sock.sendall(FRAME.pack(MAGIC, tag, dtype_code, len(payload)) + payload)


def read_frame(sock: socket.socket) -> tuple[int, int, bytes]:
    magic, tag, code, length = FRAME.unpack(_recv_exact(sock, FRAME.size))
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic 0x{magic:08x}")
    return tag, code, _recv_exact(sock, length)


def parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


class SocketTransport(Transport):
    """Full mesh of TCP streams, one per rank pair.

    Rendezvous: rank 0 listens on the configured address; every other rank
    opens its own listener, connects to rank 0 and sends its rank id and port.
    Rank 0 replies with the address table, then rank j connects to each rank
    0 < i < j. One reader thread per peer drains frames into mailboxes, so a
    send never waits on the peer calling recv.
    """

    def __init__(self, rank: int, size: int, peers: dict[int, socket.socket],
                 timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.size = size
        self.peers = peers
        self.aborted = threading.Event()
        self.boxes = _Mailboxes(timeout, self.aborted)
        self._gone: set[int] = set()
        self._send_locks = {r: threading.Lock() for r in peers}
        self._readers = []
        for r, sock in peers.items():
            t = threading.Thread(target=self._read_loop, args=(r, sock), daemon=True,
                                 name=f"rank{rank}-from{r}")
            t.start()
            self._readers.append(t)

    def _read_loop(self, src: int, sock: socket.socket):
        try:
            while True:
                tag, _, payload = read_frame(sock)
                self.boxes.channel(src, tag).put(payload)
        except (OSError, ConnectionError, ProtocolError):
            # frames already read stay queued; only waits on this peer fail
            self._gone.add(src)

    def send(self, dest, tag, payload, dtype_code=DTYPE_U8):
        if dest == self.rank:
            self.boxes.channel(dest, tag).put(bytes(payload))
            return
        if dest not in self.peers:
            raise CommError(f"rank {self.rank}: bad destination {dest}")
        with self._send_locks[dest]:
            write_frame(self.peers[dest], tag, bytes(payload), dtype_code)

    def recv(self, src, tag):
        return self.boxes.get(src, tag, self.rank, self._gone)

    def close(self):
        for sock in self.peers.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

    @classmethod
    def connect(cls, rank: int, size: int, address, listener: socket.socket | None = None,
                timeout: float = DEFAULT_TIMEOUT) -> "SocketTransport":
        """Join the world. Rank 0 listens on ``address`` (or uses ``listener``)."""
        host, port = parse_address(address)
        if size == 1:
            if listener is not None:
                listener.close()
            return cls(rank, size, {}, timeout)
        if rank == 0:
            peers = _rendezvous_root(size, host, port, listener, timeout)
        else:
            peers = _rendezvous_peer(rank, size, host, port, timeout)
        for s in peers.values():
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.settimeout(None)
        return cls(rank, size, peers, timeout)


def _listen(host: str, port: int, backlog: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(backlog)
    return srv


def _rendezvous_root(size, host, port, listener, timeout):
    srv = listener or _listen(host, port, size)
    srv.settimeout(timeout)
    peers: dict[int, socket.socket] = {}
    table: dict[int, tuple[str, int]] = {0: (host, port)}
    try:
        while len(peers) < size - 1:
            conn, (peer_host, _) = srv.accept()
            conn.settimeout(timeout)
            magic, r, lport = HELLO.unpack(_recv_exact(conn, HELLO.size))
            if magic != MAGIC or not 0 < r < size or r in peers:
                conn.close()
                raise ProtocolError(f"rank 0: bad hello (magic 0x{magic:08x}, rank {r})")
            peers[r] = conn
            table[r] = (peer_host, lport)
    finally:
        srv.close()
    blob = json.dumps({str(r): list(a) for r, a in table.items()}).encode()
    for conn in peers.values():
        write_frame(conn, CONTROL_TAG, blob)
    return peers


def _rendezvous_peer(rank, size, host, port, timeout):
    srv = _listen(host, 0, size)
    srv.settimeout(timeout)
    peers: dict[int, socket.socket] = {}
    try:
        root = _connect_retry((host, port), timeout)
        root.sendall(HELLO.pack(MAGIC, rank, srv.getsockname()[1]))
        tag, _, blob = read_frame(root)
        if tag != CONTROL_TAG:
            raise ProtocolError(f"rank {rank}: expected address table, got tag {tag}")
        table = {int(r): tuple(a) for r, a in json.loads(blob).items()}
        peers[0] = root
        for r in range(1, rank):
            s = _connect_retry(table[r], timeout)
            s.sendall(HELLO.pack(MAGIC, rank, 0))
            peers[r] = s
        for _ in range(size - 1 - rank):
            conn, _ = srv.accept()
            conn.settimeout(timeout)
            magic, r, _ = HELLO.unpack(_recv_exact(conn, HELLO.size))
            if magic != MAGIC or not rank < r < size or r in peers:
                raise ProtocolError(f"rank {rank}: bad hello from rank {r}")
            peers[r] = conn
    finally:
        srv.close()
    return peers


def _connect_retry(addr, timeout: float) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            s = socket.create_connection(tuple(addr), timeout=timeout)
            return s
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.02)
