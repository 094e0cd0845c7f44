"""Rank handles and world launching."""

from __future__ import annotations

import multiprocessing as mp
import socket
import threading
import traceback
from dataclasses import dataclass
from typing import Any, Callable

from .transport import (
    DEFAULT_TIMEOUT,
    DTYPE_U8,
    InprocFabric,
    SocketTransport,
    Transport,
    WorldAborted,
    parse_address,
)

TRANSPORTS = ("inproc", "socket")


@dataclass(frozen=True)
class TrafficStats:
    messages_sent: int = 0
    bytes_sent: int = 0

    def __sub__(self, other: "TrafficStats") -> "TrafficStats":
        return TrafficStats(self.messages_sent - other.messages_sent, self.bytes_sent - other.bytes_sent)


class CommWorld:
    """One rank's view of a world of ``size`` ranks.

    Confined to the rank's thread. Counts every point-to-point message handed to
    the transport (bytes include the 16-byte collective header).
    """

    def __init__(self, rank: int, size: int, transport: Transport | None = None):
        if not 0 <= rank < size:
            raise ValueError(f"rank {rank} outside [0, {size})")
        if transport is None and size != 1:
            raise ValueError("a transport is required for size > 1")
        self.rank = rank
        self.size = size
        self.transport = transport
        self.messages_sent = 0
        self.bytes_sent = 0
        self.collective_seq = 0
        # (collective kind, tag) in call order
        self.collective_log: list[tuple[str, int]] = []

    @classmethod
    def single(cls) -> "CommWorld":
        return cls(0, 1, None)

    def send(self, dest: int, tag: int, payload: bytes, dtype_code: int = DTYPE_U8) -> None:
        self.transport.send(dest, tag, payload, dtype_code)
        self.messages_sent += 1
        self.bytes_sent += len(payload)

    def recv(self, src: int, tag: int) -> bytes:
        return self.transport.recv(src, tag)

    def stats(self) -> TrafficStats:
        return TrafficStats(self.messages_sent, self.bytes_sent)

    def close(self) -> None:
        if self.transport is not None:
            self.transport.close()

    def __repr__(self):
        return f"CommWorld(rank={self.rank}, size={self.size})"


def traffic_stats(world: CommWorld) -> TrafficStats:
    return world.stats()


class WorldError(RuntimeError):
    """A rank failed; ``rank`` names the first failing rank."""

    def __init__(self, rank: int, message: str):
        super().__init__(f"rank {rank} failed: {message}")
        self.rank = rank


def world_spawn(p: int, body: Callable[[CommWorld], Any], transport: str = "inproc",
                address=None, timeout: float = DEFAULT_TIMEOUT) -> list:
    """Run ``body(world)`` on ``p`` ranks concurrently; return results by rank.

    ``inproc`` runs ranks as threads of this process. ``socket`` forks one
    process per rank that rendezvous over TCP at ``address`` (default: an
    ephemeral loopback port); results must be picklable.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if transport == "inproc":
        return _spawn_inproc(p, body, timeout)
    if transport == "socket":
        return _spawn_socket(p, body, address, timeout)
    raise ValueError(f"unknown transport {transport!r}; choose from {TRANSPORTS}")


def _first_failure(errors: dict[int, BaseException]) -> tuple[int, BaseException]:
    primary = {r: e for r, e in errors.items() if not isinstance(e, WorldAborted)}
    pool = primary or errors
    rank = min(pool)
    return rank, pool[rank]


def _spawn_inproc(p, body, timeout):
    fabric = InprocFabric(p, timeout)
    results: list = [None] * p
    errors: dict[int, BaseException] = {}

    def run(rank):
        world = CommWorld(rank, p, fabric.transport(rank))
        try:
            results[rank] = body(world)
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            errors[rank] = exc
            fabric.abort()

    threads = [threading.Thread(target=run, args=(r,), name=f"rank{r}", daemon=True) for r in range(p)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        rank, exc = _first_failure(errors)
        raise WorldError(rank, f"{type(exc).__name__}: {exc}") from exc
    return results


def _socket_rank(rank, p, address, listener, timeout, body, out):
    try:
        transport = SocketTransport.connect(rank, p, address, listener, timeout)
        world = CommWorld(rank, p, transport)
        try:
            result = body(world)
        finally:
            world.close()
        out.put((rank, True, result))
    except BaseException as exc:  # noqa: BLE001
        out.put((rank, False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"))


def _spawn_socket(p, body, address, timeout):
    host, port = parse_address(address or ("127.0.0.1", 0))
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(p)
    bound = (host, listener.getsockname()[1])

    ctx = mp.get_context("fork")
    out = ctx.Queue()
    procs = []
    try:
        for r in range(p):
            proc = ctx.Process(
                target=_socket_rank,
                args=(r, p, bound, listener if r == 0 else None, timeout, body, out),
                name=f"rank{r}",
                daemon=True,
            )
            proc.start()
            procs.append(proc)
    finally:
        listener.close()

    results: list = [None] * p
    errors: dict[int, str] = {}
    try:
        for _ in range(p):
            try:
                rank, ok, value = out.get(timeout=timeout)
            except Exception:
                dead = [r for r, pr in enumerate(procs) if not pr.is_alive() and r not in errors]
                raise WorldError(dead[0] if dead else 0, "no result before timeout") from None
            if ok:
                results[rank] = value
            else:
                errors[rank] = value
                break
        if errors:
            # let the root cause arrive before peers' secondary disconnect errors win
            try:
                while True:
                    rank, ok, value = out.get(timeout=1.0)
                    if not ok:
                        errors[rank] = value
            except Exception:
                pass
    finally:
        if errors:
            for pr in procs:
                pr.terminate()
        for pr in procs:
            pr.join(timeout=5)
            if pr.is_alive():
                pr.kill()
    if errors:
        primary = {r: m for r, m in errors.items() if not m.startswith("WorldAborted")} or errors
        rank = min(primary)
        raise WorldError(rank, primary[rank])
    return results
