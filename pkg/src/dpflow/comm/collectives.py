"""Deterministic collectives built on point-to-point messages.

Every message carries a 16-byte little-endian header
``(tag, element count, dtype code, collective sequence number)`` followed by
the raw array bytes. Receivers check all four fields, so ranks that call
collectives in different orders or with different lengths fail loudly.
"""

from __future__ import annotations

import struct

import numpy as np

from .transport import DTYPE_F32, DTYPE_F64, DTYPE_U8, ProtocolError
from .world import CommWorld

HEADER = struct.Struct("<IIII")
BARRIER_TAG = 0xFFFF0000

_WIRE = {DTYPE_F64: np.dtype("<f8"), DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def dtype_code(dtype) -> int:
    dt = np.dtype(dtype)
    if dt.kind == "f" and dt.itemsize == 8:
        return DTYPE_F64
    if dt.kind == "f" and dt.itemsize == 4:
        return DTYPE_F32
    if dt.kind == "u" and dt.itemsize == 1:
        return DTYPE_U8
    raise TypeError(f"unsupported collective dtype {dt}")


def _check_buffer(buf) -> np.ndarray:
    if not isinstance(buf, np.ndarray):
        raise TypeError("collectives operate in place on numpy arrays")
    if not buf.flags.c_contiguous or not buf.flags.writeable:
        raise ValueError("buffer must be C-contiguous and writeable")
    dtype_code(buf.dtype)
    return buf.reshape(-1)


def _begin(world: CommWorld, kind: str, tag: int) -> int:
    seq = world.collective_seq
    world.collective_seq += 1
    world.collective_log.append((kind, tag))
    return seq & 0xFFFFFFFF


def _send(world: CommWorld, dest: int, tag: int, seq: int, arr: np.ndarray) -> None:
    code = dtype_code(arr.dtype)
    data = arr.astype(_WIRE[code], copy=False).tobytes()
    world.send(dest, tag, HEADER.pack(tag, arr.size, code, seq) + data, code)


def _recv(world: CommWorld, src: int, tag: int, seq: int, like: np.ndarray) -> np.ndarray:
    msg = world.recv(src, tag)
    if len(msg) < HEADER.size:
        raise ProtocolError(f"rank {world.rank}: short message from rank {src}")
    rtag, count, code, rseq = HEADER.unpack_from(msg)
    expect_code = dtype_code(like.dtype)
    if rseq != seq or rtag != tag:
        raise ProtocolError(
            f"rank {world.rank}: collective mismatch with rank {src} "
            f"(got seq {rseq} tag {rtag}, expected seq {seq} tag {tag})"
        )
    if count != like.size or code != expect_code:
        raise ProtocolError(
            f"rank {world.rank}: rank {src} sent {count} elements of dtype code {code}, "
            f"expected {like.size} of code {expect_code}"
        )
    if len(msg) != HEADER.size + count * like.itemsize:
        raise ProtocolError(f"rank {world.rank}: payload size mismatch from rank {src}")
    out = np.frombuffer(msg, dtype=_WIRE[code], count=count, offset=HEADER.size)
    return out.astype(like.dtype, copy=False)


def broadcast(world: CommWorld, buffer: np.ndarray, root: int = 0, tag: int = 0) -> None:
    """Binomial-tree broadcast from ``root``, in place.

    In round k, ranks whose root-relative id is below 2**k send to relative id
    + 2**k. Uses ceil(log2 p) rounds and p - 1 messages.
    """
    flat = _check_buffer(buffer)
    p, me = world.size, world.rank
    seq = _begin(world, "broadcast", tag)
    if p == 1:
        return
    rel = (me - root) % p
    mask = 1
    while mask < p:
        if rel < mask:
            dst = rel + mask
            if dst < p:
                _send(world, (dst + root) % p, tag, seq, flat)
        elif rel < 2 * mask:
            flat[...] = _recv(world, (rel - mask + root) % p, tag, seq, flat)
        mask <<= 1


def allreduce_sum(world: CommWorld, buffer: np.ndarray, tag: int = 0) -> None:
    """Element-wise sum over all ranks, in place; every rank ends bitwise-equal.

    Recursive doubling over the largest power-of-two core. Ranks beyond the core
    first fold into partner ``rank - core`` and get the result back at the end.
    In every combine the lower rank's operand is the left addend.
    """
    flat = _check_buffer(buffer)
    p, me = world.size, world.rank
    seq = _begin(world, "allreduce", tag)
    if p == 1:
        return
    core = 1 << (p.bit_length() - 1)

    if me >= core:
        _send(world, me - core, tag, seq, flat)
        flat[...] = _recv(world, me - core, tag, seq, flat)
        return

    acc = flat.copy()
    extra = me + core
    if extra < p:
        acc = acc + _recv(world, extra, tag, seq, flat)
    mask = 1
    while mask < core:
        partner = me ^ mask
        _send(world, partner, tag, seq, acc)
        other = _recv(world, partner, tag, seq, flat)
        acc = acc + other if me < partner else other + acc
        mask <<= 1
    if extra < p:
        _send(world, extra, tag, seq, acc)
    flat[...] = acc


def barrier(world: CommWorld) -> None:
    """No rank leaves before every rank has entered (a zero-length allreduce)."""
    allreduce_sum(world, np.zeros(0, dtype=np.float64), tag=BARRIER_TAG)
