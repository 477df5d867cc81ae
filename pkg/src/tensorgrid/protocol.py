"""Binary wire protocol shared by the shard server and every client.

Frames are length-prefixed, all integers little-endian:

    request:  total length u32 | version u16 = 1 | command u8 | request id u32 | body
    response: total length u32 | version u16 = 1 | command u8 | request id u32 | status u8 | payload

The length counts everything after the length field itself. The response
echoes the request's command and id; status 0 is OK, anything else maps to
an error class and the payload is a UTF-8 error string. A WrongShard error
string starts with ``owner=<shard id>`` so clients can re-route.

Strings encode as u16 length + UTF-8 bytes; key lists as u16 count + strings.
"""

from __future__ import annotations

import enum
import socket
import struct

from . import errors
from .routing import ClusterTopology, ShardInfo

VERSION = 1
MAX_FRAME = 64 * 1024 * 1024  # sanity cap, not a protocol constant

_REQ_HEAD = struct.Struct("<HBI")  # version, command, request id (after length)
_LEN = struct.Struct("<I")


class Command(enum.IntEnum):
    PUT_TENSOR = 0x01
    GET_TENSOR = 0x02
    DEL = 0x03
    PUT_DATASET = 0x04
    GET_DATASET = 0x05
    SET_MODEL = 0x06
    RUN_MODEL = 0x07
    SET_SCRIPT = 0x08
    RUN_SCRIPT = 0x09
    CLUSTER_SLOTS = 0x0A
    PING = 0x0B
    INFO = 0x0C


class Status(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1
    WRONG_SHARD = 2
    MALFORMED = 3
    WRONG_KIND = 4
    MODEL_NOT_FOUND = 5
    EXEC_ERROR = 6
    INPUT_MISSING = 7
    BAD_MODEL = 8


_STATUS_ERRORS = {
    Status.NOT_FOUND: errors.NotFound,
    Status.MALFORMED: errors.Malformed,
    Status.WRONG_KIND: errors.WrongKind,
    Status.MODEL_NOT_FOUND: errors.ModelNotFound,
    Status.EXEC_ERROR: errors.ExecError,
    Status.INPUT_MISSING: errors.InputMissing,
    Status.BAD_MODEL: errors.BadModel,
}

_ERROR_STATUSES = {v: k for k, v in _STATUS_ERRORS.items()}
_ERROR_STATUSES[errors.WrongShard] = Status.WRONG_SHARD


def status_for_error(exc: Exception) -> Status:
    for cls, status in _ERROR_STATUSES.items():
        if isinstance(exc, cls):
            return status
    return Status.EXEC_ERROR


def wrong_shard_payload(owner: int, slot: int, key: str) -> str:
    return f"owner={owner} slot={slot} key={key}"


def parse_wrong_shard(message: str) -> tuple[int, int | None]:
    """Extract (owner, slot) from a WrongShard error string."""
    owner = None
    slot = None
    for tok in message.split():
        if tok.startswith("owner="):
            owner = int(tok[6:])
        elif tok.startswith("slot="):
            slot = int(tok[5:])
    if owner is None:
        raise errors.ProtocolError(f"WrongShard payload without owner: {message!r}")
    return owner, slot


def error_for_status(status: int, message: str) -> Exception:
    st = Status(status)
    if st == Status.WRONG_SHARD:
        owner, slot = parse_wrong_shard(message)
        return errors.WrongShard(message, owner=owner, slot=slot)
    return _STATUS_ERRORS[st](message)


# --- body primitives --------------------------------------------------------


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise errors.ProtocolError("string exceeds u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    if len(buf) - off < 2:
        raise errors.ProtocolError("string length truncated")
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    if len(buf) - off < n:
        raise errors.ProtocolError("string body truncated")
    return buf[off : off + n].decode("utf-8"), off + n


def pack_key_list(keys: list[str]) -> bytes:
    if len(keys) > 0xFFFF:
        raise errors.ProtocolError("key list exceeds u16 count prefix")
    return struct.pack("<H", len(keys)) + b"".join(pack_str(k) for k in keys)


def unpack_key_list(buf: bytes, off: int) -> tuple[list[str], int]:
    if len(buf) - off < 2:
        raise errors.ProtocolError("key list count truncated")
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    keys = []
    for _ in range(n):
        k, off = unpack_str(buf, off)
        keys.append(k)
    return keys, off


def pack_topology(topo: ClusterTopology) -> bytes:
    out = [struct.pack("<H", len(topo.shards))]
    for s in topo.shards:
        out.append(struct.pack("<H", s.shard_id))
        out.append(pack_str(s.address))
        out.append(struct.pack("<HH", s.slot_lo, s.slot_hi))
    return b"".join(out)


def unpack_topology(buf: bytes, off: int = 0) -> tuple[ClusterTopology, int]:
    if len(buf) - off < 2:
        raise errors.ProtocolError("topology count truncated")
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    shards = []
    for _ in range(n):
        if len(buf) - off < 2:
            raise errors.ProtocolError("shard id truncated")
        (sid,) = struct.unpack_from("<H", buf, off)
        off += 2
        addr, off = unpack_str(buf, off)
        if len(buf) - off < 4:
            raise errors.ProtocolError("slot range truncated")
        lo, hi = struct.unpack_from("<HH", buf, off)
        off += 4
        shards.append(ShardInfo(sid, addr, lo, hi))
    return ClusterTopology(tuple(shards)), off


def pack_counters(counters: dict[str, int]) -> bytes:
    out = [struct.pack("<H", len(counters))]
    for name, value in counters.items():
        out.append(pack_str(name))
        out.append(struct.pack("<Q", value))
    return b"".join(out)


def unpack_counters(buf: bytes, off: int = 0) -> tuple[dict[str, int], int]:
    if len(buf) - off < 2:
        raise errors.ProtocolError("counter count truncated")
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    counters = {}
    for _ in range(n):
        name, off = unpack_str(buf, off)
        if len(buf) - off < 8:
            raise errors.ProtocolError("counter value truncated")
        (counters[name],) = struct.unpack_from("<Q", buf, off)
        off += 8
    return counters, off


# --- framing ------------------------------------------------------------------


def pack_request(command: Command, request_id: int, body: bytes = b"") -> bytes:
    head = _REQ_HEAD.pack(VERSION, int(command), request_id)
    return _LEN.pack(len(head) + len(body)) + head + body


def pack_response(command: Command, request_id: int, status: Status, payload: bytes = b"") -> bytes:
    head = _REQ_HEAD.pack(VERSION, int(command), request_id) + struct.pack("<B", int(status))
    return _LEN.pack(len(head) + len(payload)) + head + payload


def pack_error_response(command: Command, request_id: int, exc: Exception) -> bytes:
    status = status_for_error(exc)
    if isinstance(exc, errors.WrongShard):
        message = str(exc)
    else:
        message = f"{type(exc).__name__}: {exc}"
    return pack_response(command, request_id, status, message.encode("utf-8"))


def parse_request(frame: bytes) -> tuple[int, int, int, bytes]:
    """Split a frame (without the length prefix) into (version, command, id, body)."""
    if len(frame) < _REQ_HEAD.size:
        raise errors.ProtocolError("frame shorter than header")
    version, command, request_id = _REQ_HEAD.unpack_from(frame, 0)
    return version, command, request_id, frame[_REQ_HEAD.size :]


def parse_response(frame: bytes) -> tuple[int, int, int, int, bytes]:
    """Split a response frame into (version, command, id, status, payload)."""
    if len(frame) < _REQ_HEAD.size + 1:
        raise errors.ProtocolError("response shorter than header")
    version, command, request_id = _REQ_HEAD.unpack_from(frame, 0)
    status = frame[_REQ_HEAD.size]
    return version, command, request_id, status, frame[_REQ_HEAD.size + 1 :]


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    """Read one length-prefixed frame body (header + payload, no length)."""
    raw_len = recv_exact(sock, 4)
    (n,) = _LEN.unpack(raw_len)
    if n < _REQ_HEAD.size or n > MAX_FRAME:
        raise errors.ProtocolError(f"frame length {n} outside [{_REQ_HEAD.size}, {MAX_FRAME}]")
    return recv_exact(sock, n)
