"""Length-prefixed binary frames for the device runtime.

Wire layout (little-endian)::

    u32 length      bytes that follow this field
    u8  opcode
    u64 request_id  echoed by the response
    u32 header_len
    header          UTF-8 JSON object, header_len bytes
    body            raw payload, the remaining bytes

Header fields per opcode::

    HELLO          {version}                      -> {version, backend, profile, opcodes}
    UPLOAD_MODULE  {kind, attrs, inputs:[sig]}     -> {module_id, outputs:[sig]}
    ALLOC          {dtype, shape}                  -> {buffer_id}
    WRITE_TENSOR   {buffer_id} + body              -> {buffer_id, byte_len}
    READ_TENSOR    {buffer_id}                     -> {buffer_id, dtype, shape} + body
    CALL           {module_id, in_buffers, out_buffers, threads?} -> {out_buffers}
    FREE           {buffer_ids?, module_ids?}      -> {}
    SHUTDOWN       {}                              -> {}
    ERROR          {code, message, context:[{site, detail}]}

where ``sig`` is ``{dtype, shape}``.
"""

from __future__ import annotations

import enum
import json
import socket
import struct
from dataclasses import dataclass, field

from ..errors import ConnectionLost, ProtocolError

PROTOCOL_VERSION = 1
DEFAULT_PORT = 9090
PREFIX = struct.Struct("<IBQI")
# bytes counted by ``length`` before the header: opcode + request_id + header_len
FIXED = PREFIX.size - 4
MAX_HEADER = 1 << 20
MAX_FRAME = (1 << 30) + MAX_HEADER + FIXED


class Op(enum.IntEnum):
    HELLO = 0x01
    UPLOAD_MODULE = 0x02
    ALLOC = 0x03
    WRITE_TENSOR = 0x04
    READ_TENSOR = 0x05
    CALL = 0x06
    FREE = 0x07
    ERROR = 0x0E
    SHUTDOWN = 0x0F


@dataclass(frozen=True)
class Frame:
    opcode: Op
    request_id: int
    header: dict = field(default_factory=dict)
    body: bytes = b""

    def encode(self) -> bytes:
        return encode(self)


def encode(frame: Frame) -> bytes:
    if not 0 <= frame.request_id < 2**64:
        raise ProtocolError(f"request_id out of range: {frame.request_id}")
    header = json.dumps(frame.header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    length = FIXED + len(header) + len(frame.body)
    if length > MAX_FRAME or len(header) > MAX_HEADER:
        raise ProtocolError(f"frame too large: {length} bytes")
    return PREFIX.pack(length, int(frame.opcode), frame.request_id, len(header)) + header + bytes(frame.body)


def _parse(opcode: int, request_id: int, header: bytes, body: bytes) -> Frame:
    try:
        op = Op(opcode)
    except ValueError:
        raise ProtocolError(f"unknown opcode 0x{opcode:02x}") from None
    try:
        doc = json.loads(header.decode("utf-8")) if header else {}
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as e:
        raise ProtocolError(f"header is not UTF-8 JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ProtocolError("header must be a JSON object")
    return Frame(op, request_id, doc, body)


def decode(buf: bytes) -> Frame:
    """Decode exactly one frame from ``buf``; anything malformed is a ProtocolError."""
    buf = bytes(buf)
    if len(buf) < PREFIX.size:
        raise ProtocolError(f"short frame: {len(buf)} bytes")
    length, opcode, request_id, header_len = PREFIX.unpack_from(buf)
    if length != len(buf) - 4:
        raise ProtocolError(f"length field says {length}, frame carries {len(buf) - 4}")
    if header_len > length - FIXED:
        raise ProtocolError(f"header_len {header_len} exceeds frame")
    start = PREFIX.size
    return _parse(opcode, request_id, buf[start : start + header_len], buf[start + header_len :])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionLost("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Frame | None:
    """Next frame from ``sock``; None on a clean close between frames."""
    first = sock.recv(4)
    if not first:
        return None
    head = first + _recv_exact(sock, 4 - len(first)) if len(first) < 4 else first
    (length,) = struct.unpack("<I", head)
    if length < FIXED or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    rest = _recv_exact(sock, FIXED)
    opcode, request_id, header_len = struct.unpack("<BQI", rest)
    if header_len > length - FIXED or header_len > MAX_HEADER:
        raise ProtocolError(f"header_len {header_len} exceeds frame")
    header = _recv_exact(sock, header_len)
    body = _recv_exact(sock, length - FIXED - header_len)
    return _parse(opcode, request_id, header, body)


def write_frame(sock: socket.socket, frame: Frame) -> None:
    sock.sendall(encode(frame))


def parse_address(address: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        return address or "127.0.0.1", default_port
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ValueError(f"bad address {address!r}, expected HOST:PORT") from None
