"""Host-side client: a Backend whose kernels execute on a device server."""

from __future__ import annotations

import itertools
import socket
from typing import Any, Mapping, Sequence

from ..backends import DeviceProfile, KernelHandle, attrs_digest, check_inputs
from ..errors import ConnectionLost, ProtocolError, RemoteError
from ..graph import OpKind, Signature
from ..tensor import DType, Tensor
from .protocol import PROTOCOL_VERSION, Frame, Op, parse_address, read_frame, write_frame

DEFAULT_TIMEOUT = 60.0


def _sig_json(sig: Signature) -> dict:
    return {"dtype": sig[0].label, "shape": list(sig[1])}


class RemoteBackend:
    """Backend contract over one server session.

    Not safe for concurrent use from several threads; it may be handed from
    one thread to another.
    """

    def __init__(self, sock: socket.socket, address: str):
        self._sock = sock
        self.address = address
        self._ids = itertools.count(1)
        self._modules: dict[tuple, KernelHandle] = {}
        self._closed = False
        ack = self.request(Op.HELLO, {"version": PROTOCOL_VERSION})
        self.server_backend: str = ack["backend"]
        p = ack["profile"]
        self._profile = DeviceProfile(p["name"], p["max_threads_per_launch"], p["max_buffer_bytes"])
        self.server_kinds = frozenset(OpKind(k) for k in ack.get("kinds", []))

    # Backend contract

    def name(self) -> str:
        return f"remote:{self.address}"

    def profile(self) -> DeviceProfile:
        return self._profile

    def supports(self, kind) -> bool:
        return OpKind(kind) in self.server_kinds

    def compile(self, kind, attrs: Mapping[str, Any], inputs: Sequence[Signature]) -> KernelHandle:
        kind = OpKind(kind)
        ins = tuple((DType.parse(d) if isinstance(d, str) else d, tuple(s)) for d, s in inputs)
        key = (kind, attrs_digest(attrs), ins)
        if key not in self._modules:
            mid, outs = self.upload(kind, attrs, ins)
            self._modules[key] = KernelHandle(self.name(), kind, dict(attrs), ins, outs, key[1], token=mid)
        return self._modules[key]

    def run(self, handle: KernelHandle, inputs: Sequence[Tensor]) -> list[Tensor]:
        if handle.backend != self.name():
            raise ValueError(f"handle compiled by {handle.backend!r} used on {self.name()!r}")
        check_inputs(handle, inputs)
        allocated: list[int] = []
        try:
            in_ids = []
            for t in inputs:
                bid = self.alloc(t.dtype, t.shape)
                allocated.append(bid)
                in_ids.append(bid)
                self.write(bid, t)
            out_ids = []
            for dtype, shape in handle.outputs:
                bid = self.alloc(dtype, shape)
                allocated.append(bid)
                out_ids.append(bid)
            self.call(handle.token, in_ids, out_ids)
            return [self.read(bid) for bid in out_ids]
        finally:
            if allocated and not self._closed:
                try:
                    self.free(allocated)
                except (RemoteError, ConnectionLost):
                    pass  # never mask the original failure

    # Protocol operations

    def request(self, op: Op, header: dict | None = None, body: bytes = b"") -> dict:
        return self.request_frame(op, header, body).header

    def request_frame(self, op: Op, header: dict | None = None, body: bytes = b"") -> Frame:
        if self._closed:
            raise ConnectionLost(f"session with {self.address} is closed")
        rid = next(self._ids)
        try:
            write_frame(self._sock, Frame(op, rid, header or {}, body))
            resp = read_frame(self._sock)
        except OSError as e:
            self._drop()
            raise ConnectionLost(f"{self.address}: {e}") from e
        except ConnectionLost:
            self._drop()
            raise
        if resp is None:
            self._drop()
            raise ConnectionLost(f"{self.address} closed the session")
        if resp.opcode is Op.ERROR:
            h = resp.header
            if h.get("code") == "Protocol":
                self._drop()
            raise RemoteError(str(h.get("code", "Unknown")), str(h.get("message", "")), h.get("context", []))
        if resp.request_id != rid:
            self._drop()
            raise ProtocolError(f"response id {resp.request_id} does not echo request {rid}")
        if resp.opcode is not op:
            self._drop()
            raise ProtocolError(f"{op.name} answered with {resp.opcode.name}")
        return resp

    def upload(self, kind, attrs, inputs: Sequence[Signature]) -> tuple[int, tuple[Signature, ...]]:
        ack = self.request(
            Op.UPLOAD_MODULE, {"kind": OpKind(kind).value, "attrs": dict(attrs), "inputs": [_sig_json(s) for s in inputs]}
        )
        outs = tuple((DType.parse(o["dtype"]), tuple(o["shape"])) for o in ack["outputs"])
        return ack["module_id"], outs

    def alloc(self, dtype: DType, shape) -> int:
        dtype = DType.parse(dtype) if isinstance(dtype, str) else dtype
        return self.request(Op.ALLOC, {"dtype": dtype.label, "shape": list(shape)})["buffer_id"]

    def write(self, buffer_id: int, tensor: Tensor) -> None:
        self.request(Op.WRITE_TENSOR, {"buffer_id": buffer_id}, tensor.data)

    def read(self, buffer_id: int) -> Tensor:
        resp = self.request_frame(Op.READ_TENSOR, {"buffer_id": buffer_id})
        return Tensor(DType.parse(resp.header["dtype"]), tuple(resp.header["shape"]), resp.body)

    def call(self, module_id: int, in_buffers: Sequence[int], out_buffers: Sequence[int], threads: int | None = None) -> None:
        header = {"module_id": module_id, "in_buffers": list(in_buffers), "out_buffers": list(out_buffers)}
        if threads is not None:
            header["threads"] = threads
        self.request(Op.CALL, header)

    def free(self, buffer_ids: Sequence[int] = (), module_ids: Sequence[int] = ()) -> None:
        self.request(Op.FREE, {"buffer_ids": list(buffer_ids), "module_ids": list(module_ids)})
        if module_ids:
            gone = set(module_ids)
            self._modules = {k: h for k, h in self._modules.items() if h.token not in gone}

    def shutdown(self) -> None:
        """Ask the server to exit once this session ends, then close."""
        try:
            self.request(Op.SHUTDOWN)
        finally:
            self.close()

    def close(self) -> None:
        self._drop()

    def _drop(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.close()
            except OSError:
                pass

    def __enter__(self) -> "RemoteBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"RemoteBackend({self.address!r}, serving {getattr(self, 'server_backend', '?')})"


def connect(address: str, timeout: float | None = DEFAULT_TIMEOUT) -> RemoteBackend:
    """Open a session with the device server at ``HOST:PORT``."""
    host, port = parse_address(address)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise ConnectionLost(f"cannot reach device server at {host}:{port}: {e}") from e
    sock.settimeout(timeout)
    return RemoteBackend(sock, f"{host}:{port}")


def shutdown(address: str, timeout: float | None = DEFAULT_TIMEOUT) -> None:
    connect(address, timeout).shutdown()
