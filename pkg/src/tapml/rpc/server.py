"""Device server: hosts one backend and executes kernels on behalf of a host."""

from __future__ import annotations

import logging
import socket
import traceback
from dataclasses import dataclass, field

from ..backends import MAX_GROUPS, DeviceProfile, KernelHandle, make_backend
from ..errors import (
    AttrError,
    ConnectionLost,
    KernelError,
    LaunchExceedsProfile,
    ProtocolError,
    ShapeMismatch,
    UnsupportedOp,
)
from ..graph import OpKind
from ..tensor import MAX_RANK, DType, Tensor, numel
from .protocol import PROTOCOL_VERSION, Frame, Op, parse_address, read_frame, write_frame

log = logging.getLogger(__name__)

ERROR_CODES = {
    UnsupportedOp: "UnsupportedOp",
    ShapeMismatch: "ShapeMismatch",
    AttrError: "AttrError",
    LaunchExceedsProfile: "LaunchLimitExceeded",
    KernelError: "KernelError",
}


class RequestFailed(Exception):
    """A request the server rejects with a named code; the session continues."""

    def __init__(self, code: str, message: str, site: str | None = None):
        self.code = code
        self.site = site
        super().__init__(message)


@dataclass
class Buffer:
    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    @property
    def nbytes(self) -> int:
        return len(self.data)


@dataclass
class Session:
    """Per-connection state. Ids are dense and never reused."""

    modules: dict[int, KernelHandle] = field(default_factory=dict)
    buffers: dict[int, Buffer] = field(default_factory=dict)
    next_module: int = 0
    next_buffer: int = 0


def _field(header: dict, key: str, typ):
    if key not in header:
        raise RequestFailed("BadRequest", f"missing header field {key!r}")
    value = header[key]
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise RequestFailed("BadRequest", f"header field {key!r} must be an integer")
    if typ is not int and not isinstance(value, typ):
        raise RequestFailed("BadRequest", f"header field {key!r} must be {typ.__name__}")
    return value


def _signature(doc, where: str) -> tuple[DType, tuple[int, ...]]:
    try:
        dtype = DType.parse(doc["dtype"])
        shape = tuple(int(d) for d in doc["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise RequestFailed("BadRequest", f"{where}: bad signature {doc!r} ({e})") from None
    if len(shape) > MAX_RANK:
        raise RequestFailed("BadRequest", f"{where}: rank {len(shape)} exceeds {MAX_RANK}")
    if any(d < 0 for d in shape):
        raise RequestFailed("BadRequest", f"{where}: negative dimension in {list(shape)}")
    return dtype, shape


def _sig_json(sig) -> dict:
    return {"dtype": sig[0].label, "shape": list(sig[1])}


def _trace(exc: BaseException) -> list[dict]:
    return [
        {"site": f"{fs.filename.rsplit('/', 1)[-1]}:{fs.lineno}:{fs.name}", "detail": (fs.line or "").strip()}
        for fs in traceback.extract_tb(exc.__traceback__)
    ]


class DeviceServer:
    """Serves one backend over the frame protocol, one session at a time."""

    def __init__(self, backend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        self.profile: DeviceProfile = backend.profile()
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._stopping = False

    @property
    def port(self) -> int:
        return self.address[1]

    def serve_forever(self) -> None:
        log.info("serving %s (%s profile) on %s:%d", self.backend.name(), self.profile.name, *self.address)
        try:
            while not self._stopping:
                conn, peer = self._listener.accept()
                log.info("session from %s:%d", *peer[:2])
                with conn:
                    self._session(conn)
        finally:
            self._listener.close()

    def close(self) -> None:
        self._stopping = True
        self._listener.close()

    def _session(self, conn: socket.socket) -> None:
        state = Session()
        while True:
            try:
                req = read_frame(conn)
            except ProtocolError as e:
                self._send_error(conn, 0, "Protocol", str(e), [{"site": "frame-decoder", "detail": str(e)}])
                return
            except (ConnectionLost, OSError):
                return
            if req is None:
                return
            try:
                resp = self._dispatch(state, req)
            except RequestFailed as e:
                ctx = [{"site": e.site or f"server:{req.opcode.name}", "detail": f"request {req.request_id}: {e}"}]
                self._send_error(conn, req.request_id, e.code, str(e), ctx)
                if e.code == "Protocol":
                    return
                continue
            except Exception as e:  # any backend failure is reported, never fatal
                code = next((c for t, c in ERROR_CODES.items() if isinstance(e, t)), "Internal")
                ctx = [{"site": f"server:{req.opcode.name}", "detail": f"{type(e).__name__}: {e}"}]
                ctx += getattr(e, "_sites", []) + _trace(e)
                self._send_error(conn, req.request_id, code, str(e), ctx)
                continue
            try:
                write_frame(conn, resp)
            except OSError:
                return
            if req.opcode is Op.SHUTDOWN:
                self._stopping = True
                return

    def _send_error(self, conn, request_id: int, code: str, message: str, context: list[dict]) -> None:
        log.warning("request %d failed: [%s] %s", request_id, code, message)
        try:
            write_frame(conn, Frame(Op.ERROR, request_id, {"code": code, "message": message, "context": context}))
        except OSError:
            pass

    def _dispatch(self, s: Session, req: Frame) -> Frame:
        h = req.header
        reply = lambda header, body=b"": Frame(req.opcode, req.request_id, header, body)  # noqa: E731

        if req.opcode is Op.HELLO:
            version = h.get("version")
            if version != PROTOCOL_VERSION:
                raise RequestFailed("VersionMismatch", f"server speaks version {PROTOCOL_VERSION}, client sent {version!r}")
            return reply(
                {
                    "version": PROTOCOL_VERSION,
                    "backend": self.backend.name(),
                    "profile": self.profile.to_json(),
                    "kinds": [k.value for k in OpKind if getattr(self.backend, "supports", lambda _: True)(k)],
                }
            )

        if req.opcode is Op.UPLOAD_MODULE:
            kind_name = _field(h, "kind", str)
            try:
                kind = OpKind(kind_name)
            except ValueError:
                raise RequestFailed("UnknownKind", f"unknown operator kind {kind_name!r}") from None
            attrs = _field(h, "attrs", dict)
            sigs = [_signature(x, f"inputs[{i}]") for i, x in enumerate(_field(h, "inputs", list))]
            try:
                handle = self.backend.compile(kind, attrs, sigs)
            except Exception as e:
                e._sites = [{"site": f"kernel:{kind.value}", "detail": "compile"}]
                raise
            mid = s.next_module
            s.next_module += 1
            s.modules[mid] = handle
            return reply({"module_id": mid, "outputs": [_sig_json(o) for o in handle.outputs]})

        if req.opcode is Op.ALLOC:
            dtype, shape = _signature(h, "ALLOC")
            nbytes = numel(shape) * dtype.width
            if nbytes > self.profile.max_buffer_bytes:
                raise RequestFailed(
                    "BufferLimitExceeded",
                    f"buffer of {nbytes} bytes exceeds {self.profile.max_buffer_bytes} on profile {self.profile.name}",
                )
            bid = s.next_buffer
            s.next_buffer += 1
            s.buffers[bid] = Buffer(dtype, shape, bytes(nbytes))
            return reply({"buffer_id": bid})

        if req.opcode is Op.WRITE_TENSOR:
            bid = _field(h, "buffer_id", int)
            buf = self._buffer(s, bid)
            if len(req.body) != buf.nbytes:
                raise RequestFailed("SizeMismatch", f"buffer {bid} holds {buf.nbytes} bytes, got {len(req.body)}")
            buf.data = bytes(req.body)
            return reply({"buffer_id": bid, "byte_len": buf.nbytes})

        if req.opcode is Op.READ_TENSOR:
            bid = _field(h, "buffer_id", int)
            buf = self._buffer(s, bid)
            return reply({"buffer_id": bid, "dtype": buf.dtype.label, "shape": list(buf.shape)}, buf.data)

        if req.opcode is Op.CALL:
            return reply(self._call(s, h))

        if req.opcode is Op.FREE:
            bids = [self._id(x) for x in h.get("buffer_ids", [])]
            mids = [self._id(x) for x in h.get("module_ids", [])]
            for bid in bids:
                self._buffer(s, bid)
            for mid in mids:
                self._module(s, mid)
            for bid in bids:
                s.buffers.pop(bid, None)
            for mid in mids:
                s.modules.pop(mid, None)
            return reply({"buffer_ids": bids, "module_ids": mids})

        if req.opcode is Op.SHUTDOWN:
            return reply({})

        raise RequestFailed("Protocol", f"opcode {req.opcode.name} is not a request")

    @staticmethod
    def _id(x) -> int:
        if isinstance(x, bool) or not isinstance(x, int):
            raise RequestFailed("BadRequest", f"handle ids are integers, got {x!r}")
        return x

    def _buffer(self, s: Session, bid) -> Buffer:
        bid = self._id(bid)
        if bid not in s.buffers:
            raise RequestFailed("UnknownBuffer", f"unknown buffer id {bid}")
        return s.buffers[bid]

    def _module(self, s: Session, mid) -> KernelHandle:
        mid = self._id(mid)
        if mid not in s.modules:
            raise RequestFailed("UnknownModule", f"unknown module id {mid}")
        return s.modules[mid]

    def _call(self, s: Session, h: dict) -> dict:
        mid = _field(h, "module_id", int)
        handle = self._module(s, mid)
        ins = [self._buffer(s, b) for b in _field(h, "in_buffers", list)]
        out_ids = _field(h, "out_buffers", list)
        outs = [self._buffer(s, b) for b in out_ids]
        site = f"kernel:{handle.kind.value}"

        width = handle.launch_width
        threads = h.get("threads", min(width, self.profile.max_threads_per_launch))
        if isinstance(threads, bool) or not isinstance(threads, int) or threads < 0:
            raise RequestFailed("BadRequest", f"threads must be a non-negative integer, got {threads!r}")
        limit = self.profile.max_threads_per_launch
        if threads > limit:
            raise RequestFailed(
                "LaunchLimitExceeded",
                f"{handle.kind} launch of {threads} threads exceeds {limit} on profile {self.profile.name}",
                site,
            )
        if width > self.profile.max_launch_width:
            raise RequestFailed(
                "LaunchLimitExceeded",
                f"{handle.kind} launch width {width} exceeds {limit} x {MAX_GROUPS} on profile {self.profile.name}",
                site,
            )
        if len(outs) != len(handle.outputs):
            raise RequestFailed("SignatureMismatch", f"module {mid} writes {len(handle.outputs)} outputs, got {len(outs)} buffers", site)
        for i, (buf, sig) in enumerate(zip(outs, handle.outputs)):
            if (buf.dtype, buf.shape) != sig:
                raise RequestFailed(
                    "SignatureMismatch",
                    f"out buffer {i} is {buf.dtype.label}{list(buf.shape)}, module writes {sig[0].label}{list(sig[1])}",
                    site,
                )
        tensors = [Tensor(b.dtype, b.shape, b.data) for b in ins]
        try:
            results = self.backend.run(handle, tensors)
        except Exception as e:
            e._sites = [{"site": site, "detail": f"module {mid}"}]
            raise
        for buf, t in zip(outs, results):
            buf.data = t.data
        return {"module_id": mid, "out_buffers": out_ids}


def serve(address: str, backend_name: str = "sim-native", profile_name: str = "pc", faults=None, ready=None) -> None:
    """Serve ``backend_name`` on ``address`` until a client sends SHUTDOWN.

    ``ready`` (optional) is called with the bound ``(host, port)`` once listening.
    """
    if backend_name.startswith("remote:"):
        raise ValueError("a device server hosts a local backend, not a remote one")
    backend = make_backend(backend_name, profile_name, faults)
    host, port = parse_address(address)
    server = DeviceServer(backend, host, port)
    if ready is not None:
        ready(server.address)
    server.serve_forever()

