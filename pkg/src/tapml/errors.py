"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class TapmlError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(TapmlError):
    def __init__(self, node_id: int | None, detail: str):
        self.node_id = node_id
        self.detail = detail
        where = f"node {node_id}: " if node_id is not None else ""
        super().__init__(f"{where}{detail}")


class AttrError(TapmlError):
    """An operator attribute is missing, mistyped or out of range."""


class UnsupportedOp(TapmlError):
    def __init__(self, backend: str, kind: str):
        self.backend = backend
        self.kind = kind
        super().__init__(f"backend {backend!r} has no kernel for {kind}")


class LaunchExceedsProfile(TapmlError):
    pass


class KernelError(TapmlError):
    """A kernel failed at run time (bad index, wrong input count, ...)."""


class ParseError(TapmlError):
    def __init__(self, message: str, *, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        loc = []
        if path is not None:
            loc.append(f"at {path}")
        if offset is not None:
            loc.append(f"offset {offset}")
        super().__init__(message + (f" ({', '.join(loc)})" if loc else ""))


class ChecksumMismatch(TapmlError):
    def __init__(self, path: str, expected: str, actual: str):
        self.path = path
        self.expected = expected
        self.actual = actual
        super().__init__(f"checksum mismatch for {path}: expected {expected}, got {actual}")


class DigestMismatch(TapmlError):
    """Corpus was carved from a different model than the one supplied."""


class FaultConfigError(TapmlError):
    pass


class UnknownKind(FaultConfigError):
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"unknown operator kind {kind!r}")


class NodeError(TapmlError):
    """Backend failure while executing a graph, tagged with where it happened."""

    def __init__(self, node_id: int, placement: str, cause: Exception):
        self.node_id = node_id
        self.placement = placement
        self.cause = cause
        super().__init__(f"node {node_id} on {placement}: {type(cause).__name__}: {cause}")


class ProtocolError(TapmlError):
    pass


class ConnectionLost(TapmlError):
    pass


class RemoteError(TapmlError):
    def __init__(self, code: str, message: str, context: list[dict] | None = None):
        self.code = code
        self.message = message
        self.remote_context = list(context or [])
        super().__init__(f"[{code}] {message}")
