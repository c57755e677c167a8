"""Backend contract, the two in-process interpreters, and the registry."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence, runtime_checkable

from .errors import KernelError, LaunchExceedsProfile, UnsupportedOp
from .graph import OpKind, Signature, check_attrs, infer_node
from .kernels import GOLDEN, NATIVE, KernelFn, NumericPolicy, evaluate
from .tensor import DType, Tensor, numel

MAX_GROUPS = 65535


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    max_threads_per_launch: int
    max_buffer_bytes: int

    @property
    def max_launch_width(self) -> int:
        return self.max_threads_per_launch * MAX_GROUPS

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "max_threads_per_launch": self.max_threads_per_launch,
            "max_buffer_bytes": self.max_buffer_bytes,
        }


PROFILES = {
    "pc": DeviceProfile("pc", 1024, 1 << 30),
    "mobile": DeviceProfile("mobile", 256, 128 << 20),
}


def attrs_digest(attrs: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(attrs, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class KernelHandle:
    backend: str
    kind: OpKind
    attrs: Mapping[str, Any]
    inputs: tuple[Signature, ...]
    outputs: tuple[Signature, ...]
    attrs_digest: str = ""
    # Backend-private reference, e.g. a remote module id.
    token: Any = field(default=None, compare=False)

    @property
    def launch_width(self) -> int:
        return max((numel(s) for _, s in self.outputs), default=0)


@runtime_checkable
class Backend(Protocol):
    def name(self) -> str: ...

    def profile(self) -> DeviceProfile: ...

    def compile(self, kind: OpKind, attrs: Mapping[str, Any], inputs: Sequence[Signature]) -> KernelHandle: ...

    def run(self, handle: KernelHandle, inputs: Sequence[Tensor]) -> list[Tensor]: ...


def resolve_signature(backend: str, kind, attrs, inputs) -> KernelHandle:
    kind = OpKind(kind)
    check_attrs(kind, attrs)
    ins = tuple((DType.parse(d) if isinstance(d, str) else d, tuple(s)) for d, s in inputs)
    out = infer_node(kind, attrs, ins)
    return KernelHandle(backend, kind, dict(attrs), ins, (out,), attrs_digest(attrs))


def check_inputs(handle: KernelHandle, inputs: Sequence[Tensor]) -> None:
    got = tuple(t.signature() for t in inputs)
    if got != handle.inputs:
        raise KernelError(
            f"{handle.kind} expects inputs {[(str(d), list(s)) for d, s in handle.inputs]}, "
            f"got {[(str(d), list(s)) for d, s in got]}"
        )


class Interpreter:
    """In-process backend evaluating :data:`kernels.KERNELS` under a policy."""

    def __init__(
        self,
        name: str,
        policy: NumericPolicy,
        profile: DeviceProfile = PROFILES["pc"],
        unsupported: frozenset[OpKind] | set[OpKind] = frozenset(),
    ):
        self._name = name
        self.policy = policy
        self._profile = profile
        self.unsupported = frozenset(OpKind(k) for k in unsupported)

    def name(self) -> str:
        return self._name

    def profile(self) -> DeviceProfile:
        return self._profile

    def supports(self, kind: OpKind) -> bool:
        return OpKind(kind) not in self.unsupported

    def compile(self, kind, attrs, inputs) -> KernelHandle:
        if not self.supports(kind):
            raise UnsupportedOp(self._name, str(OpKind(kind)))
        return resolve_signature(self._name, kind, attrs, inputs)

    def run(self, handle: KernelHandle, inputs: Sequence[Tensor], kernel: KernelFn | None = None) -> list[Tensor]:
        if handle.backend != self._name:
            raise KernelError(f"handle compiled by {handle.backend!r} used on {self._name!r}")
        check_inputs(handle, inputs)
        if handle.launch_width > self._profile.max_launch_width:
            raise LaunchExceedsProfile(
                f"{handle.kind} launch width {handle.launch_width} exceeds "
                f"{self._profile.max_threads_per_launch} x {MAX_GROUPS} on profile {self._profile.name}"
            )
        out_dtype, out_shape = handle.outputs[0]
        arr = evaluate(handle.kind, handle.attrs, [t.array() for t in inputs], out_dtype, self.policy, kernel)
        if arr.shape != out_shape:
            raise KernelError(f"{handle.kind} produced shape {arr.shape}, expected {out_shape}")
        return [Tensor.from_array(arr, out_dtype)]

    def __repr__(self) -> str:
        return f"Interpreter({self._name!r}, profile={self._profile.name})"


def golden(profile: str = "pc") -> Interpreter:
    return Interpreter("golden-f64", GOLDEN, PROFILES[profile])


def sim_native(profile: str = "pc", unsupported=frozenset()) -> Interpreter:
    return Interpreter("sim-native", NATIVE, PROFILES[profile], unsupported)


LOCAL_BACKENDS = {"golden-f64": golden, "sim-native": sim_native}


def make_backend(spec: str, profile: str = "pc", faults=None):
    """Resolve ``golden-f64``, ``sim-native`` or ``remote:<host>:<port>``."""
    if spec.startswith("remote:"):
        from .rpc.client import connect

        backend = connect(spec[len("remote:") :])
    elif spec in LOCAL_BACKENDS:
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        backend = LOCAL_BACKENDS[spec](profile)
    else:
        raise ValueError(f"unknown backend {spec!r}; choose from {sorted(LOCAL_BACKENDS)} or remote:HOST:PORT")
    if faults is not None:
        from .faults import wrap

        backend = wrap(backend, faults)
    return backend
