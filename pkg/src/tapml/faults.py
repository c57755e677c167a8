"""Deterministic fault catalog and the wrapper that makes a backend buggy.

A fault rewrites the kernel function of one operator kind. Faults are
configured as data (``faults.json``) so a localization run can be scored
against ground truth supplied from outside.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .backends import Interpreter, KernelHandle
from .errors import FaultConfigError, UnknownKind
from .graph import OpKind
from .kernels import KERNELS, KernelFn, embedding, gelu_tanh, matmul
from .tensor import Tensor


class FaultMode(str, enum.Enum):
    ResultPlusOne = "ResultPlusOne"
    FastMathTanhNaN = "FastMathTanhNaN"
    PackedU32Dequant = "PackedU32Dequant"
    WrongGeluConstant = "WrongGeluConstant"
    Fp16Accumulate = "Fp16Accumulate"
    UnalignedGatherOffByOne = "UnalignedGatherOffByOne"
    DropLastColumn = "DropLastColumn"


# Faults that flip results outright rather than nudging them.
DISCRETE_MODES = frozenset(
    {
        FaultMode.ResultPlusOne,
        FaultMode.FastMathTanhNaN,
        FaultMode.PackedU32Dequant,
        FaultMode.UnalignedGatherOffByOne,
        FaultMode.DropLastColumn,
    }
)

# Modes tied to one kernel's internals; the rest apply to any kind.
MODE_KINDS = {
    FaultMode.FastMathTanhNaN: OpKind.GeluTanh,
    FaultMode.WrongGeluConstant: OpKind.GeluTanh,
    FaultMode.PackedU32Dequant: OpKind.DequantizeU8,
    FaultMode.Fp16Accumulate: OpKind.MatMul,
    FaultMode.UnalignedGatherOffByOne: OpKind.Embedding,
}

DEFAULT_PARAMS: dict[FaultMode, dict[str, Any]] = {
    FaultMode.FastMathTanhNaN: {"threshold": 45.0},
    FaultMode.WrongGeluConstant: {"value": 0.44715},
    FaultMode.UnalignedGatherOffByOne: {"alignment": 16},
}


@dataclass(frozen=True)
class FaultSpec:
    id: str
    kind: OpKind
    mode: FaultMode
    params: Mapping[str, Any] = field(default_factory=dict)
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", FaultMode(self.mode))
        object.__setattr__(self, "params", {**DEFAULT_PARAMS.get(self.mode, {}), **dict(self.params)})
        try:
            object.__setattr__(self, "kind", OpKind(self.kind))
        except ValueError:
            raise UnknownKind(str(self.kind)) from None
        want = MODE_KINDS.get(self.mode)
        if want is not None and self.kind is not want:
            raise FaultConfigError(f"fault {self.id!r}: {self.mode.value} only applies to {want}, not {self.kind}")

    @property
    def discrete(self) -> bool:
        return self.mode in DISCRETE_MODES

    def transform(self, fn: KernelFn) -> KernelFn:
        """The faulty version of kernel function ``fn``."""
        p = self.params
        mode = self.mode
        if mode is FaultMode.ResultPlusOne:
            return lambda xs, a, e, c: fn(xs, a, e, c) + e.type(1)
        if mode is FaultMode.FastMathTanhNaN:
            thr = float(p["threshold"])

            def nan_above(xs, a, e, c):
                out = np.array(fn(xs, a, e, c), dtype=e)
                out[np.abs(xs[0].astype(np.float64)) > thr] = np.nan
                return out

            return nan_above
        if mode is FaultMode.WrongGeluConstant:
            return lambda xs, a, e, c: gelu_tanh(xs[0], e, coeff=float(p["value"]))
        if mode is FaultMode.Fp16Accumulate:
            return lambda xs, a, e, c: matmul(xs[0], xs[1], np.dtype(np.float16))
        if mode is FaultMode.PackedU32Dequant:
            return _packed_u32(fn)
        if mode is FaultMode.UnalignedGatherOffByOne:
            align = int(p["alignment"])

            def gather(xs, a, e, c):
                table, ids = xs
                row_bytes = table.shape[1] * table.dtype.itemsize
                off = ids.astype(np.int64) * row_bytes
                shifted = np.where(off % align != 0, (ids + 1) % table.shape[0], ids)
                return embedding(table, shifted)

            return gather
        if mode is FaultMode.DropLastColumn:

            def drop(xs, a, e, c):
                out = np.array(fn(xs, a, e, c))
                if out.ndim:
                    out[..., -1] = 0
                return out

            return drop
        raise AssertionError(mode)

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "mode": self.mode.value, "params": dict(self.params), "enabled": self.enabled}


def _packed_u32(fn: KernelFn) -> KernelFn:
    # Reads each aligned 4-byte group as one little-endian u32 and writes that
    # value to all four lanes instead of converting the bytes one by one.
    def packed(xs, a, e, c):
        u = np.ascontiguousarray(xs[0], dtype=np.uint8)
        out = np.array(fn(xs, a, e, c), dtype=e).reshape(-1)
        flat = u.reshape(-1)
        n = flat.size - flat.size % 4
        words = flat[:n].view("<u4").astype(np.float64)
        out[:n] = np.repeat(words, 4).astype(e)
        return out.reshape(u.shape)

    return packed


@dataclass(frozen=True)
class FaultSet:
    faults: tuple[FaultSpec, ...] = ()
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "faults", tuple(self.faults))
        ids = [f.id for f in self.faults]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise FaultConfigError(f"duplicate fault ids: {sorted(dup)}")
        seen = set()
        for f in self.faults:
            key = (f.kind, f.mode)
            if key in seen:
                raise FaultConfigError(f"two faults for ({f.kind}, {f.mode.value})")
            seen.add(key)

    @property
    def active(self) -> list[FaultSpec]:
        return [f for f in self.faults if f.enabled]

    def kinds(self) -> set[OpKind]:
        """Ground-truth buggy kinds: targets of the enabled faults."""
        return {f.kind for f in self.active}

    def to_json(self) -> list[dict]:
        return [f.to_json() for f in self.faults]


def parse_faults(doc: Any, note: str = "") -> FaultSet:
    if not isinstance(doc, list):
        raise FaultConfigError("faults file must hold a JSON array")
    specs = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise FaultConfigError(f"fault #{i} is not an object")
        try:
            mode = FaultMode(entry["mode"])
        except KeyError as e:
            raise FaultConfigError(f"fault #{i} missing field {e}") from None
        except ValueError:
            raise FaultConfigError(f"fault #{i}: unknown mode {entry['mode']!r}") from None
        if "kind" not in entry:
            raise FaultConfigError(f"fault #{i} missing field 'kind'")
        specs.append(
            FaultSpec(
                id=str(entry.get("id", f"fault-{i}")),
                kind=entry["kind"],
                mode=mode,
                params=entry.get("params") or {},
                enabled=bool(entry.get("enabled", True)),
            )
        )
    return FaultSet(tuple(specs), note)


def load_faults(path) -> FaultSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FaultConfigError(f"{path}: invalid JSON at offset {e.pos}: {e.msg}") from None
    return parse_faults(doc, note=str(path))


def save_faults(faults: FaultSet | Iterable[FaultSpec], path) -> None:
    fs = faults if isinstance(faults, FaultSet) else FaultSet(tuple(faults))
    Path(path).write_text(json.dumps(fs.to_json(), indent=1) + "\n", encoding="utf-8")


CATALOG: dict[str, FaultSpec] = {
    f.id: f
    for f in (
        FaultSpec("sub-result-plus-one", OpKind.Sub, FaultMode.ResultPlusOne),
        FaultSpec("gelu-fastmath-tanh", OpKind.GeluTanh, FaultMode.FastMathTanhNaN),
        FaultSpec("dequant-packed-u32", OpKind.DequantizeU8, FaultMode.PackedU32Dequant),
        FaultSpec("gelu-wrong-constant", OpKind.GeluTanh, FaultMode.WrongGeluConstant),
        FaultSpec("matmul-fp16-accumulate", OpKind.MatMul, FaultMode.Fp16Accumulate),
        FaultSpec("embedding-unaligned", OpKind.Embedding, FaultMode.UnalignedGatherOffByOne),
        FaultSpec("softmax-drop-last-column", OpKind.Softmax, FaultMode.DropLastColumn),
    )
}


class FaultyBackend:
    """A backend that misbehaves on the faulted kinds and nowhere else."""

    def __init__(self, inner: Interpreter, faults: FaultSet):
        self.inner = inner
        self.faults = faults
        self._kernels: dict[OpKind, KernelFn] = {}
        for f in faults.active:
            base = self._kernels.get(f.kind, KERNELS[f.kind])
            self._kernels[f.kind] = f.transform(base)

    def name(self) -> str:
        return self.inner.name()

    def profile(self):
        return self.inner.profile()

    @property
    def policy(self):
        return self.inner.policy

    def supports(self, kind) -> bool:
        return self.inner.supports(kind)

    def compile(self, kind, attrs, inputs) -> KernelHandle:
        return self.inner.compile(kind, attrs, inputs)

    def run(self, handle: KernelHandle, inputs: Sequence[Tensor]) -> list[Tensor]:
        return self.inner.run(handle, inputs, kernel=self._kernels.get(handle.kind))

    def __repr__(self) -> str:
        return f"FaultyBackend({self.inner!r}, {[f.id for f in self.faults.active]})"


def wrap(backend, faults: FaultSet | Iterable[FaultSpec]):
    """Return ``backend`` with ``faults`` applied in list order."""
    fs = faults if isinstance(faults, FaultSet) else FaultSet(tuple(faults))
    if not fs.active:
        return backend
    if not isinstance(backend, Interpreter):
        raise FaultConfigError(
            f"faults can only be injected into an in-process interpreter, not {backend!r}; "
            "serve the faulted backend with `tapml device serve --faults` instead"
        )
    for f in fs.active:
        if not backend.supports(f.kind):
            raise FaultConfigError(f"backend {backend.name()!r} does not support {f.kind}, cannot fault it")
    return FaultyBackend(backend, fs)
