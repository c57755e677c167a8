"""Operators, nodes and the topologically ordered compute graph."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .errors import AttrError, ShapeMismatch
from .tensor import MAX_RANK, DType

Signature = tuple[DType, tuple[int, ...]]


class OpKind(str, enum.Enum):
    Constant = "Constant"
    Add = "Add"
    Sub = "Sub"
    Mul = "Mul"
    MatMul = "MatMul"
    Relu = "Relu"
    Silu = "Silu"
    GeluTanh = "GeluTanh"
    Softmax = "Softmax"
    RmsNorm = "RmsNorm"
    Embedding = "Embedding"
    Transpose2D = "Transpose2D"
    Reshape = "Reshape"
    DequantizeU8 = "DequantizeU8"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "OpKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown operator kind {name!r}") from None


ARITY = {
    OpKind.Constant: 0,
    OpKind.Add: 2,
    OpKind.Sub: 2,
    OpKind.Mul: 2,
    OpKind.MatMul: 2,
    OpKind.Relu: 1,
    OpKind.Silu: 1,
    OpKind.GeluTanh: 1,
    OpKind.Softmax: 1,
    OpKind.RmsNorm: 2,
    OpKind.Embedding: 2,
    OpKind.Transpose2D: 1,
    OpKind.Reshape: 1,
    OpKind.DequantizeU8: 1,
}

# name -> (value type, required)
ATTRS: dict[OpKind, dict[str, tuple[str, bool]]] = {k: {} for k in OpKind}
ATTRS[OpKind.Constant] = {"dtype": ("str", True), "shape": ("ints", True)}
ATTRS[OpKind.RmsNorm] = {"eps": ("real", True)}
ATTRS[OpKind.Reshape] = {"target_shape": ("ints", True)}
ATTRS[OpKind.DequantizeU8] = {
    "scale": ("real", True),
    "zero_point": ("int", True),
    "group": ("int", True),
    "dtype": ("str", False),
}

FLOAT_DTYPES = (DType.F64, DType.F32, DType.F16)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _type_ok(kind: str, v) -> bool:
    if kind == "int":
        return _is_int(v)
    if kind == "real":
        return _is_real(v)
    if kind == "ints":
        return isinstance(v, (list, tuple)) and all(_is_int(x) for x in v)
    return isinstance(v, str)


def attr_problems(kind: OpKind, attrs: Mapping[str, Any]) -> list[str]:
    """Every way ``attrs`` breaks the attribute table for ``kind``."""
    table = ATTRS[kind]
    problems = []
    for name, (typ, required) in table.items():
        if name not in attrs:
            if required:
                problems.append(f"{kind} missing attr '{name}'")
            continue
        if not _type_ok(typ, attrs[name]):
            problems.append(f"{kind} attr '{name}' must be {typ}, got {attrs[name]!r}")
    for name in attrs:
        if name not in table:
            problems.append(f"{kind} has unexpected attr '{name}'")
    if problems:
        return problems

    if kind is OpKind.RmsNorm and attrs["eps"] < 0:
        problems.append("RmsNorm attr 'eps' must be >= 0")
    elif kind is OpKind.DequantizeU8:
        if attrs["scale"] <= 0:
            problems.append("DequantizeU8 attr 'scale' must be > 0")
        if not 0 <= attrs["zero_point"] <= 255:
            problems.append(f"DequantizeU8 attr 'zero_point' out of [0,255]: {attrs['zero_point']}")
        if attrs["group"] <= 0:
            problems.append("DequantizeU8 attr 'group' must be positive")
        if "dtype" in attrs and attrs["dtype"] not in ("F64", "F32", "F16"):
            problems.append(f"DequantizeU8 attr 'dtype' must be a float dtype, got {attrs['dtype']!r}")
    elif kind is OpKind.Constant:
        if attrs["dtype"] not in DType.__members__:
            problems.append(f"Constant attr 'dtype' unknown: {attrs['dtype']!r}")
        if len(attrs["shape"]) > MAX_RANK or any(s < 0 for s in attrs["shape"]):
            problems.append(f"Constant attr 'shape' invalid: {attrs['shape']}")
    elif kind is OpKind.Reshape:
        if len(attrs["target_shape"]) > MAX_RANK or any(s < 0 for s in attrs["target_shape"]):
            problems.append(f"Reshape attr 'target_shape' invalid: {attrs['target_shape']}")
    return problems


def check_attrs(kind: OpKind, attrs: Mapping[str, Any]) -> None:
    problems = attr_problems(kind, attrs)
    if problems:
        raise AttrError("; ".join(problems))


@dataclass(frozen=True)
class Node:
    id: int
    kind: OpKind
    inputs: tuple[int, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", dict(self.attrs))


@dataclass(frozen=True)
class ComputeGraph:
    nodes: tuple[Node, ...]
    input_ids: tuple[int, ...]
    output_ids: tuple[int, ...]
    weight_ids: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("nodes", "input_ids", "output_ids", "weight_ids"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def node(self, node_id: int) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def kinds_in_order(self) -> list[OpKind]:
        """Distinct kinds by first occurrence in node order."""
        seen: list[OpKind] = []
        for n in self.nodes:
            if n.kind not in seen:
                seen.append(n.kind)
        return seen


@dataclass(frozen=True)
class Violation:
    node_id: int | None
    message: str

    def __str__(self) -> str:
        return self.message if self.node_id is None else f"node {self.node_id}: {self.message}"


def validate_graph(graph: ComputeGraph) -> list[Violation]:
    out: list[Violation] = []
    seen: set[int] = set()
    all_ids = {n.id for n in graph.nodes}
    for n in graph.nodes:
        if not _is_int(n.id) or n.id < 0:
            out.append(Violation(n.id, f"invalid node id {n.id!r}"))
        if n.id in seen:
            out.append(Violation(n.id, f"duplicate node id {n.id}"))
        for i in n.inputs:
            if i in seen:
                continue
            if i in all_ids:
                out.append(Violation(n.id, f"forward reference at node {n.id} (input {i})"))
            else:
                out.append(Violation(n.id, f"unknown input id {i} at node {n.id}"))
        if len(n.inputs) != ARITY[n.kind]:
            out.append(Violation(n.id, f"{n.kind} takes {ARITY[n.kind]} inputs, got {len(n.inputs)}"))
        for p in attr_problems(n.kind, n.attrs):
            out.append(Violation(n.id, p))
        seen.add(n.id)

    by_id = {n.id: n for n in graph.nodes}
    for label, ids in (("input", graph.input_ids), ("weight", graph.weight_ids)):
        for i in ids:
            if i not in by_id:
                out.append(Violation(i, f"{label} id {i} does not exist"))
            elif by_id[i].kind is not OpKind.Constant:
                out.append(Violation(i, f"{label} id {i} is not a Constant node"))
    for i in sorted(set(graph.input_ids) & set(graph.weight_ids)):
        out.append(Violation(i, f"node {i} is both a graph input and a weight"))
    bound = set(graph.input_ids) | set(graph.weight_ids)
    for n in graph.nodes:
        if n.kind is OpKind.Constant and n.id not in bound:
            out.append(Violation(n.id, f"Constant node {n.id} is neither a graph input nor a weight"))
    if not graph.output_ids:
        out.append(Violation(None, "graph has no outputs"))
    for i in graph.output_ids:
        if i not in by_id:
            out.append(Violation(i, f"output id {i} does not exist"))

    if not out:
        try:
            infer_shapes(graph)
        except ShapeMismatch as e:
            out.append(Violation(e.node_id, f"shape inference failed: {e.detail}"))
    return out


def _need_float(kind: OpKind, sig: Signature) -> None:
    if sig[0] not in FLOAT_DTYPES:
        raise ShapeMismatch(None, f"{kind} needs a float operand, got {sig[0]}")


def infer_node(kind: OpKind, attrs: Mapping[str, Any], in_sigs: Sequence[Signature]) -> Signature:
    """Output signature of one operator. Every kind has exactly one output.

    Constant accepts either no inputs (graph view) or its bound payload
    (kernel view), which must match the declared dtype/shape.
    """
    kind = OpKind(kind)
    sigs = [(d, tuple(s)) for d, s in in_sigs]
    if kind is OpKind.Constant:
        declared = (DType.parse(attrs["dtype"]), tuple(attrs["shape"]))
        if sigs and sigs != [declared]:
            raise ShapeMismatch(None, f"Constant payload {sigs} does not match declared {declared}")
        return declared
    if len(sigs) != ARITY[kind]:
        raise ShapeMismatch(None, f"{kind} takes {ARITY[kind]} inputs, got {len(sigs)}")

    if kind in (OpKind.Add, OpKind.Sub, OpKind.Mul):
        (da, sa), (db, sb) = sigs
        _need_float(kind, sigs[0])
        if da != db:
            raise ShapeMismatch(None, f"{kind} dtype mismatch {da} vs {db}")
        if sa == sb or sb == ():
            return da, sa
        if sa == ():
            return db, sb
        raise ShapeMismatch(None, f"{kind} shapes {list(sa)} and {list(sb)} are not equal or scalar")
    if kind is OpKind.MatMul:
        (da, sa), (db, sb) = sigs
        _need_float(kind, sigs[0])
        if da != db:
            raise ShapeMismatch(None, f"MatMul dtype mismatch {da} vs {db}")
        if len(sa) != 2 or len(sb) != 2:
            raise ShapeMismatch(None, f"MatMul needs 2-D operands, got {list(sa)} and {list(sb)}")
        if sa[1] != sb[0]:
            raise ShapeMismatch(None, f"MatMul inner dims differ: {list(sa)} x {list(sb)}")
        return da, (sa[0], sb[1])
    if kind in (OpKind.Relu, OpKind.Silu, OpKind.GeluTanh):
        _need_float(kind, sigs[0])
        return sigs[0]
    if kind is OpKind.Softmax:
        _need_float(kind, sigs[0])
        if len(sigs[0][1]) < 1:
            raise ShapeMismatch(None, "Softmax needs rank >= 1")
        return sigs[0]
    if kind is OpKind.RmsNorm:
        (dx, sx), (dg, sg) = sigs
        _need_float(kind, sigs[0])
        if len(sx) < 1 or sg != (sx[-1],) or dg != dx:
            raise ShapeMismatch(None, f"RmsNorm gamma {dg}{list(sg)} does not match x {dx}{list(sx)}")
        return dx, sx
    if kind is OpKind.Embedding:
        (dt, st), (di, si) = sigs
        if len(st) != 2:
            raise ShapeMismatch(None, f"Embedding table must be 2-D, got {list(st)}")
        if di is not DType.I32:
            raise ShapeMismatch(None, f"Embedding ids must be I32, got {di}")
        out = si + (st[1],)
        if len(out) > MAX_RANK:
            raise ShapeMismatch(None, f"Embedding output rank {len(out)} exceeds {MAX_RANK}")
        return dt, out
    if kind is OpKind.Transpose2D:
        d, s = sigs[0]
        if len(s) != 2:
            raise ShapeMismatch(None, f"Transpose2D needs a 2-D operand, got {list(s)}")
        return d, (s[1], s[0])
    if kind is OpKind.Reshape:
        d, s = sigs[0]
        target = tuple(attrs["target_shape"])
        if math.prod(target) != math.prod(s):
            raise ShapeMismatch(None, f"cannot reshape {list(s)} to {list(target)}")
        return d, target
    if kind is OpKind.DequantizeU8:
        d, s = sigs[0]
        if d is not DType.U8:
            raise ShapeMismatch(None, f"DequantizeU8 needs U8 input, got {d}")
        if len(s) < 1 or s[-1] % attrs["group"] != 0:
            raise ShapeMismatch(None, f"last axis of {list(s)} is not a multiple of group {attrs['group']}")
        return DType.parse(attrs.get("dtype", "F32")), s
    raise AssertionError(kind)


def infer_shapes(
    graph: ComputeGraph, input_shapes: Mapping[int, Sequence[int]] | None = None
) -> dict[int, Signature]:
    """Map every node id to its (dtype, shape); raises ShapeMismatch."""
    input_shapes = dict(input_shapes or {})
    sigs: dict[int, Signature] = {}
    for n in graph.nodes:
        try:
            check_attrs(n.kind, n.attrs)
            if n.kind is OpKind.Constant and n.id in input_shapes:
                declared = tuple(n.attrs["shape"])
                if tuple(input_shapes[n.id]) != declared:
                    raise ShapeMismatch(n.id, f"input shape {list(input_shapes[n.id])} != declared {list(declared)}")
            sigs[n.id] = infer_node(n.kind, n.attrs, [sigs[i] for i in n.inputs])
        except ShapeMismatch as e:
            raise ShapeMismatch(n.id, e.detail) from None
        except (AttrError, KeyError) as e:
            raise ShapeMismatch(n.id, str(e)) from None
    return sigs
