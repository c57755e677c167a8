"""Model bundle persistence: ``model.json`` manifest plus ``weights.bin``."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ChecksumMismatch, ParseError
from .graph import ComputeGraph, Node, OpKind, infer_shapes, validate_graph
from .tensor import DType, Tensor

MANIFEST = "model.json"
WEIGHTS = "weights.bin"


@dataclass(frozen=True)
class ModelBundle:
    graph: ComputeGraph
    weights: dict[int, Tensor]
    name: str = "model"
    version: str = "0"
    # Output id whose argmax is compared in ``argmax`` oracle mode.
    logits_id: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def logits(self) -> int:
        return self.graph.output_ids[0] if self.logits_id is None else self.logits_id

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(manifest(self)).encode()).hexdigest()

    def problems(self) -> list[str]:
        out = [str(v) for v in validate_graph(self.graph)]
        if out:
            return out
        sigs = infer_shapes(self.graph)
        if set(self.weights) != set(self.graph.weight_ids):
            out.append(
                f"weights cover {sorted(self.weights)}, graph declares {sorted(self.graph.weight_ids)}"
            )
        for wid, t in self.weights.items():
            if wid in sigs and t.signature() != sigs[wid]:
                out.append(f"weight {wid} is {t.dtype}{list(t.shape)}, node declares {sigs[wid][0]}{list(sigs[wid][1])}")
        if self.logits_id is not None and self.logits_id not in self.graph.output_ids:
            out.append(f"logits id {self.logits_id} is not a graph output")
        return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest(bundle: ModelBundle) -> dict:
    g = bundle.graph
    weights = []
    offset = 0
    for wid in g.weight_ids:
        t = bundle.weights[wid]
        weights.append(
            {
                "id": wid,
                "dtype": t.dtype.label,
                "shape": list(t.shape),
                "offset": offset,
                "byte_len": t.nbytes,
                "sha256": t.sha256(),
            }
        )
        offset += t.nbytes
    doc = {
        "name": bundle.name,
        "version": bundle.version,
        "nodes": [
            {"id": n.id, "kind": n.kind.value, "name": n.name, "attrs": dict(n.attrs), "inputs": list(n.inputs)}
            for n in g.nodes
        ],
        "inputs": list(g.input_ids),
        "outputs": list(g.output_ids),
        "weights": weights,
    }
    if bundle.logits_id is not None:
        doc["logits"] = bundle.logits_id
    if bundle.extra:
        doc["extra"] = bundle.extra
    return doc


def save_model(bundle: ModelBundle, path) -> Path:
    problems = bundle.problems()
    if problems:
        raise ValueError("refusing to save invalid bundle: " + "; ".join(problems))
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / MANIFEST).write_text(json.dumps(manifest(bundle), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(path / WEIGHTS, "wb") as f:
        for wid in bundle.graph.weight_ids:
            f.write(bundle.weights[wid].data)
    return path


def _field(doc: dict, key: str, typ, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ParseError(f"missing field '{key}'", path=where)
    v = doc[key]
    if typ is int and isinstance(v, bool) or not isinstance(v, typ):
        raise ParseError(f"field '{key}' has wrong type {type(v).__name__}", path=f"{where}.{key}")
    return v


def _int_list(v, where: str) -> list[int]:
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise ParseError("expected a list of integers", path=where)
    return v


def load_model(path) -> ModelBundle:
    path = Path(path)
    mpath = path / MANIFEST
    try:
        text = mpath.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError("missing model manifest", path=str(mpath)) from None
    except UnicodeDecodeError as e:
        raise ParseError("manifest is not UTF-8", path=str(mpath), offset=e.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", path=str(mpath), offset=e.pos) from None
    if not isinstance(doc, dict):
        raise ParseError("manifest must be an object", path="$")

    name = _field(doc, "name", str, "$")
    version = _field(doc, "version", str, "$")
    nodes = []
    for i, nd in enumerate(_field(doc, "nodes", list, "$")):
        where = f"$.nodes[{i}]"
        kind_name = _field(nd, "kind", str, where)
        try:
            kind = OpKind.parse(kind_name)
        except ValueError:
            raise ParseError(f"unknown operator kind {kind_name!r}", path=f"{where}.kind") from None
        nodes.append(
            Node(
                id=_field(nd, "id", int, where),
                kind=kind,
                inputs=tuple(_int_list(_field(nd, "inputs", list, where), f"{where}.inputs")),
                attrs=_field(nd, "attrs", dict, where),
                name=_field(nd, "name", str, where),
            )
        )
    weight_entries = _field(doc, "weights", list, "$")
    graph = ComputeGraph(
        nodes=tuple(nodes),
        input_ids=tuple(_int_list(_field(doc, "inputs", list, "$"), "$.inputs")),
        output_ids=tuple(_int_list(_field(doc, "outputs", list, "$"), "$.outputs")),
        weight_ids=tuple(_field(w, "id", int, f"$.weights[{i}]") for i, w in enumerate(weight_entries)),
    )
    violations = validate_graph(graph)
    if violations:
        raise ParseError("invalid graph: " + "; ".join(map(str, violations)), path="$.nodes")

    try:
        blob = (path / WEIGHTS).read_bytes()
    except FileNotFoundError:
        raise ParseError("missing weights file", path=str(path / WEIGHTS)) from None
    weights: dict[int, Tensor] = {}
    end = 0
    for i, w in enumerate(weight_entries):
        where = f"$.weights[{i}]"
        try:
            dtype = DType.parse(_field(w, "dtype", str, where))
        except ValueError as e:
            raise ParseError(str(e), path=f"{where}.dtype") from None
        shape = _int_list(_field(w, "shape", list, where), f"{where}.shape")
        off = _field(w, "offset", int, where)
        n = _field(w, "byte_len", int, where)
        digest = _field(w, "sha256", str, where)
        if off < 0 or n < 0 or off + n > len(blob):
            raise ParseError(f"weights length: need {off + n} bytes, file has {len(blob)}", path=str(path / WEIGHTS), offset=len(blob))
        data = blob[off : off + n]
        actual = hashlib.sha256(data).hexdigest()
        if actual != digest:
            raise ChecksumMismatch(f"{WEIGHTS}[{off}:{off + n}] (weight {w['id']})", digest, actual)
        try:
            weights[w["id"]] = Tensor(dtype, tuple(shape), data)
        except ValueError as e:
            raise ParseError(str(e), path=where) from None
        end = max(end, off + n)
    if end != len(blob):
        raise ParseError(f"weights length: manifest covers {end} bytes, file has {len(blob)}", path=str(path / WEIGHTS), offset=end)

    logits = doc.get("logits")
    bundle = ModelBundle(graph, weights, name=name, version=version, logits_id=logits, extra=doc.get("extra", {}))
    problems = bundle.problems()
    if problems:
        raise ParseError("; ".join(problems), path="$.weights")
    return bundle
