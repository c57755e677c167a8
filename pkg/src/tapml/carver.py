"""Operator-level test carving from an instrumented end-to-end run."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .bundle import ModelBundle
from .errors import ChecksumMismatch, DigestMismatch, ParseError
from .executor import run_model
from .graph import Node, OpKind, Signature, infer_shapes
from .tensor import DType, Tensor

MANIFEST = "corpus.json"
STATS = "carve_stats.json"
BLOBS = "blobs"


@dataclass(frozen=True)
class CarvedTest:
    """One replayable unit test: operator, recorded inputs, oracle outputs."""

    node_id: int
    kind: OpKind
    attrs: Mapping[str, Any]
    step: int
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]

    @property
    def input_signature(self) -> tuple[Signature, ...]:
        return tuple(t.signature() for t in self.inputs)

    def key(self) -> tuple:
        return tuple(t.data for t in self.inputs) + tuple(t.data for t in self.outputs)


@dataclass
class TestCorpus:
    model_sha256: str
    backend: str
    tests: dict[int, list[CarvedTest]]
    model_inputs: list[dict[int, Tensor]] = field(default_factory=list)
    model_outputs: list[dict[int, Tensor]] = field(default_factory=list)
    provenance: str = ""
    carve_secs: float = field(default=0.0, compare=False)

    __test__ = False  # not a pytest class

    def all_tests(self) -> list[CarvedTest]:
        return [t for nid in sorted(self.tests) for t in self.tests[nid]]

    def by_kind(self) -> dict[OpKind, list[CarvedTest]]:
        out: dict[OpKind, list[CarvedTest]] = {}
        for t in self.all_tests():
            out.setdefault(t.kind, []).append(t)
        return out

    def count(self) -> int:
        return sum(len(v) for v in self.tests.values())


def carve_run(
    bundle: ModelBundle,
    source,
    model_inputs: Sequence[Mapping[int, Tensor]],
    n_passes: int = 1,
    provenance: str = "",
    dedup: bool = False,
) -> tuple[TestCorpus, list[dict[int, Tensor]]]:
    """Run ``n_passes`` forward passes on ``source`` and record every node.

    Pass ``k`` consumes ``model_inputs[k % len(model_inputs)]``.
    """
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    if not model_inputs:
        raise ValueError("need at least one model input set")
    problems = bundle.problems()
    if problems:
        raise ValueError("invalid bundle: " + "; ".join(problems))

    tests: dict[int, list[CarvedTest]] = {n.id: [] for n in bundle.graph.nodes}
    used_inputs: list[dict[int, Tensor]] = []
    outputs: list[dict[int, Tensor]] = []
    t0 = time.perf_counter()
    for step in range(n_passes):
        feed = dict(model_inputs[step % len(model_inputs)])

        def record(node: Node, ins: list[Tensor], outs: list[Tensor], step=step) -> None:
            tests[node.id].append(CarvedTest(node.id, node.kind, dict(node.attrs), step, tuple(ins), tuple(outs)))

        outputs.append(run_model(bundle, source, feed, observer=record))
        used_inputs.append(feed)
    secs = time.perf_counter() - t0

    if dedup:
        for nid, lst in tests.items():
            seen: set = set()
            kept = []
            for t in lst:
                if t.key() not in seen:
                    seen.add(t.key())
                    kept.append(t)
            tests[nid] = kept
    corpus = TestCorpus(bundle.digest(), source.name(), tests, used_inputs, outputs, provenance, secs)
    return corpus, outputs


def synthesize_tests(bundle: ModelBundle, source, seed: int = 0, low: float = -1.0, high: float = 1.0) -> TestCorpus:
    """Bottom-up style unit tests: random inputs of the right signature.

    Float operands are uniform in [low, high], ids are uniform over the
    table, U8 operands over [0, 255]; oracles come from ``source``.
    """
    rng = np.random.default_rng(seed)
    sigs = infer_shapes(bundle.graph)
    tests: dict[int, list[CarvedTest]] = {}
    g = bundle.graph
    for node in g.nodes:
        if node.kind is OpKind.Constant:
            continue
        ins = []
        for pos, i in enumerate(node.inputs):
            dtype, shape = sigs[i]
            if dtype.is_float:
                arr = rng.uniform(low, high, size=shape)
            elif dtype is DType.I32 and node.kind is OpKind.Embedding and pos == 1:
                rows = sigs[node.inputs[0]][1][0]
                arr = rng.integers(0, rows, size=shape)
            elif dtype is DType.U8:
                arr = rng.integers(0, 256, size=shape)
            elif dtype is DType.BOOL:
                arr = rng.integers(0, 2, size=shape).astype(bool)
            else:
                arr = rng.integers(-100, 100, size=shape)
            ins.append(Tensor.from_array(arr, dtype))
        handle = source.compile(node.kind, node.attrs, [t.signature() for t in ins])
        outs = source.run(handle, ins)
        tests[node.id] = [CarvedTest(node.id, node.kind, dict(node.attrs), 0, tuple(ins), tuple(outs))]
    return TestCorpus(bundle.digest(), source.name(), tests, provenance=f"synthetic-uniform[{low},{high}]-seed{seed}")


def _ref(t: Tensor, blobs: dict[str, bytes]) -> dict:
    digest = t.sha256()
    blobs[digest] = t.data
    return {"sha256": digest, "dtype": t.dtype.label, "shape": list(t.shape)}


def save_corpus(corpus: TestCorpus, path) -> Path:
    path = Path(path)
    (path / BLOBS).mkdir(parents=True, exist_ok=True)
    blobs: dict[str, bytes] = {}
    passes = [
        {
            "inputs": {str(k): _ref(v, blobs) for k, v in sorted(ins.items())},
            "outputs": {str(k): _ref(v, blobs) for k, v in sorted(outs.items())},
        }
        for ins, outs in zip(corpus.model_inputs, corpus.model_outputs)
    ]
    tests = [
        {
            "node_id": t.node_id,
            "step": t.step,
            "kind": t.kind.value,
            "attrs": dict(t.attrs),
            "inputs": [_ref(x, blobs) for x in t.inputs],
            "outputs": [_ref(x, blobs) for x in t.outputs],
        }
        for t in corpus.all_tests()
    ]
    doc = {
        "model_sha256": corpus.model_sha256,
        "backend": corpus.backend,
        "provenance": corpus.provenance,
        "nodes": sorted(corpus.tests),
        "passes": passes,
        "tests": tests,
    }
    for digest, data in blobs.items():
        blob = path / BLOBS / f"{digest}.bin"
        if not blob.exists():
            blob.write_bytes(data)
    (path / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (path / STATS).write_text(json.dumps({"carve_secs": corpus.carve_secs}) + "\n", encoding="utf-8")
    return path


class _BlobReader:
    def __init__(self, root: Path):
        self.root = root
        self.cache: dict[str, bytes] = {}

    def tensor(self, ref: Any, where: str) -> Tensor:
        if not isinstance(ref, dict) or not {"sha256", "dtype", "shape"} <= set(ref):
            raise ParseError("malformed blob reference", path=where)
        digest = ref["sha256"]
        if not isinstance(digest, str) or len(digest) != 64 or any(c not in "0123456789abcdef" for c in digest):
            raise ParseError(f"bad sha256 {digest!r}", path=where)
        if digest not in self.cache:
            blob = self.root / f"{digest}.bin"
            try:
                data = blob.read_bytes()
            except FileNotFoundError:
                raise ParseError(f"missing blob {blob.name}", path=where) from None
            actual = hashlib.sha256(data).hexdigest()
            if actual != digest:
                raise ChecksumMismatch(str(blob), digest, actual)
            self.cache[digest] = data
        try:
            return Tensor(DType.parse(ref["dtype"]), tuple(ref["shape"]), self.cache[digest])
        except (ValueError, TypeError) as e:
            raise ParseError(str(e), path=where) from None


def load_corpus(path, bundle: ModelBundle | None = None) -> TestCorpus:
    """Load and checksum a corpus; with ``bundle``, also check it belongs to it."""
    path = Path(path)
    mpath = path / MANIFEST
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError("missing corpus manifest", path=str(mpath)) from None
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", path=str(mpath), offset=e.pos) from None
    if not isinstance(doc, dict):
        raise ParseError("corpus manifest must be an object", path="$")
    for key in ("model_sha256", "backend", "tests", "passes", "nodes"):
        if key not in doc:
            raise ParseError(f"missing field '{key}'", path="$")

    if bundle is not None and doc["model_sha256"] != bundle.digest():
        raise DigestMismatch(
            f"corpus was carved from model {doc['model_sha256'][:12]}, this model is {bundle.digest()[:12]}"
        )
    node_kinds = {n.id: n.kind for n in bundle.graph.nodes} if bundle is not None else None

    reader = _BlobReader(path / BLOBS)
    tests: dict[int, list[CarvedTest]] = {int(n): [] for n in doc["nodes"]}
    for i, entry in enumerate(doc["tests"]):
        where = f"$.tests[{i}]"
        try:
            nid = entry["node_id"]
            kind = OpKind.parse(entry["kind"])
            step = entry["step"]
            attrs = entry["attrs"]
            ins = entry["inputs"]
            outs = entry["outputs"]
        except KeyError as e:
            raise ParseError(f"missing field {e}", path=where) from None
        except ValueError as e:
            raise ParseError(str(e), path=f"{where}.kind") from None
        if node_kinds is not None:
            if nid not in node_kinds:
                raise ParseError(f"node_id {nid} does not exist in model {doc['model_sha256'][:12]}", path=f"{where}.node_id")
            if node_kinds[nid] is not kind:
                raise ParseError(f"node {nid} is {node_kinds[nid]} in the model, corpus says {kind}", path=f"{where}.kind")
        test = CarvedTest(
            nid,
            kind,
            attrs,
            step,
            tuple(reader.tensor(r, f"{where}.inputs[{j}]") for j, r in enumerate(ins)),
            tuple(reader.tensor(r, f"{where}.outputs[{j}]") for j, r in enumerate(outs)),
        )
        tests.setdefault(nid, []).append(test)

    model_inputs, model_outputs = [], []
    for p, entry in enumerate(doc["passes"]):
        where = f"$.passes[{p}]"
        model_inputs.append({int(k): reader.tensor(r, f"{where}.inputs.{k}") for k, r in entry["inputs"].items()})
        model_outputs.append({int(k): reader.tensor(r, f"{where}.outputs.{k}") for k, r in entry["outputs"].items()})

    carve_secs = 0.0
    if (path / STATS).exists():
        carve_secs = float(json.loads((path / STATS).read_text()).get("carve_secs", 0.0))
    return TestCorpus(
        doc["model_sha256"], doc["backend"], tests, model_inputs, model_outputs, doc.get("provenance", ""), carve_secs
    )
