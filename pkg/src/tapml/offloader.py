"""Gradual target offloading: validate one operator kind at a time.

Each step checks a kind against its carved tests on the target, then runs
the hybrid graph (migrated kinds on the target, the rest on the source) and
compares end-to-end outputs with the recorded source run.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bundle import ModelBundle
from .carver import CarvedTest, TestCorpus
from .errors import DigestMismatch, ShapeMismatch
from .executor import TransferStats, execute
from .graph import OpKind
from .tensor import DType, Tensor

log = logging.getLogger(__name__)

HALT = "halt"
SCAN = "scan"
TENSOR = "tensor"
ARGMAX = "argmax"


@dataclass(frozen=True)
class Tolerance:
    rtol: float
    atol: float
    nan_equal: bool = True

    def __post_init__(self):
        if self.rtol < 0 or self.atol < 0:
            raise ValueError("tolerances must be non-negative")


EXACT = Tolerance(0.0, 0.0)
DEFAULT_TOLERANCES = {
    DType.F64: Tolerance(1e-4, 1e-6),
    DType.F32: Tolerance(1e-4, 1e-6),
    DType.F16: Tolerance(1e-2, 1e-3),
}


@dataclass(frozen=True)
class TolerancePolicy:
    """Per-dtype defaults; ``rtol``/``atol`` override them for float dtypes."""

    rtol: float | None = None
    atol: float | None = None
    nan_equal: bool = True

    def for_dtype(self, dtype: DType) -> Tolerance:
        if not dtype.is_float:
            return EXACT
        base = DEFAULT_TOLERANCES[dtype]
        return Tolerance(
            base.rtol if self.rtol is None else self.rtol,
            base.atol if self.atol is None else self.atol,
            self.nan_equal,
        )

    def to_json(self) -> dict:
        return {
            d.label: {"rtol": self.for_dtype(d).rtol, "atol": self.for_dtype(d).atol}
            for d in DType
        } | {"nan_equal": self.nan_equal}


@dataclass(frozen=True)
class Verdict:
    passed: bool
    index: int | None = None
    actual: float | None = None
    expected: float | None = None
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0

    def __bool__(self) -> bool:
        return self.passed


def error_stats(actual: np.ndarray, oracle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise (abs err, rel err); NaN-vs-number and inf mismatches are inf."""
    a = actual.astype(np.float64).reshape(-1)
    b = oracle.astype(np.float64).reshape(-1)
    with np.errstate(all="ignore"):
        both_nan = np.isnan(a) & np.isnan(b)
        same = (a == b) | both_nan
        abs_err = np.where(same, 0.0, np.abs(a - b))
        abs_err = np.where(np.isnan(abs_err), np.inf, abs_err)
        rel_err = np.where(same, 0.0, np.where(b == 0, np.inf, abs_err / np.abs(b)))
    return abs_err, rel_err


def compare_tensors(actual: Tensor, oracle: Tensor, tol: Tolerance) -> Verdict:
    """Elementwise ``|a - b| <= atol + rtol * |b|`` with ``b`` the oracle."""
    if actual.signature() != oracle.signature():
        raise ShapeMismatch(
            None, f"actual {actual.dtype}{list(actual.shape)} vs oracle {oracle.dtype}{list(oracle.shape)}"
        )
    if actual.data == oracle.data and tol.nan_equal:
        return Verdict(True)
    a = actual.array().astype(np.float64).reshape(-1)
    b = oracle.array().astype(np.float64).reshape(-1)
    abs_err, rel_err = error_stats(a, b)
    with np.errstate(all="ignore"):
        a_nan, b_nan = np.isnan(a), np.isnan(b)
        ok = (a == b) | (a_nan & b_nan & tol.nan_equal)
        finite = np.isfinite(a) & np.isfinite(b)
        ok |= finite & (np.abs(a - b) <= tol.atol + tol.rtol * np.abs(b))
    bad = np.flatnonzero(~ok)
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    max_rel = float(rel_err.max()) if rel_err.size else 0.0
    if bad.size == 0:
        return Verdict(True, max_abs_err=max_abs, max_rel_err=max_rel)
    i = int(bad[0])
    return Verdict(False, i, float(a[i]), float(b[i]), max_abs, max_rel)


@dataclass
class TestResult:
    node_id: int
    step: int
    verdict: str  # pass | fail | crash
    detail: str = ""
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0

    __test__ = False


@dataclass
class OpWiseResult:
    verdict: str
    results: list[TestResult] = field(default_factory=list)
    secs: float = 0.0

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    @property
    def failures(self) -> list[TestResult]:
        return [r for r in self.results if r.verdict != "pass"]

    @property
    def max_abs_err(self) -> float:
        return max((r.max_abs_err for r in self.results), default=0.0)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)


def op_wise_validation(
    tests: Sequence[CarvedTest],
    target,
    tol: TolerancePolicy = TolerancePolicy(),
    exhaustive: bool = False,
) -> OpWiseResult:
    """Replay carved tests on ``target``.

    Stops at the first failing test unless ``exhaustive``. Compile or run
    errors produce a ``crash`` verdict rather than a tolerance failure.
    """
    t0 = time.perf_counter()
    results: list[TestResult] = []
    handles: dict = {}
    overall = "pass"
    for t in tests:
        key = (t.kind, repr(sorted(t.attrs.items())), t.input_signature)
        try:
            if key not in handles:
                handles[key] = target.compile(t.kind, t.attrs, t.input_signature)
            outs = target.run(handles[key], list(t.inputs))
        except Exception as e:
            results.append(TestResult(t.node_id, t.step, "crash", f"{type(e).__name__}: {e}", math.inf, math.inf))
            overall = "crash"
            if not exhaustive:
                break
            continue
        res = TestResult(t.node_id, t.step, "pass")
        if len(outs) != len(t.outputs):
            res.verdict = "fail"
            res.detail = f"expected {len(t.outputs)} outputs, got {len(outs)}"
        for j, (got, want) in enumerate(zip(outs, t.outputs)):
            try:
                v = compare_tensors(got, want, tol.for_dtype(want.dtype))
            except ShapeMismatch as e:
                res.verdict, res.detail = "fail", str(e)
                res.max_abs_err = res.max_rel_err = math.inf
                continue
            res.max_abs_err = max(res.max_abs_err, v.max_abs_err)
            res.max_rel_err = max(res.max_rel_err, v.max_rel_err)
            if not v.passed and res.verdict == "pass":
                res.verdict = "fail"
                res.detail = f"output {j} index {v.index}: got {v.actual!r}, oracle {v.expected!r}"
        results.append(res)
        if res.verdict != "pass":
            if overall == "pass":
                overall = "fail"
            if not exhaustive:
                break
    return OpWiseResult(overall, results, time.perf_counter() - t0)


def run_hybrid(
    bundle: ModelBundle,
    source,
    target,
    migrated: Iterable[OpKind] = (),
    inputs: Mapping[int, Tensor] | None = None,
    migrated_nodes: Iterable[int] = (),
    transfers: TransferStats | None = None,
) -> dict[int, Tensor]:
    """Run nodes whose kind is in ``migrated`` (or id in ``migrated_nodes``) on the target."""
    kinds = {OpKind(k) for k in migrated}
    nodes = set(migrated_nodes)

    def place(node):
        if node.kind in kinds or node.id in nodes:
            return "target", target
        return "source", source

    return execute(bundle, inputs or {}, place, transfers=transfers)


def _json_float(x: float):
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class StepRecord:
    kind: str
    op_verdict: str
    model_verdict: str
    max_abs_err: float
    max_rel_err: float
    n_tests: int
    opwise_secs: float = 0.0
    modelwise_secs: float = 0.0
    node: int | None = None
    detail: str = ""
    model_max_abs_err: float = 0.0
    model_max_rel_err: float = 0.0

    @property
    def secs(self) -> float:
        return self.opwise_secs + self.modelwise_secs

    @property
    def integration_fault(self) -> bool:
        return self.op_verdict == "pass" and self.model_verdict != "pass"

    @property
    def passed(self) -> bool:
        return self.op_verdict == "pass" and self.model_verdict == "pass"

    def to_json(self, timings: bool = True) -> dict:
        d = {
            "kind": self.kind,
            "op_verdict": self.op_verdict,
            "model_verdict": self.model_verdict,
            "max_abs_err": _json_float(self.max_abs_err),
            "max_rel_err": _json_float(self.max_rel_err),
            "model_max_abs_err": _json_float(self.model_max_abs_err),
            "model_max_rel_err": _json_float(self.model_max_rel_err),
            "n_tests": self.n_tests,
            "integration_fault": self.integration_fault,
            "detail": self.detail,
        }
        if self.node is not None:
            d["node"] = self.node
        if timings:
            d["secs"] = self.secs
        return d


@dataclass
class MigrationReport:
    status: str  # complete | halted | partial
    steps: list[StepRecord]
    migrated: list[str]
    buggy: list[str]
    halted_at: str | None = None
    carve_secs: float = 0.0
    transfer_bytes: int = 0
    truth: list[str] | None = None
    config: dict = field(default_factory=dict)

    @property
    def opwise_secs(self) -> float:
        return sum(s.opwise_secs for s in self.steps)

    @property
    def modelwise_secs(self) -> float:
        return sum(s.modelwise_secs for s in self.steps)

    @property
    def integration_faults(self) -> list[str]:
        return [s.kind for s in self.steps if s.integration_fault]

    @property
    def fp(self) -> list[str] | None:
        if self.truth is None:
            return None
        return sorted(set(self.buggy) - set(self.truth))

    @property
    def fn(self) -> list[str] | None:
        if self.truth is None:
            return None
        return sorted(set(self.truth) - set(self.buggy))

    @property
    def complete(self) -> bool:
        return self.status == "complete"

    def to_json(self, timings: bool = True) -> dict:
        doc = {
            "status": self.status,
            "halted_at": self.halted_at,
            "steps": [s.to_json(timings) for s in self.steps],
            "migrated": self.migrated,
            "buggy": self.buggy,
            "integration_faults": [f"integration-fault({k})" for k in self.integration_faults],
            "truth": self.truth,
            "fp": self.fp,
            "fn": self.fn,
            "fp_count": None if self.fp is None else len(self.fp),
            "fn_count": None if self.fn is None else len(self.fn),
            "overhead": {"transfer_bytes": self.transfer_bytes},
            "config": self.config,
        }
        if timings:
            doc["overhead"] |= {
                "carve_secs": self.carve_secs,
                "opwise_secs": self.opwise_secs,
                "modelwise_secs": self.modelwise_secs,
            }
        return doc

    def summary(self) -> str:
        lines = [f"status: {self.status}" + (f" at {self.halted_at}" if self.halted_at else "")]
        for s in self.steps:
            mark = "ok " if s.passed else "BAD"
            lines.append(
                f"  {mark} {s.kind:<14} op={s.op_verdict:<5} model={s.model_verdict:<7} "
                f"tests={s.n_tests:<4} max_abs={s.max_abs_err:.3g} max_rel={s.max_rel_err:.3g}"
            )
        lines.append(f"buggy: {self.buggy}")
        if self.truth is not None:
            lines.append(f"FP {len(self.fp)} {self.fp}  FN {len(self.fn)} {self.fn}")
        lines.append(
            f"overhead: carve {self.carve_secs:.3f}s, op-wise {self.opwise_secs:.3f}s, "
            f"model-wise {self.modelwise_secs:.3f}s, transfer {self.transfer_bytes} B"
        )
        return "\n".join(lines)


def _model_wise(
    bundle: ModelBundle,
    source,
    target,
    corpus: TestCorpus,
    kinds: set[OpKind],
    nodes: set[int],
    tol: TolerancePolicy,
    oracle: str,
    transfers: TransferStats,
) -> tuple[str, str, float, float]:
    worst_abs = worst_rel = 0.0
    for p, (feed, expected) in enumerate(zip(corpus.model_inputs, corpus.model_outputs)):
        try:
            got = run_hybrid(bundle, source, target, kinds, feed, nodes, transfers)
        except Exception as e:
            return "crash", f"pass {p}: {type(e).__name__}: {e}", math.inf, math.inf
        if oracle == ARGMAX:
            lid = bundle.logits
            a = np.argmax(got[lid].array(), axis=-1)
            b = np.argmax(expected[lid].array(), axis=-1)
            if not np.array_equal(a, b):
                i = int(np.flatnonzero(a.reshape(-1) != b.reshape(-1))[0])
                return "fail", f"pass {p}: argmax differs at row {i}", worst_abs, worst_rel
            continue
        for oid in bundle.graph.output_ids:
            v = compare_tensors(got[oid], expected[oid], tol.for_dtype(expected[oid].dtype))
            worst_abs = max(worst_abs, v.max_abs_err)
            worst_rel = max(worst_rel, v.max_rel_err)
            if not v.passed:
                return "fail", f"pass {p} output {oid} index {v.index}: got {v.actual!r}, oracle {v.expected!r}", worst_abs, worst_rel
    return "pass", "", worst_abs, worst_rel


def gradual_offload(
    bundle: ModelBundle,
    source,
    target,
    corpus: TestCorpus,
    tol: TolerancePolicy = TolerancePolicy(),
    policy: str = HALT,
    oracle: str = TENSOR,
    granularity: str = "kind",
    config: dict | None = None,
) -> MigrationReport:
    if policy not in (HALT, SCAN):
        raise ValueError(f"policy must be {HALT!r} or {SCAN!r}")
    if oracle not in (TENSOR, ARGMAX):
        raise ValueError(f"oracle must be {TENSOR!r} or {ARGMAX!r}")
    if granularity not in ("kind", "node"):
        raise ValueError("granularity must be 'kind' or 'node'")
    if corpus.model_sha256 != bundle.digest():
        raise DigestMismatch(
            f"corpus was carved from model {corpus.model_sha256[:12]}, this model is {bundle.digest()[:12]}"
        )

    if granularity == "kind":
        by_kind = corpus.by_kind()
        units = [(k.value, by_kind.get(k, []), {k}, set()) for k in bundle.graph.kinds_in_order()]
    else:
        units = [
            (f"{n.kind.value}#{n.id}", corpus.tests.get(n.id, []), set(), {n.id}) for n in bundle.graph.nodes
        ]

    migrated_kinds: set[OpKind] = set()
    migrated_nodes: set[int] = set()
    migrated: list[str] = []
    buggy: list[str] = []
    steps: list[StepRecord] = []
    transfers = TransferStats()
    status, halted_at = "complete", None

    for label, tests, kinds, nodes in units:
        op = op_wise_validation(tests, target, tol, exhaustive=True)
        step = StepRecord(
            kind=label,
            op_verdict=op.verdict,
            model_verdict="skipped",
            max_abs_err=op.max_abs_err,
            max_rel_err=op.max_rel_err,
            n_tests=len(tests),
            opwise_secs=op.secs,
            node=next(iter(nodes)) if nodes else None,
        )
        if op.failures:
            f = op.failures[0]
            step.detail = f"node {f.node_id} step {f.step}: {f.detail}"
        if op.passed:
            t0 = time.perf_counter()
            verdict, detail, mabs, mrel = _model_wise(
                bundle, source, target, corpus, migrated_kinds | kinds, migrated_nodes | nodes, tol, oracle, transfers
            )
            step.modelwise_secs = time.perf_counter() - t0
            step.model_verdict = verdict
            step.model_max_abs_err, step.model_max_rel_err = mabs, mrel
            step.detail = detail
        steps.append(step)
        log.info("step %s: op=%s model=%s", label, step.op_verdict, step.model_verdict)
        if step.passed:
            migrated_kinds |= kinds
            migrated_nodes |= nodes
            migrated.append(label)
            continue
        buggy.append(label)
        if policy == HALT:
            status, halted_at = "halted", label
            break
        status = "partial"

    return MigrationReport(
        status=status,
        steps=steps,
        migrated=migrated,
        buggy=buggy,
        halted_at=halted_at,
        carve_secs=corpus.carve_secs,
        transfer_bytes=transfers.bytes,
        config=dict(config or {}),
    )


def localize(
    bundle: ModelBundle,
    source,
    target,
    corpus: TestCorpus,
    tol: TolerancePolicy = TolerancePolicy(),
    truth: Iterable[OpKind | str] | None = None,
    oracle: str = TENSOR,
    config: dict | None = None,
) -> MigrationReport:
    """Scan every kind and report the buggy ones; score against ``truth`` if given."""
    report = gradual_offload(bundle, source, target, corpus, tol, SCAN, oracle, config=config)
    if truth is not None:
        report.truth = sorted(OpKind(k).value for k in truth)
    return report
