import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import RECIPES, built, carved
from tapml import models
from tapml.backends import golden, sim_native
from tapml.carver import TestCorpus
from tapml.errors import DigestMismatch, ShapeMismatch
from tapml.executor import run_model
from tapml.faults import CATALOG, FaultMode, FaultSpec, wrap
from tapml.graph import OpKind
from tapml.offloader import (
    DEFAULT_TOLERANCES,
    Tolerance,
    TolerancePolicy,
    compare_tensors,
    gradual_offload,
    localize,
    op_wise_validation,
    run_hybrid,
)
from tapml.tensor import DType, Tensor

F32_TOL = DEFAULT_TOLERANCES[DType.F32]


def t32(*xs):
    return Tensor.from_array(np.array(xs, dtype=np.float32))


# compare_tensors


def test_identical_tensors_pass():
    assert compare_tensors(t32(1, 2, 3), t32(1, 2, 3), F32_TOL).passed


def test_default_f32_predicate():
    assert compare_tensors(t32(1.00009), t32(1.0), F32_TOL).passed
    v = compare_tensors(t32(1.001), t32(1.0), F32_TOL)
    assert not v.passed and v.index == 0


def test_nan_and_inf_rules():
    assert not compare_tensors(t32(math.nan), t32(1.0), F32_TOL).passed
    assert compare_tensors(t32(math.nan), t32(math.nan), F32_TOL).passed
    assert not compare_tensors(t32(math.nan), t32(math.nan), Tolerance(1e-4, 1e-6, nan_equal=False)).passed
    assert compare_tensors(t32(math.inf), t32(math.inf), F32_TOL).passed
    assert not compare_tensors(t32(-math.inf), t32(math.inf), F32_TOL).passed


def test_lowest_bad_index_reported():
    v = compare_tensors(t32(0, 5, 0, 5), t32(0, 0, 0, 0), F32_TOL)
    assert (v.index, v.actual, v.expected) == (1, 5.0, 0.0)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        compare_tensors(t32(1, 2), t32(1, 2, 3), F32_TOL)


@given(
    st.floats(-1e6, 1e6, allow_nan=False),
    st.floats(-1e6, 1e6, allow_nan=False),
    st.floats(0, 1e-2),
    st.floats(0, 1e-2),
)
@settings(max_examples=200)
def test_predicate_matches_direct_evaluation(a, b, rtol, atol):
    a64 = Tensor.from_array(np.array([a]))
    b64 = Tensor.from_array(np.array([b]))
    assert compare_tensors(a64, b64, Tolerance(rtol, atol)).passed == (abs(a - b) <= atol + rtol * abs(b))


def test_integer_dtypes_compare_exactly():
    assert TolerancePolicy(rtol=1.0, atol=1.0).for_dtype(DType.I32) == Tolerance(0.0, 0.0)


# op_wise_validation


@pytest.mark.parametrize("name", RECIPES)
def test_fault_free_op_wise_passes(name):
    for kind, tests in carved(name).by_kind().items():
        assert op_wise_validation(tests, sim_native()).passed, kind


def test_tanh_fault_fails_with_nan_on_carved_tests():
    tests = carved("tiny-mlp").by_kind()[OpKind.GeluTanh]
    assert any(np.abs(t.inputs[0].array()).max() > 45 for t in tests)
    res = op_wise_validation(tests, wrap(sim_native(), [CATALOG["gelu-fastmath-tanh"]]))
    assert res.verdict == "fail"
    assert "nan" in res.failures[0].detail


def test_unsupported_kind_is_crash_not_fail():
    tests = carved("tiny-mlp").by_kind()[OpKind.GeluTanh]
    res = op_wise_validation(tests, sim_native(unsupported={OpKind.GeluTanh}))
    assert res.verdict == "crash"
    assert "UnsupportedOp" in res.failures[0].detail


def test_short_circuit_vs_exhaustive():
    tests = carved("sub-chain").by_kind()[OpKind.Sub]
    be = wrap(sim_native(), [CATALOG["sub-result-plus-one"]])
    assert len(op_wise_validation(tests, be).results) == 1
    assert len(op_wise_validation(tests, be, exhaustive=True).results) == len(tests)


# run_hybrid


@pytest.mark.parametrize("name", RECIPES)
def test_hybrid_identity_endpoints(name):
    bundle = built(name)
    kinds = set(bundle.graph.kinds_in_order())
    for feed in models.realistic_inputs(bundle, "motto-1"):
        src = run_model(bundle, golden(), feed)
        tgt = run_model(bundle, sim_native(), feed)
        none = run_hybrid(bundle, golden(), sim_native(), set(), feed)
        full = run_hybrid(bundle, golden(), sim_native(), kinds, feed)
        for oid in bundle.graph.output_ids:
            assert none[oid].data == src[oid].data
            assert full[oid].data == tgt[oid].data


def test_hybrid_matmul_only_is_close_to_source():
    bundle = built("tiny-mlp")
    feed = models.realistic_inputs(bundle, "motto-1")[0]
    src = run_model(bundle, golden(), feed)
    hyb = run_hybrid(bundle, golden(), sim_native(), {OpKind.MatMul}, feed)
    pol = TolerancePolicy()
    for oid, t in src.items():
        assert compare_tensors(hyb[oid], t, pol.for_dtype(t.dtype)).passed


# gradual_offload / localize


@pytest.mark.parametrize("name", RECIPES)
def test_fault_free_migration_completes(name):
    bundle = built(name)
    rep = gradual_offload(bundle, golden(), sim_native(), carved(name))
    assert rep.status == "complete"
    assert rep.migrated == [k.value for k in bundle.graph.kinds_in_order()]
    assert all(s.passed for s in rep.steps)


def test_halt_on_sub_fault():
    bundle = built("sub-chain")
    rep = gradual_offload(bundle, golden(), wrap(sim_native(), [CATALOG["sub-result-plus-one"]]), carved("sub-chain"))
    assert rep.status == "halted" and rep.halted_at == "Sub"
    assert rep.steps[-1].op_verdict == "fail"
    assert all(s.passed for s in rep.steps[:-1])


def test_scan_with_wrong_gelu_constant():
    bundle = built("tiny-mlp")
    rep = gradual_offload(bundle, golden(), wrap(sim_native(), [CATALOG["gelu-wrong-constant"]]), carved("tiny-mlp"), policy="scan")
    assert rep.buggy == ["GeluTanh"]
    assert set(rep.migrated) == {k.value for k in bundle.graph.kinds_in_order()} - {"GeluTanh"}


@pytest.mark.parametrize("fid", sorted(CATALOG))
def test_halt_and_scan_agree_on_first_buggy_kind(fid):
    f = CATALOG[fid]
    name = next(n for n in RECIPES if f.kind in built(n).graph.kinds_in_order())
    target = wrap(sim_native(), [f])
    halt = gradual_offload(built(name), golden(), target, carved(name), policy="halt")
    scan = gradual_offload(built(name), golden(), target, carved(name), policy="scan")
    assert halt.halted_at == (scan.buggy[0] if scan.buggy else None)


def test_localize_scores_against_truth():
    bundle = built("sub-chain")
    target = wrap(sim_native(), [CATALOG["sub-result-plus-one"]])
    rep = localize(bundle, golden(), target, carved("sub-chain"), truth={OpKind.Sub})
    assert rep.buggy == ["Sub"] and rep.fp == [] and rep.fn == []
    clean = localize(bundle, golden(), sim_native(), carved("sub-chain"), truth=set())
    assert clean.buggy == [] and clean.fp == [] and clean.fn == []


def test_two_faults_localized_together():
    bundle = built("quantized-mlp")
    target = wrap(sim_native(), [CATALOG["gelu-wrong-constant"], CATALOG["dequant-packed-u32"]])
    rep = localize(bundle, golden(), target, carved("quantized-mlp"), truth={OpKind.GeluTanh, OpKind.DequantizeU8})
    assert sorted(rep.buggy) == ["DequantizeU8", "GeluTanh"]


def test_integration_fault_reported_when_only_model_wise_fails():
    # Corrupt the recorded model outputs so op-wise passes but model-wise cannot.
    c = carved("sub-chain")
    bad_outputs = [{k: Tensor.from_array(v.array() + 7, v.dtype) for k, v in o.items()} for o in c.model_outputs]
    corpus = TestCorpus(c.model_sha256, c.backend, c.tests, c.model_inputs, bad_outputs)
    rep = gradual_offload(built("sub-chain"), golden(), sim_native(), corpus, policy="scan")
    assert rep.integration_faults == [k.value for k in built("sub-chain").graph.kinds_in_order()]
    assert rep.to_json()["integration_faults"][0] == "integration-fault(Constant)"


def test_argmax_oracle_tolerates_small_logit_noise():
    bundle = built("tiny-mlp")
    rep = gradual_offload(bundle, golden(), wrap(sim_native(), [CATALOG["matmul-fp16-accumulate"]]), carved("tiny-mlp"), policy="scan", oracle="argmax")
    assert "MatMul" in rep.buggy  # op-wise still catches it


def test_node_granularity_pinpoints_nodes():
    bundle = built("tiny-mlp")
    target = wrap(sim_native(), [FaultSpec("softmax-drop", OpKind.Softmax, FaultMode.DropLastColumn)])
    rep = gradual_offload(bundle, golden(), target, carved("tiny-mlp"), policy="scan", granularity="node")
    softmax_ids = [n.id for n in bundle.graph.nodes if n.kind is OpKind.Softmax]
    assert rep.buggy == [f"Softmax#{i}" for i in softmax_ids]


def test_digest_mismatch():
    with pytest.raises(DigestMismatch):
        gradual_offload(built("tiny-mlp"), golden(), sim_native(), carved("sub-chain"))


def test_report_overhead_fields():
    rep = gradual_offload(built("tiny-llama-block"), golden(), sim_native(), carved("tiny-llama-block"))
    doc = rep.to_json()
    for key in ("carve_secs", "opwise_secs", "modelwise_secs", "transfer_bytes"):
        assert doc["overhead"][key] >= 0
    assert doc["overhead"]["transfer_bytes"] > 0
    per_kind = {k.value: len(v) for k, v in carved("tiny-llama-block").by_kind().items()}
    assert {s["kind"]: s["n_tests"] for s in doc["steps"]} == per_kind
