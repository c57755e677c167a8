"""End-to-end acceptance criteria A1 to A8.

Each test prints one ``A<n>: PASS|FAIL`` line; the lines are repeated in the
pytest terminal summary.
"""

import json
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import RECIPES, built, carved, spawn_server
from oracles import oracle_dequant, oracle_matmul, oracle_rmsnorm, oracle_softmax, ulp_distance
from tapml import models
from tapml.backends import golden, sim_native
from tapml.carver import load_corpus, save_corpus, synthesize_tests
from tapml.cli import main
from tapml.errors import ChecksumMismatch, ProtocolError, RemoteError
from tapml.executor import run_model
from tapml.faults import CATALOG, FaultMode, FaultSet, save_faults, wrap
from tapml.graph import OpKind
from tapml.offloader import localize, op_wise_validation, run_hybrid
from tapml.rpc.client import connect
from tapml.rpc.protocol import Frame, Op, decode, encode
from tapml.tensor import DType, Tensor

RESULTS: list[str] = []

DISCRETE = {
    FaultMode.ResultPlusOne,
    FaultMode.FastMathTanhNaN,
    FaultMode.PackedU32Dequant,
    FaultMode.UnalignedGatherOffByOne,
    FaultMode.DropLastColumn,
}

# (recipe, catalog fault id); every catalog fault appears at least once.
LOCALIZATION_CASES = [
    ("sub-chain", "sub-result-plus-one"),
    ("tiny-mlp", "gelu-fastmath-tanh"),
    ("quantized-mlp", "dequant-packed-u32"),
    ("tiny-mlp", "gelu-wrong-constant"),
    ("tiny-llama-block", "matmul-fp16-accumulate"),
    ("tiny-mlp", "embedding-unaligned"),
    ("tiny-llama-block", "softmax-drop-last-column"),
    ("quantized-mlp", "embedding-unaligned"),
    ("tiny-mlp", "matmul-fp16-accumulate"),
    ("quantized-mlp", "gelu-wrong-constant"),
]

STEP_FIELDS = ("kind", "op_verdict", "model_verdict", "max_abs_err", "max_rel_err", "model_max_abs_err", "model_max_rel_err", "n_tests")


@contextmanager
def criterion(cid: str, title: str):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as e:
        line = f"{cid}: FAIL {title} ({time.perf_counter() - t0:.1f}s): {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"{cid}: PASS {title} ({time.perf_counter() - t0:.1f}s)"
    RESULTS.append(line)
    print(line)


def cli_prepare(tmp, recipe, corpus_id, passes=3):
    model, corpus = tmp / f"{recipe}.tapml", tmp / f"{recipe}-{corpus_id}.corpus"
    if not model.exists():
        assert main(["build", "--recipe", recipe, "--out", str(model)]) == 0
    assert main(["carve", "--model", str(model), "--inputs", corpus_id, "--passes", str(passes), "--out", str(corpus)]) == 0
    return str(model), str(corpus)


def read(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def test_a1_fault_free_migration(tmp_path):
    with criterion("A1", "fault-free migration, 4 recipes x 2 corpora"):
        t0 = time.perf_counter()
        for recipe in RECIPES:
            for corpus_id in models.CORPUS_IDS:
                model, corpus = cli_prepare(tmp_path, recipe, corpus_id)
                report = tmp_path / f"{recipe}-{corpus_id}.json"
                code = main(["migrate", "--model", model, "--corpus", corpus, "--target", "sim-native", "--report", str(report)])
                doc = read(report)
                assert code == 0, f"{recipe}/{corpus_id} exit {code}"
                assert doc["status"] == "complete"
                assert all(s["op_verdict"] == "pass" and s["model_verdict"] == "pass" for s in doc["steps"]), f"{recipe}/{corpus_id}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 60, f"took {elapsed:.1f}s"


def test_a2_localization_soundness(tmp_path):
    with criterion("A2", "localization over 10 single-fault cases"):
        assert {fid for _, fid in LOCALIZATION_CASES} == set(CATALOG)
        t0 = time.perf_counter()
        problems = []
        for i, (recipe, fid) in enumerate(LOCALIZATION_CASES):
            model, corpus = cli_prepare(tmp_path, recipe, "motto-1")
            fault = CATALOG[fid]
            ffile = tmp_path / f"fault-{i}.json"
            save_faults(FaultSet((fault,)), ffile)
            report = tmp_path / f"loc-{i}.json"
            code = main(["localize", "--model", model, "--corpus", corpus, "--target", "sim-native", "--faults", str(ffile), "--truth", str(ffile), "--report", str(report)])
            doc = read(report)
            if doc["fn"]:
                problems.append(f"{recipe}/{fid}: FN {doc['fn']}")
            if fault.mode in DISCRETE and (doc["fp"] or code != 0):
                problems.append(f"{recipe}/{fid}: FP {doc['fp']} exit {code}")
        assert not problems, "; ".join(problems)
        elapsed = time.perf_counter() - t0
        assert elapsed < 120, f"took {elapsed:.1f}s"


def test_a3_bug_reproductions():
    with criterion("A3", "fp16 subtraction, GeLU NaN conditionality, packed dequantization"):
        # fp16 subtraction
        a, b = (Tensor.from_array(np.float16(v), DType.F16) for v in (1035, 1031))
        sub = [a.signature(), b.signature()]
        bad = wrap(sim_native(), [CATALOG["sub-result-plus-one"]])
        assert float(bad.run(bad.compile(OpKind.Sub, {}, sub), [a, b])[0].array()) == 5.0
        for be in (golden(), sim_native()):
            assert float(be.run(be.compile(OpKind.Sub, {}, sub), [a, b])[0].array()) == 4.0
        rep = localize(built("sub-chain"), golden(), bad, carved("sub-chain"), truth={OpKind.Sub})
        assert rep.buggy == ["Sub"]

        # GeLU NaN only on realistic inputs
        tanh = wrap(sim_native(), [CATALOG["gelu-fastmath-tanh"]])
        realistic = carved("tiny-mlp", "motto-1").by_kind()[OpKind.GeluTanh]
        assert op_wise_validation(realistic, tanh).verdict == "fail"
        uniform = synthesize_tests(built("tiny-mlp"), golden(), seed=0, low=-1.0, high=1.0).by_kind()[OpKind.GeluTanh]
        assert op_wise_validation(uniform, tanh).passed

        # packed u32 dequantization
        dq = wrap(sim_native(), [CATALOG["dequant-packed-u32"]])
        tests = carved("quantized-mlp").by_kind()[OpKind.DequantizeU8]
        assert tests
        for t in tests:
            got = dq.run(dq.compile(t.kind, t.attrs, t.input_signature), list(t.inputs))[0].array().astype(np.float64)
            want = t.outputs[0].array().astype(np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.abs(got - want) / np.abs(want)
            assert np.nanmax(rel) > 10, f"node {t.node_id}: max rel err {np.nanmax(rel)}"
        assert all(r.verdict == "fail" for r in op_wise_validation(tests, dq, exhaustive=True).results)
        rep = localize(built("quantized-mlp"), golden(), dq, carved("quantized-mlp"), truth={OpKind.DequantizeU8})
        assert rep.buggy == ["DequantizeU8"]


def test_a4_hybrid_identity_endpoints():
    with criterion("A4", "hybrid endpoints are bit-exact"):
        for name in RECIPES:
            bundle = built(name)
            kinds = set(bundle.graph.kinds_in_order())
            for corpus_id in models.CORPUS_IDS:
                for feed in models.realistic_inputs(bundle, corpus_id):
                    src = run_model(bundle, golden(), feed)
                    tgt = run_model(bundle, sim_native(), feed)
                    none = run_hybrid(bundle, golden(), sim_native(), set(), feed)
                    full = run_hybrid(bundle, golden(), sim_native(), kinds, feed)
                    for oid in bundle.graph.output_ids:
                        assert none[oid].data == src[oid].data, f"{name}: empty migration differs"
                        assert full[oid].data == tgt[oid].data, f"{name}: full migration differs"


def _stop(proc, addr):
    try:
        main(["device", "shutdown", "--address", addr])
        proc.wait(timeout=30)
    finally:
        if proc.poll() is None:
            proc.kill()
        proc.communicate()


def test_a5_runtime_transparency(tmp_path):
    with criterion("A5", "remote migration matches in-process; mobile limits enforced"):
        proc, addr = spawn_server("--profile", "pc", cwd=tmp_path)
        try:
            for name in RECIPES:
                model, corpus = cli_prepare(tmp_path, name, "motto-1")
                local, remote = tmp_path / f"{name}-local.json", tmp_path / f"{name}-remote.json"
                assert main(["migrate", "--model", model, "--corpus", corpus, "--target", "sim-native", "--report", str(local)]) == 0
                assert main(["migrate", "--model", model, "--corpus", corpus, "--target", f"remote:{addr}", "--report", str(remote)]) == 0
                a, b = read(local), read(remote)
                assert [{k: s[k] for k in STEP_FIELDS} for s in a["steps"]] == [{k: s[k] for k in STEP_FIELDS} for s in b["steps"]], name
                assert (a["status"], a["buggy"]) == (b["status"], b["buggy"])
            rng = np.random.default_rng(5)
            samples = [
                Tensor.from_array(rng.standard_normal((3, 5))),
                Tensor.from_array(rng.standard_normal(7).astype(np.float32)),
                Tensor.from_array(rng.standard_normal((2, 2, 3)).astype(np.float16)),
                Tensor.from_array(rng.integers(0, 256, 9, dtype=np.uint8)),
                Tensor.from_array(rng.integers(-(2**31), 2**31, (4, 1), dtype=np.int32)),
                Tensor.from_array(rng.random(6) > 0.5),
                Tensor.from_array(np.array([np.nan, -0.0, np.inf], dtype=np.float32)),
            ]
            with connect(addr) as rb:
                for t in samples:
                    bid = rb.alloc(t.dtype, t.shape)
                    rb.write(bid, t)
                    assert rb.read(bid).data == t.data
        finally:
            _stop(proc, addr)

        proc, addr = spawn_server("--profile", "mobile", cwd=tmp_path)
        try:
            with connect(addr) as rb:
                with pytest.raises(RemoteError) as ei:
                    rb.alloc(DType.U8, (129 << 20,))
                assert ei.value.code == "BufferLimitExceeded"
                mid, _ = rb.upload(OpKind.Relu, {}, [(DType.F32, (300,))])
                x, y = rb.alloc(DType.F32, (300,)), rb.alloc(DType.F32, (300,))
                with pytest.raises(RemoteError) as ei:
                    rb.call(mid, [x], [y], threads=300)
                assert ei.value.code == "LaunchLimitExceeded"
        finally:
            _stop(proc, addr)


def test_a6_kernel_oracle_equivalence():
    with criterion("A6", "golden kernels within 2 ULP of scalar oracles, 100 instances"):
        be = golden()

        def run(kind, arrays, attrs=None):
            ts = [Tensor.from_array(a) for a in arrays]
            return be.run(be.compile(kind, attrs or {}, [t.signature() for t in ts]), ts)[0].array()

        worst = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n, k, m = (int(d) for d in rng.integers(1, 9, 3))
            a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
            x, g = rng.standard_normal((n, k)) * 4, rng.standard_normal(k)
            u = rng.integers(0, 256, (n, k), dtype=np.uint8)
            scale, zp = float(rng.uniform(1e-3, 1.0)), int(rng.integers(0, 256))
            dists = [
                ulp_distance(run(OpKind.MatMul, [a, b]), oracle_matmul(a.tolist(), b.tolist())),
                ulp_distance(run(OpKind.Softmax, [x]), oracle_softmax(x.tolist())),
                ulp_distance(run(OpKind.RmsNorm, [x, g], {"eps": 1e-6}), oracle_rmsnorm(x.tolist(), g.tolist(), 1e-6)),
                ulp_distance(run(OpKind.DequantizeU8, [u], {"scale": scale, "zero_point": zp, "group": k, "dtype": "F64"}), oracle_dequant(u.tolist(), scale, zp)),
            ]
            worst = max(worst, *dists)
            assert max(dists) <= 2, f"seed {seed}: ULP distances {dists}"
        print(f"worst ULP distance {worst}")


def test_a7_overhead_report_shape(tmp_path):
    with criterion("A7", "overhead fields populated, per-kind counts match carving"):
        for name in RECIPES:
            model, corpus = cli_prepare(tmp_path, name, "motto-2")
            report = tmp_path / f"{name}.json"
            assert main(["migrate", "--model", model, "--corpus", corpus, "--target", "sim-native", "--report", str(report)]) == 0
            doc = read(report)
            for key in ("carve_secs", "opwise_secs", "modelwise_secs", "transfer_bytes"):
                assert doc["overhead"][key] is not None and doc["overhead"][key] >= 0, f"{name}: {key}"
            per_kind = {k.value: len(v) for k, v in load_corpus(corpus).by_kind().items()}
            assert {s["kind"]: s["n_tests"] for s in doc["steps"]} == per_kind, name


def test_a8_corpus_and_protocol_roundtrips(tmp_path):
    with criterion("A8", "corpus and frame round-trips, 10,000 fuzzed frames"):
        for name in RECIPES:
            corpus = carved(name)
            save_corpus(corpus, tmp_path / name)
            back = load_corpus(tmp_path / name, built(name))
            assert back == corpus
            assert all(
                [x.data for x in t.inputs + t.outputs] == [x.data for x in u.inputs + u.outputs]
                for t, u in zip(corpus.all_tests(), back.all_tests())
            )
        blob = sorted((tmp_path / "tiny-mlp" / "blobs").iterdir())[0]
        raw = bytearray(blob.read_bytes())
        raw[0] ^= 1
        blob.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            load_corpus(tmp_path / "tiny-mlp")

        rng = random.Random(2024)
        for _ in range(200):
            f = Frame(rng.choice(list(Op)), rng.getrandbits(64), {"k": rng.random(), "s": "x" * rng.randrange(5)}, rng.randbytes(rng.randrange(64)))
            assert decode(encode(f)) == f

        seed = encode(Frame(Op.WRITE_TENSOR, 3, {"buffer_id": 1}, bytes(range(32))))
        crashes = []
        for i in range(10_000):
            mode = i % 3
            if mode == 0:
                buf = rng.randbytes(rng.randrange(0, 80))
            elif mode == 1:
                buf = bytearray(seed)
                for _ in range(rng.randrange(1, 6)):
                    buf[rng.randrange(len(buf))] = rng.getrandbits(8)
                buf = bytes(buf)
            else:
                buf = seed[: rng.randrange(len(seed))] + rng.randbytes(rng.randrange(4))
            try:
                decode(buf)
            except ProtocolError:
                pass
            except Exception as e:  # noqa: BLE001
                crashes.append(f"{type(e).__name__}: {e}")
        assert not crashes, crashes[:3]
