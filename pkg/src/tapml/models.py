"""Builtin model zoo and deterministic text-driven input corpora."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from importlib import resources
from typing import Callable

import numpy as np

from .bundle import ModelBundle
from .graph import ComputeGraph, Node, OpKind
from .tensor import DType, Tensor

MAX_HIDDEN = 64
MAX_VOCAB = 256
MAX_SEQ = 32
PAD_BYTE = 0x20
CORPUS_IDS = ("motto-1", "motto-2")

# Column of the first MLP projection scaled up so realistic tokens push
# GeluTanh pre-activations past 45.
HOT_CHANNEL_SCALE = 40.0
# Keeps logits O(1) so fault-free F32 differences stay well inside atol.
LOGIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelRecipe:
    name: str
    hidden: int = 32
    n_heads: int = 2
    vocab: int = 256
    seq: int = 16
    dtype: DType = DType.F32
    seed: int = 7

    def validate(self) -> None:
        if not 1 <= self.hidden <= MAX_HIDDEN:
            raise ValueError(f"hidden must be in [1, {MAX_HIDDEN}], got {self.hidden}")
        if not 1 <= self.vocab <= MAX_VOCAB:
            raise ValueError(f"vocab must be in [1, {MAX_VOCAB}], got {self.vocab}")
        if not 1 <= self.seq <= MAX_SEQ:
            raise ValueError(f"seq must be in [1, {MAX_SEQ}], got {self.seq}")
        if self.n_heads < 1 or self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by n_heads {self.n_heads}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


class GraphBuilder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.nodes: list[Node] = []
        self.inputs: list[int] = []
        self.weight_ids: list[int] = []
        self.weights: dict[int, Tensor] = {}

    def op(self, kind: OpKind, *inputs: int, name: str = "", **attrs) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, kind, inputs, attrs, name or f"{kind.value.lower()}_{nid}"))
        return nid

    def input(self, name: str, dtype: DType, shape) -> int:
        nid = self.op(OpKind.Constant, name=name, dtype=dtype.label, shape=list(shape))
        self.inputs.append(nid)
        return nid

    def weight(self, name: str, value, dtype: DType) -> int:
        t = Tensor.from_array(value, dtype)
        nid = self.op(OpKind.Constant, name=name, dtype=dtype.label, shape=list(t.shape))
        self.weight_ids.append(nid)
        self.weights[nid] = t
        return nid

    def gaussian(self, name: str, shape, dtype: DType, scale: float | None = None) -> int:
        scale = 1.0 / np.sqrt(shape[0]) if scale is None else scale
        return self.weight(name, self.rng.standard_normal(shape) * scale, dtype)

    def bundle(self, recipe: ModelRecipe, outputs: list[int], logits: int | None = None) -> ModelBundle:
        g = ComputeGraph(tuple(self.nodes), tuple(self.inputs), tuple(outputs), tuple(self.weight_ids))
        return ModelBundle(g, self.weights, name=recipe.name, version=f"seed{recipe.seed}", logits_id=logits)


def _tiny_mlp(r: ModelRecipe, b: GraphBuilder) -> ModelBundle:
    ffn = 2 * r.hidden
    tok = b.input("tokens", DType.I32, [r.seq])
    emb = b.gaussian("embed", (r.vocab, r.hidden), r.dtype, scale=1.0)
    x = b.op(OpKind.Embedding, emb, tok, name="embed_lookup")
    w1 = b.rng.standard_normal((r.hidden, ffn)) / np.sqrt(r.hidden)
    w1[:, 0] *= HOT_CHANNEL_SCALE
    h = b.op(OpKind.MatMul, x, b.weight("w_up", w1, r.dtype), name="up_proj")
    a = b.op(OpKind.GeluTanh, h, name="gelu")
    logits = b.op(OpKind.MatMul, a, b.gaussian("w_out", (ffn, r.vocab), r.dtype, LOGIT_SCALE / np.sqrt(ffn)), name="lm_head")
    probs = b.op(OpKind.Softmax, logits, name="probs")
    return b.bundle(r, [probs, logits], logits=logits)


def _tiny_llama_block(r: ModelRecipe, b: GraphBuilder) -> ModelBundle:
    d, s = r.hidden, r.seq
    hd = d // r.n_heads
    ffn = 2 * d
    tok = b.input("tokens", DType.I32, [s])
    x = b.op(OpKind.Embedding, b.gaussian("embed", (r.vocab, d), r.dtype, scale=1.0), tok, name="embed_lookup")
    h = b.op(OpKind.RmsNorm, x, b.weight("attn_norm", np.ones(d), r.dtype), eps=1e-5, name="attn_norm")
    scale = b.weight("attn_scale", np.array(1.0 / np.sqrt(hd)), r.dtype)
    mask = b.weight("causal_mask", np.triu(np.full((s, s), -1e4), k=1), r.dtype)
    heads = []
    for i in range(r.n_heads):
        q = b.op(OpKind.MatMul, h, b.gaussian(f"wq{i}", (d, hd), r.dtype), name=f"q{i}")
        k = b.op(OpKind.MatMul, h, b.gaussian(f"wk{i}", (d, hd), r.dtype), name=f"k{i}")
        v = b.op(OpKind.MatMul, h, b.gaussian(f"wv{i}", (d, hd), r.dtype), name=f"v{i}")
        kt = b.op(OpKind.Transpose2D, k, name=f"k{i}_t")
        scores = b.op(OpKind.MatMul, q, kt, name=f"scores{i}")
        scaled = b.op(OpKind.Mul, scores, scale, name=f"scaled{i}")
        masked = b.op(OpKind.Add, scaled, mask, name=f"masked{i}")
        p = b.op(OpKind.Softmax, masked, name=f"attn{i}")
        ctx = b.op(OpKind.MatMul, p, v, name=f"ctx{i}")
        heads.append(b.op(OpKind.MatMul, ctx, b.gaussian(f"wo{i}", (hd, d), r.dtype), name=f"o{i}"))
    attn = heads[0]
    for other in heads[1:]:
        attn = b.op(OpKind.Add, attn, other, name="attn_sum")
    x2 = b.op(OpKind.Add, x, attn, name="attn_residual")
    h2 = b.op(OpKind.RmsNorm, x2, b.weight("mlp_norm", np.ones(d), r.dtype), eps=1e-5, name="mlp_norm")
    gate = b.op(OpKind.MatMul, h2, b.gaussian("w_gate", (d, ffn), r.dtype), name="gate")
    up = b.op(OpKind.MatMul, h2, b.gaussian("w_up", (d, ffn), r.dtype), name="up")
    act = b.op(OpKind.Silu, gate, name="silu")
    prod = b.op(OpKind.Mul, act, up, name="gated")
    down = b.op(OpKind.MatMul, prod, b.gaussian("w_down", (ffn, d), r.dtype), name="down")
    out = b.op(OpKind.Add, x2, down, name="mlp_residual")
    logits = b.op(OpKind.MatMul, out, b.gaussian("lm_head", (d, r.vocab), r.dtype, LOGIT_SCALE / np.sqrt(d)), name="lm_head")
    return b.bundle(r, [logits], logits=logits)


def _quantize(b: GraphBuilder, name: str, shape, std: float, group: int, out: DType) -> int:
    # symmetric 8-bit around zero point 128, 3 sigma mapped onto 127 steps
    w = b.rng.standard_normal(shape) * std
    scale = float(3 * std / 127)
    u = np.clip(np.round(w / scale) + 128, 0, 255).astype(np.uint8)
    q = b.weight(f"{name}_u8", u, DType.U8)
    return b.op(OpKind.DequantizeU8, q, name=f"{name}_dequant", scale=scale, zero_point=128, group=group, dtype=out.label)


def _quantized_mlp(r: ModelRecipe, b: GraphBuilder) -> ModelBundle:
    d, ffn, out_dim = r.hidden, 64, 32
    tok = b.input("tokens", DType.I32, [r.seq])
    x = b.op(OpKind.Embedding, b.gaussian("embed", (r.vocab, d), r.dtype, scale=1.0), tok, name="embed_lookup")
    w1 = _quantize(b, "w_up", (d, ffn), 1.0 / np.sqrt(d), 16, r.dtype)
    h = b.op(OpKind.MatMul, x, w1, name="up_proj")
    a = b.op(OpKind.GeluTanh, h, name="gelu")
    w2 = _quantize(b, "w_down", (ffn, out_dim), 0.1 / np.sqrt(ffn), 16, r.dtype)
    y = b.op(OpKind.MatMul, a, w2, name="down_proj")
    act = b.op(OpKind.Relu, y, name="relu")
    flat = b.op(OpKind.Reshape, act, target_shape=[r.seq * out_dim], name="flatten")
    return b.bundle(r, [flat])


def _sub_chain(r: ModelRecipe, b: GraphBuilder) -> ModelBundle:
    n = r.seq
    a = b.input("features", r.dtype, [n])
    base = b.weight("base", b.rng.integers(1000, 1101, size=n), r.dtype)
    diff = b.op(OpKind.Sub, a, base, name="delta")
    scaled = b.op(OpKind.Mul, diff, b.weight("step", np.array(0.125), r.dtype), name="scaled")
    offset = b.rng.integers(1000, 1101, size=n)
    shifted = b.op(OpKind.Add, scaled, b.weight("offset", offset, r.dtype), name="shifted")
    back = b.op(OpKind.Sub, shifted, b.weight("recenter", offset - b.rng.integers(0, 8, size=n), r.dtype), name="recentered")
    out = b.op(OpKind.Relu, back, name="relu")
    return b.bundle(r, [out])


BUILDERS: dict[str, Callable[[ModelRecipe, GraphBuilder], ModelBundle]] = {
    "tiny-mlp": _tiny_mlp,
    "tiny-llama-block": _tiny_llama_block,
    "quantized-mlp": _quantized_mlp,
    "sub-chain": _sub_chain,
}

RECIPES: dict[str, ModelRecipe] = {
    "tiny-mlp": ModelRecipe("tiny-mlp", hidden=30, n_heads=1),
    "tiny-llama-block": ModelRecipe("tiny-llama-block", hidden=32, n_heads=2),
    "quantized-mlp": ModelRecipe("quantized-mlp", hidden=20, n_heads=1, dtype=DType.F16),
    "sub-chain": ModelRecipe("sub-chain", hidden=16, n_heads=1, dtype=DType.F16),
}


def recipe(name: str, **overrides) -> ModelRecipe:
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
    return replace(RECIPES[name], **overrides)


def build(r: ModelRecipe | str, **overrides) -> ModelBundle:
    if isinstance(r, str):
        r = recipe(r, **overrides)
    elif overrides:
        r = replace(r, **overrides)
    r.validate()
    bundle = BUILDERS[r.name](r, GraphBuilder(np.random.default_rng(r.seed)))
    problems = bundle.problems()
    assert not problems, problems
    return bundle


def tokenize(text: str, length: int) -> np.ndarray:
    """Byte-level tokens, space-padded or truncated to ``length``."""
    ids = list(text.encode("utf-8"))[:length]
    ids += [PAD_BYTE] * (length - len(ids))
    return np.array(ids, dtype=np.int32)


def load_snippets(corpus_id: str) -> list[str]:
    if corpus_id not in CORPUS_IDS:
        raise ValueError(f"unknown corpus {corpus_id!r}; choose from {list(CORPUS_IDS)}")
    text = resources.files("tapml").joinpath("corpora", f"{corpus_id}.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def _seed_for(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("/".join(parts).encode()).digest()[:8], "little")


def realistic_inputs(bundle: ModelBundle, corpus_id: str) -> list[dict[int, Tensor]]:
    """One model input set per snippet of the named text corpus.

    Token inputs are the snippet's bytes. Float inputs of ``sub-chain`` sit
    in the [1000, 1100) band derived from the bytes; other float inputs are
    Gaussian features seeded by corpus, snippet index and node name.
    """
    snippets = load_snippets(corpus_id)
    sets = []
    for idx, text in enumerate(snippets):
        feed = {}
        for nid in bundle.graph.input_ids:
            node = bundle.graph.node(nid)
            dtype = DType.parse(node.attrs["dtype"])
            shape = tuple(node.attrs["shape"])
            size = int(np.prod(shape))
            if dtype is DType.I32:
                arr = tokenize(text, size) % _vocab_for(bundle, nid)
            elif bundle.name == "sub-chain":
                arr = 1000 + tokenize(text, size) % 100
            elif dtype.is_float:
                rng = np.random.default_rng(_seed_for(corpus_id, str(idx), node.name))
                arr = rng.standard_normal(size)
            else:
                arr = tokenize(text, size) % 256
            feed[nid] = Tensor.from_array(np.asarray(arr).reshape(shape), dtype)
        sets.append(feed)
    return sets


def _vocab_for(bundle: ModelBundle, input_id: int) -> int:
    for n in bundle.graph.nodes:
        if n.kind is OpKind.Embedding and n.inputs[1] == input_id:
            return bundle.weights[n.inputs[0]].shape[0] if n.inputs[0] in bundle.weights else MAX_VOCAB
    return MAX_VOCAB
