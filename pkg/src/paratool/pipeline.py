"""Training stages and evaluation.

Stage 0 (backbone): the frozen base model is trained once on in-context
episodes whose tool names are re-drawn per episode, so it learns the call
grammar and argument copying but no fixed tool binding.

Stage 1 trains one low-rank adapter per tool on that tool's instances in both
prompt formats.  Stage 2 trains the gate on frozen embeddings.  Stage 3
freezes the gate and fine-tunes all adapters jointly through gate-weighted
compositions on document-free prompts.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapter import AdapterConfig, AdapterStore, ComposedDelta, LowRankAdapter, init_adapter
from .gating import (
    CompositionWeights, EmbeddingCache, GateConfig, GateNetwork, GateSample, encode_many, gate_scores,
    top_n, train_gate,
)
from .model import (
    DecodeError, ModelConfig, TransformerModel, batch_action_nll, decode_batch,
)
from .optim import AdamW, cosine_lr
from .rng import Rng
from .synth import (
    DOC_AWARE, DOC_FREE, Corpus, TraceInstance, backbone_episodes, format_instance, prompt_words,
)
from .vocab import TokenSequence

log = logging.getLogger(__name__)

STRATEGIES = ("paratool", "average", "top1", "oracle", "no_finetune")


@dataclass
class BackboneConfig:
    episodes: int = 30000
    steps: int = 2500
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 50
    free_fraction: float = 0.25


@dataclass
class Stage1Config:
    lr: float = 2e-3
    epochs: int = 12
    batch_size: int = 16


@dataclass
class Stage3Config:
    lr: float = 5e-4
    epochs: int = 4
    batch_size: int = 32
    top_n: int | None = None  # None keeps every candidate of the instance


@dataclass
class StageConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    gate: GateConfig = field(default_factory=GateConfig)
    stage3: Stage3Config = field(default_factory=Stage3Config)

    @classmethod
    def published(cls) -> "StageConfig":
        """Learning rates and epochs as published for billion-parameter backbones."""
        return cls(
            stage1=Stage1Config(lr=1e-4, epochs=3),
            gate=GateConfig.published(),
            stage3=Stage3Config(lr=1e-4, epochs=1),
        )


# ---------------------------------------------------------------------------
# generic low-rank training loop
# ---------------------------------------------------------------------------


def length_batches(lengths: Sequence[int], batch_size: int, g: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of similar length (less padding)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    order = np.argsort(lengths + g.random(len(lengths)) * 8.0, kind="stable")
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in g.permutation(len(batches))]


def _collect_grads(delta: ComposedDelta, grads: ad.Gradients) -> dict:
    out = {}
    for (i, l, site), (A, B) in delta.factor_tensors().items():
        out[(i, l, site, "A")] = grads[A]
        out[(i, l, site, "B")] = grads[B]
    return out


def _factor_arrays(adapters: Sequence[LowRankAdapter]) -> dict:
    out = {}
    for i, a in enumerate(adapters):
        for (l, site), (A, B) in a.factors.items():
            out[(i, l, site, "A")] = A
            out[(i, l, site, "B")] = B
    return out


def composed_nll(model: TransformerModel, adapters: Sequence[LowRankAdapter], seqs: Sequence[TokenSequence],
                 weights: np.ndarray, P=None, batch: int = 64) -> float:
    """Mean action NLL with per-row composition weights (no gradients)."""
    total = 0.0
    with ad.no_record():
        for i in range(0, len(seqs), batch):
            delta = ComposedDelta(adapters, weights[i : i + batch])
            part = seqs[i : i + batch]
            total += batch_action_nll(model, part, delta, P).item() * len(part)
    return total / len(seqs)


def train_composed(model: TransformerModel, adapters: Sequence[LowRankAdapter], seqs: Sequence[TokenSequence],
                   weights: np.ndarray, lr: float, epochs: int, batch_size: int, rng: Rng,
                   evaluate: Callable[[], dict] | None = None, logger=None) -> list[dict]:
    """Minimise action NLL w.r.t. the adapters' factors only, in place."""
    if not seqs:
        raise ValueError("no training sequences")
    P = model.tensors()
    params = _factor_arrays(adapters)
    opt = AdamW(lr=lr)
    g = rng.generator("batches")
    lengths = [len(s) for s in seqs]
    total = epochs * math.ceil(len(seqs) / batch_size)
    step, curve = 0, []
    if evaluate:
        curve.append({"epoch": 0, **evaluate()})
    for epoch in range(epochs):
        losses = []
        for idx in length_batches(lengths, batch_size, g):
            delta = ComposedDelta(adapters, weights[idx], trainable=True)
            with ad.Tape() as tape:
                loss = batch_action_nll(model, [seqs[i] for i in idx], delta, P)
            grads = _collect_grads(delta, ad.backward(tape, loss))
            opt.step(params, grads, lr=cosine_lr(lr, step, total))
            losses.append(loss.item())
            step += 1
        row = {"epoch": epoch + 1, "train_nll": float(np.mean(losses))}
        if evaluate:
            row.update(evaluate())
        curve.append(row)
        if logger:
            logger(row)
    return curve


# ---------------------------------------------------------------------------
# stage 0: backbone
# ---------------------------------------------------------------------------


def train_backbone(model_cfg: ModelConfig, cfg: BackboneConfig, logger=None) -> tuple[TransformerModel, list[dict]]:
    rng = Rng(model_cfg.seed).child("backbone")
    model = TransformerModel.init(model_cfg, rng)
    episodes = backbone_episodes(rng, cfg.episodes, free_fraction=cfg.free_fraction)
    seqs = [format_instance(inst, by_id, with_target=True, max_len=model_cfg.max_len) for inst, by_id in episodes]
    lengths = [len(s) for s in seqs]
    opt = AdamW(lr=cfg.lr)
    g = rng.generator("batches")
    batches: list[np.ndarray] = []
    curve, window = [], []
    for step in range(cfg.steps):
        if not batches:
            batches = [b for b in length_batches(lengths, cfg.batch_size, g) if len(b) == cfg.batch_size]
        idx = batches.pop()
        P = model.tensors(trainable=True)
        with ad.Tape() as tape:
            loss = batch_action_nll(model, [seqs[i] for i in idx], None, P)
        grads = ad.backward(tape, loss)
        opt.step(model.params, {k: grads[P[k]] for k in P}, lr=cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup))
        window.append(loss.item())
        if (step + 1) % 100 == 0 or step + 1 == cfg.steps:
            row = {"step": step + 1, "train_nll": float(np.mean(window))}
            window = []
            curve.append(row)
            if logger:
                logger(row)
    return model, curve


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def tool_sequences(insts: Sequence[TraceInstance], corpus: Corpus, formats: Sequence[str], max_len: int) -> list[TokenSequence]:
    by_id = corpus.tools_by_id
    return [format_instance(i, by_id, fmt, with_target=True, max_len=max_len) for i in insts for fmt in formats]


def pretrain_tool(model: TransformerModel, tool_id: int, corpus: Corpus, adapter_cfg: AdapterConfig,
                  cfg: Stage1Config, rng: Rng, logger=None) -> tuple[LowRankAdapter, list[dict]]:
    """Train tool ``tool_id``'s adapter on its own instances; nothing else changes."""
    name = corpus.tools_by_id[tool_id].name
    train = [i for i in corpus.train if i.target.tool == name]
    val = [i for i in corpus.validation if i.target.tool == name]
    if not train:
        raise ValueError(f"no training instances for tool {name!r}")
    L = model.cfg.max_len
    seqs = tool_sequences(train, corpus, (DOC_AWARE, DOC_FREE), L)
    val_seqs = tool_sequences(val, corpus, (DOC_FREE,), L)
    adapter = init_adapter(tool_id, model.cfg, adapter_cfg, rng)
    ones = np.ones((len(seqs), 1))
    P = model.tensors()

    def evaluate():
        if not val_seqs:
            return {}
        return {"val_nll": composed_nll(model, [adapter], val_seqs, np.ones((len(val_seqs), 1)), P)}

    curve = train_composed(model, [adapter], seqs, ones, cfg.lr, cfg.epochs, cfg.batch_size,
                           rng.child(f"stage1/{tool_id}"), evaluate, logger)
    return adapter, curve


def pretrain_all(model: TransformerModel, corpus: Corpus, adapter_cfg: AdapterConfig, cfg: Stage1Config,
                 rng: Rng, logger=None) -> tuple[AdapterStore, dict[int, list[dict]]]:
    store = AdapterStore(adapter_cfg, model_cfg=model.cfg)
    curves = {}
    for tool in corpus.tools:
        adapter, curve = pretrain_tool(model, tool.tool_id, corpus, adapter_cfg, cfg, rng.child("stage1"),
                                       (lambda row, t=tool.name: logger({"tool": t, **row})) if logger else None)
        store.add(adapter)
        curves[tool.tool_id] = curve
    return store, curves


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def doc_embeddings(model: TransformerModel, corpus: Corpus, cache: EmbeddingCache | None = None) -> dict[int, np.ndarray]:
    from .vocab import VOCAB

    cache = cache or EmbeddingCache(model.fingerprint())
    return {t.tool_id: cache.get(model, t.tool_id, t.doc_hash, VOCAB.encode(t.doc_tokens)) for t in corpus.tools}


def context_embeddings(model: TransformerModel, insts: Sequence[TraceInstance], corpus: Corpus) -> np.ndarray:
    by_id = corpus.tools_by_id
    prompts = [format_instance(i, by_id, DOC_FREE, max_len=model.cfg.max_len).ids for i in insts]
    return encode_many(model, prompts)


def gate_samples(model: TransformerModel, insts: Sequence[TraceInstance], corpus: Corpus,
                 docs: dict[int, np.ndarray]) -> list[GateSample]:
    if not insts:
        return []
    C = context_embeddings(model, insts, corpus)
    out = []
    for c, inst in zip(C, insts):
        ids = tuple(inst.candidates)
        target = ids.index(corpus.tool_id(inst.target.tool)) if corpus.tool_id(inst.target.tool) in ids else -1
        out.append(GateSample(c, np.stack([docs[t] for t in ids]), ids, target))
    return out


def train_gate_stage(model: TransformerModel, corpus: Corpus, cfg: GateConfig, rng: Rng,
                     docs: dict[int, np.ndarray], logger=None):
    train = gate_samples(model, corpus.train, corpus, docs)
    val = gate_samples(model, corpus.validation, corpus, docs)
    return train_gate(train, model.cfg.hidden, cfg, rng.child("gate"), val, logger)


# ---------------------------------------------------------------------------
# stage 3
# ---------------------------------------------------------------------------


def gate_weights(gate: GateNetwork, samples: Sequence[GateSample], n: int | None) -> list[CompositionWeights]:
    out = []
    for s in samples:
        w = gate_scores(gate, s.c, list(s.docs), s.tool_ids)
        out.append(top_n(w, n or len(s.tool_ids)))
    return out


def finetune_joint(model: TransformerModel, store: AdapterStore, gate: GateNetwork, corpus: Corpus,
                   docs: dict[int, np.ndarray], cfg: Stage3Config, rng: Rng, logger=None) -> tuple[AdapterStore, list[dict]]:
    """Jointly fine-tune every adapter through gate-weighted compositions.

    Returns a new store; the input store, the gate and the model are untouched.
    """
    train = [i for i in corpus.train if i.candidates]
    if len(train) != len(corpus.train):
        raise ValueError("instance with an empty candidate set")
    new = store.copy()
    ids = new.ids()
    adapters = [new[t] for t in ids]
    L = model.cfg.max_len

    def rows(insts):
        ws = gate_weights(gate, gate_samples(model, insts, corpus, docs), cfg.top_n)
        return np.stack([w.dense(ids) for w in ws]) if ws else np.zeros((0, len(ids)))

    seqs = tool_sequences(train, corpus, (DOC_FREE,), L)
    W = rows(train)
    val = corpus.validation
    val_seqs = tool_sequences(val, corpus, (DOC_FREE,), L)
    Wv = rows(val)
    P = model.tensors()

    def evaluate():
        return {"val_nll": composed_nll(model, adapters, val_seqs, Wv, P)} if val_seqs else {}

    curve = train_composed(model, adapters, seqs, W, cfg.lr, cfg.epochs, cfg.batch_size, rng.child("stage3"),
                           evaluate, logger)
    return new, curve


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    strategy: str
    pass_rate: float
    gating_accuracy: float
    action_accuracy: float
    records: list[dict]
    by_kind: dict[str, dict] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"strategy": self.strategy, "n": len(self.records), "pass_rate": self.pass_rate,
                "gating_accuracy": self.gating_accuracy, "action_accuracy": self.action_accuracy}


def _rates(records: Sequence[dict]) -> dict:
    n = len(records)
    return {
        "n": n,
        "pass_rate": sum(r["pass"] for r in records) / n,
        "gating_accuracy": sum(r["gate_correct"] for r in records) / n,
        "action_accuracy": sum(r["action_correct"] for r in records) / n,
    }


def strategy_weights(strategy: str, inst: TraceInstance, corpus: Corpus, gate_w: CompositionWeights | None,
                     n: int | None) -> CompositionWeights:
    cands = tuple(inst.candidates)
    if strategy == "oracle":
        return CompositionWeights.one_hot(cands, corpus.tool_id(inst.target.tool))
    if strategy == "average":
        return CompositionWeights.uniform(cands)
    if gate_w is None:
        raise ValueError(f"strategy {strategy!r} needs a trained gate")
    if strategy == "top1":
        return CompositionWeights.one_hot(cands, gate_w.argmax())
    return top_n(gate_w, n or len(cands))


def evaluate(model: TransformerModel, store: AdapterStore, gate: GateNetwork | None, testset: Sequence[TraceInstance],
             strategy: str, corpus: Corpus, docs: dict[int, np.ndarray] | None = None, top_n_cap: int | None = None,
             batch: int = 64) -> EvalReport:
    """Decode every test instance under one composition strategy.

    For ``no_finetune`` pass the stage-1 store; the weights are the gate's.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if not testset:
        raise ValueError("empty test set")
    by_id = corpus.tools_by_id
    needs_gate = strategy in ("paratool", "top1", "no_finetune")
    gate_ws: list[CompositionWeights | None] = [None] * len(testset)
    if needs_gate:
        if gate is None:
            raise ValueError(f"strategy {strategy!r} needs a trained gate")
        docs = docs if docs is not None else doc_embeddings(model, corpus)
        samples = gate_samples(model, testset, corpus, docs)
        gate_ws = [gate_scores(gate, s.c, list(s.docs), s.tool_ids) for s in samples]
    ids = store.ids()
    adapters = [store[t] for t in ids]
    weights = [strategy_weights(strategy, inst, corpus, gw, top_n_cap) for inst, gw in zip(testset, gate_ws)]
    prompts = [format_instance(inst, by_id, DOC_FREE, max_len=model.cfg.max_len).ids for inst in testset]
    W = np.stack([w.dense(ids) for w in weights])
    decoded: list = []
    for i in range(0, len(testset), batch):
        delta = ComposedDelta(adapters, W[i : i + batch])
        decoded += decode_batch(model, prompts[i : i + batch], delta)
    records = []
    for k, (inst, w, out) in enumerate(zip(testset, weights, decoded)):
        target_id = corpus.tool_id(inst.target.tool)
        failed = isinstance(out, DecodeError)
        records.append({
            "index": k,
            "kind": inst.kind,
            "step": inst.step,
            "candidates": list(w.tool_ids),
            "alpha": [float(a) for a in w.alpha],
            "target": inst.target.text(),
            "decoded": None if failed else out.text(),
            "error": out.kind if failed else None,
            "pass": (not failed) and out == inst.target,
            "gate_correct": w.argmax() == target_id,
            "action_correct": (not failed) and out.tool == inst.target.tool,
        })
    overall = _rates(records)
    kinds = sorted({r["kind"] for r in records})
    by_kind = {kd: _rates([r for r in records if r["kind"] == kd]) for kd in kinds}
    return EvalReport(strategy, overall["pass_rate"], overall["gating_accuracy"], overall["action_accuracy"],
                      records, by_kind)


def token_counts(insts: Sequence[TraceInstance], corpus: Corpus) -> list[dict]:
    """Per-instance prompt token counts in both formats, for the cost model."""
    by_id = corpus.tools_by_id
    out = []
    for inst in insts:
        free = prompt_words(inst, by_id, DOC_FREE)
        aware = prompt_words(inst, by_id, DOC_AWARE)
        query = 1 + len(inst.query.split())
        out.append({"query": query, "history": len(free) - query, "docs": len(aware) - len(free),
                    "examples": 0, "candidates": len(inst.candidates), "free": len(free), "aware": len(aware)})
    return out
