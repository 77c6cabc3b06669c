from dataclasses import replace

import pytest

from paratool import config as cfgmod
from paratool.gating import GateNetwork
from paratool.model import TransformerModel
from paratool.pipeline import (STRATEGIES, doc_embeddings, evaluate, finetune_joint, pretrain_all, pretrain_tool,
                               train_gate_stage)
from paratool.rng import Rng
from paratool.synth import build_corpus


@pytest.fixture(scope="module")
def setup():
    cfg = cfgmod.smoke()
    corpus = build_corpus(0, cfg.synth)
    model = TransformerModel.init(cfg.model, Rng(0))
    store, _ = pretrain_all(model, corpus, cfg.adapter, cfg.stages.stage1, Rng(1))
    docs = doc_embeddings(model, corpus)
    gate, _ = train_gate_stage(model, corpus, cfg.stages.gate, Rng(2), docs)
    return cfg, corpus, model, store, docs, gate


def test_stage1_touches_only_its_own_adapter(setup):
    cfg, corpus, model, store, _, _ = setup
    before = model.fingerprint()
    others = {t: store[t].fingerprint() for t in store.ids()}
    tid = corpus.tools[0].tool_id
    adapter, curve = pretrain_tool(model, tid, corpus, cfg.adapter, cfg.stages.stage1, Rng(5))
    assert model.fingerprint() == before
    assert {t: store[t].fingerprint() for t in store.ids()} == others
    assert adapter.tool_id == tid and curve


def test_stage3_leaves_inputs_untouched(setup):
    cfg, corpus, model, store, docs, gate = setup
    fp_model, fp_gate = model.fingerprint(), gate.fingerprint()
    fp_store = {t: store[t].fingerprint() for t in store.ids()}
    new, curve = finetune_joint(model, store, gate, corpus, docs, cfg.stages.stage3, Rng(3))
    assert model.fingerprint() == fp_model
    assert gate.fingerprint() == fp_gate
    assert {t: store[t].fingerprint() for t in store.ids()} == fp_store
    assert any(new[t].fingerprint() != fp_store[t] for t in new.ids())
    assert curve


def test_pass_implies_action_correct(setup):
    _, corpus, model, store, docs, gate = setup
    for s in STRATEGIES:
        rep = evaluate(model, store, gate, corpus.test, s, corpus, docs)
        assert all(r["action_correct"] for r in rep.records if r["pass"])
        assert rep.action_accuracy >= rep.pass_rate


def test_single_candidate_makes_strategies_agree(setup):
    _, corpus, model, store, docs, gate = setup
    solo = [replace(i, candidates=[corpus.tool_id(i.target.tool)]) for i in corpus.test[:6]]
    outs = {s: evaluate(model, store, gate, solo, s, corpus, docs) for s in STRATEGIES}
    ref = [r["decoded"] for r in outs["oracle"].records]
    for rep in outs.values():
        assert [r["decoded"] for r in rep.records] == ref
        assert rep.gating_accuracy == 1.0


def test_strategy_errors(setup):
    _, corpus, model, store, docs, _ = setup
    with pytest.raises(ValueError):
        evaluate(model, store, None, corpus.test, "paratool", corpus, docs)
    with pytest.raises(ValueError):
        evaluate(model, store, None, corpus.test, "best", corpus, docs)
    with pytest.raises(ValueError):
        evaluate(model, store, None, [], "oracle", corpus, docs)


def test_zero_gate_is_uniform_like_average(setup):
    cfg, corpus, model, store, docs, _ = setup
    flat = GateNetwork.zeros(cfg.model.hidden, cfg.stages.gate)
    insts = corpus.test[:8]
    a = evaluate(model, store, flat, insts, "paratool", corpus, docs)
    b = evaluate(model, store, None, insts, "average", corpus, docs)
    assert [r["alpha"] for r in a.records] == [r["alpha"] for r in b.records]
    assert [r["decoded"] for r in a.records] == [r["decoded"] for r in b.records]
