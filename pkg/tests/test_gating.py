import math

import numpy as np
import pytest

from paratool import autodiff as ad
from paratool.gating import (CompositionWeights, EmbeddingCache, GateConfig, GateNetwork, GateSample,
                             batch_gate_loss, encode_context, encode_tool, entropy, features, gate_loss,
                             gate_metrics, gate_scores, top_n, train_gate)
from paratool.model import ModelConfig, TransformerModel
from paratool.rng import Rng


def test_zero_gate_is_uniform(g):
    gate = GateNetwork.zeros(8, GateConfig(hidden=16))
    w = gate_scores(gate, g.normal(size=8), list(g.normal(size=(4, 8))))
    assert w.alpha.tolist() == [0.25] * 4


def test_duplicate_documents_get_equal_weight(g):
    gate = GateNetwork.init(8, GateConfig(hidden=16), Rng(0))
    d = g.normal(size=8)
    w = gate_scores(gate, g.normal(size=8), [d, g.normal(size=8), d.copy()])
    assert w.alpha[0] == w.alpha[2]


def test_permutation_equivariance(g):
    gate = GateNetwork.init(8, GateConfig(hidden=16), Rng(1))
    c, D = g.normal(size=8), g.normal(size=(5, 8))
    ids = [10, 11, 12, 13, 14]
    w = gate_scores(gate, c, list(D), ids)
    perm = g.permutation(5)
    wp = gate_scores(gate, c, list(D[perm]), [ids[i] for i in perm])
    assert np.allclose(wp.alpha, w.alpha[perm], atol=1e-15)
    assert wp.argmax() == w.argmax()


def test_empty_candidates_rejected(g):
    gate = GateNetwork.zeros(4, GateConfig(hidden=8))
    with pytest.raises(ValueError):
        gate_scores(gate, g.normal(size=4), [])


def test_gate_loss_closed_forms():
    assert gate_loss(np.array([0.5, 0.5]), 0, 0.8) == pytest.approx(0.2 * math.log(2), abs=1e-12)
    assert gate_loss(np.array([0.5, 0.5]), 0, 0.8) == pytest.approx(0.13863, abs=1e-5)
    assert gate_loss(np.array([0.2, 0.8]), 1, 0.0) == pytest.approx(-math.log(0.8))
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(IndexError):
        gate_loss(np.array([0.5, 0.5]), 2, 0.8)


def test_batch_loss_matches_scalar_loss_with_padding(g):
    gate = GateNetwork.init(4, GateConfig(hidden=8), Rng(2))
    samples = [GateSample(g.normal(size=4), g.normal(size=(k, 4)), tuple(range(k)), k - 1) for k in (2, 4)]
    K = 4
    feats = np.zeros((2, K, 16))
    mask = np.zeros((2, K), bool)
    for i, s in enumerate(samples):
        feats[i, : len(s.tool_ids)] = features(s.c, s.docs)
        mask[i, : len(s.tool_ids)] = True
    P = {k: ad.const(v) for k, v in gate.arrays().items()}
    got = batch_gate_loss(gate, P, feats, mask, np.array([1, 3]), 0.8).item()
    want = np.mean([gate_loss(gate_scores(gate, s.c, list(s.docs)), s.target, 0.8) for s in samples])
    assert got == pytest.approx(want, abs=1e-10)


def test_gate_loss_gradient_finite_difference(g):
    gate = GateNetwork.init(3, GateConfig(hidden=6), Rng(3))
    feats = g.normal(size=(2, 3, 12))
    mask = np.array([[True, True, True], [True, True, False]])
    targets = np.array([2, 0])
    arrays = gate.arrays()

    def f(w0):
        P = {k: ad.const(v) for k, v in arrays.items()}
        P["W0"] = w0
        return batch_gate_loss(gate, P, feats, mask, targets, 0.8)

    assert ad.grad_check(f, arrays["W0"]) < 1e-5


def test_top_n_examples():
    w = top_n(CompositionWeights((0, 1, 2), np.array([0.7, 0.2, 0.1])), 2)
    assert w.tool_ids == (0, 1)
    assert np.allclose(w.alpha, [0.7 / 0.9, 0.2 / 0.9], atol=1e-15)
    assert round(w.alpha[0], 4) == 0.7778
    full = CompositionWeights((4, 5, 6), np.array([0.5, 0.3, 0.2]))
    assert top_n(full, 3) is full and top_n(full, 10) is full
    hot = CompositionWeights.one_hot((1, 2, 3), 2)
    for n in (1, 2, 3):
        out = top_n(hot, n)
        assert out.alpha[list(out.tool_ids).index(2)] == 1.0
    with pytest.raises(ValueError):
        top_n(full, 0)


def test_top_n_ties_and_ratios():
    w = CompositionWeights((7, 3, 5), np.array([0.25, 0.25, 0.5]))
    assert top_n(w, 2).tool_ids == (3, 5)
    kept = top_n(CompositionWeights((0, 1, 2, 3), np.array([0.4, 0.3, 0.2, 0.1])), 3)
    assert kept.alpha[0] / kept.alpha[1] == pytest.approx(0.4 / 0.3, rel=1e-15)


def test_composition_weights_validation():
    with pytest.raises(ValueError):
        CompositionWeights((0, 1), np.array([0.6, 0.5]))
    with pytest.raises(ValueError):
        CompositionWeights((), np.array([]))
    assert CompositionWeights((4, 2), np.array([0.5, 0.5])).argmax() == 2


def test_encoder_shapes_and_cache(tmp_path):
    model = TransformerModel.init(ModelConfig(hidden=16, layers=1, heads=2, d_ff=32, max_len=64), Rng(0))
    prompt = [5, 6, 7, 8]
    c = encode_context(model, prompt)
    assert c.shape == (16,)
    assert encode_context(model, prompt).tobytes() == c.tobytes()
    assert encode_tool(model, [9, 10]).tobytes() == encode_tool(model, [9, 10]).tobytes()
    cache = EmbeddingCache(model.fingerprint())
    d = cache.get(model, 0, "h0", [9, 10])
    cache.save(tmp_path / "e.ptec")
    back = EmbeddingCache.load(tmp_path / "e.ptec")
    assert back.get(model, 0, "h0", [9, 10]).tobytes() == d.tobytes()
    with pytest.raises(ValueError):
        encode_context(model, [])


def _toy_samples(g, n, h=6):
    protos = g.normal(size=(5, h))
    out = []
    for _ in range(n):
        ids = tuple(sorted(g.choice(5, size=3, replace=False)))
        t = int(g.integers(3))
        c = protos[ids[t]] + 0.3 * g.normal(size=h)
        out.append(GateSample(c, protos[list(ids)], ids, t))
    return out


def test_single_candidate_accuracy_is_one(g):
    samples = [GateSample(g.normal(size=4), g.normal(size=(1, 4)), (i,), 0) for i in range(5)]
    gate = GateNetwork.init(4, GateConfig(hidden=8), Rng(0))
    assert gate_metrics(gate, samples)["accuracy"] == 1.0


def test_training_learns_and_entropy_rises_with_lambda():
    g = np.random.default_rng(0)
    train, val = _toy_samples(g, 300), _toy_samples(g, 100)
    res = {}
    for lam in (0.0, 0.8):
        gate, curve = train_gate(train, 6, GateConfig(hidden=16, epochs=15, lam=lam, lr=5e-3), Rng(0), val)
        res[lam] = gate_metrics(gate, val)
        assert curve[-1]["train_loss"] < curve[0]["train_loss"]
    assert res[0.0]["accuracy"] > 0.8
    assert res[0.8]["entropy"] > res[0.0]["entropy"]


def test_target_outside_candidates_rejected(g):
    bad = [GateSample(g.normal(size=4), g.normal(size=(2, 4)), (0, 1), 2)]
    with pytest.raises(ValueError):
        train_gate(bad, 4, GateConfig(hidden=8, epochs=1), Rng(0))


def test_gate_save_load(tmp_path):
    gate = GateNetwork.init(4, GateConfig(hidden=8), Rng(0))
    gate.save(tmp_path / "g.ptgt")
    assert GateNetwork.load(tmp_path / "g.ptgt").fingerprint() == gate.fingerprint()
