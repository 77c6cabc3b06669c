import math

import numpy as np
import pytest

from paratool import autodiff as ad
from paratool.model import (DecodeError, ModelConfig, SequenceTooLong, TransformerModel, action_nll,
                            batch_action_nll, decode_action, decode_batch, expected_param_count)
from paratool.rng import Rng
from paratool.synth import Action
from paratool.vocab import VOCAB, TokenSequence

TINY = ModelConfig(hidden=16, layers=2, heads=2, d_ff=32, max_len=48)


@pytest.fixture(scope="module")
def model():
    return TransformerModel.init(TINY, Rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=15, heads=2)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=32)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=64 if len(VOCAB) > 64 else 300)


def test_param_count_and_shapes(model):
    assert model.param_count() == expected_param_count(TINY)
    logits = model.forward(np.arange(7))
    assert logits.shape == (7, TINY.vocab_size)


def test_forward_deterministic(model):
    ids = np.arange(12) + 20
    assert model.forward(ids).data.tobytes() == model.forward(ids).data.tobytes()


def test_causal_prefix_invariance(model, g):
    ids = g.integers(0, len(VOCAB), size=20)
    full = model.forward(ids).data
    for t in (1, 5, 13):
        prefix = model.forward(ids[:t]).data
        assert np.allclose(prefix, full[:t], atol=1e-12, rtol=0)
    changed = ids.copy()
    changed[10:] = (changed[10:] + 1) % len(VOCAB)
    assert np.allclose(model.forward(changed).data[:10], full[:10], atol=1e-12, rtol=0)


def test_overlong_sequence(model):
    with pytest.raises(SequenceTooLong):
        model.forward(np.zeros(TINY.max_len + 1, dtype=int))


def test_action_nll_closed_forms():
    seq = TokenSequence((1, 2, 3), action_start=2)
    assert action_nll(ad.const(np.zeros((3, 64))), seq).item() == pytest.approx(math.log(64), abs=1e-12)
    sharp = np.full((3, 64), -50.0)
    sharp[1, 3] = 50.0
    assert action_nll(ad.const(sharp), seq).item() < 1e-3
    with pytest.raises(ValueError):
        action_nll(ad.const(np.zeros((3, 64))), TokenSequence((1, 2, 3), action_start=3))


def test_prompt_labels_do_not_matter(model, g):
    ids = list(g.integers(0, len(VOCAB), size=10))
    other = list(ids)
    other[3] = (other[3] + 7) % len(VOCAB)  # changes a prompt label (target of position 2)
    a = action_nll(ad.const(model.forward(ids).data[:, :]), TokenSequence(tuple(ids), 6)).item()
    logits = model.forward(ids).data
    b = action_nll(ad.const(logits), TokenSequence(tuple(other[:6] + ids[6:]), 6)).item()
    assert a == b


def test_batch_loss_is_mean_of_sequence_losses(model, g):
    seqs = [TokenSequence(tuple(g.integers(0, len(VOCAB), size=n)), n - k) for n, k in ((9, 3), (14, 5), (6, 1))]
    batch = batch_action_nll(model, seqs).item()
    single = np.mean([action_nll(model.forward(s.ids), s).item() for s in seqs])
    assert batch == pytest.approx(single, abs=1e-12)


def test_action_nll_gradient_finite_difference():
    cfg = ModelConfig(hidden=8, layers=2, heads=2, d_ff=12, max_len=12)
    m = TransformerModel.init(cfg, Rng(4))
    seq = TokenSequence(tuple(range(20, 29)), 6)
    for name in ("l0.w_up", "l1.wq", "head"):
        def f(w, name=name):
            P = m.tensors()
            P[name] = w
            return batch_action_nll(m, [seq], P=P)
        err = ad.grad_check(f, m.params[name])
        assert err < 1e-4, name


def test_checkpoint_round_trip(tmp_path, model):
    model.save(tmp_path / "m.ptlm")
    back = TransformerModel.load(tmp_path / "m.ptlm")
    assert back.fingerprint() == model.fingerprint() and back.cfg == model.cfg


def test_untrained_decoding_is_counted_not_raised(model, g):
    prompts = [list(g.integers(0, len(VOCAB), size=8)) for _ in range(20)]
    res = decode_batch(model, prompts)
    assert len(res) == 20
    failures = sum(isinstance(r, DecodeError) for r in res)
    assert failures >= 18
    assert [type(r) for r in res] == [type(r) for r in decode_batch(model, prompts)]


def test_decode_matches_single(model, g):
    prompts = [list(g.integers(0, len(VOCAB), size=n)) for n in (5, 9)]
    batch = decode_batch(model, prompts, budget=4)
    for p, r in zip(prompts, batch):
        try:
            single = decode_action(model, p, budget=4)
        except DecodeError as e:
            single = e
        assert type(single) is type(r) and str(single) == str(r)


def test_memorised_action_is_decoded():
    """A few dozen steps on one sequence are enough to make greedy decoding emit it."""
    from paratool.optim import AdamW

    cfg = ModelConfig(hidden=16, layers=1, heads=2, d_ff=32, max_len=32)
    m = TransformerModel.init(cfg, Rng(0))
    target = Action("add", ("3", "4"))
    prompt = VOCAB.encode("USER S1 plus 3 4 ASSISTANT S1".split())
    seq = TokenSequence(tuple(prompt + VOCAB.encode(target.tokens())), len(prompt))
    opt = AdamW(lr=1e-2, weight_decay=0.0)
    for _ in range(150):
        P = m.tensors(trainable=True)
        with ad.Tape() as tape:
            loss = batch_action_nll(m, [seq], P=P)
        grads = ad.backward(tape, loss)
        opt.step(m.params, {k: grads[P[k]] for k in P})
    assert decode_action(m, prompt) == target
