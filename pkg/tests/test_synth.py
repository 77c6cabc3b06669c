import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paratool.rng import Rng
from paratool.synth import (DOC_AWARE, DOC_FREE, NEAR_DUPLICATE, Action, ParseError, PromptTooLong, SynthConfig,
                            TraceInstance, build_corpus, build_distractors, compose_trajectories, decontaminate,
                            format_instance, gen_atomic_examples, gen_toolset, jaccard, load_corpus,
                            prompt_words, save_corpus)
from paratool.vocab import VOCAB, VocabError


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(0, SynthConfig())


def test_toolset_deterministic_and_unique():
    a, b = gen_toolset(3, 12), gen_toolset(3, 12)
    assert a == b
    assert len({t.tool_id for t in a}) == 12 and len({t.name for t in a}) == 12
    with pytest.raises(ValueError):
        gen_toolset(0, 1)


def test_near_duplicate_pair_overlaps():
    tools = {t.name: t for t in gen_toolset(0, 12)}
    x, y = (tools[n] for n in NEAR_DUPLICATE)
    assert jaccard(x.doc_tokens, y.doc_tokens) > 0.5
    small = {t.name for t in gen_toolset(5, 2)}
    assert small == set(NEAR_DUPLICATE)


def test_documents_in_vocabulary():
    for t in gen_toolset(0, 12):
        VOCAB.encode(t.doc_tokens)


def test_atomic_examples_valid():
    for tool in gen_toolset(0, 12):
        pairs = gen_atomic_examples(tool, 20, Rng(1))
        assert len(pairs) == 20
        for query, action in pairs:
            assert tool.validate(action) == []
            tool.execute(action.args)
            words = query.split()
            for a in action.args:
                assert a in words
    assert len(gen_atomic_examples(gen_toolset(0, 2)[0], 1, Rng(0))) == 1


def test_jaccard_examples():
    assert jaccard("abc", "abc") == 1.0
    assert jaccard("ab", "cd") == 0.0
    assert jaccard("abc", "bcd") == 0.5
    assert jaccard([], []) == 1.0


def test_distractors():
    tools = gen_toolset(0, 12)
    g = np.random.default_rng(0)
    assert build_distractors(tools[0], tools, 0, g) == [tools[0]]
    a = build_distractors(tools[3], tools, 4, np.random.default_rng(1))
    b = build_distractors(tools[3], tools, 4, np.random.default_rng(2))
    assert {t.tool_id for t in a} == {t.tool_id for t in b} and tools[3] in a
    with pytest.raises(ValueError):
        build_distractors(tools[0], tools, 12, g)


def test_execution_observation():
    add = next(t for t in gen_toolset(0, 12) if t.name == "add")
    assert add.execute(("3", "4")) == "7"
    assert add.execute(("9", "8")) == "1 7"


def test_trajectory_truncation_schema():
    tools = gen_toolset(0, 6)
    pools = {t.name: gen_atomic_examples(t, 3, Rng(0)) for t in tools}
    insts = compose_trajectories(tools, pools, Rng(0))
    singles = [i for i in insts if i.kind == "single"]
    assert all(i.history == [] and len(i.candidates) == 1 for i in singles)
    episodes = {}
    for i in insts:
        if i.kind == "multi":
            episodes.setdefault(i.query, []).append(i)
    for steps in episodes.values():
        assert [len(s.history) for s in steps] == list(range(len(steps)))
        by_name = {t.name: t for t in tools}
        for s in steps:
            for a, obs in s.history:
                assert obs == by_name[a.tool].execute(a.args)
    for i in insts:
        assert i.target.tool in {tools[c].name for c in i.candidates}


def test_formats(corpus):
    by_id = corpus.tools_by_id
    inst = next(i for i in corpus.test if i.kind == "select")
    free = prompt_words(inst, by_id, DOC_FREE)
    aware = prompt_words(inst, by_id, DOC_AWARE)
    assert "TOOL" not in free and "DESC" not in free
    assert len(aware) > len(free)
    empty = next(i for i in corpus.test if not i.history)
    words = prompt_words(empty, by_id, DOC_FREE)
    k = words.index("TOOLCALL_HISTORY")
    assert words[k + 1] == "ASSISTANT"
    with pytest.raises(PromptTooLong):
        format_instance(inst, by_id, DOC_AWARE, with_target=True, max_len=5)


def test_decontamination():
    mk = lambda q: TraceInstance(q, [], [0], Action("add", ("1", "2")))
    train, test = [mk("a"), mk("b"), mk("c")], [mk("x")]
    assert decontaminate(train, test) == (train, 0)
    kept, removed = decontaminate(train, [mk("a"), mk("b"), mk("c")])
    assert kept == [] and removed == 3
    kept, _ = decontaminate(train, [mk("b")])
    assert decontaminate(kept, [mk("b")])[1] == 0


def test_corpus_splits(corpus):
    assert not {i.query for i in corpus.train} & {i.query for i in corpus.test}
    n = len(corpus.train) + len(corpus.validation)
    assert abs(len(corpus.validation) / n - 0.2) < 0.05
    assert {i.split for i in corpus.test} == {"test"}


def test_corpus_files_deterministic(tmp_path):
    a, b = build_corpus(1, SynthConfig(n_tools=4, atomic_per_tool=3, test_atomic_per_tool=1)), None
    save_corpus(a, tmp_path / "a")
    b = build_corpus(1, SynthConfig(n_tools=4, atomic_per_tool=3, test_atomic_per_tool=1))
    save_corpus(b, tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = load_corpus(tmp_path / "a")
    assert [i.to_dict() for i in back.test] == [i.to_dict() for i in a.test]


def test_action_round_trip_and_errors():
    a = Action.from_text("CALL add ARG 3 ARG 4 END")
    assert a == Action("add", ("3", "4")) and len(VOCAB.tokenize(a.text())) == len(a.text().split()) == 7
    for bad in ("CALL add ARG 3", "add ARG 3 END", "CALL add ARG END", "CALL add 3 END", "CALL END"):
        with pytest.raises(ParseError):
            Action.from_text(bad)


def test_tokenizer():
    assert len(VOCAB.tokenize("")) == 0
    with pytest.raises(VocabError):
        VOCAB.tokenize("CALL frobnicate END")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(VOCAB.tokens), max_size=30))
def test_tokenize_round_trip(words):
    text = " ".join(words)
    assert VOCAB.detokenize(VOCAB.tokenize(text)) == text


def test_corpus_lines_round_trip(corpus):
    for inst in corpus.test[:50]:
        seq = format_instance(inst, corpus.tools_by_id, DOC_AWARE, with_target=True)
        text = VOCAB.detokenize(seq)
        assert VOCAB.detokenize(VOCAB.tokenize(text)) == text
