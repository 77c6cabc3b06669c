"""Closed-world tool corpus: tools, atomic examples, trajectories, prompt formats.

Everything is a pure function of ``(seed, SynthConfig)``; all randomness is
drawn from named :class:`~paratool.rng.Rng` sub-streams.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import Rng
from .vocab import DIGITS, SPARE_NAMES, STEP_MARKERS, SYMBOLS, TOOL_NAMES, VOCAB, TokenSequence

DOC_AWARE = "document-aware"
DOC_FREE = "document-free"
FORMATS = (DOC_AWARE, DOC_FREE)
SPLITS = ("train", "validation", "test")


class ParseError(ValueError):
    pass


class PromptTooLong(ValueError):
    pass


# ---------------------------------------------------------------------------
# tools
# ---------------------------------------------------------------------------

_INT2 = (("a", "INT"), ("b", "INT"))
_INT1 = (("a", "INT"),)
_SYM2 = (("s", "SYM"), ("t", "SYM"))
_SYM1 = (("s", "SYM"),)

# name -> (schema, description words, query keywords)
FAMILIES: dict[str, tuple] = {
    "add": (_INT2, "return the sum of two numbers", ("sum", "plus")),
    "sub": (_INT2, "return the difference of two numbers", ("difference", "minus")),
    "mul": (_INT2, "return the product of two numbers", ("product", "times")),
    "max": (_INT2, "return the larger of two numbers", ("larger", "bigger")),
    "min": (_INT2, "return the smaller of two numbers", ("smaller", "lesser")),
    "mod": (_INT2, "return the remainder of two numbers", ("remainder", "modulo")),
    "square": (_INT1, "return the square of a number", ("square", "squared")),
    "double": (_INT1, "return twice a number", ("twice", "doubled")),
    "concat": (_SYM2, "return the join of two words", ("join", "glue")),
    "swap": (_SYM2, "return the swap of two words", ("swap", "flip")),
    "lookup": (_SYM1, "return the code of a word", ("code", "id")),
    "length": (_SYM1, "return the length of a word", ("length", "size")),
}
NEAR_DUPLICATE = ("max", "min")

_TEMPLATES_2 = (
    "{kw} {0} {1}",
    "what is the {kw} of {0} and {1}",
    "please give the {kw} of {0} and {1}",
    "compute the {kw} of {0} and {1}",
    "find me the {kw} of {0} and {1}",
)
_TEMPLATES_1 = (
    "{kw} {0}",
    "what is the {kw} of {0}",
    "please give the {kw} of {0}",
    "compute the {kw} of {0}",
    "find me the {kw} of {0}",
)


def _render_int(n: int) -> str:
    return " ".join(str(n))


@dataclass(frozen=True)
class Action:
    tool: str
    args: tuple[str, ...]

    def tokens(self) -> list[str]:
        out = ["CALL", self.tool]
        for a in self.args:
            out += ["ARG", a]
        return out + ["END"]

    def text(self) -> str:
        return " ".join(self.tokens())

    @classmethod
    def parse(cls, words: Sequence[str]) -> "Action":
        words = list(words)
        if len(words) < 3 or words[0] != "CALL" or words[-1] != "END":
            raise ParseError(f"not a CALL ... END form: {' '.join(words)!r}")
        name, rest = words[1], words[2:-1]
        if name in ("CALL", "ARG", "END"):
            raise ParseError("missing tool name")
        if len(rest) % 2:
            raise ParseError("dangling ARG")
        args = []
        for marker, value in zip(rest[::2], rest[1::2]):
            if marker != "ARG" or value in ("CALL", "ARG", "END"):
                raise ParseError(f"bad argument near {marker!r} {value!r}")
            args.append(value)
        return cls(name, tuple(args))

    @classmethod
    def from_text(cls, text: str) -> "Action":
        return cls.parse(text.split())


@dataclass(frozen=True)
class ToolSpec:
    tool_id: int
    name: str
    params: tuple[tuple[str, str], ...]
    description: str
    keywords: tuple[str, ...]
    codes: tuple[int, ...] = ()  # lookup table for symbol-coding tools

    @property
    def doc_tokens(self) -> list[str]:
        out = ["TOOL", self.name, "DESC", *self.description.split()]
        for pname, kind in self.params:
            out += ["PARAM", pname, kind]
        return out

    @property
    def document(self) -> str:
        return " ".join(self.doc_tokens)

    @property
    def doc_hash(self) -> str:
        return hashlib.sha256(self.document.encode()).hexdigest()[:16]

    def renamed(self, name: str) -> "ToolSpec":
        return ToolSpec(self.tool_id, name, self.params, self.description, self.keywords, self.codes)

    def validate(self, action: Action) -> list[str]:
        """Problems with ``action`` under this tool's schema (empty if valid)."""
        problems = []
        if action.tool != self.name:
            problems.append(f"name {action.tool!r} != {self.name!r}")
        if len(action.args) != len(self.params):
            problems.append(f"expected {len(self.params)} args, got {len(action.args)}")
        for (pname, kind), value in zip(self.params, action.args):
            if kind == "INT" and value not in DIGITS:
                problems.append(f"{pname} must be a digit, got {value!r}")
            if kind == "SYM" and value not in SYMBOLS:
                problems.append(f"{pname} must be a symbol, got {value!r}")
        return problems

    def execute(self, args: Sequence[str]) -> str:
        bad = self.validate(Action(self.name, tuple(args)))
        if bad:
            raise ValueError("; ".join(bad))
        family = _family_of(self)
        if family in ("add", "sub", "mul", "max", "min", "mod"):
            a, b = int(args[0]), int(args[1])
            if family == "mod" and b == 0:
                raise ValueError("mod by zero is outside the domain")
            value = {
                "add": a + b, "sub": abs(a - b), "mul": a * b,
                "max": max(a, b), "min": min(a, b), "mod": a % b if b else 0,
            }[family]
            return _render_int(value)
        if family == "square":
            return _render_int(int(args[0]) ** 2)
        if family == "double":
            return _render_int(2 * int(args[0]))
        if family == "concat":
            return f"{args[0]} {args[1]}"
        if family == "swap":
            return f"{args[1]} {args[0]}"
        if family == "lookup":
            return str(self.codes[SYMBOLS.index(args[0])])
        return str(len(args[0]))

    def to_dict(self) -> dict:
        return {
            "tool_id": self.tool_id, "name": self.name, "params": [list(p) for p in self.params],
            "description": self.description, "keywords": list(self.keywords),
            "codes": list(self.codes), "document": self.document, "doc_hash": self.doc_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolSpec":
        return cls(d["tool_id"], d["name"], tuple(tuple(p) for p in d["params"]),
                   d["description"], tuple(d["keywords"]), tuple(d.get("codes", ())))


def _family_of(tool: ToolSpec) -> str:
    # behaviour follows the description, so in-context renamed tools keep semantics
    for fam, (_, desc, _) in FAMILIES.items():
        if desc == tool.description:
            return fam
    raise KeyError(tool.description)


def gen_toolset(seed: int, count: int = 12) -> list[ToolSpec]:
    """Deterministic toolset; always contains the max/min near-duplicate pair."""
    if count < 2:
        raise ValueError("count must be >= 2")
    if count > len(FAMILIES):
        raise ValueError(f"at most {len(FAMILIES)} tools are defined")
    g = Rng(seed).generator("toolset")
    rest = [f for f in FAMILIES if f not in NEAR_DUPLICATE]
    order = list(NEAR_DUPLICATE) + [rest[i] for i in g.permutation(len(rest))]
    chosen = sorted(order[:count], key=TOOL_NAMES.index)
    codes = tuple(int(c) for c in g.integers(0, 10, size=len(SYMBOLS)))
    tools = []
    for tid, fam in enumerate(chosen):
        schema, desc, kws = FAMILIES[fam]
        tools.append(ToolSpec(tid, fam, schema, desc, kws, codes if fam == "lookup" else ()))
    return tools


# ---------------------------------------------------------------------------
# atomic examples
# ---------------------------------------------------------------------------


def _sample_args(tool: ToolSpec, g: np.random.Generator) -> tuple[str, ...]:
    fam = _family_of(tool)
    out = []
    for i, (_, kind) in enumerate(tool.params):
        if kind == "INT":
            lo = 1 if (fam == "mod" and i == 1) else 0
            out.append(str(int(g.integers(lo, 10))))
        else:
            out.append(SYMBOLS[int(g.integers(len(SYMBOLS)))])
    return tuple(out)


def render_clause(tool: ToolSpec, args: Sequence[str], g: np.random.Generator) -> str:
    templates = _TEMPLATES_2 if len(args) == 2 else _TEMPLATES_1
    tmpl = templates[int(g.integers(len(templates)))]
    kw = tool.keywords[int(g.integers(len(tool.keywords)))]
    return tmpl.format(*args, kw=kw)


def gen_atomic_examples(tool: ToolSpec, k: int, rng: Rng) -> list[tuple[str, Action]]:
    """``k`` (query clause, action) pairs whose arguments are stated in the query."""
    if k < 1:
        raise ValueError("k must be >= 1")
    g = rng.generator(f"atomic/{tool.name}")
    out = []
    for _ in range(k):
        args = _sample_args(tool, g)
        out.append((render_clause(tool, args, g), Action(tool.name, args)))
    return out


# ---------------------------------------------------------------------------
# similarity and distractors
# ---------------------------------------------------------------------------


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    """Token-set Jaccard similarity; two empty sets count as identical (1.0)."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def build_distractors(target: ToolSpec, pool: Sequence[ToolSpec], m: int,
                      g: np.random.Generator) -> list[ToolSpec]:
    """Target plus its ``m`` most document-similar tools, in shuffled order."""
    pool = [t for t in pool if t.tool_id != target.tool_id]
    if m > len(pool):
        raise ValueError(f"m={m} exceeds pool of {len(pool)}")
    ranked = sorted(pool, key=lambda t: (-jaccard(target.doc_tokens, t.doc_tokens), t.tool_id))
    chosen = [target] + ranked[:m]
    return [chosen[i] for i in g.permutation(len(chosen))]


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class TraceInstance:
    query: str
    history: list[tuple[Action, str]]
    candidates: list[int]
    target: Action
    format: str = DOC_FREE
    split: str = "train"
    kind: str = "single"  # single | select | multi
    step: int = 0

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "history": [[a.text(), obs] for a, obs in self.history],
            "candidates": list(self.candidates),
            "target": self.target.text(),
            "format": self.format,
            "split": self.split,
            "kind": self.kind,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceInstance":
        return cls(
            query=d["query"],
            history=[(Action.from_text(a), obs) for a, obs in d["history"]],
            candidates=list(d["candidates"]),
            target=Action.from_text(d["target"]),
            format=d["format"], split=d["split"], kind=d.get("kind", "single"),
            step=d.get("step", 0),
        )

    def with_format(self, fmt: str) -> "TraceInstance":
        return TraceInstance(self.query, self.history, self.candidates, self.target,
                             fmt, self.split, self.kind, self.step)


def _episode_instances(steps: list[tuple[str, Action]], cand_ids: list[int],
                       tools_by_name: dict[str, ToolSpec], kind: str,
                       g: np.random.Generator) -> list[TraceInstance]:
    """Cut an episode before each call: one instance per step."""
    query = " ".join(f"{STEP_MARKERS[i]} {clause}" for i, (clause, _) in enumerate(steps))
    out, history = [], []
    for k, (_, action) in enumerate(steps):
        cands = [cand_ids[i] for i in g.permutation(len(cand_ids))]
        out.append(TraceInstance(query, list(history), cands, action, DOC_FREE, "train", kind, k))
        history.append((action, tools_by_name[action.tool].execute(action.args)))
    return out


def compose_trajectories(tools: Sequence[ToolSpec], pools: dict[str, list[tuple[str, Action]]],
                         rng: Rng, max_calls: int = 4, max_candidates: int = 4) -> list[TraceInstance]:
    """Per atomic example: a lone single-tool call, a call among distractors,
    and a 2..max_calls multi-call episode inside a shared candidate set."""
    if not pools or not any(pools.values()):
        raise ValueError("empty atomic pools")
    by_name = {t.name: t for t in tools}
    out: list[TraceInstance] = []
    for tool in tools:
        g = rng.generator(f"trajectories/{tool.name}")
        for clause, action in pools.get(tool.name, []):
            out += _episode_instances([(clause, action)], [tool.tool_id], by_name, "single", g)
            m = int(g.integers(1, max_candidates)) if max_candidates > 1 else 0
            cands = build_distractors(tool, tools, min(m, len(tools) - 1), g)
            out += _episode_instances([(clause, action)], [t.tool_id for t in cands], by_name,
                                      "select", g)
            if max_calls < 2:
                continue
            n_calls = int(g.integers(2, max_calls + 1))
            cset = build_distractors(tool, tools, min(max_candidates - 1, len(tools) - 1), g)
            steps = [(clause, action)]
            for _ in range(n_calls - 1):
                other = cset[int(g.integers(len(cset)))]
                opool = pools[other.name]
                steps.append(opool[int(g.integers(len(opool)))])
            steps = [steps[i] for i in g.permutation(len(steps))]
            out += _episode_instances(steps, [t.tool_id for t in cset], by_name, "multi", g)
    return out


def decontaminate(train: Sequence[TraceInstance], test: Sequence[TraceInstance]):
    """Drop train instances whose query string exactly matches a test query."""
    banned = {t.query for t in test}
    kept = [t for t in train if t.query not in banned]
    return kept, len(train) - len(kept)


# ---------------------------------------------------------------------------
# prompt formats
# ---------------------------------------------------------------------------


def prompt_words(inst: TraceInstance, tools_by_id: dict[int, ToolSpec], mode: str | None = None) -> list[str]:
    mode = mode or inst.format
    if mode not in FORMATS:
        raise ValueError(f"unknown format {mode!r}")
    words: list[str] = []
    if mode == DOC_AWARE:
        words.append("TOOLS")
        for tid in inst.candidates:
            words += tools_by_id[tid].doc_tokens
    words += ["USER", *inst.query.split(), "TOOLCALL_HISTORY"]
    for k, (action, obs) in enumerate(inst.history):
        words += [STEP_MARKERS[k], *action.tokens(), "OBS", *obs.split()]
    words += ["ASSISTANT", STEP_MARKERS[len(inst.history)]]
    return words


def format_instance(inst: TraceInstance, tools_by_id: dict[int, ToolSpec], mode: str | None = None,
                    with_target: bool = False, max_len: int | None = None) -> TokenSequence:
    words = prompt_words(inst, tools_by_id, mode)
    n_prompt = len(words)
    if with_target:
        words = words + inst.target.tokens()
    if max_len is not None and len(words) > max_len:
        raise PromptTooLong(f"{len(words)} tokens > max length {max_len}")
    ids = tuple(VOCAB.encode(words))
    return TokenSequence(ids, n_prompt if with_target else None)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_tools: int = 12
    atomic_per_tool: int = 20
    test_atomic_per_tool: int = 6
    max_calls: int = 4
    max_candidates: int = 4
    val_fraction: float = 0.2


@dataclass
class Corpus:
    tools: list[ToolSpec]
    train: list[TraceInstance]
    validation: list[TraceInstance]
    test: list[TraceInstance]
    removed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def tools_by_id(self) -> dict[int, ToolSpec]:
        return {t.tool_id: t for t in self.tools}

    @property
    def tools_by_name(self) -> dict[str, ToolSpec]:
        return {t.name: t for t in self.tools}

    def tool_id(self, name: str) -> int:
        return self.tools_by_name[name].tool_id


def build_corpus(seed: int, cfg: SynthConfig) -> Corpus:
    rng = Rng(seed).child("synth")
    tools = gen_toolset(seed, cfg.n_tools)
    train_pools = {t.name: gen_atomic_examples(t, cfg.atomic_per_tool, rng.child("train")) for t in tools}
    test_pools = {t.name: gen_atomic_examples(t, cfg.test_atomic_per_tool, rng.child("test")) for t in tools}
    train = compose_trajectories(tools, train_pools, rng.child("train"), cfg.max_calls, cfg.max_candidates)
    test = compose_trajectories(tools, test_pools, rng.child("test"), cfg.max_calls, cfg.max_candidates)
    train, removed = decontaminate(train, test)
    g = rng.generator("split")
    order = g.permutation(len(train))
    n_val = int(round(cfg.val_fraction * len(train)))
    val_idx = set(int(i) for i in order[:n_val])
    tr, va = [], []
    for i, inst in enumerate(train):
        if i in val_idx:
            inst.split = "validation"
            va.append(inst)
        else:
            tr.append(inst)
    for inst in test:
        inst.split = "test"
    return Corpus(tools, tr, va, test, removed, {"seed": seed, "config": asdict(cfg)})


# ---------------------------------------------------------------------------
# in-context episodes for the backbone
# ---------------------------------------------------------------------------


def backbone_episodes(rng: Rng, n: int, tools: Sequence[ToolSpec] | None = None,
                      max_calls: int = 4, max_candidates: int = 4,
                      free_fraction: float = 0.25) -> list[tuple[TraceInstance, dict[int, ToolSpec]]]:
    """Episodes whose tool names are re-drawn per episode from the full name pool.

    The backbone can only get names right by reading documents in context, so
    it learns the call grammar and argument copying without memorising any
    name-to-behaviour binding.
    """
    tools = list(tools or gen_toolset(0, len(FAMILIES)))
    names = list(TOOL_NAMES) + list(SPARE_NAMES)
    g = rng.generator("backbone-episodes")
    out = []
    while len(out) < n:
        k = int(g.integers(1, max_candidates + 1))
        picked = [tools[i] for i in g.choice(len(tools), size=k, replace=False)]
        drawn = [names[i] for i in g.choice(len(names), size=k, replace=False)]
        local = [t.renamed(nm) for t, nm in zip(picked, drawn)]
        local = [ToolSpec(i, t.name, t.params, t.description, t.keywords, t.codes) for i, t in enumerate(local)]
        by_id = {t.tool_id: t for t in local}
        n_calls = int(g.integers(1, max_calls + 1))
        steps = []
        for _ in range(n_calls):
            t = local[int(g.integers(k))]
            args = _sample_args(t, g)
            steps.append((render_clause(t, args, g), Action(t.name, args)))
        insts = _episode_instances(steps, list(by_id), {t.name: t for t in local}, "multi" if n_calls > 1 else "select", g)
        for inst in insts:
            fmt = DOC_FREE if g.random() < free_fraction else DOC_AWARE
            out.append((inst.with_format(fmt), by_id))
    return out[:n]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_corpus(corpus: Corpus, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": corpus.meta, "removed_by_decontamination": corpus.removed,
                "tools": [t.to_dict() for t in corpus.tools]}
    (directory / "toolset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for split in SPLITS:
        write_jsonl(directory / f"{split}.jsonl", (i.to_dict() for i in getattr(corpus, split)))


def load_corpus(directory: Path) -> Corpus:
    directory = Path(directory)
    manifest = json.loads((directory / "toolset.json").read_text())
    tools = [ToolSpec.from_dict(d) for d in manifest["tools"]]
    parts = {s: [TraceInstance.from_dict(d) for d in read_jsonl(directory / f"{s}.jsonl")] for s in SPLITS}
    return Corpus(tools, parts["train"], parts["validation"], parts["test"],
                  manifest.get("removed_by_decontamination", 0), manifest.get("meta", {}))
