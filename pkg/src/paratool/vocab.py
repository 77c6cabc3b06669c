"""Closed symbol vocabulary and whitespace tokenizer."""

from __future__ import annotations

from dataclasses import dataclass, field

PAD = "<pad>"
STRUCTURE = [
    PAD, "TOOLS", "TOOL", "DESC", "PARAM", "INT", "SYM", "USER",
    "TOOLCALL_HISTORY", "OBS", "ASSISTANT", "CALL", "ARG", "END",
    "S1", "S2", "S3", "S4",
]
STEP_MARKERS = ["S1", "S2", "S3", "S4"]
DIGITS = [str(i) for i in range(10)]
SYMBOLS = ["red", "blue", "green", "gold", "cat", "dog", "owl", "fox"]
PARAM_NAMES = ["a", "b", "s", "t"]
TOOL_NAMES = [
    "add", "sub", "mul", "max", "min", "mod",
    "square", "double", "concat", "swap", "lookup", "length",
]
# extra names only ever bound in-context while the backbone is trained
SPARE_NAMES = [f"g{i}" for i in range(12)]
KEYWORDS = [
    "sum", "plus", "difference", "minus", "product", "times",
    "larger", "bigger", "smaller", "lesser", "remainder", "modulo",
    "squared", "twice", "doubled", "join", "glue", "flip",
    "code", "id", "size",
]
FILLERS = ["what", "is", "the", "of", "and", "please", "give", "compute", "me", "find"]
DOC_WORDS = ["return", "two", "numbers", "number", "word", "words"]


def _build() -> list[str]:
    seen: dict[str, None] = {}
    for group in (STRUCTURE, DIGITS, SYMBOLS, PARAM_NAMES, TOOL_NAMES, SPARE_NAMES,
                  KEYWORDS, FILLERS, DOC_WORDS):
        for tok in group:
            seen.setdefault(tok, None)
    return list(seen)


TOKENS: list[str] = _build()


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus the start of the target-action span (None for prompts)."""

    ids: tuple[int, ...]
    action_start: int | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def action_ids(self) -> tuple[int, ...]:
        return () if self.action_start is None else self.ids[self.action_start:]


@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=lambda: list(TOKENS))

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def id(self, tok: str) -> int:
        try:
            return self.index[tok]
        except KeyError:
            raise VocabError(f"out-of-vocabulary symbol {tok!r}") from None

    def encode(self, words) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def tokenize(self, text: str) -> TokenSequence:
        return TokenSequence(tuple(self.encode(text.split())))

    def detokenize(self, seq: TokenSequence | list[int]) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        return " ".join(self.decode(ids))


VOCAB = Vocab()
