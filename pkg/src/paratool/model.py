"""Miniature pre-norm decoder-only transformer on top of :mod:`paratool.autodiff`.

Weights are stored as numpy arrays in ``(out, in)`` layout.  The forward pass
takes an optional *delta* object; when given, every FFN matrix product gets
``delta.ffn(x, layer, site)`` added to it, which is how composed low-rank
tool modules enter the network.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .binfile import read_blocks, write_blocks
from .rng import Rng
from .synth import Action, ParseError
from .vocab import PAD, VOCAB, TokenSequence

MAGIC = b"PTLM"
FFN_SITES = ("up", "down")


class SequenceTooLong(ValueError):
    pass


class DecodeError(RuntimeError):
    kind = "decode"


class DecodeFailure(DecodeError):
    """Budget ran out before END was emitted."""

    kind = "decode_failure"


class ParseFailure(DecodeError):
    kind = "parse_failure"


@dataclass
class ModelConfig:
    vocab_size: int = 128
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    d_ff: int = 128
    max_len: int = 384
    seed: int = 0

    def __post_init__(self):
        if not 64 <= self.vocab_size <= 256:
            raise ValueError("vocab_size must be in [64, 256]")
        if self.vocab_size < len(VOCAB):
            raise ValueError(f"vocab_size {self.vocab_size} < closed vocabulary size {len(VOCAB)}")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if min(self.hidden, self.layers, self.heads, self.d_ff, self.max_len) < 1:
            raise ValueError("dimensions must be positive")

    def site_shape(self, site: str) -> tuple[int, int]:
        """(out, in) of the FFN matrix at ``site``."""
        return (self.d_ff, self.hidden) if site == "up" else (self.hidden, self.d_ff)


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for l in range(cfg.layers):
        names += [f"l{l}.{n}" for n in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w_up", "w_down")]
    return names + ["lnf_g", "lnf_b", "head"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, out = cfg.hidden, {}
    for name in param_names(cfg):
        key = name.split(".")[-1]
        out[name] = {
            "tok_emb": (cfg.vocab_size, h), "pos_emb": (cfg.max_len, h), "head": (cfg.vocab_size, h),
            "wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h),
            "w_up": (cfg.d_ff, h), "w_down": (h, cfg.d_ff),
        }.get(key, (h,))
    return out


def expected_param_count(cfg: ModelConfig) -> int:
    h, L = cfg.hidden, cfg.layers
    per_layer = 4 * h * h + 2 * h * cfg.d_ff + 4 * h
    return 2 * cfg.vocab_size * h + cfg.max_len * h + L * per_layer + 2 * h


class TransformerModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            raise ValueError("parameter names do not match the config")
        for k, shp in shapes.items():
            if params[k].shape != shp:
                raise ValueError(f"{k}: shape {params[k].shape} != {shp}")
        self.cfg = cfg
        self.params = {k: np.array(params[k], dtype=np.float64) for k in param_names(cfg)}

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng | None = None) -> "TransformerModel":
        g = (rng or Rng(cfg.seed)).generator("model-init")
        params = {}
        for name, shp in param_shapes(cfg).items():
            key = name.split(".")[-1]
            if key.endswith("_g"):
                params[name] = np.ones(shp)
            elif key.endswith("_b"):
                params[name] = np.zeros(shp)
            else:
                std = 0.02 if key in ("tok_emb", "pos_emb") else 1.0 / np.sqrt(shp[-1])
                if key in ("wo", "w_down"):
                    std /= np.sqrt(2 * cfg.layers)
                params[name] = g.normal(0.0, std, size=shp)
        return cls(cfg, params)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in param_names(self.cfg):
            h.update(self.params[k].tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------

    def tensors(self, trainable: bool = False) -> dict[str, ad.Tensor]:
        make = ad.param if trainable else ad.const
        return {k: make(v) for k, v in self.params.items()}

    def embed(self, ids: np.ndarray, P: dict | None = None) -> ad.Tensor:
        """Token plus position embeddings for a (B, S) id batch."""
        P = P or self.tensors()
        ids = np.asarray(ids, dtype=np.int64)
        S = ids.shape[-1]
        if S > self.cfg.max_len:
            raise SequenceTooLong(f"sequence of {S} tokens > max length {self.cfg.max_len}")
        pos = ad.slice_(P["pos_emb"], slice(0, S))
        return ad.add(ad.embedding(P["tok_emb"], ids), pos)

    def hidden_states(self, x: ad.Tensor, delta=None, P: dict | None = None) -> ad.Tensor:
        """Run the blocks and the final norm on embeddings x of shape (B, S, h)."""
        cfg = self.cfg
        P = P or self.tensors()
        B, S, h = x.shape
        if S > cfg.max_len:
            raise SequenceTooLong(f"sequence of {S} tokens > max length {cfg.max_len}")
        H, dh = cfg.heads, h // cfg.heads
        causal = np.tril(np.ones((S, S), dtype=bool))
        for l in range(cfg.layers):
            p = lambda n: P[f"l{l}.{n}"]
            a = ad.layer_norm(x, p("ln1_g"), p("ln1_b"))
            heads = []
            for w in ("wq", "wk", "wv"):
                t = ad.reshape(ad.linear(a, p(w)), (B, S, H, dh))
                heads.append(ad.transpose(t, (0, 2, 1, 3)))
            q, k, v = heads
            scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = ad.matmul(ad.softmax(scores, mask=causal), v)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, S, h))
            x = ad.add(x, ad.linear(att, p("wo")))
            m = ad.layer_norm(x, p("ln2_g"), p("ln2_b"))
            u = ad.linear(m, p("w_up"))
            if delta is not None:
                u = ad.add(u, delta.ffn(m, l, "up"))
            u = ad.relu(u)
            d = ad.linear(u, p("w_down"))
            if delta is not None:
                d = ad.add(d, delta.ffn(u, l, "down"))
            x = ad.add(x, d)
        return ad.layer_norm(x, P["lnf_g"], P["lnf_b"])

    def logits_from_embeddings(self, x: ad.Tensor, delta=None, P: dict | None = None) -> ad.Tensor:
        P = P or self.tensors()
        return ad.linear(self.hidden_states(x, delta, P), P["head"])

    def forward(self, ids, delta=None, P: dict | None = None) -> ad.Tensor:
        """Logits (B, S, V) for a (B, S) batch, or (S, V) for a single sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        P = P or self.tensors()
        out = self.logits_from_embeddings(self.embed(ids, P), delta, P)
        return ad.reshape(out, out.shape[1:]) if single else out

    # -- checkpoint --------------------------------------------------------

    def save(self, path: Path, extra: dict | None = None) -> None:
        meta = {"config": asdict(self.cfg), "params": param_names(self.cfg), **(extra or {})}
        write_blocks(path, MAGIC, meta, self.params)

    @classmethod
    def load(cls, path: Path) -> "TransformerModel":
        meta, blocks = read_blocks(path, MAGIC)
        return cls(ModelConfig(**meta["config"]), blocks)


# ---------------------------------------------------------------------------
# batching, loss, decoding
# ---------------------------------------------------------------------------

PAD_ID = VOCAB.id(PAD)
END_ID = VOCAB.id("END")


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a (B, S) array; returns (ids, lengths)."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def action_targets(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, next-token targets, weights) for teacher forcing on action spans.

    Each sequence's span tokens get weight 1/(span length * batch size), so the
    weighted sum is the batch mean of per-sequence mean span NLL.
    """
    for s in seqs:
        if s.action_start is None or s.action_start >= len(s.ids) or s.action_start < 1:
            raise ValueError("action span must be a nonempty suffix after a nonempty prompt")
    ids, _ = pad_batch([s.ids for s in seqs])
    B, S = ids.shape
    targets = np.zeros((B, S), dtype=np.int64)
    weights = np.zeros((B, S))
    targets[:, :-1] = ids[:, 1:]
    for i, s in enumerate(seqs):
        n = len(s.ids) - s.action_start
        # logits at position t predict token t + 1
        weights[i, s.action_start - 1 : len(s.ids) - 1] = 1.0 / (n * B)
    return ids, targets, weights


def action_nll(logits: ad.Tensor, sequence: TokenSequence) -> ad.Tensor:
    """Mean negative log-probability of the action-span tokens of one sequence."""
    if sequence.action_start is None or sequence.action_start >= len(sequence.ids):
        raise ValueError("empty action span")
    ids = np.asarray(sequence.ids)
    S = len(ids)
    if logits.shape[0] != S:
        raise ad.ShapeError(f"logits for {logits.shape[0]} positions, sequence has {S}")
    start = sequence.action_start
    rows = ad.slice_(logits, slice(start - 1, S - 1))
    return ad.cross_entropy(rows, ids[start:])


def batch_action_nll(model: TransformerModel, seqs: Sequence[TokenSequence], delta=None,
                     P: dict | None = None) -> ad.Tensor:
    ids, targets, weights = action_targets(seqs)
    logits = model.forward(ids, delta, P)
    return ad.cross_entropy(logits, targets, weights)


def last_hidden(model: TransformerModel, prompts: Sequence[Sequence[int]], delta=None) -> np.ndarray:
    """Final-layer state at each prompt's last position, shape (B, h)."""
    if any(len(p) == 0 for p in prompts):
        raise ValueError("empty prompt")
    ids, lengths = pad_batch(prompts)
    with ad.no_record():
        hs = model.hidden_states(model.embed(ids), delta).data
    return hs[np.arange(len(prompts)), lengths - 1]


def decode_batch(model: TransformerModel, prompts: Sequence[Sequence[int]], delta=None,
                 budget: int = 12) -> list[Action | DecodeError]:
    """Greedy decoding for a batch; failures are returned, not raised."""
    cfg = model.cfg
    seqs = [list(p) for p in prompts]
    for s in seqs:
        if len(s) > cfg.max_len:
            raise SequenceTooLong(f"prompt of {len(s)} tokens > max length {cfg.max_len}")
    n0 = [len(s) for s in seqs]
    done = [False] * len(seqs)
    P = model.tensors()
    with ad.no_record():
        for _ in range(budget):
            live = [i for i, d in enumerate(done) if not d and len(seqs[i]) < cfg.max_len]
            if not live:
                break
            ids, lengths = pad_batch([seqs[i] for i in live])
            sub = delta.select(live) if delta is not None and hasattr(delta, "select") else delta
            logits = model.forward(ids, sub, P).data
            # padding rows of the embedding table are never emitted
            nxt = logits[np.arange(len(live)), lengths - 1, : len(VOCAB)].argmax(axis=-1)
            for i, t in zip(live, nxt):
                seqs[i].append(int(t))
                if t == END_ID:
                    done[i] = True
    out: list[Action | DecodeError] = []
    for i, s in enumerate(seqs):
        words = VOCAB.decode(s[n0[i]:])
        if not done[i]:
            out.append(DecodeFailure(f"no END within {budget} tokens: {' '.join(words)}"))
            continue
        try:
            out.append(Action.parse(words))
        except ParseError as e:
            out.append(ParseFailure(str(e)))
    return out


def decode_action(model: TransformerModel, prompt: Sequence[int], delta=None, budget: int = 12) -> Action:
    res = decode_batch(model, [prompt], delta, budget)[0]
    if isinstance(res, DecodeError):
        raise res
    return res
