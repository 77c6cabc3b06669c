"""Soft tool selection: frozen embeddings, an MLP scorer and simplex weights.

Every candidate tool ``i`` is scored from ``[c, d_i, c*d_i, |c-d_i|]`` where
``c`` is the frozen backbone's last-token state for the document-free prompt
and ``d_i`` the same for the tool's document.  A softmax over the candidate
list gives the composition weights.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .binfile import read_blocks, write_blocks
from .model import TransformerModel, last_hidden
from .optim import AdamW
from .rng import Rng

MAGIC = b"PTGT"
CACHE_MAGIC = b"PTEC"


@dataclass
class GateConfig:
    hidden: int = 128
    depth: int = 3
    lam: float = 0.8
    lr: float = 2e-3
    epochs: int = 30
    batch_size: int = 64
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("entropy coefficient must be >= 0")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @classmethod
    def published(cls) -> "GateConfig":
        return cls(hidden=512, lr=5e-4, epochs=3)


@dataclass(frozen=True)
class CompositionWeights:
    tool_ids: tuple[int, ...]
    alpha: np.ndarray = field(compare=False)

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.shape != (len(self.tool_ids),):
            raise ValueError("one weight per candidate required")
        if len(self.tool_ids) == 0:
            raise ValueError("empty candidate list")
        if (a < 0).any() or abs(a.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "alpha", a)

    def argmax(self) -> int:
        """Tool id with the largest weight; ties go to the smaller id."""
        best = max(range(len(self.tool_ids)), key=lambda i: (self.alpha[i], -self.tool_ids[i]))
        return self.tool_ids[best]

    def dense(self, tool_ids: Sequence[int]) -> np.ndarray:
        """Weights laid out over ``tool_ids`` (zeros for non-candidates)."""
        pos = {t: i for i, t in enumerate(tool_ids)}
        out = np.zeros(len(tool_ids))
        for t, a in zip(self.tool_ids, self.alpha):
            out[pos[t]] += a
        return out

    @classmethod
    def one_hot(cls, tool_ids: Sequence[int], tool: int) -> "CompositionWeights":
        return cls(tuple(tool_ids), np.array([1.0 if t == tool else 0.0 for t in tool_ids]))

    @classmethod
    def uniform(cls, tool_ids: Sequence[int]) -> "CompositionWeights":
        n = len(tool_ids)
        return cls(tuple(tool_ids), np.full(n, 1.0 / n))


def entropy(alpha: np.ndarray) -> float:
    a = np.asarray(alpha, dtype=np.float64)
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def gate_loss(alpha: CompositionWeights | np.ndarray, target: int, lam: float) -> float:
    """-ln alpha[target] - lam * H(alpha); ``target`` indexes the candidate list."""
    a = alpha.alpha if isinstance(alpha, CompositionWeights) else np.asarray(alpha, dtype=np.float64)
    if not 0 <= target < len(a):
        raise IndexError(f"target {target} outside {len(a)} candidates")
    if a[target] <= 0:
        return math.inf
    return float(-math.log(a[target]) - lam * entropy(a))


def top_n(weights: CompositionWeights, n: int) -> CompositionWeights:
    """Keep the ``n`` heaviest candidates and renormalise them to sum to one."""
    if n < 1:
        raise ValueError("N must be >= 1")
    if n >= len(weights.tool_ids):
        return weights
    order = sorted(range(len(weights.tool_ids)), key=lambda i: (-weights.alpha[i], weights.tool_ids[i]))
    keep = sorted(order[:n])
    kept = weights.alpha[keep]
    total = kept.sum()
    if total <= 0:
        kept, total = np.ones(len(keep)), float(len(keep))
    return CompositionWeights(tuple(weights.tool_ids[i] for i in keep), kept / total)


# ---------------------------------------------------------------------------
# frozen encoder
# ---------------------------------------------------------------------------


def encode_context(model: TransformerModel, prompt: Sequence[int]) -> np.ndarray:
    return last_hidden(model, [prompt])[0]


def encode_tool(model: TransformerModel, doc: Sequence[int]) -> np.ndarray:
    return last_hidden(model, [doc])[0]


def encode_many(model: TransformerModel, seqs: Sequence[Sequence[int]], batch: int = 64) -> np.ndarray:
    out = [last_hidden(model, seqs[i : i + batch]) for i in range(0, len(seqs), batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.hidden))


class EmbeddingCache:
    """Tool-document embeddings keyed by (tool id, document hash)."""

    def __init__(self, model_fingerprint: str):
        self.model_fingerprint = model_fingerprint
        self.entries: dict[tuple[int, str], np.ndarray] = {}

    def get(self, model: TransformerModel, tool_id: int, doc_hash: str, doc_ids: Sequence[int]) -> np.ndarray:
        key = (tool_id, doc_hash)
        if key not in self.entries:
            self.entries[key] = encode_tool(model, doc_ids)
        return self.entries[key]

    def save(self, path: Path) -> None:
        keys = sorted(self.entries)
        meta = {"model": self.model_fingerprint, "keys": [[t, h] for t, h in keys]}
        write_blocks(path, CACHE_MAGIC, meta, {f"{t}:{h}": self.entries[(t, h)] for t, h in keys})

    @classmethod
    def load(cls, path: Path) -> "EmbeddingCache":
        meta, blocks = read_blocks(path, CACHE_MAGIC)
        cache = cls(meta["model"])
        for t, h in meta["keys"]:
            cache.entries[(t, h)] = blocks[f"{t}:{h}"]
        return cache


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def features(c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """[c, d, c*d, |c-d|] along the last axis; c broadcasts against d."""
    c = np.broadcast_to(c, d.shape)
    return np.concatenate([c, d, c * d, np.abs(c - d)], axis=-1)


class GateNetwork:
    def __init__(self, in_dim: int, layers: list[tuple[np.ndarray, np.ndarray]]):
        if layers[0][0].shape[1] != in_dim:
            raise ValueError("first layer width must equal the feature width")
        self.in_dim = in_dim
        self.layers = [(np.array(W, dtype=np.float64), np.array(b, dtype=np.float64)) for W, b in layers]

    @classmethod
    def init(cls, h: int, cfg: GateConfig, rng: Rng) -> "GateNetwork":
        g = rng.generator("gate-init")
        dims = [4 * h] + [cfg.hidden] * (cfg.depth - 1) + [1]
        layers = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            std = math.sqrt(2.0 / din) if i < len(dims) - 2 else math.sqrt(1.0 / din)
            layers.append((g.normal(0.0, std, size=(dout, din)), np.zeros(dout)))
        return cls(4 * h, layers)

    @classmethod
    def zeros(cls, h: int, cfg: GateConfig) -> "GateNetwork":
        dims = [4 * h] + [cfg.hidden] * (cfg.depth - 1) + [1]
        return cls(4 * h, [(np.zeros((o, i)), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"W{i}"], out[f"b{i}"] = W, b
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for v in self.arrays().values():
            h.update(v.tobytes())
        return h.hexdigest()

    def score_tensor(self, feats: ad.Tensor, P: dict[str, ad.Tensor]) -> ad.Tensor:
        x = feats
        n = len(self.layers)
        for i in range(n):
            x = ad.add(ad.linear(x, P[f"W{i}"]), P[f"b{i}"])
            if i < n - 1:
                x = ad.relu(x)
        return ad.reshape(x, x.shape[:-1])

    def scores(self, feats: np.ndarray) -> np.ndarray:
        with ad.no_record():
            P = {k: ad.const(v) for k, v in self.arrays().items()}
            return self.score_tensor(ad.const(feats), P).data

    def save(self, path: Path, extra: dict | None = None) -> None:
        write_blocks(path, MAGIC, {"in_dim": self.in_dim, "depth": len(self.layers), **(extra or {})}, self.arrays())

    @classmethod
    def load(cls, path: Path) -> "GateNetwork":
        meta, blocks = read_blocks(path, MAGIC)
        layers = [(blocks[f"W{i}"], blocks[f"b{i}"]) for i in range(meta["depth"])]
        return cls(meta["in_dim"], layers)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def gate_scores(gate: GateNetwork, c: np.ndarray, d_list: Sequence[np.ndarray], tool_ids: Sequence[int] | None = None) -> CompositionWeights:
    if len(d_list) == 0:
        raise ValueError("empty candidate list")
    D = np.stack([np.asarray(d, dtype=np.float64) for d in d_list])
    if D.shape[1] != c.shape[-1]:
        raise ValueError("document and context embeddings differ in width")
    # score each distinct document once so duplicates get bitwise-equal weights
    # (blocked matmul kernels may round identical rows differently)
    uniq, inverse = np.unique(D, axis=0, return_inverse=True)
    alpha = _softmax(gate.scores(features(c, uniq))[inverse.reshape(-1)])
    ids = tuple(range(len(d_list))) if tool_ids is None else tuple(tool_ids)
    return CompositionWeights(ids, alpha)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class GateSample:
    c: np.ndarray
    docs: np.ndarray  # (K, h)
    tool_ids: tuple[int, ...]
    target: int  # index into tool_ids


def _pack(samples: Sequence[GateSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    K = max(len(s.tool_ids) for s in samples)
    h = samples[0].c.shape[0]
    feats = np.zeros((len(samples), K, 4 * h))
    mask = np.zeros((len(samples), K), dtype=bool)
    for i, s in enumerate(samples):
        k = len(s.tool_ids)
        feats[i, :k] = features(s.c, s.docs)
        mask[i, :k] = True
    return feats, mask, np.array([s.target for s in samples])


def batch_gate_loss(gate: GateNetwork, P: dict, feats, mask, targets, lam: float) -> ad.Tensor:
    """Mean over the batch of CE(alpha, target) - lam * H(alpha)."""
    scores = gate.score_tensor(ad.const(feats), P)
    # masked slots get a huge negative offset: probability underflows to exactly 0
    biased = ad.add(scores, ad.const(np.where(mask, 0.0, -1e4)))
    logp = ad.log_softmax(biased)
    p = ad.softmax(biased, mask=mask)
    B = feats.shape[0]
    ce = ad.cross_entropy(biased, targets)
    neg_h = ad.scale(ad.sum_(ad.mul(p, logp)), 1.0 / B)
    return ad.add(ce, ad.scale(neg_h, lam))


def predict(gate: GateNetwork, samples: Sequence[GateSample]) -> list[CompositionWeights]:
    return [gate_scores(gate, s.c, list(s.docs), s.tool_ids) for s in samples]


def gate_metrics(gate: GateNetwork, samples: Sequence[GateSample]) -> dict:
    if not samples:
        return {"accuracy": float("nan"), "entropy": float("nan"), "loss": float("nan")}
    preds = predict(gate, samples)
    acc = np.mean([w.argmax() == s.tool_ids[s.target] for w, s in zip(preds, samples)])
    ent = np.mean([entropy(w.alpha) for w in preds])
    ce = np.mean([-math.log(max(w.alpha[s.target], 1e-300)) for w, s in zip(preds, samples)])
    return {"accuracy": float(acc), "entropy": float(ent), "ce": float(ce)}


def train_gate(samples: Sequence[GateSample], h: int, cfg: GateConfig, rng: Rng,
               validation: Sequence[GateSample] = (), log=None) -> tuple[GateNetwork, list[dict]]:
    if not samples:
        raise ValueError("no gate training samples")
    for s in samples:
        if not 0 <= s.target < len(s.tool_ids):
            raise ValueError("ground-truth tool outside the candidate set")
    gate = GateNetwork.init(h, cfg, rng)
    params = gate.arrays()
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, clip=None)
    g = rng.generator("gate-batches")
    feats, mask, targets = _pack(samples)
    curve = []
    for epoch in range(cfg.epochs):
        order = g.permutation(len(samples))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            P = {k: ad.param(v) for k, v in params.items()}
            with ad.Tape() as tape:
                loss = batch_gate_loss(gate, P, feats[idx], mask[idx], targets[idx], cfg.lam)
            grads = ad.backward(tape, loss)
            opt.step(params, {k: grads[P[k]] for k in P})
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if validation:
            row.update({f"val_{k}": v for k, v in gate_metrics(gate, validation).items()})
        curve.append(row)
        if log:
            log(row)
    return gate, curve
