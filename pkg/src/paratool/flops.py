"""Analytic inference FLOPs for context-based vs parameter-based tool use.

FLOPs are counted as 2 per multiply-accumulate of a matrix product.
Softmax, normalisation and activations are left out of the totals and
reported separately as a scalar-op diagnostic.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Dims:
    hidden: int = 64
    layers: int = 2
    heads: int = 2
    d_ff: int = 128
    vocab: int = 128

    @classmethod
    def llama8b(cls) -> "Dims":
        return cls(hidden=4096, layers=32, heads=32, d_ff=14336, vocab=128256)


def flops_transformer(S: int, dims: Dims) -> tuple[int, int]:
    """(linear, attention) FLOPs of one forward over S tokens."""
    if S < 1:
        raise ValueError("S must be >= 1")
    h, L = dims.hidden, dims.layers
    linear = 2 * S * L * (4 * h * h + 2 * h * dims.d_ff) + 2 * S * h * dims.vocab
    attention = 4 * L * S * S * h
    return linear, attention


def scalar_ops(S: int, dims: Dims) -> int:
    """Rough count of the non-matmul work (softmax, norms, ReLU, residuals)."""
    h, L = dims.hidden, dims.layers
    per_layer = 5 * dims.heads * S * S + 2 * 8 * S * h + S * dims.d_ff + 2 * S * h
    return L * per_layer + 8 * S * h + 5 * S * dims.vocab


# ---------------------------------------------------------------------------
# scalar reference forward used as a counting oracle
# ---------------------------------------------------------------------------


def reference_forward_macs(S: int, dims: Dims, seed: int = 0) -> tuple[int, list[list[float]]]:
    """Run a plain-Python forward pass, counting every scalar multiply-add.

    The attention score matrix is computed in full and masked afterwards, as
    a dense kernel would.  Returns (MAC count, logits).
    """
    rng = np.random.default_rng(seed)
    h, L, H, F, V = dims.hidden, dims.layers, dims.heads, dims.d_ff, dims.vocab
    dh = h // H
    macs = 0

    def mat(o, i):
        return rng.normal(0, 0.5, size=(o, i)).tolist()

    def mv(W, x):
        nonlocal macs
        out = []
        for row in W:
            acc = 0.0
            for w, xi in zip(row, x):
                acc += w * xi
                macs += 1
            out.append(acc)
        return out

    def norm(x):
        mu = sum(x) / len(x)
        var = sum((v - mu) ** 2 for v in x) / len(x)
        return [(v - mu) / math.sqrt(var + 1e-5) for v in x]

    xs = [rng.normal(size=h).tolist() for _ in range(S)]
    for _ in range(L):
        Wq, Wk, Wv, Wo, Wu, Wd = mat(h, h), mat(h, h), mat(h, h), mat(h, h), mat(F, h), mat(h, F)
        a = [norm(x) for x in xs]
        q = [mv(Wq, x) for x in a]
        k = [mv(Wk, x) for x in a]
        v = [mv(Wv, x) for x in a]
        att = [[0.0] * h for _ in range(S)]
        for hd in range(H):
            sl = slice(hd * dh, (hd + 1) * dh)
            for i in range(S):
                scores = []
                for j in range(S):
                    acc = 0.0
                    for qa, kb in zip(q[i][sl], k[j][sl]):
                        acc += qa * kb
                        macs += 1
                    scores.append(acc / math.sqrt(dh) if j <= i else -math.inf)
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                p = [x / z for x in e]
                for c in range(dh):
                    acc = 0.0
                    for j in range(S):
                        acc += p[j] * v[j][hd * dh + c]
                        macs += 1
                    att[i][hd * dh + c] = acc
        xs = [[xi + oi for xi, oi in zip(x, mv(Wo, o))] for x, o in zip(xs, att)]
        m_ = [norm(x) for x in xs]
        xs = [[xi + di for xi, di in zip(x, mv(Wd, [max(0.0, u) for u in mv(Wu, y)]))] for x, y in zip(xs, m_)]
    head = mat(V, h)
    logits = [mv(head, norm(x)) for x in xs]
    return macs, logits


# ---------------------------------------------------------------------------
# workloads
# ---------------------------------------------------------------------------


@dataclass
class WorkloadProfile:
    name: str
    query_tokens: int
    history_tokens: int
    doc_tokens: list[int] = field(default_factory=list)
    example_tokens: list[int] = field(default_factory=list)
    dims: Dims = field(default_factory=Dims)
    n_adapters: int = 0
    rank: int = 16
    sites_per_layer: int = 2
    n_candidates: int | None = None  # gate MLP evaluations; defaults to n_adapters
    gate_hidden: int = 128
    gate_depth: int = 3
    encoder: str | int = "backbone"  # "backbone", "none" or a fixed FLOP count

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = Dims(**self.dims)
        counts = [self.query_tokens, self.history_tokens, self.n_adapters, *self.doc_tokens, *self.example_tokens]
        if any(c < 0 for c in counts):
            raise ValueError("token and adapter counts must be nonnegative")

    @property
    def s_par(self) -> int:
        return self.query_tokens + self.history_tokens

    @property
    def s_ctx(self) -> int:
        return self.s_par + sum(self.doc_tokens) + sum(self.example_tokens)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadProfile":
        return cls(**d)


def _site_dims(dims: Dims, sites: int) -> list[tuple[int, int]]:
    both = [(dims.hidden, dims.d_ff), (dims.d_ff, dims.hidden)]
    return both[:sites]


def adapter_flops(S: int, p: WorkloadProfile) -> int:
    """Factored-order low-rank branches: 2*S*N*L*sum_sites r*(in + out)."""
    per = sum(p.rank * (i + o) for i, o in _site_dims(p.dims, p.sites_per_layer))
    return 2 * S * p.n_adapters * p.dims.layers * per


def gate_flops(p: WorkloadProfile) -> int:
    h = p.dims.hidden
    k = p.n_adapters if p.n_candidates is None else p.n_candidates
    widths = [4 * h] + [p.gate_hidden] * (p.gate_depth - 1) + [1]
    per = sum(a * b for a, b in zip(widths[:-1], widths[1:]))
    return 2 * k * per


def encoder_flops(p: WorkloadProfile) -> int:
    if p.encoder == "none" or p.n_adapters == 0:
        return 0
    if p.encoder == "backbone":
        return sum(flops_transformer(p.s_par, p.dims))
    return int(p.encoder)


@dataclass
class FlopsRow:
    name: str
    regime: str
    S: int
    linear: int
    attention: int
    adapter: int
    gate: int
    encoder: int
    scalar_ops: int

    @property
    def overhead(self) -> int:
        return self.adapter + self.gate + self.encoder

    @property
    def total(self) -> int:
        return self.linear + self.attention + self.overhead

    @property
    def overhead_fraction(self) -> float:
        return self.overhead / self.total

    @property
    def adapter_gate_fraction(self) -> float:
        return (self.adapter + self.gate) / self.total

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(overhead=self.overhead, total=self.total, overhead_fraction=self.overhead_fraction,
                 adapter_gate_fraction=self.adapter_gate_fraction)
        return d


def flops_context(p: WorkloadProfile) -> FlopsRow:
    lin, att = flops_transformer(p.s_ctx, p.dims)
    return FlopsRow(p.name, "context", p.s_ctx, lin, att, 0, 0, 0, scalar_ops(p.s_ctx, p.dims))


def flops_parameter(p: WorkloadProfile) -> FlopsRow:
    lin, att = flops_transformer(p.s_par, p.dims)
    gate = gate_flops(p) if p.n_adapters else 0
    return FlopsRow(p.name, "parameter", p.s_par, lin, att, adapter_flops(p.s_par, p), gate,
                    encoder_flops(p), scalar_ops(p.s_par, p.dims))


@dataclass
class FlopsReport:
    rows: list[dict]

    def table(self) -> str:
        cols = ["profile", "S_ctx", "S_par", "ctx_TFLOPs", "par_TFLOPs", "adapter+gate", "encoder",
                "ratio", "base_ratio", "overhead_frac", "adapter_gate_frac"]
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join([
                r["profile"], str(r["S_ctx"]), str(r["S_par"]),
                f"{r['context']['total'] / 1e12:.6g}", f"{r['parameter']['total'] / 1e12:.6g}",
                f"{(r['parameter']['adapter'] + r['parameter']['gate']) / 1e12:.6g}",
                f"{r['parameter']['encoder'] / 1e12:.6g}",
                f"{r['ratio']:.4f}", f"{r['base_ratio']:.4f}",
                f"{r['overhead_fraction']:.4f}", f"{r['adapter_gate_fraction']:.4f}",
            ]))
        return "\n".join(lines) + "\n"

    def records(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)


def flops_table(profiles: Sequence[WorkloadProfile]) -> FlopsReport:
    if not profiles:
        raise ValueError("need at least one profile")
    rows = []
    for p in sorted(profiles, key=lambda p: p.name):
        ctx, par = flops_context(p), flops_parameter(p)
        rows.append({
            "profile": p.name, "S_ctx": p.s_ctx, "S_par": p.s_par,
            "context": ctx.to_dict(), "parameter": par.to_dict(),
            "ratio": ctx.total / par.total,
            # headline comparison: context cost against the bare parameter-regime forward
            "base_ratio": ctx.total / (par.linear + par.attention),
            "overhead_fraction": par.overhead_fraction,
            "adapter_gate_fraction": par.adapter_gate_fraction,
        })
    return FlopsReport(rows)


def load_profiles(path: Path) -> list[WorkloadProfile]:
    text = Path(path).read_text()
    if text.lstrip().startswith("["):
        data = json.loads(text)
    else:
        data = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [WorkloadProfile.from_dict(d) for d in data]


def profiles_from_counts(name: str, counts: Iterable[dict], dims: Dims, n_adapters: int, rank: int,
                         gate_hidden: int = 128, gate_depth: int = 3) -> WorkloadProfile:
    """Average per-instance token counts (as logged by the formatter) into one profile."""
    counts = list(counts)
    if not counts:
        raise ValueError("no token counts")
    mean = lambda k: int(round(np.mean([c[k] for c in counts])))
    return WorkloadProfile(
        name, mean("query"), mean("history"), [mean("docs")], [mean("examples")] if "examples" in counts[0] else [],
        dims, n_adapters, rank, gate_hidden=gate_hidden, gate_depth=gate_depth,
    )
