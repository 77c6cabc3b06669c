"""Numerical checks of the gradient-norm robustness analysis for soft composition.

Gradients are taken w.r.t. the continuous input embedding sequence (token
plus position embeddings) of a document-free prompt with its target action.
For a composition alpha over candidate adapters:

* ``G``      max input-gradient norm of any single adapter,
* ``rho``    floored max cosine between two different adapters' gradients,
* ``delta``  max norm of ``g_alpha - sum_i alpha_i g_i``,
* ``beta``   directional second-order estimate of local smoothness,

and the composed gradient norm is bounded by
``G * sqrt(rho + (1 - rho) * |alpha|^2) + delta``.  A loss-increase budget
``eps`` then certifies a radius ``(sqrt(g^2 + 2 beta eps) - g) / beta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapter import AdapterStore, ComposedDelta
from .gating import CompositionWeights, GateNetwork, gate_scores
from .model import TransformerModel
from .rng import Rng
from .synth import DOC_FREE, Corpus, TraceInstance, format_instance
from .vocab import TokenSequence

log = logging.getLogger(__name__)
ROUNDING = 1e-12


class UnboundedRadius(ValueError):
    """Zero gradient and zero curvature: no finite radius follows."""


@dataclass
class TheoryConfig:
    n_inputs: int = 10
    n_alpha: int = 50
    held_out_alpha: int = 100
    beta_probes: int = 64
    probe_norm_min: float = 1e-3
    probe_norm_max: float = 1e-1
    eps_fraction: float = 0.1
    radius_probes: int = 100
    candidates: int = 4


# ---------------------------------------------------------------------------
# closed-form pieces
# ---------------------------------------------------------------------------


def grad_norm_bound(G: float, rho: float, alpha, delta: float) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    if G < 0 or delta < 0 or rho < 0 or rho > 1:
        raise ValueError("need G, delta >= 0 and rho in [0, 1]")
    if (alpha < -1e-9).any() or abs(alpha.sum() - 1.0) > 1e-9:
        raise ValueError("alpha is not on the probability simplex")
    sq = float(alpha @ alpha)
    return G * math.sqrt(rho + (1.0 - rho) * sq) + delta


def radius_lower_bound(gnorm: float, beta: float, eps: float) -> float:
    if gnorm < 0 or beta < 0 or eps <= 0:
        raise ValueError("need gnorm >= 0, beta >= 0, eps > 0")
    if beta == 0:
        if gnorm == 0:
            raise UnboundedRadius("beta = 0 and zero gradient: radius unbounded")
        return eps / gnorm
    return (math.sqrt(gnorm * gnorm + 2.0 * beta * eps) - gnorm) / beta


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def estimate_rho(grads: Sequence[Sequence[np.ndarray]]) -> float:
    """Floored max cosine between gradients of different tools on the same input.

    ``grads[t][x]`` is tool t's gradient on input x.  Zero gradients are skipped.
    """
    if len(grads) < 2:
        raise ValueError("need at least two tools")
    n_inputs = min(len(g) for g in grads)
    if n_inputs < 1:
        raise ValueError("need at least one input per tool")
    best, skipped = 0.0, 0
    for x in range(n_inputs):
        for i in range(len(grads)):
            for j in range(i + 1, len(grads)):
                gi, gj = grads[i][x], grads[j][x]
                if not np.linalg.norm(gi) or not np.linalg.norm(gj):
                    skipped += 1
                    continue
                best = max(best, cosine(gi, gj))
    if skipped:
        log.warning("excluded %d pairs with a zero-norm gradient", skipped)
    return min(best, 1.0)


def estimate_G_delta(tool_grads: Sequence[np.ndarray], composed: Sequence[tuple[np.ndarray, np.ndarray, Sequence[np.ndarray]]]) -> tuple[float, float]:
    """G over single-tool gradients; delta over (alpha, g_alpha, [g_i]) samples."""
    G = max((float(np.linalg.norm(g)) for g in tool_grads), default=0.0)
    d = 0.0
    for alpha, g_alpha, g_list in composed:
        mix = sum(a * g for a, g in zip(alpha, g_list))
        d = max(d, float(np.linalg.norm(g_alpha - mix)))
    return G, d


def estimate_beta(J: Callable[[np.ndarray], np.ndarray], x: np.ndarray, g: np.ndarray, probes: int,
                  rng: np.random.Generator, norm_range=(1e-3, 1e-1)) -> float:
    """max over random directions of 2 (J(x+d) - J(x) - <g, d>) / |d|^2, floored at 0.

    ``J`` maps a stack of points (P, *x.shape) to P losses.  The result is a
    lower estimate of the local smoothness constant.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    lo, hi = norm_range
    dirs = rng.normal(size=(probes, x.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    norms = np.exp(rng.uniform(np.log(lo), np.log(hi), size=probes))
    deltas = dirs * norms[:, None]
    pts = x.reshape(1, -1) + deltas
    Jx = float(np.asarray(J(x.reshape(1, *x.shape)))[0])
    Jp = np.asarray(J(pts.reshape(probes, *x.shape)), dtype=np.float64)
    if not np.isfinite(Jp).all():
        raise ad.NonFiniteError("non-finite loss at a probe")
    curv = 2.0 * (Jp - Jx - deltas @ g.reshape(-1)) / (norms**2)
    return max(0.0, float(curv.max()))


# ---------------------------------------------------------------------------
# model-backed losses and gradients
# ---------------------------------------------------------------------------


def _span(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids = np.asarray(seq.ids)
    S = len(ids)
    targets = np.zeros(S, dtype=np.int64)
    targets[:-1] = ids[1:]
    w = np.zeros(S)
    n = S - seq.action_start
    w[seq.action_start - 1 : S - 1] = 1.0 / n
    return ids, targets, w


def input_embeddings(model: TransformerModel, seq: TokenSequence) -> np.ndarray:
    with ad.no_record():
        return model.embed(np.asarray(seq.ids)[None, :]).data[0]


def losses_at(model: TransformerModel, seq: TokenSequence, X: np.ndarray, delta=None) -> np.ndarray:
    """Per-row action NLL for embedding stacks X of shape (P, S, h)."""
    _, targets, w = _span(seq)
    with ad.no_record():
        logits = model.logits_from_embeddings(ad.const(X), delta).data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, np.broadcast_to(targets, X.shape[:2])[..., None], axis=-1)[..., 0]
    return ((lse - picked) * w).sum(axis=-1)


def gradients_at(model: TransformerModel, seq: TokenSequence, X: np.ndarray, delta=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (losses, flattened input gradients) for X of shape (P, S, h).

    Rows do not interact, so summing the row losses gives each row its own
    gradient.
    """
    _, targets, w = _span(seq)
    P = X.shape[0]
    xt = ad.param(X)
    with ad.Tape() as tape:
        logits = model.logits_from_embeddings(xt, delta)
        loss = ad.cross_entropy(logits, np.broadcast_to(targets, (P, len(targets))), np.broadcast_to(w, (P, len(w))))
    grads = ad.backward(tape, loss)[xt]
    return losses_at(model, seq, X, delta), grads.reshape(P, -1)


def input_gradient(model: TransformerModel, delta, seq: TokenSequence) -> np.ndarray:
    x = input_embeddings(model, seq)
    return gradients_at(model, seq, x[None], delta)[1][0]


# ---------------------------------------------------------------------------
# estimation over a manifest
# ---------------------------------------------------------------------------


@dataclass
class TheoryEstimates:
    G: float
    rho: float
    delta: float
    beta: float
    eps: float
    manifest: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InputSweep:
    """Everything measured on one input: per-tool and composed gradients."""

    index: int
    seq: TokenSequence
    tools: tuple[int, ...]
    loss: float
    tool_grads: list[np.ndarray]
    alphas: np.ndarray
    alpha_grads: np.ndarray
    held_alphas: np.ndarray
    held_grads: np.ndarray


def _rows_delta(store: AdapterStore, tools: Sequence[int], alphas: np.ndarray) -> ComposedDelta:
    return store.compose(list(tools), alphas)


def _alpha_grads(model, store, seq, x, tools, alphas, batch=64):
    out = []
    for i in range(0, len(alphas), batch):
        A = alphas[i : i + batch]
        X = np.broadcast_to(x, (len(A), *x.shape)).copy()
        out.append(gradients_at(model, seq, X, _rows_delta(store, tools, A))[1])
    return np.concatenate(out, axis=0) if out else np.zeros((0, x.size))


def sample_alphas(k: int, n: int, g: np.random.Generator) -> np.ndarray:
    """n simplex points over k tools: every vertex, the centre, then Dirichlet(1) draws."""
    fixed = [np.eye(k)[i] for i in range(k)] + [np.full(k, 1.0 / k)]
    draws = list(g.dirichlet(np.ones(k), size=max(0, n - len(fixed))))
    return np.array((fixed + draws)[:n]) if n >= len(fixed) else np.array(fixed[:n])


def pick_inputs(corpus: Corpus, split: Sequence[TraceInstance], n: int, k: int, g: np.random.Generator) -> list[TraceInstance]:
    pool = [i for i in split if len(i.candidates) == k] or list(split)
    idx = g.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in sorted(idx)]


def sweep_inputs(model: TransformerModel, store: AdapterStore, corpus: Corpus, insts: Sequence[TraceInstance],
                 cfg: TheoryConfig, rng: Rng) -> list[InputSweep]:
    by_id = corpus.tools_by_id
    out = []
    for n, inst in enumerate(insts):
        g = rng.generator(f"alpha/{n}")
        seq = format_instance(inst, by_id, DOC_FREE, with_target=True, max_len=model.cfg.max_len)
        x = input_embeddings(model, seq)
        tools = tuple(sorted(inst.candidates))
        k = len(tools)
        tool_grads = list(_alpha_grads(model, store, seq, x, tools, np.eye(k)))
        alphas = sample_alphas(k, cfg.n_alpha, g)
        held = g.dirichlet(np.ones(k), size=cfg.held_out_alpha)
        loss = float(losses_at(model, seq, x[None], _rows_delta(store, tools, np.eye(k)[:1]))[0])
        out.append(InputSweep(n, seq, tools, loss, tool_grads, alphas,
                              _alpha_grads(model, store, seq, x, tools, alphas),
                              held, _alpha_grads(model, store, seq, x, tools, held)))
    return out


def estimates_from_sweeps(sweeps: Sequence[InputSweep]) -> tuple[float, float, float]:
    """(G, rho, delta) as suprema over the manifest."""
    G = max(float(np.linalg.norm(g)) for s in sweeps for g in s.tool_grads)
    rho, skipped = 0.0, 0
    for s in sweeps:
        for i in range(len(s.tools)):
            for j in range(i + 1, len(s.tools)):
                gi, gj = s.tool_grads[i], s.tool_grads[j]
                if not np.linalg.norm(gi) or not np.linalg.norm(gj):
                    skipped += 1
                    continue
                rho = max(rho, cosine(gi, gj))
    if skipped:
        log.warning("excluded %d pairs with a zero-norm gradient", skipped)
    rho = min(rho, 1.0)
    delta = 0.0
    for s in sweeps:
        T = np.stack(s.tool_grads)
        resid = s.alpha_grads - s.alphas @ T
        delta = max(delta, float(np.linalg.norm(resid, axis=1).max()))
    return G, rho, delta


def bound_check(sweeps: Sequence[InputSweep], G: float, rho: float, delta: float) -> dict:
    """Count bound violations inside the manifest and on held-out alphas."""
    inside, held, held_excess = 0, 0, []
    n_in = n_held = 0
    for s in sweeps:
        for a, ga in zip(s.alphas, s.alpha_grads):
            n_in += 1
            b = grad_norm_bound(G, rho, a, delta)
            inside += float(np.linalg.norm(ga)) > b * (1 + ROUNDING) + ROUNDING
        for a, ga in zip(s.held_alphas, s.held_grads):
            n_held += 1
            b = grad_norm_bound(G, rho, a, delta)
            norm = float(np.linalg.norm(ga))
            if norm > b * (1 + ROUNDING) + ROUNDING:
                held += 1
                held_excess.append(norm - b)
    return {
        "manifest_samples": n_in, "manifest_violations": inside,
        "held_out_samples": n_held, "held_out_violations": held,
        "held_out_violation_rate": held / max(n_held, 1),
        "held_out_max_excess": max(held_excess, default=0.0),
    }


# ---------------------------------------------------------------------------
# soft vs hard
# ---------------------------------------------------------------------------


def radius_probe(model: TransformerModel, seq: TokenSequence, x: np.ndarray, delta, radius: float, eps: float,
                 n: int, g: np.random.Generator) -> float:
    """Fraction of random perturbations of norm ``radius`` raising the loss by at most eps."""
    dirs = g.normal(size=(n, x.size))
    dirs *= radius / np.linalg.norm(dirs, axis=1, keepdims=True)
    J0 = float(losses_at(model, seq, x[None], delta)[0])
    Jp = losses_at(model, seq, x[None] + dirs.reshape(n, *x.shape), delta)
    return float(np.mean(Jp - J0 <= eps))


def soft_vs_hard_report(model: TransformerModel, store: AdapterStore, gate: GateNetwork | None, corpus: Corpus,
                        docs: dict[int, np.ndarray] | None, cfg: TheoryConfig, seed: int,
                        insts: Sequence[TraceInstance] | None = None) -> dict:
    """Estimates, bound checks and per-(input, regime) radius records."""
    from .pipeline import gate_samples

    rng = Rng(seed).child("theory")
    insts = list(insts) if insts is not None else pick_inputs(
        corpus, corpus.test, cfg.n_inputs, cfg.candidates, rng.generator("inputs"))
    sweeps = sweep_inputs(model, store, corpus, insts, cfg, rng)
    G, rho, delta = estimates_from_sweeps(sweeps)
    checks = bound_check(sweeps, G, rho, delta)
    gate_ws = None
    if gate is not None and docs is not None:
        gate_ws = [gate_scores(gate, s.c, list(s.docs), s.tool_ids) for s in gate_samples(model, insts, corpus, docs)]

    records, betas = [], []
    for n, (inst, s) in enumerate(zip(insts, sweeps)):
        g = rng.generator(f"probes/{n}")
        x = input_embeddings(model, s.seq)
        k = len(s.tools)
        target = corpus.tool_id(inst.target.tool)
        regimes = {"hard": np.array([1.0 if t == target else 0.0 for t in s.tools]),
                   "uniform": np.full(k, 1.0 / k)}
        if gate_ws is not None:
            regimes["soft"] = gate_ws[n].dense(list(s.tools))
        for name, alpha in regimes.items():
            delta_obj = _rows_delta(store, s.tools, alpha[None])
            J, gflat = gradients_at(model, s.seq, x[None], delta_obj)
            J, gflat = float(J[0]), gflat[0]
            eps = cfg.eps_fraction * J
            shared = _rows_delta(store, s.tools, alpha)  # one alpha for any batch size
            Jfn = lambda X, d=shared: losses_at(model, s.seq, X, d)
            beta = estimate_beta(Jfn, x, gflat, cfg.beta_probes, g, (cfg.probe_norm_min, cfg.probe_norm_max))
            betas.append(beta)
            gnorm = float(np.linalg.norm(gflat))
            bound = grad_norm_bound(G, rho, alpha, delta)
            rec = {"input": n, "regime": name, "alpha": [float(a) for a in alpha],
                   "alpha_sq": float(alpha @ alpha), "loss": J, "eps": eps, "beta": beta,
                   "grad_norm": gnorm, "bound": bound}
            if eps > 0:
                r = radius_lower_bound(gnorm, beta, eps)
                rec["radius"] = r
                rec["radius_from_bound"] = radius_lower_bound(bound, beta, eps)
                rec["probe_pass_rate"] = radius_probe(model, s.seq, x, shared, r, eps, cfg.radius_probes, g)
            records.append(rec)
    manifest = {"seed": seed, "inputs": [i.to_dict() for i in insts], "n_alpha": cfg.n_alpha,
                "held_out_alpha": cfg.held_out_alpha, "config": asdict(cfg)}
    est = TheoryEstimates(G, rho, delta, max(betas, default=0.0), cfg.eps_fraction, manifest)
    return {"estimates": est, "checks": checks, "records": records, "sweeps": sweeps}


def regime_summary(records: Sequence[dict]) -> list[dict]:
    out = []
    for regime in sorted({r["regime"] for r in records}):
        rs = [r for r in records if r["regime"] == regime]
        norms = np.array([r["grad_norm"] for r in rs])
        row = {"regime": regime, "n": len(rs),
               "grad_norm_mean": float(norms.mean()), "grad_norm_std": float(norms.std()),
               "grad_norm_max": float(norms.max()),
               "bound_mean": float(np.mean([r["bound"] for r in rs]))}
        radii = [r["radius"] for r in rs if "radius" in r]
        if radii:
            row["radius_mean"] = float(np.mean(radii))
            row["probe_pass_min"] = float(min(r["probe_pass_rate"] for r in rs if "radius" in r))
            row["probe_pass_mean"] = float(np.mean([r["probe_pass_rate"] for r in rs if "radius" in r]))
        out.append(row)
    return out
