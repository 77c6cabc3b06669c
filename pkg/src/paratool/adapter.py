"""Per-tool low-rank FFN deltas and their simplex-weighted composition.

A tool adapter holds, for every layer and FFN site, factors ``A`` (out, r) and
``B`` (in, r) realising the delta ``(s/r) A B^T``.  A :class:`ComposedDelta`
applies ``sum_i alpha_i (s/r) A_i (B_i^T x)`` in factored order and never
forms an (out, in) matrix.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .binfile import read_blocks, read_meta, write_blocks
from .model import FFN_SITES, ModelConfig
from .rng import Rng

MAGIC = b"PTAD"
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 16
    scale: float = 64.0
    sites: tuple[str, ...] = FFN_SITES
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        bad = set(self.sites) - set(FFN_SITES)
        if bad or not self.sites:
            raise ValueError(f"sites must be a nonempty subset of {FFN_SITES}")

    @property
    def factor(self) -> float:
        return self.scale / self.rank


@dataclass
class LowRankAdapter:
    tool_id: int
    cfg: AdapterConfig
    factors: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]]

    def delta(self, layer: int, site: str) -> np.ndarray:
        A, B = self.factors[(layer, site)]
        return self.cfg.factor * (A @ B.T)

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.tool_id, self.cfg,
                              {k: (A.copy(), B.copy()) for k, (A, B) in self.factors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (l, site), (A, B) in sorted(self.factors.items()):
            out[f"l{l}.{site}.A"] = A
            out[f"l{l}.{site}.B"] = B
        return out

    def fingerprint(self) -> bytes:
        return b"".join(a.tobytes() for a in self.arrays().values())


def init_adapter(tool_id: int, model_cfg: ModelConfig, cfg: AdapterConfig, rng: Rng) -> LowRankAdapter:
    """A ~ N(0, init_std^2), B = 0, so the delta starts exactly at zero."""
    g = rng.generator(f"adapter-init/{tool_id}")
    factors = {}
    for l in range(model_cfg.layers):
        for site in cfg.sites:
            out_dim, in_dim = model_cfg.site_shape(site)
            A = g.normal(0.0, cfg.init_std, size=(out_dim, cfg.rank))
            factors[(l, site)] = (A, np.zeros((in_dim, cfg.rank)))
    return LowRankAdapter(tool_id, cfg, factors)


def check_simplex(alpha: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.isfinite(alpha).all():
        raise ValueError("alpha has non-finite entries")
    if (alpha < -tol).any() or (np.abs(alpha.sum(axis=-1) - 1.0) > tol).any():
        raise ValueError("alpha is not on the probability simplex")
    return alpha


class ComposedDelta:
    """Lazy sum ``sum_i alpha_i delta_i`` over candidate adapters.

    ``alpha`` is either (K,) for one composition shared by every row of a batch,
    or (B, K) for one composition per batch row.  With ``trainable=True`` the
    factors become gradient-receiving tensors, see :meth:`factor_tensors`.
    """

    def __init__(self, adapters: Sequence[LowRankAdapter], alpha, trainable: bool = False):
        adapters = list(adapters)
        alpha = check_simplex(alpha)
        if not adapters:
            raise ValueError("no adapters to compose")
        if alpha.shape[-1] != len(adapters):
            raise ValueError(f"{len(adapters)} adapters but alpha has {alpha.shape[-1]} entries")
        cfgs = {a.cfg for a in adapters}
        if len(cfgs) != 1:
            raise ValueError("adapters disagree on rank/scale/sites")
        self.adapters = adapters
        self.alpha = alpha
        self.cfg = adapters[0].cfg
        self.trainable = trainable
        self._tensors: dict[tuple[int, str], tuple[ad.Tensor, ad.Tensor]] = {}
        self._per_adapter: dict[tuple[int, int, str], tuple[ad.Tensor, ad.Tensor]] = {}
        make = ad.param if trainable else ad.const
        for key in adapters[0].factors:
            As, Bs = [], []
            for i, a in enumerate(adapters):
                A, B = make(a.factors[key][0]), make(a.factors[key][1])
                self._per_adapter[(i, *key)] = (A, B)
                As.append(A)
                Bs.append(B)
            self._tensors[key] = (As, Bs)

    def factor_tensors(self) -> dict[tuple[int, int, str], tuple[ad.Tensor, ad.Tensor]]:
        """(adapter index, layer, site) -> (A, B) tensors used in the forward."""
        return self._per_adapter

    def select(self, rows: Sequence[int]) -> "ComposedDelta":
        if self.alpha.ndim == 1:
            return self
        out = ComposedDelta.__new__(ComposedDelta)
        out.__dict__.update(self.__dict__)
        out.alpha = self.alpha[list(rows)]
        return out

    def _weights(self, x: ad.Tensor) -> np.ndarray:
        r = self.cfg.rank
        w = np.repeat(self.alpha, r, axis=-1) * self.cfg.factor
        if self.alpha.ndim == 2:
            if x.ndim != 3 or x.shape[0] != self.alpha.shape[0]:
                raise ad.ShapeError("per-row alpha needs a (B, S, in) input with matching B")
            w = w[:, None, :]
        return w

    def ffn(self, x: ad.Tensor, layer: int, site: str) -> ad.Tensor | None:
        """Delta contribution at one site, in factored order."""
        key = (layer, site)
        if key not in self._tensors:
            return None
        As, Bs = self._tensors[key]
        if x.shape[-1] != Bs[0].shape[0]:
            raise ad.ShapeError(f"input width {x.shape[-1]} != site in-dim {Bs[0].shape[0]}")
        Bcat = Bs[0] if len(Bs) == 1 else ad.concat(Bs, axis=1)
        Acat = As[0] if len(As) == 1 else ad.concat(As, axis=1)
        z = ad.mul(ad.matmul(x if x.ndim >= 2 else ad.reshape(x, (1, -1)), Bcat), ad.const(self._weights(x)))
        out = ad.matmul(z, ad.transpose(Acat, (1, 0)))
        return out if x.ndim >= 2 else ad.reshape(out, (out.shape[-1],))

    def materialize(self, layer: int, site: str, row: int | None = None) -> np.ndarray:
        alpha = self.alpha if self.alpha.ndim == 1 else self.alpha[0 if row is None else row]
        total = None
        for a_i, adp in zip(alpha, self.adapters):
            term = a_i * adp.delta(layer, site)
            total = term if total is None else total + term
        return total


def compose(adapters: Sequence[LowRankAdapter], alpha) -> ComposedDelta:
    return ComposedDelta(adapters, alpha)


def apply(x, W: np.ndarray, delta: ComposedDelta | None, layer: int, site: str) -> np.ndarray:
    """W x plus the composed delta at one site, for x of shape (..., in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise ad.ShapeError(f"input width {x.shape[-1]} != matrix in-dim {W.shape[1]}")
    with ad.no_record():
        base = ad.linear(ad.const(x), ad.const(W)).data
        if delta is None:
            return base
        d = delta.ffn(ad.const(x), layer, site)
    return base if d is None else base + d.data


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------


class AdapterStore:
    def __init__(self, cfg: AdapterConfig, adapters: Iterable[LowRankAdapter] = (), model_cfg: ModelConfig | None = None):
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.adapters: dict[int, LowRankAdapter] = {}
        for a in adapters:
            self.add(a)

    def add(self, adapter: LowRankAdapter) -> None:
        if adapter.cfg != self.cfg:
            raise ValueError("adapter config differs from the store's")
        if adapter.tool_id in self.adapters:
            raise ValueError(f"duplicate tool id {adapter.tool_id}")
        self.adapters[adapter.tool_id] = adapter

    def __getitem__(self, tool_id: int) -> LowRankAdapter:
        return self.adapters[tool_id]

    def __contains__(self, tool_id: int) -> bool:
        return tool_id in self.adapters

    def __len__(self) -> int:
        return len(self.adapters)

    def ids(self) -> list[int]:
        return sorted(self.adapters)

    def copy(self) -> "AdapterStore":
        return AdapterStore(self.cfg, (a.copy() for a in self.adapters.values()), self.model_cfg)

    def compose(self, tool_ids: Sequence[int], alpha, trainable: bool = False) -> ComposedDelta:
        return ComposedDelta([self.adapters[t] for t in tool_ids], alpha, trainable)

    def equal(self, other: "AdapterStore") -> bool:
        if self.cfg != other.cfg or self.ids() != other.ids():
            return False
        return all(self[t].fingerprint() == other[t].fingerprint() for t in self.ids())


def save_store(store: AdapterStore, path: Path) -> None:
    blocks, tools = {}, []
    for tid in store.ids():
        tools.append(tid)
        for name, arr in store[tid].arrays().items():
            blocks[f"t{tid}.{name}"] = arr
    cfg = asdict(store.cfg)
    cfg["sites"] = list(cfg["sites"])
    layers = sorted({l for a in store.adapters.values() for l, _ in a.factors})
    meta = {"adapter": cfg, "tools": tools, "layers": len(layers),
            "model": asdict(store.model_cfg) if store.model_cfg else None}
    write_blocks(path, MAGIC, meta, blocks)


def _meta_cfg(meta: dict) -> tuple[AdapterConfig, ModelConfig | None]:
    c = dict(meta["adapter"])
    c["sites"] = tuple(c["sites"])
    mc = ModelConfig(**meta["model"]) if meta.get("model") else None
    return AdapterConfig(**c), mc


def store_tool_ids(path: Path) -> list[int]:
    return list(read_meta(path, MAGIC)["tools"])


def load_store(path: Path, tool_ids: Sequence[int] | None = None) -> AdapterStore:
    """Load all adapters, or only ``tool_ids`` (other blocks are never read)."""
    meta = read_meta(path, MAGIC)
    cfg, mcfg = _meta_cfg(meta)
    wanted = list(meta["tools"]) if tool_ids is None else list(tool_ids)
    unknown = [t for t in wanted if t not in meta["tools"]]
    if unknown:
        raise KeyError(f"unknown tool ids: {unknown}")
    layers = int(meta["layers"])
    names = []
    for t in wanted:
        names += [f"t{t}.l{l}.{s}.{f}" for l in range(layers) for s in cfg.sites for f in "AB"]
    _, blocks = read_blocks(path, MAGIC, names)
    store = AdapterStore(cfg, model_cfg=mcfg)
    for t in wanted:
        factors = {(l, s): (blocks[f"t{t}.l{l}.{s}.A"], blocks[f"t{t}.l{l}.{s}.B"])
                   for l in range(layers) for s in cfg.sites}
        store.add(LowRankAdapter(t, cfg, factors))
    return store


def describe_store(path: Path) -> str:
    meta = read_meta(path, MAGIC)
    return json.dumps({k: meta[k] for k in ("adapter", "tools")}, sort_keys=True)
