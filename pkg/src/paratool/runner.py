"""Artifact-level workflow: every step reads and writes under ``<root>/<name>/``.

Layout::

    config.json                     resolved config, archived verbatim
    model/backbone.ptlm             frozen base model (shared by all seeds)
    dataset/seed<k>/                toolset manifest + split files
    adapters/seed<k>/               stage1.ptad, stage3.ptad
    gate/seed<k>/                   gate.ptgt, embeddings.ptec
    reports/                        structured records and flat tables
    logs/                           curves and timings (never compared)
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import report as rp
from .adapter import AdapterStore, load_store, save_store
from .config import RunConfig
from .flops import Dims, WorkloadProfile, flops_table, load_profiles
from .gating import EmbeddingCache, GateNetwork
from .model import TransformerModel
from .pipeline import (
    STRATEGIES, doc_embeddings, evaluate, finetune_joint, pretrain_all, token_counts, train_backbone,
    train_gate_stage,
)
from .rng import Rng
from .synth import build_corpus, load_corpus, save_corpus
from .theory import regime_summary, soft_vs_hard_report

log = logging.getLogger(__name__)
ROOT_ENV = "PARATOOL_RUNS"


class DependencyError(RuntimeError):
    def __init__(self, artifact: str, verb: str):
        super().__init__(f"missing {artifact}; run `paratool {verb}` first")
        self.verb = verb


class Run:
    def __init__(self, cfg: RunConfig, root: str | Path | None = None):
        self.cfg = cfg
        self.root = Path(root or os.environ.get(ROOT_ENV, "runs"))
        self.dir = self.root / cfg.name

    # -- paths ---------------------------------------------------------------

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*map(str, parts))

    def dataset_dir(self, seed):
        return self.path("dataset", f"seed{seed}")

    def backbone_path(self):
        return self.path("model", "backbone.ptlm")

    def stage1_path(self, seed):
        return self.path("adapters", f"seed{seed}", "stage1.ptad")

    def stage3_path(self, seed):
        return self.path("adapters", f"seed{seed}", "stage3.ptad")

    def gate_path(self, seed):
        return self.path("gate", f"seed{seed}", "gate.ptgt")

    def cache_path(self, seed):
        return self.path("gate", f"seed{seed}", "embeddings.ptec")

    def report_dir(self, seed=None):
        return self.path("reports") if seed is None else self.path("reports", f"seed{seed}")

    def log_path(self, name):
        return self.path("logs", name)

    def archive_config(self) -> None:
        p = self.path("config.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.cfg.to_json())

    def _timed(self, step: str, seed, fn):
        t0 = time.perf_counter()
        out = fn()
        rp.append_record(self.log_path("timings.jsonl"),
                         {"step": step, "seed": seed, "seconds": round(time.perf_counter() - t0, 3)})
        return out

    def _logger(self, name):
        path = self.log_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")
        return lambda row: rp.append_record(path, row)

    # -- loaders that name the missing step ------------------------------------

    def corpus(self, seed):
        d = self.dataset_dir(seed)
        if not (d / "toolset.json").exists():
            raise DependencyError(f"dataset for seed {seed}", "synth")
        return load_corpus(d)

    def model(self) -> TransformerModel:
        if not self.backbone_path().exists():
            raise DependencyError("backbone model", "pretrain")
        return TransformerModel.load(self.backbone_path())

    def store(self, seed, stage: int) -> AdapterStore:
        p = self.stage1_path(seed) if stage == 1 else self.stage3_path(seed)
        if not p.exists():
            raise DependencyError(f"stage-{stage} adapters for seed {seed}", "pretrain" if stage == 1 else "finetune")
        return load_store(p)

    def gate(self, seed) -> GateNetwork:
        if not self.gate_path(seed).exists():
            raise DependencyError(f"trained gate for seed {seed}", "train-gate")
        return GateNetwork.load(self.gate_path(seed))

    def docs(self, seed, model, corpus):
        p = self.cache_path(seed)
        cache = EmbeddingCache.load(p) if p.exists() else EmbeddingCache(model.fingerprint())
        if cache.model_fingerprint != model.fingerprint():
            cache = EmbeddingCache(model.fingerprint())
        docs = doc_embeddings(model, corpus, cache)
        cache.save(p)
        return docs

    # -- steps -------------------------------------------------------------------

    def synth(self, seed):
        corpus = build_corpus(seed, self.cfg.synth)
        save_corpus(corpus, self.dataset_dir(seed))
        rp.write_records(self.report_dir(seed) / "token_counts.jsonl", token_counts(corpus.test, corpus))
        return corpus

    def ensure_backbone(self) -> TransformerModel:
        target = self.backbone_path()
        if target.exists():
            return TransformerModel.load(target)
        if self.cfg.backbone_path:
            src = Path(self.cfg.backbone_path)
            if not src.exists():
                raise DependencyError(f"backbone file {src}", "pretrain")
            model = TransformerModel.load(src)
            if asdict(model.cfg) != asdict(self.cfg.model):
                raise ValueError("backbone file was trained with a different model config")
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, target)
            return model
        model, curve = self._timed("backbone", None,
                                   lambda: train_backbone(self.cfg.model, self.cfg.stages.backbone, self._logger("backbone.jsonl")))
        model.save(target)
        return model

    def pretrain(self, seed):
        corpus = self.corpus(seed)
        model = self.ensure_backbone()
        rng = Rng(seed).child("run")
        store, curves = self._timed("stage1", seed, lambda: pretrain_all(
            model, corpus, self.cfg.adapter, self.cfg.stages.stage1, rng, self._logger(f"stage1_seed{seed}.jsonl")))
        save_store(store, self.stage1_path(seed))
        rows = []
        for tid, curve in sorted(curves.items()):
            first, last = curve[0], curve[-1]
            rows.append({"tool_id": tid, "tool": corpus.tools_by_id[tid].name,
                         "val_nll_initial": first.get("val_nll"), "val_nll_final": last.get("val_nll")})
        rp.write_records(self.report_dir(seed) / "stage1_curves.jsonl", rows)
        single = [i for i in corpus.test if i.kind == "single"]
        rep = evaluate(model, store, None, single, "oracle", corpus)
        rp.write_records(self.report_dir(seed) / "stage1_single.jsonl", [rep.summary()])
        return store

    def train_gate(self, seed):
        corpus = self.corpus(seed)
        model = self.model()
        docs = self.docs(seed, model, corpus)
        gate, curve = self._timed("gate", seed, lambda: train_gate_stage(
            model, corpus, self.cfg.stages.gate, Rng(seed).child("run"), docs, self._logger(f"gate_seed{seed}.jsonl")))
        gate.save(self.gate_path(seed))
        rp.write_records(self.report_dir(seed) / "gate_curve.jsonl", curve)
        return gate

    def finetune(self, seed):
        corpus = self.corpus(seed)
        model = self.model()
        gate = self.gate(seed)
        store1 = self.store(seed, 1)
        docs = self.docs(seed, model, corpus)
        store3, curve = self._timed("stage3", seed, lambda: finetune_joint(
            model, store1, gate, corpus, docs, self.cfg.stages.stage3, Rng(seed).child("run"),
            self._logger(f"stage3_seed{seed}.jsonl")))
        save_store(store3, self.stage3_path(seed))
        cap = self.cfg.stages.stage3.top_n
        before = evaluate(model, store1, gate, corpus.validation, "paratool", corpus, docs, cap)
        after = evaluate(model, store3, gate, corpus.validation, "paratool", corpus, docs, cap)
        rp.write_records(self.report_dir(seed) / "stage3.jsonl", [
            {"split": "validation", "when": "before", **before.summary()},
            {"split": "validation", "when": "after", **after.summary()},
        ] + curve)
        return store3

    def eval(self, seed, strategy):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        corpus = self.corpus(seed)
        # the gate is the most specific missing piece, so it is checked first
        gate = self.gate(seed) if strategy in ("paratool", "top1", "no_finetune") else None
        store = self.store(seed, 1 if strategy == "no_finetune" else 3)
        model = self.model()
        docs = self.docs(seed, model, corpus) if gate is not None else None
        rep = self._timed(f"eval/{strategy}", seed, lambda: evaluate(
            model, store, gate, corpus.test, strategy, corpus, docs, self.cfg.stages.stage3.top_n))
        out = self.report_dir(seed)
        rp.write_records(out / f"eval_{strategy}.jsonl", rep.records)
        row = rp.summary_row(seed, rep.summary(), rep.by_kind)
        rp.write_records(out / f"summary_{strategy}.jsonl", [row])
        return rep

    def ablate(self, seed):
        rows = []
        for s in STRATEGIES:
            rep = self.eval(seed, s)
            rows.append(rp.summary_row(seed, rep.summary(), rep.by_kind))
        (self.report_dir(seed) / "ablation.tsv").write_text(rp.table(rows, rp.SUMMARY_COLUMNS))
        return rows

    def theory(self, seed):
        corpus = self.corpus(seed)
        model = self.model()
        gate = self.gate(seed)
        store = self.store(seed, 3)
        docs = self.docs(seed, model, corpus)
        res = self._timed("theory", seed, lambda: soft_vs_hard_report(
            model, store, gate, corpus, docs, self.cfg.theory, seed))
        out = self.report_dir(seed)
        est = res["estimates"].to_dict()
        rp.write_records(out / "theory_estimates.jsonl", [{k: v for k, v in est.items() if k != "manifest"} | res["checks"]])
        rp.write_records(out / "theory_manifest.jsonl", [est["manifest"]])
        rp.write_records(out / "theory_records.jsonl", res["records"])
        summary = regime_summary(res["records"])
        cols = ["regime", "n", "grad_norm_mean", "grad_norm_std", "grad_norm_max", "bound_mean",
                "radius_mean", "probe_pass_min", "probe_pass_mean"]
        (out / "theory.tsv").write_text(rp.table(summary, cols))
        return res

    def flops_profiles(self) -> list[WorkloadProfile]:
        m = self.cfg.model
        dims = Dims(m.hidden, m.layers, m.heads, m.d_ff, m.vocab_size)
        r = self.cfg.adapter.rank
        gh, gd = self.cfg.stages.gate.hidden, self.cfg.stages.gate.depth
        profiles = []
        for seed in self.cfg.seeds:
            p = self.report_dir(seed) / "token_counts.jsonl"
            if not p.exists():
                continue
            counts = rp.read_records(p)
            q = int(round(np.mean([c["query"] for c in counts])))
            hist = int(round(np.mean([c["history"] for c in counts])))
            docs = int(round(np.mean([c["docs"] for c in counts])))
            n = int(round(np.mean([c["candidates"] for c in counts])))
            profiles.append(WorkloadProfile(f"corpus-seed{seed}", q, hist, [docs], [], dims, n, r,
                                            gate_hidden=gh, gate_depth=gd))
            # same prompts with a 9x documentation-and-examples payload
            profiles.append(WorkloadProfile(f"corpus-seed{seed}-doc9x", q, hist, [9 * (q + hist)], [], dims, n, r,
                                            gate_hidden=gh, gate_depth=gd))
        if self.cfg.flops.large_scale:
            big = Dims.llama8b()
            # N * L * r = 8 * 32 * 16 = 4096 = h
            profiles.append(WorkloadProfile("llama-scale-NLr=h", 200, 300, [4500], [], big, 8, 16,
                                            gate_hidden=512, gate_depth=3))
        if self.cfg.flops.profiles:
            profiles += load_profiles(Path(self.cfg.flops.profiles))
        if not profiles:
            raise DependencyError("token counts", "synth")
        return profiles

    def flops(self, extra_profiles=None):
        profiles = self.flops_profiles() + list(extra_profiles or [])
        rep = flops_table(profiles)
        out = self.report_dir()
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.jsonl").write_text(rep.records())
        (out / "flops.tsv").write_text(rep.table())
        return rep

    def report(self):
        rows = []
        for seed in self.cfg.seeds:
            for s in STRATEGIES:
                p = self.report_dir(seed) / f"summary_{s}.jsonl"
                if p.exists():
                    rows += rp.read_records(p)
        if not rows:
            raise DependencyError("evaluation summaries", "eval")
        out = self.report_dir()
        rp.write_records(out / "summary.jsonl", rows)
        (out / "summary.tsv").write_text(rp.table(rows, rp.SUMMARY_COLUMNS))
        agg = rp.aggregate(rows)
        cols = ["strategy", "seeds"] + [f"{c}_{s}" for c in rp.SUMMARY_COLUMNS[3:] for s in ("mean", "std")]
        (out / "summary_mean.tsv").write_text(rp.table(agg, cols))
        stage1 = []
        for seed in self.cfg.seeds:
            p = self.report_dir(seed) / "stage1_single.jsonl"
            if p.exists():
                stage1 += [{"seed": seed, **r} for r in rp.read_records(p)]
        if stage1:
            (out / "stage1_single.tsv").write_text(rp.table(stage1, ["seed", "n", "pass_rate", "action_accuracy"]))
        theory = []
        for seed in self.cfg.seeds:
            p = self.report_dir(seed) / "theory_estimates.jsonl"
            if p.exists():
                theory += [{"seed": seed, **r} for r in rp.read_records(p)]
        if theory:
            cols = ["seed", "G", "rho", "delta", "beta", "manifest_violations", "held_out_violation_rate"]
            (out / "theory_estimates.tsv").write_text(rp.table(theory, cols))
        return rows

    def run_all(self, theory: bool = True):
        self.archive_config()
        self.ensure_backbone()
        for seed in self.cfg.seeds:
            self.synth(seed)
            self.pretrain(seed)
            self.train_gate(seed)
            self.finetune(seed)
            self.ablate(seed)
            if theory:
                self.theory(seed)
        self.flops()
        return self.report()
