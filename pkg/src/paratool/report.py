"""Structured records (one JSON object per line) and flat tab-separated tables."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def write_records(path: Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(dumps(r) + "\n" for r in records))


def append_record(path: Path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(dumps(record) + "\n")


def read_records(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"


SUMMARY_COLUMNS = ["seed", "strategy", "n", "pass_rate", "gating_accuracy", "action_accuracy",
                   "single_pass", "select_pass", "multi_pass", "multi_gating", "multi_action"]


def summary_row(seed: int, summary: dict, by_kind: dict) -> dict:
    row = {"seed": seed, **summary}
    for kind in ("single", "select", "multi"):
        if kind in by_kind:
            row[f"{kind}_pass"] = by_kind[kind]["pass_rate"]
    if "multi" in by_kind:
        row["multi_gating"] = by_kind["multi"]["gating_accuracy"]
        row["multi_action"] = by_kind["multi"]["action_accuracy"]
    return row


def aggregate(rows: Sequence[dict], key: str = "strategy") -> list[dict]:
    """Mean and std over seeds of every numeric column, per ``key``."""
    out = []
    for k in sorted({r[key] for r in rows}):
        rs = [r for r in rows if r[key] == k]
        agg = {key: k, "seeds": len(rs)}
        for col in SUMMARY_COLUMNS:
            vals = [r[col] for r in rs if isinstance(r.get(col), float)]
            if vals:
                agg[f"{col}_mean"] = float(np.mean(vals))
                agg[f"{col}_std"] = float(np.std(vals))
        out.append(agg)
    return out
