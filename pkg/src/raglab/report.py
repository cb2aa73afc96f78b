"""Experiment reports: the fixed-header metric CSV, per-mode aggregates, and
the figures rendered alongside.

The metric CSV is a pure function of traces and gold answers so that repeated
runs from one seed are byte-identical; wall-clock timings are inherently
non-deterministic and therefore live in the trace JSONL and the separate
timing summary, leaving the wall_ms column empty.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import figures
from .metrics import exact_match, f1_score

CSV_HEADER = ["question_id", "mode", "em", "f1", "ctx_tokens", "resp_tokens",
              "ppl", "en", "len", "ls", "wall_ms"]

AGG_FIELDS = ("em", "f1", "ctx_tokens", "resp_tokens", "ppl", "en", "len", "ls")


@dataclass
class MetricReport:
    rows: list[dict]
    aggregates: dict[str, dict]
    csv_text: str


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return f"{value:.6f}"
    return str(value)


def build_rows(traces: list[dict], gold: dict[str, str]) -> list[dict]:
    rows = []
    for t in traces:
        qid = t["question_id"]
        if qid not in gold:
            raise KeyError(f"trace question id {qid!r} missing from the gold set")
        unc = t.get("uncertainty") or {}
        rows.append({
            "question_id": qid,
            "mode": t["mode"],
            "em": exact_match(t["answer"], gold[qid]),
            "f1": f1_score(t["answer"], gold[qid]),
            "ctx_tokens": t["context_tokens"],
            "resp_tokens": t["response_tokens"],
            "ppl": unc.get("ppl"),
            "en": unc.get("en"),
            "len": unc.get("len"),
            "ls": unc.get("ls"),
            "wall_ms": None,
        })
    return rows


def aggregate(rows: list[dict]) -> dict[str, dict]:
    by_mode: dict[str, list[dict]] = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(r)
    out: dict[str, dict] = {}
    for mode in sorted(by_mode):
        group = by_mode[mode]
        agg = {"count": len(group)}
        for fieldname in AGG_FIELDS:
            values = [float(r[fieldname]) for r in group
                      if r[fieldname] is not None and not (isinstance(r[fieldname], float)
                                                           and np.isnan(r[fieldname]))]
            agg[fieldname] = float(np.mean(values)) if values else float("nan")
        out[mode] = agg
    return out


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    ordered = sorted(rows, key=lambda r: (r["mode"], r["question_id"]))
    for r in ordered:
        writer.writerow([_fmt(r[h]) for h in CSV_HEADER])
    return buf.getvalue()


def report(traces: list[dict], gold: dict[str, str], csv_path=None,
           figure_path=None) -> MetricReport:
    """Score traces against gold answers; optionally write the CSV and the
    per-mode figure next to it."""
    rows = build_rows(traces, gold)
    csv_text = render_csv(rows)
    aggregates = aggregate(rows)
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text)
    if figure_path is not None and rows:
        figures.metrics_by_mode(aggregates, figure_path)
    return MetricReport(rows=rows, aggregates=aggregates, csv_text=csv_text)


def write_timings(traces: list[dict], path) -> None:
    """Wall-clock summary, kept apart from the deterministic metric CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["question_id", "mode", "wall_ms"])
        for t in traces:
            writer.writerow([t["question_id"], t["mode"], f"{t['wall_ms']:.3f}"])
