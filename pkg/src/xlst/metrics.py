"""Accuracy, conlleval-style entity F1 and run reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .corpus import check_bio


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int  # inclusive
    type: str

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"span start {self.start} after end {self.end}")


def accuracy(pred, gold):
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold labels")
    if not gold:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(int(p) == int(g) for p, g in zip(pred, gold)) / len(gold)


def decode_spans(tags):
    """Maximal typed spans; an I-X that cannot continue an open X span starts one."""
    tags = check_bio(tags)
    spans = []
    start = etype = None
    for i, tag in enumerate(tags):
        prefix, _, typ = tag.partition("-")
        if start is not None and not (prefix == "I" and typ == etype):
            spans.append(EntitySpan(start, i - 1, etype))
            start = etype = None
        if prefix in ("B", "I") and start is None:
            start, etype = i, typ
    if start is not None:
        spans.append(EntitySpan(start, len(tags) - 1, etype))
    return spans


def prf(tp, n_pred, n_gold):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def entity_f1(gold_seqs, pred_seqs):
    """Micro (precision, recall, F1) over exact (type, start, end) span matches."""
    gold_seqs, pred_seqs = list(gold_seqs), list(pred_seqs)
    if len(gold_seqs) != len(pred_seqs):
        raise ValueError(f"{len(gold_seqs)} gold sequences vs {len(pred_seqs)} predicted")
    tp = n_pred = n_gold = 0
    for k, (g, p) in enumerate(zip(gold_seqs, pred_seqs)):
        if len(g) != len(p):
            raise ValueError(f"sequence {k}: gold length {len(g)} != predicted length {len(p)}")
        gs, ps = set(decode_spans(g)), set(decode_spans(p))
        tp += len(gs & ps)
        n_pred += len(ps)
        n_gold += len(gs)
    return prf(tp, n_pred, n_gold)


# --------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ("phase", "round", "dataset", "metric", "value")


def report_rows(manifest):
    rows = []
    for entry in manifest.get("metrics", []):
        for metric, value in sorted(entry.get("values", {}).items()):
            rows.append((entry["phase"], entry.get("round", 0), entry.get("dataset", ""),
                         metric, value))
    return rows


def report(run_dir):
    """Per-phase metric rows from ``run_dir/manifest.json``; writes report.csv.

    Returns ``(rows, text)`` where text is a fixed-width rendering with
    fractions shown x100.
    """
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    rows = report_rows(manifest)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for phase, rnd, ds, metric, value in rows:
        writer.writerow((phase, rnd, ds, metric, repr(float(value))))
    (run_dir / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    text = [f"{'phase':<14}{'round':>6}  {'dataset':<14}{'metric':<10}{'value':>8}"]
    for phase, rnd, ds, metric, value in rows:
        text.append(f"{phase:<14}{rnd:>6}  {ds:<14}{metric:<10}{100 * float(value):>8.2f}")
    return rows, "\n".join(text) + "\n"
