"""Exact match, beam exact match, per-step gold recall and the analysis
tables (accuracy by height, recall by step, failure steps, tree stats)."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .decoder import Beam, BeamItem, DecodeTrace, PoolEntry, StepRecord
from .ra import RaTree, equivalent, level_slices, parse_tree
from .schema import Example


def exact_match(predicted: RaTree | None, gold: RaTree) -> bool:
    return predicted is not None and equivalent(predicted, gold)


def beam_em(trace: DecodeTrace, gold: RaTree) -> bool:
    key = gold.canonical_key
    return any(e.key == key for e in trace.pool)


def z_recall(trace: DecodeTrace, gold_levels: Sequence[dict[str, RaTree]], t: int) -> bool:
    """True iff every gold t-high subtree (by canonical form) is in beam ``t``."""
    if t > trace.T or t >= len(gold_levels):
        raise ValueError(f"step {t} outside trace (T={trace.T}) or gold height {len(gold_levels) - 1}")
    present = trace.beam_keys(t)
    return all(g.canonical_key in present for g in gold_levels[t].values())


@dataclass
class ExampleRecord:
    index: int
    em: bool
    bem: bool
    gold_height: int
    gold_size: int
    recall: list[bool]  # z_recall for t = 0 .. min(T, gold height)
    failure_step: int | None


@dataclass
class EvalReport:
    records: list[ExampleRecord]
    em: float
    bem: float
    z0_recall: float
    em_by_height: dict[int, tuple[int, float, float]]  # height -> (n, EM, BEM)
    recall_by_step: dict[int, tuple[int, float]]  # step -> (n, recall)
    failure_hist: dict[int, int]
    height_hist: dict[int, int]
    size_hist: dict[int, int]

    def summary(self) -> dict:
        return {
            "n": len(self.records),
            "EM": self.em,
            "BEM": self.bem,
            "Z0_recall": self.z0_recall,
            "failure_steps": {str(k): v for k, v in sorted(self.failure_hist.items())},
        }


def example_record(index: int, trace: DecodeTrace, ex: Example) -> ExampleRecord:
    levels = level_slices(ex.gold_balanced)
    h = ex.gold_balanced.height
    recall = [z_recall(trace, levels, t) for t in range(min(trace.T, h) + 1)]
    em = exact_match(trace.chosen, ex.gold_tree)
    bem = beam_em(trace, ex.gold_tree)
    failure = None
    if not bem:
        failure = next((t for t, ok in enumerate(recall) if not ok), trace.T + 1)
    return ExampleRecord(index, em, bem, h, ex.gold_tree.size, recall, failure)


def aggregate(records: Sequence[ExampleRecord]) -> EvalReport:
    n = max(1, len(records))
    by_h: dict[int, list[ExampleRecord]] = {}
    for r in records:
        by_h.setdefault(r.gold_height, []).append(r)
    em_by_height = {
        h: (len(rs), sum(r.em for r in rs) / len(rs), sum(r.bem for r in rs) / len(rs)) for h, rs in sorted(by_h.items())
    }
    steps = max((len(r.recall) for r in records), default=0)
    recall_by_step = {}
    for t in range(steps):
        vals = [r.recall[t] for r in records if t < len(r.recall)]
        recall_by_step[t] = (len(vals), sum(vals) / len(vals))
    return EvalReport(
        list(records),
        sum(r.em for r in records) / n,
        sum(r.bem for r in records) / n,
        sum(r.recall[0] for r in records) / n,
        em_by_height,
        recall_by_step,
        dict(sorted(Counter(r.failure_step for r in records if r.failure_step is not None).items())),
        dict(sorted(Counter(r.gold_height for r in records).items())),
        dict(sorted(Counter(r.gold_size for r in records).items())),
    )


def evaluate(traces: Sequence[DecodeTrace], examples: Sequence[Example]) -> EvalReport:
    if len(traces) != len(examples):
        raise ValueError(f"{len(traces)} traces for {len(examples)} examples")
    return aggregate([example_record(i, tr, ex) for i, (tr, ex) in enumerate(zip(traces, examples))])


def analysis_report(traces: Sequence[DecodeTrace], examples: Sequence[Example], out_dir: str | Path) -> EvalReport:
    """Compute the report and write its tables into ``out_dir``.

    Files: ``em_by_height.csv`` (height,n,em,bem), ``z_recall_by_step.csv``
    (step,n,recall), ``failure_steps.csv`` (example,failure_step,gold_height;
    one row per failed example), ``tree_stats.csv`` (stat,value,count for
    gold height and size) and ``summary.json``.
    """
    report = evaluate(traces, examples)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "em_by_height.csv", ("height", "n", "em", "bem"),
           [(h, n, em, bem) for h, (n, em, bem) in report.em_by_height.items()])
    _write(out / "z_recall_by_step.csv", ("step", "n", "recall"),
           [(t, n, r) for t, (n, r) in report.recall_by_step.items()])
    _write(out / "failure_steps.csv", ("example", "failure_step", "gold_height"),
           [(r.index, r.failure_step, r.gold_height) for r in report.records if r.failure_step is not None])
    _write(out / "tree_stats.csv", ("stat", "value", "count"),
           [("height", k, v) for k, v in report.height_hist.items()] + [("size", k, v) for k, v in report.size_hist.items()])
    summary = report.summary()
    summary["records"] = [asdict(r) for r in report.records]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return report


def _write(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def trace_from_json(obj: dict) -> DecodeTrace:
    """Rebuild the symbolic part of a dumped trace (vectors are not stored)."""
    beams = [Beam(s["t"], [BeamItem.make(parse_tree(it["tree"]), it["score"]) for it in s["beam"]]) for s in obj["steps"]]
    steps = [StepRecord(s["frontier_size"], [], []) for s in obj["steps"][1:]]
    trace = DecodeTrace(beams, steps)
    for p in obj["pool"]:
        tree = parse_tree(p["tree"])
        item = BeamItem.make(tree, 0.0)
        trace.pool.append(PoolEntry(p["step"], 0, tree, item.key, item.digest))
    if obj["pool"] and obj["pool"][0]["score"] is not None:
        trace.rerank_scores = [p["score"] for p in obj["pool"]]
    trace.chosen = None if obj["chosen"] is None else parse_tree(obj["chosen"])
    trace.failure = obj.get("failure")
    return trace
