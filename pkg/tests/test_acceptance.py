"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line
(with runtime) that is printed in the terminal summary."""
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from smbop.decoder import DecoderConfig, Frontier, NeuralScorer, frontier_bound, oracle_decode
from smbop.encoder import DESK_MODEL, Vocab
from smbop.evaluation import analysis_report, evaluate
from smbop.model import Model
from smbop.neural import Tape, adam_update, grad_check
from smbop.ra import (
    ANY, OPS, RaTree, SemanticType, balance, canonicalize, is_balanced, keep, level_slices, parse_tree, serialize,
    strip_keep,
)
from smbop.sql import parse_sql, ra_to_sql, sql_to_ra, transpile
from smbop.synthetic import SizeParams, gen_synthetic
from smbop.training import DESK_TRAIN, decode_all, em_bem, example_loss, teacher_force, train

from golden import CASES

RESULTS: list[str] = []


def record(n: int, title: str, ok: bool, elapsed: float, limit: float | None, detail: str = ""):
    in_time = limit is None or elapsed < limit
    status = "PASS" if ok and in_time else "FAIL"
    budget = f" (limit {limit:.0f} s)" if limit else ""
    RESULTS.append(f"{status} criterion {n}: {title}: {detail} [{elapsed:.1f} s{budget}]")
    print(RESULTS[-1])
    assert ok, detail
    assert in_time, f"took {elapsed:.1f} s, limit {limit} s"


def test_1_printed_trees():
    t0 = time.perf_counter()
    failures = []
    for c in CASES:
        tree = sql_to_ra(parse_sql(c["sql"], c["schema"]))
        if serialize(tree) != c["unbalanced"]:
            failures.append(f"{c['name']}: transpile")
        if serialize(balance(tree)) != c["balanced"]:
            failures.append(f"{c['name']}: balance")
        if canonicalize(transpile(ra_to_sql(tree), c["schema"])) != canonicalize(tree):
            failures.append(f"{c['name']}: render round trip")
    record(1, "printed-tree golden suite", not failures, time.perf_counter() - t0, 1.0,
           f"{len(CASES)} trees, failures={failures}")


def _perturb(tree: RaTree, rng) -> RaTree:
    if tree.is_leaf:
        return keep(tree) if rng.random() < 0.3 else tree
    kids = [_perturb(c, rng) for c in tree.children]
    if len(kids) == 2 and OPS[tree.label].commutative and rng.random() < 0.5:
        kids.reverse()
    node = RaTree(tree.label, kids)
    return keep(node) if rng.random() < 0.2 else node


def test_2_property_suite():
    import random
    t0 = time.perf_counter()
    data = gen_synthetic(2024, 1000, SizeParams(max_height=6))
    rng = random.Random(0)
    bad = {"strip_balance": 0, "equidistant": 0, "canonical": 0, "round_trip_b": 0}
    for ex in data:
        t = ex.gold_tree
        b = balance(t)
        bad["strip_balance"] += strip_keep(b) != t
        depths = {len(path) for path in _leaf_paths(b)}
        bad["equidistant"] += not (is_balanced(b) and depths == {b.height})
        bad["canonical"] += canonicalize(_perturb(t, rng)) != canonicalize(t)
        bad["round_trip_b"] += canonicalize(transpile(ra_to_sql(t), ex.schema)) != canonicalize(t)
    record(2, "property suite", not any(bad.values()), time.perf_counter() - t0, 30.0,
           f"{len(data)} trees, violations={bad}")


def _leaf_paths(tree, prefix=()):
    if tree.is_leaf:
        yield prefix
    for i, c in enumerate(tree.children):
        yield from _leaf_paths(c, prefix + (i,))


def test_3_frontier_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    types = list(SemanticType)
    worst, ok = {}, True
    for k in (1, 2, 4, 8):
        bound = k * 7 + k * k * 23
        for _ in range(200):
            f = Frontier([types[i] for i in rng.integers(0, len(types), size=k)])
            ok &= len(f) <= bound == frontier_bound(k)
        full = len(Frontier([ANY] * k))
        ok &= full <= bound
        worst[k] = full / bound
    near = any(r >= 0.9 for r in worst.values())
    record(3, "frontier bound", ok and near, time.perf_counter() - t0, 10.0,
           f"max fraction of bound with compatible items: {worst}")


def test_4_oracle_decode():
    t0 = time.perf_counter()
    data = gen_synthetic(11, 200, SizeParams(max_height=6, min_height=1))
    heights = sorted({ex.gold_balanced.height for ex in data})
    traces = [oracle_decode(ex, DecoderConfig(), seed=i) for i, ex in enumerate(data)]
    rep = evaluate(traces, data)
    recall_all = all(all(r.recall) for r in rep.records)
    ok = rep.em == 1.0 and rep.bem == 1.0 and recall_all
    record(4, "oracle decode", ok, time.perf_counter() - t0, 60.0,
           f"n=200 heights={heights} EM={rep.em:.3f} BEM={rep.bem:.3f} all Z_t recall={recall_all}")


LIMITS = {
    "linear": 1e-6, "layer_norm": 1e-6, "softmax": 1e-6,
    "relation_aware_attention": 1e-4, "lstm": 1e-4, "tree_lstm": 1e-4, "bilinear_frontier": 1e-4,
}


def test_5_gradient_checks():
    t0 = time.perf_counter()
    errs = {op: grad_check(op, seed=0) for op in LIMITS}
    ok = all(errs[op] < LIMITS[op] for op in LIMITS)
    record(5, "gradient checks", ok, time.perf_counter() - t0, 60.0,
           ", ".join(f"{op}={e:.1e}" for op, e in errs.items()))


def test_6_teacher_forcing_invariant():
    t0 = time.perf_counter()
    data = gen_synthetic(5, 100, SizeParams(max_height=5))
    cfg = DESK_TRAIN
    model = Model.create(DESK_MODEL, Vocab.build(data))
    missing, nonfinite = 0, 0
    for lo in range(0, len(data), cfg.batch_size):
        batch = data[lo: lo + cfg.batch_size]
        model.store.zero_grad()
        for ex in batch:
            res = example_loss(model, ex, cfg)  # raises GoldNotInFrontier if the invariant breaks
            nonfinite += not math.isfinite(res.search)
            model.store.accumulate(res.grads, 1.0 / len(batch))
            tr = teacher_force(ex, NeuralScorer(model, ex, cfg.decoder, Tape(False)), cfg.decoder)
            for t, level in enumerate(level_slices(ex.gold_balanced)):
                missing += not {g.canonical_key for g in level.values()} <= tr.beam_keys(t)
        adam_update(model.store, cfg.lr)
    record(6, "teacher-forcing invariant", missing == 0 and nonfinite == 0, time.perf_counter() - t0, None,
           f"100 examples, missing gold levels={missing}, non-finite losses={nonfinite}")


OVERFIT_DATA = dict(seed=7, n=50, size=SizeParams(max_height=5, max_width=DESK_TRAIN.decoder.K))


def _overfit_setup():
    return gen_synthetic(OVERFIT_DATA["seed"], OVERFIT_DATA["n"], OVERFIT_DATA["size"])


def test_7_desk_overfit():
    data = _overfit_setup()
    cfg = replace(DESK_TRAIN, target_em=0.95)
    t0 = time.perf_counter()
    res = train(data, cfg, DESK_MODEL, dev=data)
    elapsed = time.perf_counter() - t0
    em, bem = em_bem(decode_all(res.model, data, cfg.decoder), data)
    ok = res.steps <= 2000 and em >= 0.95 and DESK_MODEL.dim == 64 and cfg.decoder.K == 8 and cfg.batch_size == 16 \
        and cfg.lr == 1.86e-4
    record(7, "desk-scale overfit", ok, elapsed, 1800.0,
           f"train EM={em:.2f} BEM={bem:.2f} after {res.steps} steps ({res.stopped})")


ABLATION_STEPS = 20


@pytest.mark.parametrize("flag", ["no_reranker", "no_beam_cntx", "no_rerank_cntx", "cntx_rep"])
def test_7_ablations_run(flag):
    data = _overfit_setup()
    dec = replace(DESK_TRAIN.decoder, **{flag: True})
    cfg = replace(DESK_TRAIN, max_steps=ABLATION_STEPS, eval_every=ABLATION_STEPS, decoder=dec)
    t0 = time.perf_counter()
    res = train(data, cfg, DESK_MODEL, dev=data)
    ok = res.steps == ABLATION_STEPS and all(math.isfinite(h["train_loss"]) for h in res.history)
    record(7, f"ablation {flag} runs", ok, time.perf_counter() - t0, None,
           f"{res.steps} steps, train EM={res.history[-1]['dev_EM']:.2f}")


def test_8_determinism(tmp_path):
    t0 = time.perf_counter()
    data = gen_synthetic(9, 24, SizeParams(max_height=4))
    cfg = replace(DESK_TRAIN, max_steps=4, eval_every=2, batch_size=8)
    outputs = []
    for i, threads in enumerate((1, 1, 4, 4)):
        m = tmp_path / f"metrics{i}.csv"
        ck = tmp_path / f"model{i}.npz"
        res = train(data, replace(cfg, threads=threads), DESK_MODEL, dev=data[:8], metrics_path=m, ckpt_path=ck)
        traces = decode_all(res.model, data, cfg.decoder, threads=threads)
        dump = "\n".join(json.dumps(t.to_json(), sort_keys=True) for t in traces)
        outputs.append((m.read_bytes(), ck.read_bytes(), dump))
    ok = all(o == outputs[0] for o in outputs)
    record(8, "determinism", ok, time.perf_counter() - t0, None,
           "train metrics, checkpoint and decode traces identical across 2 runs x threads {1, 4}: " + str(ok))


def test_9_metric_implications(tmp_path):
    t0 = time.perf_counter()
    data = gen_synthetic(13, 60, SizeParams(max_height=5))
    traces = [oracle_decode(ex, DecoderConfig(K=2 + i % 6, T=1 + i % 7)) for i, ex in enumerate(data[:30])]
    model = Model.create(replace(DESK_MODEL, dim=16, heads=2), Vocab.build(data))
    traces += decode_all(model, data[30:], DecoderConfig(K=8))
    rep = analysis_report(traces, data, tmp_path)
    implication = all(r.bem for r in rep.records if r.em)
    n = len(rep.records)
    checks = [
        rep.em == sum(r.em for r in rep.records) / n,
        rep.bem == sum(r.bem for r in rep.records) / n,
        rep.z0_recall == sum(r.recall[0] for r in rep.records) / n,
    ]
    for h, (cnt, em, bem) in rep.em_by_height.items():
        sub = [r for r in rep.records if r.gold_height == h]
        checks.append((cnt, em, bem) == (len(sub), sum(r.em for r in sub) / len(sub), sum(r.bem for r in sub) / len(sub)))
    fails = {}
    for r in rep.records:
        if r.failure_step is not None:
            fails[r.failure_step] = fails.get(r.failure_step, 0) + 1
    checks.append(fails == rep.failure_hist)
    summary = json.loads((tmp_path / "summary.json").read_text())
    checks.append(summary["EM"] == rep.em and summary["BEM"] == rep.bem)
    record(9, "metric implications", implication and all(checks), time.perf_counter() - t0, None,
           f"n={n} EM={rep.em:.2f} BEM={rep.bem:.2f}, EM=>BEM holds={implication}, aggregates match={all(checks)}")
