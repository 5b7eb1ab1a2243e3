"""Bottom-up teacher forcing, the search and re-ranking losses, and the
optimization loop."""
from __future__ import annotations

import csv
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .decoder import DecodeTrace, DecoderConfig, NeuralScorer, decode, search
from .encoder import DESK_MODEL, EncoderInputs, ModelConfig, Vocab, prepare_inputs
from .model import Model
from .neural import Tape, Tensor, adam_update
from .ra import equivalent
from .schema import Example

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.86e-4
    batch_size: int = 16
    max_steps: int = 90000
    patience: int = 10  # eval intervals without dev improvement
    eval_every: int = 500
    search_weight: float = 1.0
    rerank_weight: float = 1.0
    rerank_penalty: float = 5.0
    # keep decoding (unforced) after the gold height up to decoder.T so the
    # re-ranker trains on the same kind of pool it sees at inference
    full_pool: bool = True
    target_em: float | None = None  # stop once dev EM reaches this
    seed: int = 0
    threads: int = 1
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1 or self.threads < 1:
            raise ValueError("invalid training configuration")


DESK_TRAIN = TrainConfig(max_steps=2000, eval_every=100, patience=1000, decoder=DecoderConfig(K=8, T=9))


# -- losses ----------------------------------------------------------------------

def loss_search(step_logps: Sequence[np.ndarray], gold_indices: Sequence[Sequence[int]], gold_size: int) -> float:
    """``-(1/gold_size) * sum_t sum_{g in gold_t} log p_t(g)``."""
    total = 0.0
    for logp, idx in zip(step_logps, gold_indices):
        total -= float(np.sum(np.asarray(logp)[list(idx)]))
    return total / gold_size


def loss_rerank(scores: Sequence[float], digests: Sequence[str], gold_digest: str, penalty: float = 5.0) -> tuple[float, bool]:
    """Negative log of the summed softmax mass on gold-equivalent pool trees.

    Returns ``(loss, skipped)``; with no equivalent tree in the pool the loss
    is the constant ``penalty`` and ``skipped`` is True.
    """
    idx = [m for m, d in enumerate(digests) if d == gold_digest]
    if not idx:
        return penalty, True
    s = np.asarray(scores, dtype=np.float64)
    m = s.max()
    lse_all = m + math.log(np.exp(s - m).sum())
    sub = s[idx]
    ms = sub.max()
    lse_gold = ms + math.log(np.exp(sub - ms).sum())
    return float(lse_all - lse_gold), False


def teacher_force(example: Example, scorer, cfg: DecoderConfig, T: int | None = None) -> DecodeTrace:
    """Decode with every gold subtree forced into its beam.

    Runs ``height(gold)`` steps, or ``T`` steps if that is larger (the steps
    past the gold height are unforced).
    """
    return search(example, scorer, cfg, T=T, teacher=True)


@dataclass
class ExampleLoss:
    total: float
    search: float
    rerank: float
    rerank_skipped: bool
    grads: dict[str, np.ndarray] | None = None


def example_loss(model: Model, example: Example, cfg: TrainConfig, inputs: EncoderInputs | None = None,
                 backward: bool = True) -> ExampleLoss:
    """Teacher-forced pass on one example; with ``backward`` also returns gradients."""
    tape = Tape(enabled=backward)
    dcfg = cfg.decoder
    scorer = NeuralScorer(model, example, dcfg, tape, inputs)
    extend = cfg.full_pool and not dcfg.no_reranker
    trace = teacher_force(example, scorer, dcfg, dcfg.T if extend else None)
    size = example.gold_balanced.size
    terms: list[Tensor] = []
    gold0 = _gold_constant_indices(example)
    if gold0:
        terms.append(tape.weighted_sum(tape.log_softmax(scorer.const_t), gold0, -1.0 / size))
    for sc, rec in zip(scorer.frontier_t, trace.steps):
        if rec.gold is None:
            break
        idx = sorted(rec.gold.values())
        terms.append(tape.weighted_sum(tape.log_softmax(sc), idx, -1.0 / size))
    search_t = tape.sum_scalars(terms) if terms else tape.const(0.0)
    parts = [tape.scale(search_t, cfg.search_weight)]
    rerank_val, skipped = 0.0, False
    if not dcfg.no_reranker:
        gold_key = example.gold_tree.canonical_key
        idx = [m for m, e in enumerate(trace.pool) if e.key == gold_key]
        if idx:
            r = tape.marginal_nll(scorer.rerank_t, idx)
            rerank_val = float(r.value)
            parts.append(tape.scale(r, cfg.rerank_weight))
        else:
            rerank_val, skipped = cfg.rerank_penalty, True
            log.info("empty gold set in pool; rerank penalty applied")
    total = tape.sum_scalars(parts)
    value = float(total.value) + (cfg.rerank_weight * rerank_val if skipped else 0.0)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} on example {' '.join(example.utterance)!r}")
    grads = None
    if backward:
        tape.backward(total)
        grads = scorer.P.grads()
    return ExampleLoss(value, float(search_t.value), rerank_val, skipped, grads)


def _gold_constant_indices(example: Example) -> list[int]:
    gold_keys = {t.canonical_key for t in example.gold_balanced.leaves()}
    return [i for i, c in enumerate(example.schema.constants) if c.canonical_key in gold_keys]


# -- evaluation helper -------------------------------------------------------------

def decode_all(model: Model, examples: Sequence[Example], dcfg: DecoderConfig, threads: int = 1,
               inputs: Sequence[EncoderInputs] | None = None) -> list[DecodeTrace]:
    inputs = inputs or [prepare_inputs(ex, model.vocab, model.config) for ex in examples]
    jobs = list(zip(examples, inputs))
    with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda p: decode(p[0], model, dcfg, p[1]), jobs))


def em_bem(traces: Sequence[DecodeTrace], examples: Sequence[Example]) -> tuple[float, float]:
    em = bem = 0
    for tr, ex in zip(traces, examples):
        gold = ex.gold_tree.canonical_key
        em += tr.chosen is not None and equivalent(tr.chosen, ex.gold_tree)
        bem += any(e.key == gold for e in tr.pool)
    n = max(1, len(examples))
    return em / n, bem / n


# -- the loop --------------------------------------------------------------------

METRIC_FIELDS = ("step", "train_loss", "search_loss", "rerank_loss", "dev_EM", "dev_BEM")


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    steps: int
    best_em: float | None
    stopped: str


def train(dataset: Sequence[Example], cfg: TrainConfig, model_cfg: ModelConfig = DESK_MODEL,
          dev: Sequence[Example] | None = None, metrics_path: str | Path | None = None,
          ckpt_path: str | Path | None = None, vocab: Vocab | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Mini-batch Adam on teacher-forced losses; deterministic given the seed.

    Per-example gradients may be computed on ``cfg.threads`` threads; they
    are always summed in batch order.
    """
    if not dataset:
        raise ValueError("empty training set")
    vocab = vocab or Vocab.build(list(dataset) + list(dev or []))
    model = Model.create(replace(model_cfg, seed=cfg.seed), vocab)
    inputs = [prepare_inputs(ex, vocab, model.config) for ex in dataset]
    dev_inputs = [prepare_inputs(ex, vocab, model.config) for ex in dev] if dev else None
    rng = random.Random(cfg.seed)
    order = list(range(len(dataset)))
    history: list[dict] = []
    if metrics_path:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)
    best_em, bad_evals, stopped = None, 0, "max_steps"
    acc = {"loss": 0.0, "search": 0.0, "rerank": 0.0, "n": 0}
    step = 0
    with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        while step < cfg.max_steps:
            rng.shuffle(order)
            for lo in range(0, len(order), cfg.batch_size):
                if step >= cfg.max_steps:
                    break
                batch = order[lo: lo + cfg.batch_size]
                results = list(pool.map(lambda i: example_loss(model, dataset[i], cfg, inputs[i]), batch))
                model.store.zero_grad()
                for res in results:
                    model.store.accumulate(res.grads, 1.0 / len(batch))
                    acc["loss"] += res.total
                    acc["search"] += res.search
                    acc["rerank"] += res.rerank
                    acc["n"] += 1
                adam_update(model.store, cfg.lr)
                step += 1
                if on_step:
                    on_step(step, sum(r.total for r in results) / len(results))
                if step % cfg.eval_every == 0 or step == cfg.max_steps:
                    row = {
                        "step": step,
                        "train_loss": acc["loss"] / acc["n"],
                        "search_loss": acc["search"] / acc["n"],
                        "rerank_loss": acc["rerank"] / acc["n"],
                        "dev_EM": "",
                        "dev_BEM": "",
                    }
                    acc = {"loss": 0.0, "search": 0.0, "rerank": 0.0, "n": 0}
                    if dev:
                        traces = decode_all(model, dev, cfg.decoder, cfg.threads, dev_inputs)
                        em, bem = em_bem(traces, dev)
                        row["dev_EM"], row["dev_BEM"] = em, bem
                        if best_em is None or em > best_em:
                            best_em, bad_evals = em, 0
                            if ckpt_path:
                                model.save(ckpt_path, {"step": step})
                        else:
                            bad_evals += 1
                    history.append(row)
                    log.info("step %d loss %.4f dev EM %s", step, row["train_loss"], row["dev_EM"])
                    if metrics_path:
                        with open(metrics_path, "a", newline="") as fh:
                            csv.writer(fh).writerow([_fmt(row[k]) for k in METRIC_FIELDS])
                    if dev and cfg.target_em is not None and row["dev_EM"] >= cfg.target_em:
                        stopped = "target_em"
                        break
                    if dev and bad_evals >= cfg.patience:
                        stopped = "early_stop"
                        break
            else:
                continue
            break
    if ckpt_path and (not dev or best_em is None):
        model.save(ckpt_path, {"step": step})
    return TrainResult(model, history, step, best_em, stopped)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
