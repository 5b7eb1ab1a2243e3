"""Bottom-up beam decoding over relational-algebra trees.

Each step scores every type-valid one-operation extension of the current
beam, keeps the top K distinct trees (by canonical digest), and builds their
vectors; the final answer is picked among all Relation-typed trees seen.
The loop in :func:`search` is shared by the neural scorer and by a
hand-constructed oracle scorer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .encoder import EncoderInputs, prepare_inputs, encode
from .model import Model
from .neural import BLOCK_PARAMS, Tape, Tensor, log_softmax_forward
from .ra import (
    BINARY_OPS,
    OPS,
    STAR,
    UNARY_OPS,
    VALUE,
    RaTree,
    SemanticType,
    compose_key,
    key_digest,
    level_slices,
    serialize,
    strip_keep,
)
from .schema import Example
from .sql import SqlError, ra_to_sql

N_UNARY = len(UNARY_OPS)
N_BINARY = len(BINARY_OPS)
KEEP = 0  # index of keep among unary ops


class EmptyFrontier(RuntimeError):
    pass


class EmptyPool(RuntimeError):
    pass


class GoldOverflow(RuntimeError):
    pass


class GoldNotInFrontier(RuntimeError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    K: int = 30
    T: int = 9
    no_reranker: bool = False
    no_beam_cntx: bool = False
    no_rerank_cntx: bool = False
    cntx_rep: bool = False

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ValueError("K and T must be >= 1")


ABLATIONS = ("no_reranker", "no_beam_cntx", "no_rerank_cntx", "cntx_rep")


@dataclass(frozen=True)
class BeamItem:
    z: RaTree
    key: str
    step_score: float
    digest: str
    zvec: np.ndarray | None = field(default=None, compare=False, repr=False)
    pinned: bool = False

    @classmethod
    def make(cls, z: RaTree, step_score: float, key: str | None = None, pinned: bool = False) -> "BeamItem":
        key = z.canonical_key if key is None else key
        return cls(z, key, float(step_score), key_digest(key), None, pinned)


@dataclass
class Beam:
    step: int
    items: list[BeamItem]

    def __len__(self):
        return len(self.items)

    def keys(self) -> list[str]:
        return [it.key for it in self.items]

    def types(self) -> list[SemanticType]:
        return [it.z.out_type for it in self.items]


@dataclass(frozen=True)
class FrontierItem:
    op: str
    children: tuple[int, ...]
    score: float
    digest: str


# -- frontier enumeration ------------------------------------------------------

_TYPES = tuple(SemanticType)


@lru_cache(maxsize=None)
def _unary_ops_for(t: SemanticType) -> tuple[int, ...]:
    return tuple(u for u, op in enumerate(UNARY_OPS) if op.result_type([t]) is not None)


@lru_cache(maxsize=None)
def _binary_ops_for(a: SemanticType, b: SemanticType) -> tuple[int, ...]:
    return tuple(k for k, op in enumerate(BINARY_OPS) if op.result_type([a, b]) is not None)


class Frontier:
    """All type-valid applications over a beam, in a fixed canonical order.

    Candidate ``c < n_unary`` is ``UNARY_OPS[uidx[c,1]](item uidx[c,0])``;
    the rest are ``BINARY_OPS[bidx[c,0]](item bidx[c,1], item bidx[c,2])``.
    Both child orders are enumerated for every binary operation.
    """

    def __init__(self, types: Sequence[SemanticType]):
        k = self.k = len(types)
        tid = np.array([_TYPES.index(t) for t in types], dtype=np.int64)
        present = sorted(set(tid.tolist()))
        rows = {t: np.flatnonzero(tid == t) for t in present}
        ucodes, bcodes = [], []
        for t in present:
            ops = np.array(_unary_ops_for(_TYPES[t]), dtype=np.int64)
            if len(ops):
                ucodes.append((rows[t][:, None] * N_UNARY + ops[None, :]).ravel())
            for t2 in present:
                ops = np.array(_binary_ops_for(_TYPES[t], _TYPES[t2]), dtype=np.int64)
                if len(ops):
                    codes = (ops[:, None, None] * k + rows[t][None, :, None]) * k + rows[t2][None, None, :]
                    bcodes.append(codes.ravel())
        ucode = np.sort(np.concatenate(ucodes)) if ucodes else np.zeros(0, dtype=np.int64)
        bcode = np.sort(np.concatenate(bcodes)) if bcodes else np.zeros(0, dtype=np.int64)
        self.uidx = np.stack([ucode // N_UNARY, ucode % N_UNARY], axis=1)
        self.bidx = np.stack([bcode // (k * k), (bcode // k) % k, bcode % k], axis=1)
        self.n_unary = len(ucode)
        self._ucode, self._bcode = ucode, bcode

    def __len__(self):
        return self.n_unary + len(self.bidx)

    def op(self, c: int) -> str:
        if c < self.n_unary:
            return UNARY_OPS[self.uidx[c, 1]].name
        return BINARY_OPS[self.bidx[c - self.n_unary, 0]].name

    def children(self, c: int) -> tuple[int, ...]:
        if c < self.n_unary:
            return (int(self.uidx[c, 0]),)
        row = self.bidx[c - self.n_unary]
        return (int(row[1]), int(row[2]))

    def index(self, op: str, children: Sequence[int]) -> int:
        """Candidate index of ``op(children)``, or -1 if not in the frontier."""
        if len(children) == 1:
            code = children[0] * N_UNARY + _UNARY_POS[op]
            codes, offset = self._ucode, 0
        else:
            b = _BINARY_POS[op]
            code = (b * self.k + children[0]) * self.k + children[1]
            codes, offset = self._bcode, self.n_unary
        pos = int(np.searchsorted(codes, code))
        if pos < len(codes) and codes[pos] == code:
            return pos + offset
        return -1

    def key(self, c: int, beam_keys: Sequence[str]) -> str:
        return compose_key(self.op(c), [beam_keys[i] for i in self.children(c)])

    def tree(self, c: int, beam: Beam) -> RaTree:
        return RaTree(self.op(c), [beam.items[i].z for i in self.children(c)])


_BINARY_POS = {op.name: i for i, op in enumerate(BINARY_OPS)}
_UNARY_POS = {op.name: i for i, op in enumerate(UNARY_OPS)}


def frontier_bound(k: int) -> int:
    return k * N_UNARY + k * k * N_BINARY


def enumerate_frontier(types: Sequence[SemanticType]) -> Frontier:
    return Frontier(types)


def _select(scores: np.ndarray, key_of, K: int, exclude: set[str] = frozenset()) -> list[tuple[int, str]]:
    """Top-K distinct keys by (score desc, digest asc); first-seen wins per key.

    Keys are computed lazily, only for candidates that can still make the cut.
    """
    order = np.argsort(-scores, kind="stable")
    seen = set(exclude)
    out: list[tuple[int, str]] = []
    pos, n = 0, len(order)
    while pos < n and len(out) < K:
        s = scores[order[pos]]
        end = pos
        fresh: dict[str, int] = {}
        while end < n and scores[order[end]] == s:
            c = int(order[end])
            key = key_of(c)
            if key not in seen and key not in fresh:
                fresh[key] = c
            end += 1
        ranked = sorted(fresh.items(), key=lambda kv: key_digest(kv[0]))
        for key, c in ranked[: K - len(out)]:
            out.append((c, key))
            seen.add(key)
        pos = end
    return out


def prune_topk(frontier: Sequence[FrontierItem], K: int) -> list[FrontierItem]:
    """Deduplicate by digest (max score wins) then keep the top K by (score desc, digest asc)."""
    if not frontier:
        raise EmptyFrontier("no valid applications")
    best: dict[str, FrontierItem] = {}
    for it in frontier:
        cur = best.get(it.digest)
        if cur is None or it.score > cur.score:
            best[it.digest] = it
    return sorted(best.values(), key=lambda it: (-it.score, it.digest))[:K]


def _log_softmax(v: np.ndarray) -> np.ndarray:
    return log_softmax_forward(v)[0] if len(v) else v


# -- scorers -------------------------------------------------------------------

class Scorer(Protocol):
    def constant_scores(self) -> np.ndarray: ...

    def start(self, beam: Beam, const_rows: Sequence[int]) -> None: ...

    def frontier_scores(self, beam: Beam, frontier: Frontier) -> np.ndarray: ...

    def advance(self, beam: Beam, frontier: Frontier, selected: Sequence[int]) -> None: ...

    def vectors(self, step: int) -> np.ndarray | None: ...

    def rerank_scores(self, pool: Sequence["PoolEntry"]) -> np.ndarray: ...


class NeuralScorer:
    """Scores with model parameters; keeps tape handles so losses can be attached."""

    def __init__(self, model: Model, example: Example, cfg: DecoderConfig, tape: Tape,
                 inputs: EncoderInputs | None = None):
        self.model, self.cfg, self.tape = model, cfg, tape
        mc = model.config
        self.P = model.store.bind(tape)
        inputs = inputs or prepare_inputs(example, model.vocab, mc)
        self.x, self.s = encode(self.P, tape, mc, inputs)
        self.const_t = tape.ffn_score(self.s, self.P["const.W"], self.P["const.w"])
        self.frontier_t: list[Tensor] = []
        self.rerank_t: Tensor | None = None
        self.Zs: list[Tensor] = []
        self.Cs: list[Tensor] = []
        self._Zc: Tensor | None = None

    def constant_scores(self) -> np.ndarray:
        return self.const_t.value

    def start(self, beam: Beam, const_rows: Sequence[int]):
        tape = self.tape
        parts = []
        if len(const_rows):
            parts.append(tape.rows(self.s, np.asarray(const_rows)))
        parts.append(self.P["leaf_pinned"])
        Z = tape.concat(parts)
        self.Zs.append(Z)
        self.Cs.append(tape.const(np.zeros_like(Z.value)))

    def _contextualize(self, Z: Tensor, prefix: str, layers: int, out: str) -> Tensor:
        tape, nx = self.tape, self.x.shape[0]
        u = tape.concat([self.x, Z])
        for layer in range(layers):
            u = tape.rat_block(u, None, self.P.group(f"{prefix}.{layer}", BLOCK_PARAMS), self.model.config.heads)
        c = tape.rows(u, np.arange(nx, nx + Z.shape[0]))
        return tape.add(Z, tape.linear(c, self.P[out]))

    def contextualize(self) -> Tensor:
        Z = self.Zs[-1]
        if self.cfg.no_beam_cntx:
            return Z
        return self._contextualize(Z, "beam", self.model.config.beam_layers, "beam.out")

    def frontier_scores(self, beam: Beam, frontier: Frontier) -> np.ndarray:
        self._Zc = self.contextualize()
        sc = self.tape.frontier(self._Zc, self.P["score.Wu"], self.P["score.Wb"], frontier.uidx, frontier.bidx)
        self.frontier_t.append(sc)
        return sc.value

    def advance(self, beam: Beam, frontier: Frontier, selected: Sequence[int]):
        tape, P = self.tape, self.P
        Z, C = self.Zs[-1], self.Cs[-1]
        inp = self._Zc if self.cfg.cntx_rep else Z
        keep_kids, un_kids, un_ops, bl, br, b_ops = [], [], [], [], [], []
        slots: list[tuple[int, int]] = []  # (group, position in group)
        for c in selected:
            if c < frontier.n_unary:
                i, u = frontier.uidx[c]
                if u == KEEP:
                    slots.append((0, len(keep_kids)))
                    keep_kids.append(i)
                else:
                    slots.append((1, len(un_kids)))
                    un_kids.append(i)
                    un_ops.append(u)
            else:
                b, i, j = frontier.bidx[c - frontier.n_unary]
                slots.append((2, len(bl)))
                bl.append(i)
                br.append(j)
                b_ops.append(N_UNARY + b)
        hs, cs, offsets = [], [], [0, 0, 0]
        total = 0
        if keep_kids:
            hs.append(tape.rows(Z, keep_kids))
            cs.append(tape.rows(C, keep_kids))
        offsets[1] = total = len(keep_kids)
        if un_kids:
            h, c = tape.lstm(tape.rows(P["op_emb"], un_ops), tape.rows(inp, un_kids), P["lstm.Wx"], P["lstm.Wh"], P["lstm.b"])
            hs.append(h)
            cs.append(c)
        offsets[2] = total = total + len(un_kids)
        if bl:
            h, c = tape.tree_lstm(
                tape.rows(P["op_emb"], b_ops), tape.rows(inp, bl), tape.rows(C, bl), tape.rows(inp, br), tape.rows(C, br),
                P["tree.W"], P["tree.UL"], P["tree.UR"], P["tree.b"],
            )
            hs.append(h)
            cs.append(c)
        perm = [offsets[g] + p for g, p in slots]
        self.Zs.append(tape.rows(tape.concat(hs), perm))
        self.Cs.append(tape.rows(tape.concat(cs), perm))

    def vectors(self, step: int) -> np.ndarray:
        return self.Zs[step].value

    def rerank_scores(self, pool: Sequence["PoolEntry"]) -> np.ndarray:
        tape = self.tape
        offsets = np.cumsum([0] + [z.shape[0] for z in self.Zs])
        allZ = tape.concat(self.Zs)
        Zp = tape.rows(allZ, [offsets[e.step] + e.row for e in pool])
        if not self.cfg.no_rerank_cntx:
            Zp = self._contextualize(Zp, "rerank", self.model.config.rerank_layers, "rerank.out")
        self.rerank_t = tape.ffn_score(Zp, self.P["rerank_ffn.W"], self.P["rerank_ffn.w"])
        return self.rerank_t.value


class OracleScorer:
    """Scores built from the gold tree: every gold subtree gets ``+margin``,
    every competitor a distinct value in ``[-margin-1, -margin)``."""

    def __init__(self, example: Example, margin: float = 10.0, seed: int = 0):
        self.example = example
        self.margin = margin
        self.gold = level_slices(example.gold_balanced)
        self.gold_keys = [{t.canonical_key for t in lvl.values()} for lvl in self.gold]
        self.root_key = example.gold_tree.canonical_key
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def _noise(self, n: int) -> np.ndarray:
        return -self.margin - self.rng.random(n)

    def constant_scores(self) -> np.ndarray:
        consts = self.example.schema.constants
        out = self._noise(len(consts))
        for i, c in enumerate(consts):
            if c.canonical_key in self.gold_keys[0]:
                out[i] = self.margin
        return out

    def start(self, beam, const_rows):
        pass

    def frontier_scores(self, beam: Beam, frontier: Frontier) -> np.ndarray:
        out = self._noise(len(frontier))
        t = beam.step + 1
        if t < len(self.gold):
            for cands in gold_derivations(beam, frontier, self.gold[t], strict=False).values():
                out[cands] = self.margin
        return out

    def advance(self, beam, frontier, selected):
        pass

    def vectors(self, step):
        return None

    def rerank_scores(self, pool):
        out = self._noise(len(pool))
        for m, e in enumerate(pool):
            if e.key == self.root_key:
                out[m] = self.margin
        return out


def gold_derivations(beam: Beam, frontier: Frontier, gold_level: dict[str, RaTree], strict: bool = True) -> dict[str, list[int]]:
    """Frontier candidates that directly build each gold tree of the next level.

    Returns gold canonical key → candidate indices (both child orders for
    commutative operations).  With ``strict`` a gold tree whose children are
    not all in the beam raises :class:`GoldNotInFrontier`.
    """
    row_of = {it.key: r for r, it in enumerate(beam.items)}
    out: dict[str, list[int]] = {}
    for g in gold_level.values():
        rows = [row_of.get(c.canonical_key) for c in g.children]
        cands = []
        if None not in rows:
            orders = [rows]
            if len(rows) == 2 and OPS[g.label].commutative and rows[0] != rows[1]:
                orders.append(rows[::-1])
            cands = [c for c in (frontier.index(g.label, r) for r in orders) if c >= 0]
        if not cands:
            if strict:
                raise GoldNotInFrontier(f"gold subtree {serialize(g)} not derivable at step {beam.step}")
            continue
        out[g.canonical_key] = cands
    return out


# -- trace -----------------------------------------------------------------------

@dataclass(frozen=True)
class PoolEntry:
    step: int
    row: int
    tree: RaTree
    key: str
    digest: str


@dataclass
class StepRecord:
    frontier_size: int
    selected: list[int]
    selected_scores: list[float]
    gold: dict[str, int] | None = None  # gold key -> chosen candidate (teacher forcing only)


@dataclass
class DecodeTrace:
    beams: list[Beam]
    steps: list[StepRecord]
    pool: list[PoolEntry] = field(default_factory=list)
    rerank_scores: list[float] | None = None
    chosen: RaTree | None = None
    failure: str | None = None
    gold_constants: list[int] | None = None

    @property
    def T(self) -> int:
        return len(self.beams) - 1

    @property
    def frontier_sizes(self) -> list[int]:
        return [s.frontier_size for s in self.steps]

    def beam_keys(self, t: int) -> set[str]:
        return set(self.beams[t].keys())

    def to_json(self) -> dict:
        sql = None
        if self.chosen is not None:
            try:
                sql = ra_to_sql(self.chosen)
            except SqlError:
                sql = None
        return {
            "steps": [
                {
                    "t": b.step,
                    "frontier_size": None if b.step == 0 else self.steps[b.step - 1].frontier_size,
                    "beam": [{"tree": serialize(it.z), "score": it.step_score} for it in b.items],
                }
                for b in self.beams
            ],
            "pool": [
                {"tree": serialize(e.tree), "step": e.step, "score": None if self.rerank_scores is None else self.rerank_scores[m]}
                for m, e in enumerate(self.pool)
            ],
            "chosen": None if self.chosen is None else serialize(self.chosen),
            "sql": sql,
            "failure": self.failure,
        }


def dump_traces(traces: Sequence[DecodeTrace], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_json(), sort_keys=True) + "\n")


def load_trace_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- the search loop -------------------------------------------------------------

def _sorted_items(items: list[BeamItem]) -> list[BeamItem]:
    return sorted(items, key=lambda it: (-it.step_score, it.digest))


def init_beam(example: Example, scorer: Scorer, K: int, gold0: dict[str, RaTree] | None = None) -> tuple[Beam, list[int]]:
    """Top-K DB constants by independent score plus the pinned ``value`` and ``*``.

    With ``gold0`` (teacher forcing) every gold constant is placed first and
    the beam may grow to the number of gold constants.  Returns the beam and
    the indices of the chosen constants, in beam order.
    """
    consts = example.schema.constants
    scores = scorer.constant_scores()
    logp = _log_softmax(scores)
    cap = K
    chosen: list[int] = []
    if gold0 is not None:
        gold_keys = {t.canonical_key for t in gold0.values()}
        chosen = [i for i, c in enumerate(consts) if c.canonical_key in gold_keys]
        cap = max(K, len(chosen))
    rest = _select(scores, lambda i: consts[i].canonical_key, cap - len(chosen), {consts[i].canonical_key for i in chosen})
    chosen += [i for i, _ in rest]
    items = [(BeamItem.make(consts[i], logp[i]), i) for i in chosen]
    items.sort(key=lambda p: (-p[0].step_score, p[0].digest))
    rows = [i for _, i in items]
    beam = Beam(0, [it for it, _ in items] + [BeamItem.make(VALUE, 0.0, pinned=True), BeamItem.make(STAR, 0.0, pinned=True)])
    scorer.start(beam, rows)
    return beam, rows


def _attach_vectors(beam: Beam, scorer: Scorer) -> Beam:
    Z = scorer.vectors(beam.step)
    if Z is None:
        return beam
    return Beam(beam.step, [BeamItem(it.z, it.key, it.step_score, it.digest, Z[r].copy(), it.pinned) for r, it in enumerate(beam.items)])


def search(example: Example, scorer: Scorer, cfg: DecoderConfig, T: int | None = None, teacher: bool = False) -> DecodeTrace:
    """Run the decoding loop for ``T`` steps (default ``cfg.T``).

    With ``teacher`` every gold t-high subtree is forced into beam t.  The
    run then stops at the gold height unless a larger ``T`` is given, in
    which case the remaining steps decode freely.
    """
    gold = level_slices(example.gold_balanced) if teacher else None
    if teacher:
        T = len(gold) - 1 if T is None else max(T, len(gold) - 1)
    T = cfg.T if T is None else T
    beam, rows = init_beam(example, scorer, cfg.K, gold[0] if gold else None)
    beams = [_attach_vectors(beam, scorer)]
    steps: list[StepRecord] = []
    trace = DecodeTrace(beams, steps)
    if gold:
        keys = {t.canonical_key for t in gold[0].values()}
        trace.gold_constants = [r for r, i in enumerate(rows) if example.schema.constants[i].canonical_key in keys]
    for t in range(T):
        frontier = Frontier(beam.types())
        if len(frontier) == 0:
            raise EmptyFrontier(f"no valid applications at step {t}")
        assert len(frontier) <= frontier_bound(len(beam))
        scores = scorer.frontier_scores(beam, frontier)
        logp = _log_softmax(scores)
        bkeys = beam.keys()

        def key_of(c, _keys=bkeys, _f=frontier):
            return _f.key(c, _keys)

        picked: list[tuple[int, str]] = []
        gold_pick = None
        cap = cfg.K
        if gold and t + 1 < len(gold):
            derivs = gold_derivations(beam, frontier, gold[t + 1], strict=True)
            gold_pick = {}
            for key, cands in derivs.items():
                best = max(cands, key=lambda c: (scores[c], -c))
                gold_pick[key] = best
                picked.append((best, key))
            cap = max(cfg.K, len(picked))
        picked += _select(scores, key_of, cap - len(picked), {k for _, k in picked})
        new_items = [(BeamItem.make(frontier.tree(c, beam), logp[c], key=k), c) for c, k in picked]
        new_items.sort(key=lambda p: (-p[0].step_score, p[0].digest))
        selected = [c for _, c in new_items]
        scorer.advance(beam, frontier, selected)
        beam = Beam(t + 1, [it for it, _ in new_items])
        beams.append(_attach_vectors(beam, scorer))
        steps.append(StepRecord(len(frontier), selected, [float(scores[c]) for c in selected], gold_pick))
    if gold:
        for t, lvl in enumerate(gold):
            missing = {g.canonical_key for g in lvl.values()} - trace.beam_keys(t)
            if missing:
                raise GoldNotInFrontier(f"gold trees missing from beam {t}: {sorted(missing)}")
    trace.pool = build_pool(trace)
    try:
        trace.chosen = rerank(trace, scorer, cfg)
    except EmptyPool as exc:
        trace.failure = str(exc)
    return trace


def build_pool(trace: DecodeTrace) -> list[PoolEntry]:
    """Distinct returnable trees across all beams, first occurrence kept."""
    seen: set[str] = set()
    pool = []
    for b in trace.beams:
        for r, it in enumerate(b.items):
            if it.z.out_type is SemanticType.RELATION and it.key not in seen:
                seen.add(it.key)
                pool.append(PoolEntry(b.step, r, it.z, it.key, it.digest))
    return pool


def rerank(trace: DecodeTrace, scorer: Scorer, cfg: DecoderConfig) -> RaTree:
    if cfg.no_reranker:
        last = [it for it in trace.beams[-1].items if it.z.out_type is SemanticType.RELATION]
        if not last:
            raise EmptyPool(f"no returnable tree at step {trace.T}")
        return min(last, key=lambda it: (-it.step_score, it.digest)).z
    if not trace.pool:
        raise EmptyPool("no returnable tree was produced")
    scores = scorer.rerank_scores(trace.pool)
    trace.rerank_scores = [float(s) for s in scores]
    best = min(range(len(trace.pool)), key=lambda m: (-scores[m], trace.pool[m].digest))
    return trace.pool[best].tree


def decode(example: Example, model: Model, cfg: DecoderConfig, inputs: EncoderInputs | None = None) -> DecodeTrace:
    """Free decoding with model parameters (no gradient recording)."""
    scorer = NeuralScorer(model, example, cfg, Tape(enabled=False), inputs)
    return search(example, scorer, cfg)


def oracle_decode(example: Example, cfg: DecoderConfig, seed: int = 0) -> DecodeTrace:
    return search(example, OracleScorer(example, seed=seed), cfg)


def chosen_or_stripped(trace: DecodeTrace) -> RaTree | None:
    return None if trace.chosen is None else strip_keep(trace.chosen)
