"""Joint utterance/schema encoder: trainable embeddings followed by
relation-aware self-attention layers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .neural import BLOCK_PARAMS, BoundParams, ParamStore, Tape, Tensor
from .schema import NUM_RELATIONS, Example, compute_relations, name_words

UNK = "<unk>"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 300
    heads: int = 3
    enc_layers: int = 3
    beam_layers: int = 3
    rerank_layers: int = 1
    ff_mult: int = 2
    max_positions: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        for name in ("enc_layers", "beam_layers", "rerank_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_json(self) -> dict:
        return dict(self.__dict__)


DESK_MODEL = ModelConfig(dim=64, heads=4, enc_layers=2, beam_layers=1, rerank_layers=1)


class Vocab:
    """Word → id map; id 0 is the unknown word."""

    def __init__(self, words: Iterable[str]):
        self.words: tuple[str, ...] = (UNK,) + tuple(sorted(set(words) - {UNK}))
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.words == other.words

    def id(self, word: str) -> int:
        return self.index.get(word, 0)

    @classmethod
    def build(cls, examples: Iterable[Example]) -> "Vocab":
        words: set[str] = set()
        for ex in examples:
            words.update(ex.utterance)
            for name in ex.schema.tables:
                words.update(name_words(name))
            for col in ex.schema.columns:
                words.update(name_words(col.name))
        return cls(words)


def add_block_params(store: ParamStore, prefix: str, cfg: ModelConfig, relations: bool):
    d, h = cfg.dim, cfg.heads
    ff = cfg.ff_mult * d
    for name in ("WQ", "WK", "WV"):
        store.add(f"{prefix}.{name}", (d, d))
    if relations:
        store.add(f"{prefix}.rK", (h, NUM_RELATIONS, d // h), fan_in=d // h)
        store.add(f"{prefix}.rV", (h, NUM_RELATIONS, d // h), fan_in=d // h)
    store.add(f"{prefix}.ln1_g", (d,), "ones")
    store.add(f"{prefix}.ln1_b", (d,), "zeros")
    store.add(f"{prefix}.W1", (d, ff))
    store.add(f"{prefix}.b1", (ff,), "zeros")
    store.add(f"{prefix}.W2", (ff, d))
    store.add(f"{prefix}.b2", (d,), "zeros")
    store.add(f"{prefix}.ln2_g", (d,), "ones")
    store.add(f"{prefix}.ln2_b", (d,), "zeros")


def add_encoder_params(store: ParamStore, cfg: ModelConfig, vocab_size: int):
    d = cfg.dim
    store.add("tok_emb", (vocab_size, d), fan_in=d)
    store.add("pos_emb", (cfg.max_positions, d), fan_in=d)
    store.add("const_type_emb", (2, d), fan_in=d)
    for layer in range(cfg.enc_layers):
        add_block_params(store, f"enc.{layer}", cfg, relations=True)


@dataclass
class EncoderInputs:
    """Parameter-independent arrays derived from one example."""

    token_ids: np.ndarray
    positions: np.ndarray
    const_words: np.ndarray  # (n_constants, vocab) row-averaging matrix
    const_types: np.ndarray  # 0 = table, 1 = column
    relations: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)

    @property
    def n_constants(self) -> int:
        return len(self.const_types)


def prepare_inputs(example: Example, vocab: Vocab, cfg: ModelConfig) -> EncoderInputs:
    schema = example.schema
    tokens = np.array([vocab.id(w) for w in example.utterance], dtype=np.int64)
    positions = np.minimum(np.arange(len(tokens)), cfg.max_positions - 1)
    # a column is named by its table and column words, e.g. ``flight.museum_id``
    # -> flight, museum, id; otherwise same-named columns start out identical
    names = [name_words(t) for t in schema.tables]
    names += [name_words(schema.tables[c.table]) + name_words(c.name) for c in schema.columns]
    M = np.zeros((len(names), len(vocab)))
    for row, words in enumerate(names):
        ids = [vocab.id(w) for w in words]
        for i in ids:
            M[row, i] += 1.0 / len(ids)
    types = np.array([0] * len(schema.tables) + [1] * len(schema.columns), dtype=np.int64)
    return EncoderInputs(tokens, positions, M, types, compute_relations(example.utterance, schema))


def embed(P: BoundParams, tape: Tape, inp: EncoderInputs) -> Tensor:
    """Raw input vectors ``[tokens ; constants]`` before any attention layer."""
    tok = tape.add(tape.rows(P["tok_emb"], inp.token_ids), tape.rows(P["pos_emb"], inp.positions))
    const = tape.add(tape.matmul_const(inp.const_words, P["tok_emb"]), tape.rows(P["const_type_emb"], inp.const_types))
    return tape.concat([tok, const])


def encode(P: BoundParams, tape: Tape, cfg: ModelConfig, inp: EncoderInputs) -> tuple[Tensor, Tensor]:
    """Contextualized utterance vectors ``x`` and DB-constant vectors ``s``."""
    u = embed(P, tape, inp)
    for layer in range(cfg.enc_layers):
        u = tape.rat_block(u, inp.relations, P.group(f"enc.{layer}", BLOCK_PARAMS), cfg.heads)
    nt = inp.n_tokens
    x = tape.rows(u, np.arange(nt))
    s = tape.rows(u, np.arange(nt, nt + inp.n_constants))
    return x, s
