from dataclasses import replace

import numpy as np

from smbop.encoder import DESK_MODEL, ModelConfig, Vocab, embed, encode, prepare_inputs
from smbop.model import Model
from smbop.neural import Tape
from smbop.schema import Column, Example, Schema

SCHEMA = Schema(
    ("singer", "concert", "stadium"),
    (Column("id", 0), Column("name", 0), Column("age", 0, "number"), Column("singer_id", 1, "number"),
     Column("stadium_id", 1, "number"), Column("id", 2), Column("capacity", 2, "number")),
    frozenset({0, 5}),
    frozenset({(3, 0), (4, 5)}),
)
EX = Example.from_sql("names of singers older than 30 at a stadium", SCHEMA,
                      "SELECT name FROM singer WHERE age > 30")
CFG = ModelConfig(dim=16, heads=2, enc_layers=2, beam_layers=1, rerank_layers=1, seed=3)


def _model(cfg=CFG):
    return Model.create(cfg, Vocab.build([EX]))


def _encode(model, ex):
    tape = Tape(enabled=False)
    x, s = encode(model.store.bind(tape), tape, model.config, prepare_inputs(ex, model.vocab, model.config))
    return x.value, s.value


def test_output_shapes():
    x, s = _encode(_model(), EX)
    assert x.shape == (len(EX.utterance), 16)
    assert s.shape == (10, 16)
    assert np.all(np.isfinite(x)) and np.all(np.isfinite(s))


def test_no_layers_returns_embeddings():
    model = _model(replace(CFG, enc_layers=0))
    x, s = _encode(model, EX)
    tape = Tape(enabled=False)
    raw = embed(model.store.bind(tape), tape, prepare_inputs(EX, model.vocab, model.config)).value
    assert np.array_equal(np.concatenate([x, s]), raw)


def test_constant_embedding_is_mean_of_name_words_plus_type():
    model = _model(replace(CFG, enc_layers=0))
    _, s = _encode(model, EX)
    P = model.store
    words = [model.vocab.id(w) for w in ("concert", "stadium", "id")]  # concert.stadium_id
    expected = P["tok_emb"][words].mean(axis=0) + P["const_type_emb"][1]
    assert np.allclose(s[3 + 4], expected, atol=1e-15)
    table = P["tok_emb"][model.vocab.id("stadium")] + P["const_type_emb"][0]
    assert np.allclose(s[2], table, atol=1e-15)
    assert not np.allclose(s[3 + 0], s[3 + 5])  # singer.id and stadium.id differ


def test_permuting_columns_permutes_constant_vectors():
    perm = [6, 2, 0, 5, 1, 3, 4]  # new column k is old column perm[k]
    inv = {old: new for new, old in enumerate(perm)}
    cols = tuple(SCHEMA.columns[i] for i in perm)
    schema2 = Schema(SCHEMA.tables, cols, frozenset(inv[k] for k in SCHEMA.primary_keys),
                     frozenset((inv[a], inv[b]) for a, b in SCHEMA.foreign_keys))
    ex2 = Example(EX.utterance, schema2, EX.gold_sql, EX.gold_tree)
    model = _model()
    x1, s1 = _encode(model, EX)
    x2, s2 = _encode(model, ex2)
    assert np.allclose(x1, x2, atol=1e-12)
    assert np.allclose(s1[:3], s2[:3], atol=1e-12)
    assert np.allclose(s1[3:][perm], s2[3:], atol=1e-12)


def test_unknown_words_map_to_unk():
    v = Vocab(["a", "b"])
    assert v.id("zzz") == 0 and v.words[0] == "<unk>" and len(v) == 3


def test_desk_preset():
    assert DESK_MODEL.dim == 64 and DESK_MODEL.enc_layers == 2
    assert ModelConfig().dim == 300 and ModelConfig().heads == 3 and ModelConfig().beam_layers == 3
