"""Parameter layout of the full parser and checkpoint round-tripping."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .encoder import ModelConfig, Vocab, add_block_params, add_encoder_params
from .neural import ParamStore, load_checkpoint, save_checkpoint
from .ra import BINARY_OPS, UNARY_OPS


def add_decoder_params(store: ParamStore, cfg: ModelConfig):
    d = cfg.dim
    store.add("const.W", (d, d))
    store.add("const.w", (d,), fan_in=d)
    store.add("leaf_pinned", (2, d), fan_in=d)  # rows: value, *
    for layer in range(cfg.beam_layers):
        add_block_params(store, f"beam.{layer}", cfg, relations=False)
    store.add("beam.out", (d, d))
    # frontier scores start uniform; random bilinear scores drown the early signal
    store.add("score.Wu", (len(UNARY_OPS), d), "zeros")
    store.add("score.Wb", (len(BINARY_OPS), d, d), "zeros")
    store.add("op_emb", (len(UNARY_OPS) + len(BINARY_OPS), d), fan_in=d)
    store.add("lstm.Wx", (d, 4 * d))
    store.add("lstm.Wh", (d, 4 * d))
    store.add("lstm.b", (4 * d,), "zeros")
    store.add("tree.W", (d, 5 * d))
    store.add("tree.UL", (d, 5 * d))
    store.add("tree.UR", (d, 5 * d))
    store.add("tree.b", (5 * d,), "zeros")
    for layer in range(cfg.rerank_layers):
        add_block_params(store, f"rerank.{layer}", cfg, relations=False)
    store.add("rerank.out", (d, d))
    store.add("rerank_ffn.W", (d, d))
    store.add("rerank_ffn.w", (d,), fan_in=d)


@dataclass
class Model:
    config: ModelConfig
    vocab: Vocab
    store: ParamStore

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocab) -> "Model":
        store = ParamStore(config.seed)
        add_encoder_params(store, config, len(vocab))
        add_decoder_params(store, config)
        return cls(config, vocab, store)

    def save(self, path: str | Path, extra: dict | None = None):
        meta = {"model": self.config.to_json(), "vocab": list(self.vocab.words[1:])}
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        store, meta = load_checkpoint(path)
        return cls(ModelConfig(**meta["model"]), Vocab(meta["vocab"]), store)
