"""End-to-end speech (or text) to record-structure model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .constrain import Grammar, Splice, constrained_generate
from .contrastive import pool
from .decoder import (
    BOS,
    DecoderConfig,
    DictionaryEncoder,
    EmitPolicy,
    EntityDictionary,
    RetrievalHead,
    StructureDecoder,
    Vocab,
    emit,
)
from .encoder import EncoderConfig, SpeechEncoder, TextEncoder
from .schema import CLOSE, OPEN, EventSchema
from .shrink import ShrinkConfig, ShrinkingUnit


@dataclass(frozen=True)
class ModelConfig:
    source: str = "speech"  # or "text"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    shrink: ShrinkConfig = field(default_factory=ShrinkConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    use_dictionary: bool = True
    retrieval_threshold: float = 0.5
    max_len: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        sub = {"encoder": EncoderConfig, "shrink": ShrinkConfig, "decoder": DecoderConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name in obj:
                kwargs[f.name] = sub[f.name](**obj[f.name]) if f.name in sub else obj[f.name]
        return cls(**kwargs)


class Seq2Struct(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Vocab,
        schema: EventSchema,
        dictionary: EntityDictionary | None = None,
        source_vocab: Vocab | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.schema = schema
        self.source_vocab = source_vocab
        if cfg.source == "speech":
            self.encoder = SpeechEncoder(cfg.encoder)
        elif cfg.source == "text":
            if source_vocab is None:
                raise ValueError("text source needs a source vocabulary")
            self.encoder = TextEncoder(len(source_vocab), cfg.encoder)
        else:
            raise ValueError(f"unknown source {cfg.source!r}")
        self.shrink = ShrinkingUnit(cfg.encoder.model_dim, cfg.shrink) if cfg.shrink.layers else None
        self.decoder = StructureDecoder(len(vocab), cfg.decoder)
        self.dictionary = dictionary if cfg.use_dictionary else None
        if self.dictionary is not None:
            self.dict_encoder = DictionaryEncoder(self.decoder.embed, cfg.decoder.d_att)
            self.retrieval = RetrievalHead(cfg.decoder.model_dim, cfg.decoder.d_att)
        mentions = [t for t in vocab.tokens if t not in (OPEN, CLOSE) and not t.startswith("<")]
        self.grammar = Grammar(schema, mentions)

    # -- forward pieces ---------------------------------------------------

    def encode(self, src: torch.Tensor, lengths: torch.Tensor):
        """Encoder states (for pooling) and decoder memory (after shrinking)."""
        states = self.encoder(src, lengths)
        memory, mem_len = states.h, states.lengths
        if self.shrink is not None:
            memory, mem_len = self.shrink(memory, mem_len)
        return states, memory, mem_len

    def entity_states(self) -> torch.Tensor | None:
        if self.dictionary is None:
            return None
        ids = [self.vocab.encode(e) for e in self.dictionary.entries[1:]]
        return self.dict_encoder(ids)

    def forward(self, src, lengths, dec_in):
        states, memory, mem_len = self.encode(src, lengths)
        hd, logits = self.decoder(dec_in, memory, mem_len)
        out = {"logits": logits, "hd": hd, "pooled": pool(states.h, states.lengths)}
        he = self.entity_states()
        if he is not None:
            out["retrieval"] = self.retrieval(hd, he)
        return out

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def generate(self, src, lengths, constrained: bool = True, max_len: int | None = None) -> list[list[str]]:
        was_training = self.training
        self.eval()
        try:
            _, memory, mem_len = self.encode(src, lengths)
            he = self.entity_states()
            return self._generate(memory, mem_len, he, constrained, max_len or self.cfg.max_len)
        finally:
            self.train(was_training)

    def _prefix_ids(self, prefixes: Sequence[Sequence[str]]) -> torch.Tensor:
        width = max(len(p) for p in prefixes) + 1
        ids = torch.zeros(len(prefixes), width, dtype=torch.long)
        lens = []
        for b, p in enumerate(prefixes):
            row = [self.vocab.bos] + self.vocab.encode(p)
            ids[b, : len(row)] = torch.tensor(row)
            lens.append(len(row))
        return ids, torch.tensor(lens)

    def _states(self, prefixes, memory, mem_len):
        ids, lens = self._prefix_ids(prefixes)
        hd, logits = self.decoder(ids, memory, mem_len)
        last = lens - 1
        rows = torch.arange(len(prefixes))
        return hd[rows, last], logits[rows, last]

    def _generate(self, memory, mem_len, he, constrained, max_len):
        B = memory.shape[0]
        policy = EmitPolicy(self.cfg.retrieval_threshold)

        def step_fn(prefixes):
            _, logits = self._states(prefixes, memory, mem_len)
            return logits.double().numpy()

        retrieve_fn = None
        if he is not None:
            def retrieve_fn(prefixes, batch_idx):
                idx = torch.as_tensor(batch_idx)
                hd, logits = self._states(prefixes, memory[idx], mem_len[idx])
                dist = self.retrieval(hd, he)
                picks = []
                for b in range(len(batch_idx)):
                    kind, j = emit(logits[b], dist.p[b], True, policy=policy)
                    picks.append(Splice(self.dictionary.entries[j]) if kind == "entity" else None)
                return picks

        return constrained_generate(
            step_fn, self.grammar, self.vocab.tokens, max_len,
            batch_size=B, retrieve_fn=retrieve_fn, constrained=constrained,
        )

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def random_step_fn(vocab_size: int, seed: int):
    """Logit source with no model behind it, for grammar soundness checks."""
    rng = np.random.default_rng(seed)

    def step(prefixes):
        return rng.standard_normal((len(prefixes), vocab_size))

    return step
