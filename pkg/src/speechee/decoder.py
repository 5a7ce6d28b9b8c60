"""Structure decoder with entity-dictionary retrieval."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .constrain import Grammar, Pos
from .encoder import length_mask, sinusoids
from .schema import CLOSE, OPEN, RecordSet

log = logging.getLogger(__name__)

PAD, BOS, UNK = "<pad>", "<bos>", "<unk>"
SPECIALS = (PAD, BOS, UNK)
NO_ENTITY = "<e0>"


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        seen = dict.fromkeys(SPECIALS)
        for t in tokens:
            seen.setdefault(t)
        self.tokens = list(seen)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def __getitem__(self, tok) -> int:
        return self.index.get(tok, self.index[UNK])

    def encode(self, toks: Sequence[str]) -> list[int]:
        return [self[t] for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return 1

    @property
    def unk(self) -> int:
        return 2


@dataclass(frozen=True)
class EntityDictionary:
    """Entry 0 is the no-entity sentinel; entries 1..l are token tuples."""

    entries: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        entries = tuple(tuple(e) for e in self.entries)
        if not entries or entries[0] != (NO_ENTITY,):
            entries = ((NO_ENTITY,),) + entries
        if len(set(entries)) != len(entries):
            dup = [e for e, c in Counter(entries).items() if c > 1]
            raise ValueError(f"duplicate dictionary entries: {dup}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def index(self, mention: Sequence[str]) -> int:
        try:
            return self.entries.index(tuple(mention), 1)
        except ValueError:
            return 0

    def save(self, path) -> None:
        Path(path).write_text("".join(" ".join(e) + "\n" for e in self.entries[1:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EntityDictionary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(tuple(l.split()) for l in lines if l.strip()))


def build_entity_dictionary(train_records: Iterable[RecordSet]) -> EntityDictionary:
    """Argument mentions seen exactly once in training, sorted, after e0."""
    counts = Counter()
    for rs in train_records:
        for rec in rs.records:
            for _, mention in rec.arguments:
                counts[tuple(mention)] += 1
    once = sorted(m for m, c in counts.items() if c == 1)
    return EntityDictionary(tuple(once))


# ---------------------------------------------------------------------------
# retrieval attention and loss


@dataclass
class RetrievalDistribution:
    alpha: torch.Tensor
    p: torch.Tensor


def retrieval_scores(hd: torch.Tensor, he: torch.Tensor, W_q: torch.Tensor, W_k: torch.Tensor) -> RetrievalDistribution:
    """Scaled dot-product scores of decoder states against entity representations.

    ``hd``: (..., d); ``he``: (l+1, d_att); ``W_q``: (d_att, d); ``W_k``: (d_att, d_att).
    """
    d_att = he.shape[-1]
    if W_q.shape != (d_att, hd.shape[-1]) or W_k.shape[1] != d_att or W_k.shape[0] != d_att:
        raise ValueError(
            f"shape mismatch: hd {tuple(hd.shape)}, he {tuple(he.shape)}, "
            f"W_q {tuple(W_q.shape)}, W_k {tuple(W_k.shape)}"
        )
    alpha = (hd @ W_q.T) @ (he @ W_k.T).T / math.sqrt(d_att)
    return RetrievalDistribution(alpha, torch.softmax(alpha, dim=-1))


def retrieval_loss(p: torch.Tensor, gold: torch.Tensor, floor: float = 1e-12) -> torch.Tensor:
    """Negative log-likelihood of the gold entry, summed over steps.

    ``p``: (steps, l+1) probabilities; ``gold``: (steps,) indices.
    """
    pg = p.gather(-1, gold.long()[..., None])[..., 0]
    if (pg < floor).any():
        log.warning("retrieval probability of a gold entry below %g; clamping", floor)
    return -torch.log(pg.clamp(min=floor)).sum()


def mention_start_steps(tokens: Sequence[str], grammar: Grammar) -> list[int]:
    """Indices of target tokens that begin an argument mention."""
    out = []
    state = grammar.initial()
    for i, tok in enumerate(tokens):
        if state.pos is Pos.ARG_FIRST:
            out.append(i)
        state = grammar._step(state, tok)
    return out


def gold_retrieval_indices(tokens: Sequence[str], dictionary: EntityDictionary, grammar: Grammar) -> list[int]:
    """Per-step gold entry: j where an argument equal to entry j starts, else 0."""
    gold = [0] * len(tokens)
    for i in mention_start_steps(tokens, grammar):
        end = i
        while end < len(tokens) and tokens[end] not in (OPEN, CLOSE):
            end += 1
        gold[i] = dictionary.index(tokens[i:end])
    return gold


# ---------------------------------------------------------------------------
# modules


class DictionaryEncoder(nn.Module):
    """LSTM over an entry's token embeddings; the final hidden state represents it."""

    def __init__(self, embed: nn.Embedding, d_att: int):
        super().__init__()
        self.embed = embed
        self.lstm = nn.LSTM(embed.embedding_dim, d_att, batch_first=True)
        self.null = nn.Parameter(torch.randn(1, 1, embed.embedding_dim) * 0.02)

    def forward(self, entry_ids: list[list[int]]) -> torch.Tensor:
        """``entry_ids`` covers entries 1..l; row 0 is encoded from the sentinel embedding."""
        _, (h0, _) = self.lstm(self.null)
        rows = [h0[-1]]
        if entry_ids:
            lengths = torch.tensor([len(e) for e in entry_ids])
            padded = nn.utils.rnn.pad_sequence([torch.tensor(e) for e in entry_ids], batch_first=True)
            packed = nn.utils.rnn.pack_padded_sequence(
                self.embed(padded), lengths, batch_first=True, enforce_sorted=False
            )
            _, (h, _) = self.lstm(packed)
            rows.append(h[-1])
        return torch.cat(rows, dim=0)


class RetrievalHead(nn.Module):
    def __init__(self, d_model: int, d_att: int):
        super().__init__()
        self.W_q = nn.Linear(d_model, d_att, bias=False)
        self.W_k = nn.Linear(d_att, d_att, bias=False)

    def forward(self, hd: torch.Tensor, he: torch.Tensor) -> RetrievalDistribution:
        return retrieval_scores(hd, he, self.W_q.weight, self.W_k.weight)


@dataclass(frozen=True)
class DecoderConfig:
    model_dim: int = 256
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    d_att: int = 64


class StructureDecoder(nn.Module):
    """Causal transformer decoder cross-attending to (shrunk) speech states."""

    def __init__(self, vocab_size: int, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, cfg.model_dim, padding_idx=0)
        layer = nn.TransformerDecoderLayer(
            cfg.model_dim, cfg.heads, cfg.ff_mult * cfg.model_dim, cfg.dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.layers = nn.TransformerDecoder(layer, cfg.layers)
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.out = nn.Linear(cfg.model_dim, vocab_size)
        self.scale = math.sqrt(cfg.model_dim)

    def forward(self, ids: torch.Tensor, memory: torch.Tensor, memory_lengths: torch.Tensor | None = None):
        """Hidden states (B, K, d) and logits (B, K, V) for every prefix position."""
        K = ids.shape[1]
        x = self.embed(ids) * self.scale + sinusoids(K, self.cfg.model_dim, memory.dtype).to(ids.device)
        causal = torch.triu(torch.full((K, K), float("-inf"), dtype=memory.dtype), diagonal=1)
        mem_pad = None if memory_lengths is None else ~length_mask(memory_lengths, memory.shape[1])
        h = self.layers(x, memory, tgt_mask=causal, tgt_is_causal=True, memory_key_padding_mask=mem_pad)
        h = self.norm(h)
        return h, self.out(h)

    def decode_step(self, prefix_ids: torch.Tensor, memory: torch.Tensor, memory_lengths=None):
        """State and logits for the next token after ``prefix_ids`` (which start with BOS)."""
        h, logits = self.forward(prefix_ids, memory, memory_lengths)
        return h[:, -1], logits[:, -1]


# ---------------------------------------------------------------------------
# emission policy


@dataclass(frozen=True)
class EmitPolicy:
    threshold: float = 0.5


def emit(gen_logits: torch.Tensor, p: torch.Tensor | None, at_mention_start: bool,
         allowed: Sequence[int] | None = None, policy: EmitPolicy = EmitPolicy()):
    """Choose the next emission.

    Returns ``("entity", j)`` when retrieval wins at a mention start (entry
    ``j`` is more likely than e0 and above the threshold), otherwise
    ``("token", id)`` for the best allowed generation token.
    """
    if at_mention_start and p is not None and p.numel() > 1:
        j = int(torch.argmax(p[1:])) + 1
        if p[j] > p[0] and p[j] > policy.threshold:
            return "entity", j
    scores = gen_logits
    if allowed is not None:
        idx = torch.as_tensor(list(allowed), dtype=torch.long)
        return "token", int(idx[int(torch.argmax(scores[idx]))])
    return "token", int(torch.argmax(scores))
