"""Training loop, evaluation driver and checkpoints."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..contrastive import contrastive_loss
from ..corpus import CorpusExample, word_spans
from ..decoder import EntityDictionary, Vocab, build_entity_dictionary, gold_retrieval_indices
from ..encoder import EncoderConfig, extract_features, frame_count, stem_length
from ..metrics import MetricReport, score
from ..model import Seq2Struct
from ..schema import CLOSE, OPEN, EventSchema, RecordSet, linearize, normalize, parse
from .config import TrainConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Item:
    id: str
    src: np.ndarray  # (T0, C) log-mel, or (n,) word ids
    tokens: list[str]
    gold: RecordSet
    labels: frozenset
    duration: float = 0.0
    align: tuple = ()  # word (or None for silence) under each stem frame


@dataclass
class Checkpoint:
    model: Seq2Struct
    train_cfg: TrainConfig
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev: float = float("nan")

    def save(self, path) -> None:
        m = self.model
        torch.save(
            {
                "state": m.state_dict(),
                "model_cfg": m.cfg.to_dict(),
                "train_cfg": self.train_cfg.to_dict(),
                "vocab": m.vocab.tokens,
                "source_vocab": m.source_vocab.tokens if m.source_vocab else None,
                "schema": m.schema.to_dict(),
                "dictionary": [list(e) for e in m.dictionary.entries[1:]] if m.dictionary else None,
                "log": self.log,
                "best_epoch": self.best_epoch,
                "best_dev": self.best_dev,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from ..model import ModelConfig

        obj = torch.load(path, weights_only=False)
        dictionary = EntityDictionary(tuple(map(tuple, obj["dictionary"]))) if obj["dictionary"] is not None else None
        model = Seq2Struct(
            ModelConfig.from_dict(obj["model_cfg"]),
            Vocab(obj["vocab"]),
            EventSchema.from_dict(obj["schema"]),
            dictionary,
            Vocab(obj["source_vocab"]) if obj["source_vocab"] else None,
        )
        model.load_state_dict(obj["state"])
        model.eval()
        return cls(model, TrainConfig(**obj["train_cfg"]), obj["log"], obj["best_epoch"], obj["best_dev"])


# ---------------------------------------------------------------------------
# data


_FEATURE_CACHE: dict = {}


def features(ex: CorpusExample, enc: EncoderConfig) -> np.ndarray:
    key = (ex.id, hash(ex.clip.samples.tobytes()), enc.mel_channels, enc.window_ms, enc.hop_ms)
    hit = _FEATURE_CACHE.get(key)
    if hit is None:
        hit = _FEATURE_CACHE[key] = extract_features(ex.clip, enc).frames.astype(np.float32)
    return hit


def speech_items(examples: Sequence[CorpusExample], enc: EncoderConfig) -> list[Item]:
    return [
        Item(ex.id, features(ex, enc), linearize(ex.gold), ex.gold, ex.gold.event_types, ex.clip.duration,
             stem_alignment(ex, enc))
        for ex in examples
    ]


def stem_alignment(ex: CorpusExample, enc: EncoderConfig) -> tuple:
    """The word under the centre of each stem frame, None in gaps."""
    hop = int(round(ex.clip.sample_rate * enc.hop_ms / 1000))
    n_stem = stem_length(frame_count(len(ex.clip.samples), hop))
    spans = word_spans(ex.transcript, ex.voice, ex.clip.sample_rate)
    out = []
    for t in range(n_stem):
        centre = 2 * t * hop + hop // 2
        out.append(next((w for w, (a, b) in zip(ex.transcript, spans) if a <= centre < b), None))
    return tuple(out)


def text_items(examples: Sequence[CorpusExample], source_vocab: Vocab, transcripts=None) -> list[Item]:
    out = []
    for ex in examples:
        words = transcripts[ex.id] if transcripts is not None else ex.transcript
        ids = np.asarray(source_vocab.encode(words), dtype=np.int64)
        out.append(Item(ex.id, ids, linearize(ex.gold), ex.gold, ex.gold.event_types, ex.clip.duration))
    return out


def target_vocab(schema: EventSchema, train: Sequence[CorpusExample], dictionary: EntityDictionary | None) -> Vocab:
    tokens = [OPEN, CLOSE, *schema.event_types]
    for etype in schema.event_types:
        tokens += schema.roles_by_type[etype]
    for ex in train:
        tokens += linearize(ex.gold)
    if dictionary is not None:
        for e in dictionary.entries[1:]:
            tokens += e
    return Vocab(tokens)


def collate(items: Sequence[Item], model: Seq2Struct):
    B = len(items)
    lengths = torch.tensor([len(it.src) for it in items])
    T = int(lengths.max())
    if model.cfg.source == "speech":
        src = torch.zeros(B, T, items[0].src.shape[1])
        for b, it in enumerate(items):
            src[b, : len(it.src)] = torch.from_numpy(it.src)
    else:
        src = torch.zeros(B, T, dtype=torch.long)
        for b, it in enumerate(items):
            src[b, : len(it.src)] = torch.from_numpy(it.src)
    K = max(len(it.tokens) for it in items)
    dec_in = torch.zeros(B, K, dtype=torch.long)
    target = torch.zeros(B, K, dtype=torch.long)
    rgold = torch.zeros(B, K, dtype=torch.long)
    for b, it in enumerate(items):
        ids = model.vocab.encode(it.tokens)
        dec_in[b, : len(ids)] = torch.tensor([model.vocab.bos] + ids[:-1])
        target[b, : len(ids)] = torch.tensor(ids)
        if model.dictionary is not None:
            rgold[b, : len(ids)] = torch.tensor(gold_retrieval_indices(it.tokens, model.dictionary, model.grammar))
    return src, lengths, dec_in, target, rgold, [it.labels for it in items]


# ---------------------------------------------------------------------------
# losses and training


def batch_losses(model: Seq2Struct, batch, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    src, lengths, dec_in, target, rgold, labels = batch
    out = model(src, lengths, dec_in)
    mask = target != model.vocab.pad
    losses = {"gen": F.cross_entropy(out["logits"][mask], target[mask])}
    if "retrieval" in out:
        # mean per-step NLL, i.e. the summed retrieval loss over the step count
        logp = torch.log_softmax(out["retrieval"].alpha, dim=-1)
        losses["ed"] = -logp[mask].gather(-1, rgold[mask][:, None]).mean()
    if not cfg.no_cl and model.cfg.source == "speech":
        n_anchor = _anchors(labels)
        cl = contrastive_loss(out["pooled"], labels, cfg.tau)
        losses["cl"] = cl / max(n_anchor, 1)
    return losses


def _anchors(labels) -> int:
    n = 0
    for i, a in enumerate(labels):
        if any(a & b for j, b in enumerate(labels) if j != i):
            n += 1
    return n


def _drop_inputs(batch, vocab: Vocab, rate: float, gen: torch.Generator):
    src, lengths, dec_in, *rest = batch
    hit = (torch.rand(dec_in.shape, generator=gen) < rate) & (dec_in != vocab.pad) & (dec_in != vocab.bos)
    return (src, lengths, dec_in.masked_fill(hit, vocab.unk), *rest)


def total_loss(losses: dict, cfg: TrainConfig) -> torch.Tensor:
    total = losses["gen"]
    if "ed" in losses:
        total = total + cfg.lambda_ed * losses["ed"]
    if "cl" in losses:
        total = total + cfg.lambda_cl * losses["cl"]
    return total


def pretrain_encoder(model: Seq2Struct, items: Sequence[Item], cfg: TrainConfig, gen: torch.Generator,
                     progress: bool = False) -> list[float]:
    """Warm up the speech encoder by classifying the word under each frame.

    The synthetic corpus knows where every word sits, so this stands in for
    starting from a pretrained acoustic encoder. A throwaway linear head maps
    encoder states to the train word inventory (index 0 is silence); only the
    encoder keeps what it learned.
    """
    words = sorted({w for it in items for w in it.align if w is not None})
    index = {w: i + 1 for i, w in enumerate(words)}
    head = torch.nn.Linear(model.cfg.encoder.model_dim, len(words) + 1)
    params = list(model.encoder.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    history = []
    for epoch in range(cfg.pretrain_epochs):
        order = torch.randperm(len(items), generator=gen).tolist()
        total, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [items[i] for i in order[start : start + cfg.batch_size]]
            src, lengths, *_ = collate(chunk, model)
            states = model.encoder(src, lengths)
            target = torch.full(states.h.shape[:2], -100, dtype=torch.long)
            for b, it in enumerate(chunk):
                target[b, : len(it.align)] = torch.tensor([index.get(w, 0) if w else 0 for w in it.align])
            loss = F.cross_entropy(head(states.h).flatten(0, 1), target.flatten(), ignore_index=-100)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            total += float(loss.detach())
            n += 1
        history.append(total / n)
        if progress:
            log.info("pretrain epoch %d frame loss %.4f", epoch + 1, history[-1])
    return history


def set_seed(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(
    schema: EventSchema,
    train: Sequence[CorpusExample],
    cfg: TrainConfig,
    dictionary: EntityDictionary | None = None,
    source: str = "speech",
    source_vocab: Vocab | None = None,
) -> Seq2Struct:
    if dictionary is None and not cfg.no_ed and source == "speech":
        dictionary = build_entity_dictionary(ex.gold for ex in train)
    vocab = target_vocab(schema, train, dictionary)
    set_seed(cfg.seed)
    return Seq2Struct(cfg.model_config(source), vocab, schema, dictionary, source_vocab)


def train(
    corpus: Sequence[CorpusExample],
    schema: EventSchema,
    cfg: TrainConfig,
    dictionary: EntityDictionary | None = None,
    source: str = "speech",
    source_vocab: Vocab | None = None,
    transcripts: dict | None = None,
    progress: bool = False,
) -> Checkpoint:
    """Train on the train split, keep the best dev-Avg checkpoint.

    ``transcripts`` (id -> words) replaces the gold transcripts for the text
    source, e.g. with ASR output.
    """
    train_ex = [ex for ex in corpus if ex.split == "train"]
    dev_ex = [ex for ex in corpus if ex.split == "dev"]
    if not train_ex:
        raise ValueError("corpus has no train split")
    model = build_model(schema, train_ex, cfg, dictionary, source, source_vocab)
    if source == "speech":
        train_items = speech_items(train_ex, model.cfg.encoder)
        dev_items = speech_items(dev_ex, model.cfg.encoder)
        frames = np.concatenate([it.src for it in train_items])
        std = frames.std(axis=0)
        model.encoder.feat_mean.copy_(torch.from_numpy(frames.mean(axis=0)))
        model.encoder.feat_std.copy_(torch.from_numpy(np.where(std > 0, std, 1.0)))
    else:
        train_items = text_items(train_ex, source_vocab, transcripts)
        dev_items = text_items(dev_ex, source_vocab, transcripts)

    gen = torch.Generator().manual_seed(cfg.seed)
    pre_log = []
    if cfg.pretrain_epochs and source == "speech":
        pre_log = pretrain_encoder(model, train_items, cfg, gen, progress)

    enc_params = list(model.encoder.parameters())
    enc_ids = {id(p) for p in enc_params}
    groups = [
        {"params": enc_params, "lr": cfg.lr * cfg.encoder_lr_scale},
        {"params": [p for p in model.parameters() if id(p) not in enc_ids], "lr": cfg.lr},
    ]
    opt = torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_items) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    def lr_at(step):
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        span = max(total_steps - cfg.warmup_steps, 1)
        return max(0.0, 1.0 - (step - cfg.warmup_steps) / span)

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    history: list[dict] = [{"epoch": 0, "loss_align": v, "pretrain_epoch": i + 1} for i, v in enumerate(pre_log)]
    best_state, best_dev, best_epoch = None, -1.0, 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.time()
        order = torch.randperm(len(train_items), generator=gen).tolist()
        sums: dict[str, float] = {}
        for start in range(0, len(order), cfg.batch_size):
            batch = collate([train_items[i] for i in order[start : start + cfg.batch_size]], model)
            if cfg.token_dropout:
                batch = _drop_inputs(batch, model.vocab, cfg.token_dropout, gen)
            losses = batch_losses(model, batch, cfg)
            loss = total_loss(losses, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss is {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            sched.step()
            step += 1
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(loss.detach())
        entry = {"epoch": epoch, **{f"loss_{k}": v / steps_per_epoch for k, v in sums.items()}}
        if dev_items and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report, _ = evaluate_items(model, dev_items)
            entry.update({f"dev_{k}": v for k, v in report.summary().items()})
            if report.avg > best_dev:
                best_dev, best_epoch = report.avg, epoch
                best_state = copy.deepcopy(model.state_dict())
        entry["seconds"] = round(time.time() - t0, 2)
        history.append(entry)
        if progress:
            log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in entry.items() if k != "epoch"})
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = cfg.epochs
    model.eval()
    return Checkpoint(model, cfg, history, best_epoch, best_dev)


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict_items(model: Seq2Struct, items: Sequence[Item], constrained: bool = True,
                  batch_size: int = 50) -> dict[str, tuple[list[str], RecordSet, int]]:
    out = {}
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        src, lengths, *_ = collate(chunk, model)
        seqs = model.generate(src, lengths, constrained=constrained)
        for it, seq in zip(chunk, seqs):
            rs, dropped = parse(seq, model.schema, mode="lenient")
            out[it.id] = (seq, normalize(rs), dropped)
    return out


def evaluate_items(model, items, constrained: bool = True) -> tuple[MetricReport, dict]:
    if not items:
        raise ValueError("nothing to evaluate: the split is empty")
    preds = predict_items(model, items, constrained)
    golds = {it.id: it.gold for it in items}
    single = len(model.schema.event_types) == 1
    return score({k: v[1] for k, v in preds.items()}, golds, single_type=single or None), preds


def items_for(model: Seq2Struct, examples: Sequence[CorpusExample], transcripts=None) -> list[Item]:
    if model.cfg.source == "speech":
        return speech_items(examples, model.cfg.encoder)
    return text_items(examples, model.source_vocab, transcripts)


def evaluate(ckpt: Checkpoint | Seq2Struct, corpus: Sequence[CorpusExample], split: str = "test",
             constrained: bool = True, transcripts=None) -> MetricReport:
    model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    examples = [ex for ex in corpus if ex.split == split]
    if not examples:
        raise ValueError(f"split {split!r} is empty")
    return evaluate_items(model, items_for(model, examples, transcripts), constrained)[0]
