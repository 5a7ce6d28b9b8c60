"""Post-training analyses: embedding separation by event type and duration buckets."""

from __future__ import annotations

import logging
from collections import Counter
from typing import Sequence

import numpy as np
import torch
from sklearn.metrics import silhouette_score

from ..corpus import CorpusExample
from ..metrics import MetricReport
from .train import Checkpoint, collate, evaluate_items, items_for

log = logging.getLogger(__name__)


def silhouette(embeddings: np.ndarray, labels: Sequence[str]) -> float:
    """Mean silhouette under ``labels``; classes with one member are dropped with a warning."""
    labels = list(labels)
    counts = Counter(labels)
    lonely = sorted(c for c, n in counts.items() if n < 2)
    if lonely:
        log.warning("excluding singleton classes from the separation metric: %s", lonely)
    keep = [i for i, l in enumerate(labels) if counts[l] >= 2]
    kept = sorted({labels[i] for i in keep})
    if len(kept) < 2:
        raise ValueError("separation needs at least two event types with two or more clips each")
    return float(silhouette_score(np.asarray(embeddings)[keep], [labels[i] for i in keep]))


@torch.no_grad()
def pooled_embeddings(model, examples: Sequence[CorpusExample], batch_size: int = 50) -> np.ndarray:
    from ..contrastive import pool

    model.eval()
    items = items_for(model, examples)
    rows = []
    for start in range(0, len(items), batch_size):
        src, lengths, *_ = collate(items[start : start + batch_size], model)
        states = model.encoder(src, lengths)
        rows.append(pool(states.h, states.lengths).numpy())
    return np.concatenate(rows)


def separation_metric(ckpt: Checkpoint, examples: Sequence[CorpusExample]) -> float:
    """Silhouette of pooled clip embeddings, labelled by event type.

    Only clips with exactly one event type take part, since a clip carrying
    two types has no single label.
    """
    model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    chosen = [ex for ex in examples if len(ex.gold.event_types) == 1]
    if not chosen:
        raise ValueError("no single-type clips to evaluate")
    labels = [next(iter(ex.gold.event_types)) for ex in chosen]
    return silhouette(pooled_embeddings(model, chosen), labels)


def duration_buckets(examples: Sequence[CorpusExample], n: int = 3) -> list[list[CorpusExample]]:
    """Split clips into ``n`` equal-count buckets from shortest to longest."""
    if n < 1:
        raise ValueError("need at least one bucket")
    ordered = sorted(examples, key=lambda ex: (ex.clip.duration, ex.id))
    return [[ordered[i] for i in idx] for idx in np.array_split(np.arange(len(ordered)), n)]


def bucket_reports(ckpt: Checkpoint, examples: Sequence[CorpusExample], n: int = 3) -> list[tuple[float, float, MetricReport]]:
    """(shortest, longest duration, report) per duration bucket."""
    model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    out = []
    for bucket in duration_buckets(examples, n):
        report, _ = evaluate_items(model, items_for(model, bucket))
        out.append((bucket[0].clip.duration, bucket[-1].clip.duration, report))
    return out


def length_drop(reports: Sequence[tuple[float, float, MetricReport]]) -> float:
    """Avg F1 of the shortest bucket minus that of the longest."""
    return reports[0][2].avg - reports[-1][2].avg
