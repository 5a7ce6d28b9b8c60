"""Two-step baseline: a simulated, error-prone ASR followed by a text extractor."""

from __future__ import annotations

import zlib
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..corpus import CorpusExample, Lexicon, chord_plan, default_lexicon
from ..decoder import Vocab
from ..metrics import MetricReport
from .config import TrainConfig
from .train import Checkpoint, evaluate, train


def acoustic_confusions(lexicon: Lexicon, neighbours: int = 2) -> dict[str, tuple[str, ...]]:
    """Confusion table: homophones first, then the closest-sounding other words.

    Closeness is the mean absolute log-frequency gap between two words'
    chord plans, so every word gets at least ``neighbours`` candidates.
    """
    keys = sorted(set(lexicon.keys.values()))
    plans = {k: np.log(chord_plan(k)) for k in keys}
    table = {}
    for word in sorted(lexicon.keys):
        key = lexicon.key(word)
        ranked = sorted((k for k in keys if k != key), key=lambda k: (float(np.abs(plans[k] - plans[key]).mean()), k))
        near = [w for k in ranked[:neighbours] for w in lexicon.groups[k]]
        table[word] = lexicon.homophones(word) + tuple(near)
    return table


def asr_corrupt(transcript: Sequence[str], confusion_table: Mapping[str, Sequence[str]], error_rate: float,
                seed: int) -> tuple[str, ...]:
    """Replace each word, independently with probability ``error_rate``, by a confusable word.

    Words missing from the table are never changed, but still consume their
    random draw so that outcomes for the other words do not depend on it.
    """
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError(f"error_rate must lie in [0, 1], got {error_rate}")
    rng = np.random.default_rng(seed)
    out = []
    for word in transcript:
        hit = rng.random() < error_rate
        pick = rng.random()
        options = confusion_table.get(word, ())
        if hit and options:
            out.append(options[int(pick * len(options))])
        else:
            out.append(word)
    return tuple(out)


def corrupt_corpus(examples: Sequence[CorpusExample], confusion_table, error_rate: float,
                   seed: int) -> dict[str, tuple[str, ...]]:
    """ASR output per clip id; each clip gets its own stream derived from ``seed``."""
    return {
        ex.id: asr_corrupt(ex.transcript, confusion_table, error_rate, seed * 1_000_003 + zlib.crc32(ex.id.encode()))
        for ex in examples
    }


def source_vocab(lexicon: Lexicon | None = None) -> Vocab:
    return Vocab(sorted((lexicon or default_lexicon()).keys))


def train_text_model(corpus, schema, cfg: TrainConfig, lexicon: Lexicon | None = None,
                     transcripts=None, progress: bool = False) -> Checkpoint:
    """Text extractor over word embeddings; clean transcripts unless ``transcripts`` is given."""
    return train(corpus, schema, cfg, source="text", source_vocab=source_vocab(lexicon),
                 transcripts=transcripts, progress=progress)


def pipeline_run(corpus: Sequence[CorpusExample], text_model: Checkpoint | str | Path | None, error_rate: float,
                 seed: int = 0, split: str = "test", confusion_table=None) -> MetricReport:
    """Transcribe ``split`` with the simulated ASR, then extract with the text model."""
    if text_model is None:
        raise ValueError("pipeline needs a trained text model")
    if not isinstance(text_model, Checkpoint):
        path = Path(text_model)
        if not path.exists():
            raise FileNotFoundError(f"text model checkpoint not found: {path}")
        text_model = Checkpoint.load(path)
    if text_model.model.cfg.source != "text":
        raise ValueError("pipeline needs a text-source model")
    table = confusion_table if confusion_table is not None else acoustic_confusions(default_lexicon())
    examples = [ex for ex in corpus if ex.split == split]
    transcripts = corrupt_corpus(examples, table, error_rate, seed)
    return evaluate(text_model, corpus, split, transcripts=transcripts)
