"""Deterministic synthetic speech corpus.

Every lexicon word has a pronunciation key; the toy vocoder renders a key as
two short sinusoid chords. Homophones share a key, so their clean audio is
identical and only context can tell them apart.
"""

from __future__ import annotations

import json
import logging
import wave
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .schema import EventRecord, EventSchema, RecordSet

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
NOISE_KINDS = ("quiet", "babble", "tonal", "white")
SPLITS = ("train", "dev", "test")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class AcousticClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise CorpusError(f"clip {self.id!r}: samples must be a non-empty 1-D array")
        if np.abs(samples).max() > 1.0:
            raise CorpusError(f"clip {self.id!r}: samples outside [-1, 1]")
        if self.sample_rate <= 0:
            raise CorpusError(f"clip {self.id!r}: sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class VoiceProfile:
    base_frequency: float = 150.0
    # 10 ms frames per word
    speaking_rate: float = 12.0
    amplitude: float = 0.5

    def __post_init__(self):
        if min(self.base_frequency, self.speaking_rate, self.amplitude) <= 0:
            raise CorpusError(f"voice parameters must be positive: {self}")


@dataclass(frozen=True)
class NoiseProfile:
    kind: str = "quiet"
    snr_db: float = 20.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise CorpusError(f"unknown noise kind {self.kind!r}")
        if not np.isfinite(self.snr_db):
            raise CorpusError("snr_db must be finite")


@dataclass
class CorpusExample:
    id: str
    clip: AcousticClip
    transcript: tuple[str, ...]
    gold: RecordSet
    split: str
    voice: VoiceProfile = field(default_factory=VoiceProfile)
    noise: NoiseProfile = field(default_factory=NoiseProfile)


# ---------------------------------------------------------------------------
# lexicon and vocoder


class Lexicon:
    """Word -> pronunciation key, plus homophone groups derived from shared keys."""

    def __init__(self, pronunciations: Mapping[str, str]):
        self.keys = dict(pronunciations)
        groups: dict[str, list[str]] = {}
        for word, key in self.keys.items():
            groups.setdefault(key, []).append(word)
        self.groups = {k: tuple(sorted(ws)) for k, ws in groups.items()}

    def __contains__(self, word):
        return word in self.keys

    def __len__(self):
        return len(self.keys)

    def key(self, word: str) -> str:
        return self.keys[word]

    def homophones(self, word: str) -> tuple[str, ...]:
        return tuple(w for w in self.groups[self.keys[word]] if w != word)

    def confusion_table(self) -> dict[str, tuple[str, ...]]:
        return {w: self.homophones(w) for w in self.keys if self.homophones(w)}


# log-spaced partial grid; each key picks 3 partials per half-word
_GRID = np.geomspace(300.0, 3600.0, 16)


def chord_plan(key: str) -> np.ndarray:
    """Partial frequencies, shape (2, 3), for a pronunciation key."""
    rng = np.random.default_rng(zlib.crc32(key.encode("utf-8")))
    return np.stack([np.sort(rng.choice(_GRID, size=3, replace=False)) for _ in range(2)])


def _segment(key: str, voice: VoiceProfile, sample_rate: int) -> np.ndarray:
    n = int(round(voice.speaking_rate * 0.010 * sample_rate))
    half = n // 2
    pitch = voice.base_frequency / 150.0
    out = np.zeros(n)
    for i, freqs in enumerate(chord_plan(key)):
        lo, hi = (0, half) if i == 0 else (half, n)
        t = np.arange(hi - lo) / sample_rate
        out[lo:hi] = np.sin(2 * np.pi * np.outer(t, freqs * pitch)).sum(axis=1) / 3.0
    ramp = min(int(0.005 * sample_rate), n // 4)
    if ramp:
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        out *= env
    return out


def render_clean(
    transcript: Sequence[str], lexicon: Lexicon, voice: VoiceProfile, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    missing = [w for w in transcript if w not in lexicon]
    if missing:
        raise CorpusError(f"out-of-lexicon words: {missing}")
    gap = np.zeros(int(0.02 * sample_rate))
    pieces = [gap]
    for word in transcript:
        pieces += [_segment(lexicon.key(word), voice, sample_rate), gap]
    return voice.amplitude * np.concatenate(pieces)


def word_spans(transcript: Sequence[str], voice: VoiceProfile,
               sample_rate: int = SAMPLE_RATE) -> list[tuple[int, int]]:
    """Sample ranges ``[start, end)`` of each word in a rendered clip."""
    n = int(round(voice.speaking_rate * 0.010 * sample_rate))
    gap = int(0.02 * sample_rate)
    return [(gap + i * (n + gap), gap + i * (n + gap) + n) for i in range(len(transcript))]


def make_noise(kind: str, n: int, rng: np.random.Generator, lexicon: Lexicon | None = None,
               sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "tonal":
        t = np.arange(n) / sample_rate
        f0 = rng.uniform(100.0, 250.0)
        return sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k for k in (1, 2, 3))
    if kind == "babble":
        keys = sorted(set(lexicon.keys.values())) if lexicon else ["babble"]
        out = np.zeros(n)
        for _ in range(6):
            voice = VoiceProfile(rng.uniform(110, 200), rng.uniform(9, 15), 1.0)
            pos = 0
            while pos < n:
                seg = _segment(keys[rng.integers(len(keys))], voice, sample_rate)
                end = min(n, pos + seg.size)
                out[pos:end] += seg[: end - pos]
                pos = end + int(rng.integers(0, sample_rate // 20))
        return out
    raise CorpusError(f"unknown noise kind {kind!r}")


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    p_sig = np.mean(clean**2)
    p_noise = np.mean(noise**2)
    if p_sig == 0 or p_noise == 0:
        return clean.copy()
    scaled = noise * np.sqrt(p_sig / (p_noise * 10 ** (snr_db / 10)))
    mix = clean + scaled
    peak = np.abs(mix).max()
    # a common gain keeps the signal/noise ratio intact
    return mix / peak * 0.999 if peak > 0.999 else mix


def synthesize_clip(
    transcript: Sequence[str],
    voice: VoiceProfile,
    noise: NoiseProfile,
    seed: int,
    lexicon: Lexicon | None = None,
    clip_id: str = "",
    sample_rate: int = SAMPLE_RATE,
) -> AcousticClip:
    lexicon = lexicon or default_lexicon()
    if not transcript:
        raise CorpusError("transcript is empty")
    clean = render_clean(transcript, lexicon, voice, sample_rate)
    if noise.kind == "quiet":
        samples = clean
    else:
        rng = np.random.default_rng(seed)
        samples = mix_at_snr(clean, make_noise(noise.kind, clean.size, rng, lexicon, sample_rate), noise.snr_db)
    return AcousticClip(samples, sample_rate, clip_id)


# ---------------------------------------------------------------------------
# default toy domain

DEFAULT_SCHEMA = {
    "event_types": ["Attack", "Transport", "Meet"],
    "roles": {
        "Attack": ["Attacker", "Target", "Place"],
        "Transport": ["Agent", "Artifact", "Destination"],
        "Meet": ["Entity", "Place"],
    },
}

# filler / function words
_FUNCTION = ["the", "at", "to", "in", "near", "by", "and", "today", "yesterday", "reports", "say"]
_TRIGGERS = {"Attack": ["fired", "attacked"], "Transport": ["moved", "shipped"], "Meet": ["met", "visited"]}
_COMMON = {
    "person": ["soldiers", "rebels", "police", "leaders", "officials"],
    "place": ["village", "city", "port", "camp"],
    "artifact": ["trucks", "supplies", "weapons"],
}
# (word, class) pairs sharing one pronunciation key
_HOMOPHONES = [
    (("colonel", "person"), ("kernel", "artifact")),
    (("prince", "person"), ("prints", "artifact")),
    (("seller", "person"), ("cellar", "place")),
    (("plane", "artifact"), ("plain", "place")),
    (("keys", "artifact"), ("quays", "place")),
]
_RARE = {"person": ["ivanov", "okafor", "tanaka", "moreau"],
         "place": ["oslo", "lagos", "quito", "perth", "dakar", "minsk"]}

ROLE_CLASS = {
    "Attacker": "person", "Target": "place", "Place": "place",
    "Agent": "person", "Artifact": "artifact", "Destination": "place",
    "Entity": "person",
}

# templates: tokens, with "[Role]" slots; the trigger is the "{T}" token
DEFAULT_TEMPLATES = {
    "Attack": [
        "[Attacker] {T} at the [Target]",
        "[Attacker] {T} the [Target] near [Place]",
        "the [Target] {T} by [Attacker]",
    ],
    "Transport": [
        "[Agent] {T} [Artifact] to [Destination]",
        "[Agent] {T} the [Artifact]",
        "[Artifact] {T} to [Destination] by [Agent]",
    ],
    "Meet": [
        "[Entity] {T} [Entity] in [Place]",
        "[Entity] {T} [Entity]",
        "[Entity] and [Entity] {T} at [Place]",
    ],
}
_PREFIXES = [[], [], ["today"], ["yesterday"], ["reports", "say"], ["today", "reports", "say"]]
_SUFFIXES = [[], [], ["today"], ["yesterday"]]


def default_schema() -> EventSchema:
    return EventSchema.from_dict(DEFAULT_SCHEMA)


def default_lexicon() -> Lexicon:
    pron = {}
    for w in _FUNCTION + [t for ts in _TRIGGERS.values() for t in ts]:
        pron[w] = w
    for ws in list(_COMMON.values()) + list(_RARE.values()):
        for w in ws:
            pron[w] = w
    for (a, _), (b, _) in _HOMOPHONES:
        pron[a] = pron[b] = a
    return Lexicon(pron)


@dataclass
class TemplateBank:
    """Sentence templates and slot fillers for one schema."""

    templates: dict[str, list[str]]
    triggers: dict[str, list[str]]
    role_class: dict[str, str]
    common: dict[str, list[str]]
    homophone: dict[str, list[str]]
    rare: dict[str, list[str]]
    prefixes: list[list[str]] = field(default_factory=lambda: [list(p) for p in _PREFIXES])
    suffixes: list[list[str]] = field(default_factory=lambda: [list(s) for s in _SUFFIXES])

    @property
    def rare_entities(self) -> list[str]:
        return sorted(w for ws in self.rare.values() for w in ws)

    def words(self) -> set[str]:
        out = set()
        for ts in self.templates.values():
            for t in ts:
                out.update(tok for tok in t.split() if not tok.startswith(("[", "{")))
        for group in (self.triggers, self.common, self.homophone, self.rare):
            for ws in group.values():
                out.update(w for m in ws for w in m.split())
        for p in self.prefixes + self.suffixes:
            out.update(p)
        return out

    def capacity(self) -> int:
        """Distinct single-event instantiations, ignoring fillers."""
        total = 0
        for etype, ts in self.templates.items():
            for t in ts:
                n = len(self.triggers[etype])
                for tok in t.split():
                    if tok.startswith("["):
                        cls = self.role_class[tok[1:-1]]
                        n *= len(self.common.get(cls, [])) + len(self.homophone.get(cls, []))
                total += n
        return total


def default_bank() -> TemplateBank:
    homo: dict[str, list[str]] = {}
    for pair in _HOMOPHONES:
        for word, cls in pair:
            homo.setdefault(cls, []).append(word)
    return TemplateBank(
        templates={k: list(v) for k, v in DEFAULT_TEMPLATES.items()},
        triggers={k: list(v) for k, v in _TRIGGERS.items()},
        role_class=dict(ROLE_CLASS),
        common={k: list(v) for k, v in _COMMON.items()},
        homophone=homo,
        rare={k: list(v) for k, v in _RARE.items()},
    )


# ---------------------------------------------------------------------------
# corpus construction


@dataclass
class _Plan:
    # per event: (type, template index, trigger, [(role, mention), ...])
    events: list
    prefix: list
    suffix: list

    def render(self, bank: TemplateBank) -> tuple[tuple[str, ...], RecordSet]:
        words = list(self.prefix)
        records = []
        for k, (etype, tidx, trigger, fillers) in enumerate(self.events):
            if k:
                words.append("and")
            slots = iter(fillers)
            args = []
            for tok in bank.templates[etype][tidx].split():
                if tok == "{T}":
                    words.append(trigger)
                elif tok.startswith("["):
                    role, mention = next(slots)
                    words.extend(mention.split())
                    args.append((role, mention))
                else:
                    words.append(tok)
            records.append(EventRecord(etype, trigger, tuple(args)))
        words.extend(self.suffix)
        return tuple(words), RecordSet(tuple(records))


def build_corpus(
    schema: EventSchema | None = None,
    bank: TemplateBank | None = None,
    sizes: Mapping[str, int] | Sequence[int] = (800, 100, 100),
    homophone_rate: float = 0.3,
    seed: int = 0,
    rare_rate: float = 0.1,
    two_event_rate: float = 0.2,
    snr_range: tuple[float, float] = (10.0, 20.0),
    lexicon: Lexicon | None = None,
    sample_rate: int = SAMPLE_RATE,
) -> list[CorpusExample]:
    """Generate a corpus of clips with gold record sets.

    Each rare entity occurs exactly once among the train examples (so it ends
    up in the entity dictionary) and with probability ``rare_rate`` per
    compatible argument slot in dev/test. ``homophone_rate`` is the per-slot
    probability of drawing the mention from a homophone group.
    """
    schema = schema or default_schema()
    bank = bank or default_bank()
    lexicon = lexicon or default_lexicon()
    if not isinstance(sizes, Mapping):
        sizes = dict(zip(SPLITS, sizes))
    sizes = {s: int(sizes.get(s, 0)) for s in SPLITS}
    if not 0.0 <= homophone_rate <= 1.0 or not 0.0 <= rare_rate <= 1.0:
        raise CorpusError("rates must lie in [0, 1]")
    missing = sorted(bank.words() - set(lexicon.keys))
    if missing:
        raise CorpusError(f"template bank uses out-of-lexicon words: {missing}")
    for etype in bank.templates:
        if etype not in schema.roles_by_type:
            raise CorpusError(f"template bank uses unknown event type {etype!r}")
        for t in bank.templates[etype]:
            for tok in t.split():
                if tok.startswith("[") and tok[1:-1] not in schema.roles_by_type[etype]:
                    raise CorpusError(f"template role {tok} not valid for {etype!r}")
    total = sum(sizes.values())
    if total > bank.capacity():
        raise CorpusError(f"requested {total} examples but the template bank holds {bank.capacity()}")
    rare = bank.rare_entities
    if rare and sizes["train"] < len(rare):
        raise CorpusError("train split too small to place every rare entity once")

    rng = np.random.default_rng(seed)
    rare_class = {w: cls for cls, ws in bank.rare.items() for w in ws}

    def pick(cls, split):
        u = rng.random()
        if u < homophone_rate and bank.homophone.get(cls):
            return str(rng.choice(bank.homophone[cls]))
        if split != "train" and bank.rare.get(cls) and rng.random() < rare_rate:
            return str(rng.choice(bank.rare[cls]))
        return str(rng.choice(bank.common[cls]))

    def new_plan(split):
        events = []
        n_events = 2 if rng.random() < two_event_rate else 1
        for _ in range(n_events):
            etype = str(rng.choice(list(bank.templates)))
            tidx = int(rng.integers(len(bank.templates[etype])))
            trigger = str(rng.choice(bank.triggers[etype]))
            fillers = []
            for tok in bank.templates[etype][tidx].split():
                if tok.startswith("["):
                    role = tok[1:-1]
                    fillers.append((role, pick(bank.role_class[role], split)))
            events.append((etype, tidx, trigger, fillers))
        prefix = bank.prefixes[int(rng.integers(len(bank.prefixes)))]
        suffix = bank.suffixes[int(rng.integers(len(bank.suffixes)))]
        return _Plan(events, list(prefix), list(suffix))

    plans = {split: [new_plan(split) for _ in range(sizes[split])] for split in SPLITS}

    # place each rare entity in exactly one train example
    order = rng.permutation(len(plans["train"]))
    used = set()
    for word in rare:
        cls = rare_class[word]
        for idx in order:
            if idx in used:
                continue
            plan = plans["train"][idx]
            slot = next(
                ((e, s) for e, ev in enumerate(plan.events) for s, (role, _) in enumerate(ev[3])
                 if bank.role_class[role] == cls),
                None,
            )
            if slot is None:
                continue
            e, s = slot
            role = plan.events[e][3][s][0]
            plan.events[e][3][s] = (role, word)
            used.add(idx)
            break
        else:
            raise CorpusError(f"no train example has a slot for rare entity {word!r}")

    examples = []
    for split in SPLITS:
        for i, plan in enumerate(plans[split]):
            cid = f"{split}-{i:05d}"
            transcript, gold = plan.render(bank)
            gold.validate(schema)
            voice = VoiceProfile(
                base_frequency=float(rng.choice([140.0, 150.0, 160.0])),
                speaking_rate=float(rng.uniform(10.0, 14.0)),
                amplitude=float(rng.uniform(0.3, 0.6)),
            )
            kind = str(rng.choice(NOISE_KINDS))
            noise = NoiseProfile(kind, float(rng.uniform(*snr_range)))
            clip = synthesize_clip(
                transcript, voice, noise, example_seed(seed, cid), lexicon, cid, sample_rate
            )
            examples.append(CorpusExample(cid, clip, transcript, gold, split, voice, noise))
    return examples


def example_seed(master: int, cid: str) -> int:
    return int(np.random.SeedSequence([master, zlib.crc32(cid.encode("utf-8"))]).generate_state(1)[0])


def split(corpus: Sequence[CorpusExample], name: str) -> list[CorpusExample]:
    return [ex for ex in corpus if ex.split == name]


# ---------------------------------------------------------------------------
# WER


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference, hypothesis) -> float:
    ref = reference.split() if isinstance(reference, str) else list(reference)
    hyp = hypothesis.split() if isinstance(hypothesis, str) else list(hypothesis)
    if not ref:
        raise ValueError("reference is empty")
    return edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------------------
# serialization


def _write_wav(path: Path, clip: AcousticClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def read_wav(path, clip_id: str = "") -> AcousticClip:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise CorpusError(f"{path}: expected 16-bit mono PCM")
        rate = wf.getframerate()
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return AcousticClip(np.clip(data.astype(np.float64) / 32767.0, -1.0, 1.0), rate, clip_id)


def save_corpus(corpus: Sequence[CorpusExample], path) -> Path:
    """Write ``corpus.jsonl`` plus one WAV per clip under ``path``."""
    root = Path(path)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    with open(root / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for ex in corpus:
            rel = f"wav/{ex.id}.wav"
            _write_wav(root / rel, ex.clip)
            fh.write(json.dumps({
                "id": ex.id,
                "wav": rel,
                "transcript": " ".join(ex.transcript),
                "records": ex.gold.to_list(),
                "split": ex.split,
                "voice": asdict(ex.voice),
                "noise": asdict(ex.noise),
            }) + "\n")
    return root / "corpus.jsonl"


def load_corpus(path) -> list[CorpusExample]:
    path = Path(path)
    meta = path / "corpus.jsonl" if path.is_dir() else path
    root = meta.parent
    out = []
    with open(meta, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cid = str(obj["id"])
                wav, transcript, records, split_name = obj["wav"], obj["transcript"], obj["records"], obj["split"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{meta}: malformed record on line {lineno}: {exc}") from exc
            wav_path = root / wav
            if not wav_path.exists():
                raise CorpusError(f"record {cid!r}: missing WAV file {wav_path}")
            out.append(CorpusExample(
                cid,
                read_wav(wav_path, cid),
                tuple(transcript.split()),
                RecordSet.from_list(records),
                split_name,
                VoiceProfile(**obj.get("voice", {})),
                NoiseProfile(**obj.get("noise", {})),
            ))
    return out
