import itertools
import json
import math
import random

import numpy as np
import pytest

from speechee.corpus import (
    AcousticClip,
    CorpusError,
    NoiseProfile,
    VoiceProfile,
    build_corpus,
    chord_plan,
    default_bank,
    default_lexicon,
    edit_distance,
    load_corpus,
    make_noise,
    render_clean,
    save_corpus,
    split,
    synthesize_clip,
    wer,
    word_spans,
)

QUIET = NoiseProfile("quiet")


@pytest.fixture(scope="module")
def small_corpus():
    return build_corpus(sizes=(40, 10, 10), seed=3)


def test_synthesis_is_deterministic():
    voice, noise = VoiceProfile(), NoiseProfile("babble", 10.0)
    a = synthesize_clip(["the", "soldiers", "fired"], voice, noise, seed=5)
    b = synthesize_clip(["the", "soldiers", "fired"], voice, noise, seed=5)
    assert np.array_equal(a.samples, b.samples)
    c = synthesize_clip(["the", "soldiers", "fired"], voice, noise, seed=6)
    assert not np.array_equal(a.samples, c.samples)


def test_homophones_render_identically():
    lex = default_lexicon()
    for word, others in lex.confusion_table().items():
        for other in others:
            a = synthesize_clip([word], VoiceProfile(), QUIET, seed=0)
            b = synthesize_clip([other], VoiceProfile(), QUIET, seed=0)
            assert np.array_equal(a.samples, b.samples)


def test_distinct_keys_differ_in_a_segment():
    lex = default_lexicon()
    keys = sorted(set(lex.keys.values()))
    plans = {k: chord_plan(k) for k in keys}
    for a, b in itertools.combinations(keys, 2):
        pa, pb = plans[a], plans[b]
        assert not np.array_equal(pa[0], pb[0]) or not np.array_equal(pa[1], pb[1]), (a, b)


def test_out_of_lexicon_word_is_named():
    with pytest.raises(CorpusError, match="zebra"):
        synthesize_clip(["the", "zebra"], VoiceProfile(), QUIET, seed=0)


def test_empty_transcript_rejected():
    with pytest.raises(CorpusError):
        synthesize_clip([], VoiceProfile(), QUIET, seed=0)


def test_white_noise_at_zero_db():
    words = ["the", "police", "fired", "at", "the", "camp"]
    voice = VoiceProfile()
    seed = 11
    clean = synthesize_clip(words, voice, QUIET, seed).samples
    noisy = synthesize_clip(words, voice, NoiseProfile("white", 0.0), seed).samples
    # regenerate the raw noise draw, then solve noisy = g*clean + c*noise exactly
    raw = make_noise("white", clean.size, np.random.default_rng(seed))
    (g, c), *_ = np.linalg.lstsq(np.stack([clean, raw], axis=1), noisy, rcond=None)
    assert np.allclose(g * clean + c * raw, noisy, atol=1e-9)
    snr = 10 * math.log10(np.mean((g * clean) ** 2) / np.mean((c * raw) ** 2))
    assert abs(snr) <= 0.5


def test_clip_rejects_out_of_range_samples():
    with pytest.raises(CorpusError):
        AcousticClip(np.array([0.0, 1.5]))
    with pytest.raises(CorpusError):
        AcousticClip(np.array([]))


def test_word_spans_cover_rendered_words():
    voice = VoiceProfile(speaking_rate=11.0)
    words = ["the", "soldiers", "fired"]
    x = render_clean(words, default_lexicon(), voice)
    spans = word_spans(words, voice)
    assert spans[-1][1] < x.size
    for a, b in spans:
        assert np.abs(x[a:b]).max() > 0
    # gaps between words are silent
    for (_, b), (a, _) in zip(spans, spans[1:]):
        assert np.all(x[b:a] == 0)


def test_corpus_split_sizes():
    corpus = build_corpus(sizes=(800, 100, 100), seed=0)
    assert len(corpus) == 1000
    assert [len(split(corpus, s)) for s in ("train", "dev", "test")] == [800, 100, 100]


def test_corpus_is_deterministic():
    a = build_corpus(sizes=(20, 5, 5), seed=9)
    b = build_corpus(sizes=(20, 5, 5), seed=9)
    for x, y in zip(a, b):
        assert x.id == y.id and x.transcript == y.transcript and x.gold == y.gold
        assert np.array_equal(x.clip.samples, y.clip.samples)


def test_no_homophones_at_rate_zero():
    lex = default_lexicon()
    homophones = set(lex.confusion_table())
    corpus = build_corpus(sizes=(200, 20, 20), homophone_rate=0.0, seed=1)
    for ex in corpus:
        for rec in ex.gold.records:
            for _, mention in rec.arguments:
                assert not set(mention) & homophones


def test_gold_mentions_occur_in_transcript(small_corpus):
    def contains(seq, sub):
        return any(tuple(seq[i : i + len(sub)]) == tuple(sub) for i in range(len(seq) - len(sub) + 1))

    for ex in small_corpus:
        for rec in ex.gold.records:
            assert contains(ex.transcript, rec.trigger)
            for _, mention in rec.arguments:
                assert contains(ex.transcript, mention)


def test_rare_entities_appear_once_in_train():
    corpus = build_corpus(sizes=(100, 10, 10), seed=2)
    counts = {w: 0 for w in default_bank().rare_entities}
    for ex in split(corpus, "train"):
        for w in ex.transcript:
            if w in counts:
                counts[w] += 1
    assert set(counts.values()) == {1}


def test_capacity_error():
    with pytest.raises(CorpusError, match="holds"):
        build_corpus(sizes=(10**9, 0, 0))


@pytest.mark.parametrize(
    "ref, hyp, expected",
    [("the cat sat", "the cat sat", 0.0), ("the cat sat", "", 1.0), ("the cat sat", "the bat sat", 0.3333),
     ("a", "b c d", 3.0)],
)
def test_wer_examples(ref, hyp, expected):
    assert wer(ref, hyp) == pytest.approx(expected, abs=1e-4)


def test_wer_empty_reference():
    with pytest.raises(ValueError):
        wer("", "a")


def _recursive_distance(ref, hyp):
    """Edit distance by exhaustive recursion, for short sequences only."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        _recursive_distance(ref[1:], hyp) + 1,
        _recursive_distance(ref, hyp[1:]) + 1,
        _recursive_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
    )


def test_wer_matches_recursive_oracle():
    rng = random.Random(4)
    for _ in range(200):
        ref = [rng.choice("abc") for _ in range(rng.randint(1, 6))]
        hyp = [rng.choice("abcd") for _ in range(rng.randint(0, 6))]
        assert edit_distance(ref, hyp) == _recursive_distance(ref, hyp)
        assert abs(wer(ref, hyp) - _recursive_distance(ref, hyp) / len(ref)) < 1e-4


def test_save_load_roundtrip(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path)
    first = json.loads((tmp_path / "corpus.jsonl").read_text().splitlines()[0])
    assert set(first) == {"id", "wav", "transcript", "records", "split", "voice", "noise"}
    loaded = load_corpus(tmp_path)
    assert len(loaded) == len(small_corpus)
    for a, b in zip(small_corpus, loaded):
        assert (a.id, a.transcript, a.gold, a.split, a.voice, a.noise) == (b.id, b.transcript, b.gold, b.split, b.voice, b.noise)
        assert np.abs(a.clip.samples - b.clip.samples).max() <= 2.0**-15


def test_empty_corpus_roundtrip(tmp_path):
    save_corpus([], tmp_path)
    assert (tmp_path / "corpus.jsonl").read_text() == ""
    assert load_corpus(tmp_path) == []


def test_corrupt_line_is_reported(tmp_path, small_corpus):
    save_corpus(small_corpus[:3], tmp_path)
    path = tmp_path / "corpus.jsonl"
    lines = path.read_text().splitlines()
    lines[1] = lines[1][:20]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(tmp_path)


def test_missing_wav_names_record(tmp_path, small_corpus):
    save_corpus(small_corpus[:2], tmp_path)
    (tmp_path / "wav" / f"{small_corpus[1].id}.wav").unlink()
    with pytest.raises(CorpusError, match=small_corpus[1].id):
        load_corpus(tmp_path)
