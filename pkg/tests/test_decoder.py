import logging
import math
import random

import pytest
import torch
from torch import nn

from speechee.constrain import Grammar
from speechee.decoder import (
    DecoderConfig,
    DictionaryEncoder,
    EmitPolicy,
    EntityDictionary,
    StructureDecoder,
    Vocab,
    build_entity_dictionary,
    emit,
    gold_retrieval_indices,
    mention_start_steps,
    retrieval_loss,
    retrieval_scores,
)
from speechee.schema import EventRecord, RecordSet, linearize

F64 = torch.float64


def rs(*args):
    return RecordSet((EventRecord("Meet", "met", tuple(("Entity", a) for a in args)),))


def test_dictionary_keeps_once_seen_mentions():
    d = build_entity_dictionary([rs("a", "b"), rs("a", "c")])
    assert d.entries == (("<e0>",), ("b",), ("c",))


def test_dictionary_all_repeated_or_empty():
    assert build_entity_dictionary([rs("a"), rs("a")]).entries == (("<e0>",),)
    assert build_entity_dictionary([]).entries == (("<e0>",),)
    assert build_entity_dictionary([RecordSet()]).entries == (("<e0>",),)


def test_dictionary_ignores_triggers():
    d = build_entity_dictionary([RecordSet((EventRecord("Meet", "unique", (("Entity", "x"),)),))])
    assert ("unique",) not in d.entries


def test_dictionary_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        EntityDictionary((("a",), ("a",)))


def test_dictionary_file_roundtrip(tmp_path):
    d = EntityDictionary((("new", "york"), ("oslo",)))
    d.save(tmp_path / "dict.txt")
    assert (tmp_path / "dict.txt").read_text() == "new york\noslo\n"
    assert EntityDictionary.load(tmp_path / "dict.txt") == d


def test_dictionary_encoder_arity_and_determinism():
    torch.manual_seed(0)
    enc = DictionaryEncoder(nn.Embedding(10, 8), d_att=6)
    ids = [[3], [4, 5], [6, 7, 8], [9]]
    a, b = enc(ids), enc(ids)
    assert a.shape == (5, 6)
    assert torch.equal(a, b)
    assert enc([]).shape == (1, 6)


def test_retrieval_identity_example():
    hd = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=F64)
    he = torch.tensor([[1.0, 0, 0, 0], [0, 0, 1.0, 0]], dtype=F64)
    eye = torch.eye(4, dtype=F64)
    dist = retrieval_scores(hd, he, eye, eye)
    assert dist.alpha.tolist() == [0.5, 0.0]
    assert dist.p.tolist() == pytest.approx([0.6225, 0.3775], abs=1e-4)


def test_retrieval_zero_state_is_uniform():
    g = torch.Generator().manual_seed(0)
    he = torch.randn(5, 3, dtype=F64, generator=g)
    dist = retrieval_scores(torch.zeros(4, dtype=F64), he, torch.randn(3, 4, dtype=F64, generator=g),
                            torch.randn(3, 3, dtype=F64, generator=g))
    assert torch.allclose(dist.p, torch.full((5,), 0.2, dtype=F64))


def test_retrieval_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        retrieval_scores(torch.zeros(4), torch.zeros(2, 3), torch.zeros(3, 5), torch.zeros(3, 3))


def _scores_by_hand(hd, he, W_q, W_k):
    """Scores by explicit sums over coordinates."""
    d_att, d = len(W_q), len(hd)
    q = [sum(W_q[a][b] * hd[b] for b in range(d)) for a in range(d_att)]
    out = []
    for row in he:
        k = [sum(W_k[a][b] * row[b] for b in range(d_att)) for a in range(d_att)]
        out.append(sum(x * y for x, y in zip(q, k)) / math.sqrt(d_att))
    m = max(out)
    z = sum(math.exp(a - m) for a in out)
    return out, [math.exp(a - m) / z for a in out]


def test_retrieval_matches_direct_arithmetic():
    rng = random.Random(0)
    for _ in range(100):
        d, d_att, n = rng.randint(1, 6), rng.randint(1, 5), rng.randint(1, 6)
        hd = [rng.gauss(0, 1) for _ in range(d)]
        he = [[rng.gauss(0, 1) for _ in range(d_att)] for _ in range(n)]
        W_q = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(d_att)]
        W_k = [[rng.gauss(0, 1) for _ in range(d_att)] for _ in range(d_att)]
        dist = retrieval_scores(*(torch.tensor(v, dtype=F64) for v in (hd, he, W_q, W_k)))
        alpha, p = _scores_by_hand(hd, he, W_q, W_k)
        assert max(abs(a - b) for a, b in zip(dist.alpha.tolist(), alpha)) < 1e-9
        assert max(abs(a - b) for a, b in zip(dist.p.tolist(), p)) < 1e-9
        assert abs(sum(dist.p.tolist()) - 1) < 1e-9


def test_retrieval_loss_examples():
    assert retrieval_loss(torch.tensor([[0.0, 1.0]]), torch.tensor([1])).item() == 0.0
    assert retrieval_loss(torch.tensor([[0.5, 0.5]]), torch.tensor([0])).item() == pytest.approx(0.6931, abs=1e-4)
    two = retrieval_loss(torch.tensor([[0.5, 0.5], [0.5, 0.5]]), torch.tensor([0, 1])).item()
    assert two == pytest.approx(1.3863, abs=1e-4)


def test_retrieval_loss_matches_log_sum():
    rng = random.Random(1)
    for _ in range(100):
        steps, n = rng.randint(1, 5), rng.randint(1, 6)
        rows = []
        for _ in range(steps):
            w = [rng.random() + 1e-3 for _ in range(n)]
            rows.append([x / sum(w) for x in w])
        gold = [rng.randrange(n) for _ in range(steps)]
        expected = -sum(math.log(r[g]) for r, g in zip(rows, gold))
        ours = retrieval_loss(torch.tensor(rows, dtype=F64), torch.tensor(gold)).item()
        assert abs(ours - expected) < 1e-9


def test_retrieval_loss_clamps_zero(caplog):
    with caplog.at_level(logging.WARNING):
        loss = retrieval_loss(torch.tensor([[1.0, 0.0]], dtype=F64), torch.tensor([1]))
    assert loss.item() == pytest.approx(-math.log(1e-12))
    assert "clamping" in caplog.text


def test_retrieval_gradcheck():
    g = torch.Generator().manual_seed(2)
    args = [
        torch.randn(3, 5, dtype=F64, generator=g, requires_grad=True),
        torch.randn(4, 3, dtype=F64, generator=g, requires_grad=True),
        torch.randn(3, 5, dtype=F64, generator=g, requires_grad=True),
        torch.randn(3, 3, dtype=F64, generator=g, requires_grad=True),
    ]
    gold = torch.tensor([0, 2, 3])

    def f(hd, he, W_q, W_k):
        return retrieval_loss(retrieval_scores(hd, he, W_q, W_k).p, gold)

    assert torch.autograd.gradcheck(f, args, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_emit_policy():
    logits = torch.tensor([0.0, 3.0, 1.0])
    assert emit(logits, torch.tensor([0.9, 0.1]), True) == ("token", 1)
    assert emit(logits, torch.tensor([0.1, 0.9]), True, policy=EmitPolicy(0.5)) == ("entity", 1)
    # outside a mention start retrieval is ignored
    assert emit(logits, torch.tensor([0.1, 0.9]), False) == ("token", 1)
    # the winning entry must also clear the threshold
    assert emit(logits, torch.tensor([0.2, 0.4, 0.4]), True) == ("token", 1)
    assert emit(logits, torch.tensor([0.9, 0.1]), True, allowed=[0, 2]) == ("token", 2)


def test_gold_indices_mark_mention_starts(schema):
    d = EntityDictionary((("oslo",), ("the", "port")))
    rec = EventRecord("Meet", "met", (("Entity", "leaders"), ("Place", "the port")))
    toks = linearize(RecordSet((rec,)))
    words = ["met", "leaders", "the", "port", "oslo"]
    g = Grammar(schema, words)
    gold = gold_retrieval_indices(toks, d, g)
    start = toks.index("the")
    assert gold[start] == 2
    assert sum(1 for x in gold if x) == 1
    assert mention_start_steps(toks, g) == [toks.index("leaders"), start]


def _decoder(vocab_size=12, dtype=torch.float32):
    torch.manual_seed(0)
    dec = StructureDecoder(vocab_size, DecoderConfig(model_dim=16, layers=2, heads=2, ff_mult=2, dropout=0.0))
    return dec.to(dtype).eval()


def test_decoder_first_step_and_width():
    dec = _decoder()
    memory = torch.randn(2, 7, 16)
    h, logits = dec.decode_step(torch.tensor([[1], [1]]), memory)
    assert h.shape == (2, 16) and logits.shape == (2, 12)
    assert torch.isfinite(logits).all()


def test_decoder_is_causal():
    dec = _decoder()
    memory = torch.randn(1, 5, 16)
    ids = torch.tensor([[1, 4, 5, 6, 7]])
    h1, l1 = dec(ids, memory)
    ids2 = ids.clone()
    ids2[0, 3:] = torch.tensor([9, 10])
    h2, l2 = dec(ids2, memory)
    assert torch.allclose(l1[:, :3], l2[:, :3], atol=1e-6)
    assert not torch.allclose(l1[:, 3:], l2[:, 3:])


def test_decoder_ignores_padded_memory():
    dec = _decoder()
    memory = torch.randn(1, 6, 16)
    ids = torch.tensor([[1, 3, 4]])
    _, a = dec(ids, memory[:, :4])
    junk = memory.clone()
    junk[:, 4:] = 1e3
    _, b = dec(ids, junk, torch.tensor([4]))
    assert torch.allclose(a, b, atol=1e-5)


def test_vocab_specials():
    v = Vocab(["(", ")", "x"])
    assert (v.pad, v.bos, v.unk) == (0, 1, 2)
    assert v.tokens[:3] == ["<pad>", "<bos>", "<unk>"]
    assert v["never-seen"] == v.unk
