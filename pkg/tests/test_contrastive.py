import math
import random

import pytest
import torch

from speechee.contrastive import contrastive_loss, pool


def brute_force_cl(x, labels, tau):
    """Direct double loop over anchors, positives and the batch."""
    n = len(x)
    dot = lambda a, b: sum(p * q for p, q in zip(a, b))
    total = 0.0
    for i in range(n):
        positives = [j for j in range(n) if j != i and set(labels[i]) & set(labels[j])]
        if not positives:
            continue
        denom = sum(math.exp(dot(x[i], x[k]) / tau) for k in range(n) if k != i)
        num = sum(math.exp(dot(x[i], x[j]) / tau) for j in positives) / len(positives)
        total += -math.log(num / denom)
    return total


def unit_rows(rng, n, d):
    rows = []
    for _ in range(n):
        v = [rng.gauss(0, 1) for _ in range(d)]
        s = math.sqrt(sum(a * a for a in v))
        rows.append([a / s for a in v])
    return rows


def test_pool_constant_rows():
    v = torch.tensor([3.0, 4.0], dtype=torch.float64)
    out = pool(v.repeat(5, 1))
    assert torch.allclose(out, torch.tensor([0.6, 0.8], dtype=torch.float64))


def test_pool_single_frame():
    h = torch.tensor([[0.0, 2.0, 0.0]], dtype=torch.float64)
    assert torch.equal(pool(h), torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))


def test_pool_matches_direct_arithmetic():
    g = torch.Generator().manual_seed(0)
    h = torch.randn(5, 7, dtype=torch.float64, generator=g)
    mean = [sum(float(h[t, k]) for t in range(5)) / 5 for k in range(7)]
    norm = math.sqrt(sum(m * m for m in mean))
    assert max(abs(a - m / norm) for a, m in zip(pool(h).tolist(), mean)) < 1e-12


def test_pool_respects_lengths():
    h = torch.zeros(2, 4, 2, dtype=torch.float64)
    h[0, :2] = torch.tensor([1.0, 0.0])
    h[0, 2:] = torch.tensor([0.0, 100.0])  # padding, must be ignored
    h[1] = torch.tensor([0.0, 1.0])
    out = pool(h, torch.tensor([2, 4]))
    assert torch.allclose(out, torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64))


def test_pool_zero_vector_raises():
    with pytest.raises(ValueError, match="zero vector"):
        pool(torch.zeros(3, 4))


def test_identical_pair_same_type_gives_zero():
    x = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert contrastive_loss(x, [{"A"}, {"A"}], tau=1.0).item() == pytest.approx(0.0, abs=1e-15)


def test_no_anchor_gives_zero():
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert contrastive_loss(x, [{"A"}, {"B"}], tau=1.0).item() == 0.0


def test_three_sample_example_matches_brute_force():
    rows = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    labels = [{"A"}, {"A"}, {"B"}]
    ours = contrastive_loss(torch.tensor(rows, dtype=torch.float64), labels, tau=1.0).item()
    expected = brute_force_cl(rows, labels, 1.0)
    assert abs(ours - expected) < 1e-9
    # anchors 1 and 2 each see e / (e + 1)
    assert expected == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-12)


def test_random_batches_match_brute_force():
    rng = random.Random(0)
    types = ["A", "B", "C"]
    for _ in range(100):
        n, d = rng.randint(2, 8), rng.randint(2, 6)
        rows = unit_rows(rng, n, d)
        labels = [set(rng.sample(types, rng.randint(1, 2))) for _ in range(n)]
        tau = rng.choice([0.1, 0.5, 1.0])
        ours = contrastive_loss(torch.tensor(rows, dtype=torch.float64), labels, tau).item()
        assert abs(ours - brute_force_cl(rows, labels, tau)) < 1e-9


def test_single_positive_loss_is_nonnegative():
    rng = random.Random(1)
    for _ in range(50):
        rows = unit_rows(rng, 4, 3)
        labels = [{"A"}, {"A"}, {"B"}, {"B"}]  # exactly one positive each
        assert contrastive_loss(torch.tensor(rows, dtype=torch.float64), labels, 0.5).item() >= 0


def test_pulling_positives_together_does_not_increase_loss():
    rng = random.Random(2)
    for _ in range(30):
        rows = torch.tensor(unit_rows(rng, 4, 3), dtype=torch.float64)
        labels = [{"A"}, {"A"}, {"B"}, {"C"}]
        before = contrastive_loss(rows, labels, 0.5).item()
        moved = rows.clone()
        moved[1] = rows[0]  # same-type pair now coincides
        assert contrastive_loss(moved, labels, 0.5).item() <= before + 1e-12


def test_nonpositive_tau_raises():
    with pytest.raises(ValueError):
        contrastive_loss(torch.eye(2), [{"A"}, {"A"}], tau=0.0)


def test_gradcheck():
    g = torch.Generator().manual_seed(3)
    h = torch.randn(5, 4, 6, dtype=torch.float64, generator=g, requires_grad=True)
    lengths = torch.tensor([4, 3, 4, 2, 1])
    labels = [{"A"}, {"A", "B"}, {"B"}, {"C"}, {"A"}]
    assert torch.autograd.gradcheck(
        lambda t: contrastive_loss(pool(t, lengths), labels, 0.3), (h,), eps=1e-6, atol=1e-8, rtol=1e-4
    )
