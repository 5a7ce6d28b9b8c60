import random

import pytest

from speechee.corpus import default_schema
from speechee.schema import EventRecord, EventSchema, RecordSet


@pytest.fixture
def schema():
    return default_schema()


@pytest.fixture
def attack_schema():
    return EventSchema(("Attack", "Meet"), {"Attack": ("Attacker", "Target"), "Meet": ("Entity",)})


WORDS = ["the", "soldiers", "fired", "village", "Fired", "oslo", "a", "b"]


def random_recordset(rng: random.Random, schema: EventSchema, words=WORDS, max_records=3, max_args=3) -> RecordSet:
    records = []
    for _ in range(rng.randint(0, max_records)):
        etype = rng.choice(schema.event_types)
        trigger = tuple(rng.choice(words) for _ in range(rng.randint(1, 2)))
        args = []
        roles = schema.roles_by_type[etype]
        if roles:
            for _ in range(rng.randint(0, max_args)):
                args.append((rng.choice(roles), tuple(rng.choice(words) for _ in range(rng.randint(1, 3)))))
        records.append(EventRecord(etype, trigger, tuple(args)))
    return RecordSet(tuple(records))


def max_relative_grad_error(fn, tensors, eps=1e-6, floor=1e-3):
    """Largest elementwise |analytic - central difference| / max(|analytic|, |numeric|, floor).

    The floor keeps entries whose true gradient is ~0 (e.g. attention key
    biases) from turning finite-difference round-off into huge ratios.
    ``fn`` maps nothing to a scalar and closes over ``tensors``, which must be
    float64 leaves with ``requires_grad``.
    """
    import torch

    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone().reshape(-1)
        flat = t.data.reshape(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
