"""Grammar automaton for constrained decoding of linearized record sets.

The automaton follows the token grammar in :mod:`speechee.schema` and prunes
the vocabulary at every step: event types only where a type may follow,
roles of the current event type only where a role may follow, and mention
words / structure tokens wherever the grammar allows them.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .schema import CLOSE, OPEN, EventSchema


class Pos(str, Enum):
    START = "rs-open"
    BOUNDARY = "rec-boundary"
    TYPE = "type"
    TRIGGER_FIRST = "trigger-first"
    TRIGGER = "trigger-words"
    ARG_OR_CLOSE = "arg-or-close"
    ROLE = "role"
    ARG_FIRST = "arg-first"
    ARG = "arg-words"
    DONE = "done"


class ConstraintViolation(ValueError):
    pass


@dataclass(frozen=True)
class TrieState:
    pos: Pos = Pos.START
    event_type: Optional[str] = None
    # number of currently open parentheses
    depth: int = 0

    @property
    def done(self) -> bool:
        return self.pos is Pos.DONE

    @property
    def at_mention_start(self) -> bool:
        return self.pos is Pos.ARG_FIRST


@dataclass(frozen=True)
class ConstraintVocab:
    """Candidate vocabulary split into schema labels, structure tokens and mentions."""

    schema: EventSchema
    mentions: frozenset[str]

    def __post_init__(self):
        words = frozenset(self.mentions) - self.schema.labels - {OPEN, CLOSE}
        object.__setattr__(self, "mentions", words)

    @property
    def structure(self) -> frozenset[str]:
        return frozenset((OPEN, CLOSE))


class Grammar:
    def __init__(self, schema: EventSchema, mentions: Iterable[str]):
        self.schema = schema
        self.vocab = ConstraintVocab(schema, frozenset(mentions))
        self._typed_with_roles = {t for t, rs in schema.roles_by_type.items() if rs}
        self._cache: dict = {}

    def initial(self) -> TrieState:
        return TrieState()

    def allowed_tokens(self, state: TrieState) -> frozenset[str]:
        key = (state.pos, state.event_type)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._allowed(state)
        return hit

    def _allowed(self, state: TrieState) -> frozenset[str]:
        pos = state.pos
        words = self.vocab.mentions
        if pos is Pos.START:
            return frozenset((OPEN,))
        if pos is Pos.BOUNDARY:
            return frozenset((OPEN, CLOSE)) if self.schema.event_types and words else frozenset((CLOSE,))
        if pos is Pos.TYPE:
            return frozenset(self.schema.event_types)
        if pos in (Pos.TRIGGER_FIRST, Pos.ARG_FIRST):
            return words
        if pos is Pos.TRIGGER:
            extra = {CLOSE}
            if state.event_type in self._typed_with_roles:
                extra.add(OPEN)
            return words | extra
        if pos is Pos.ARG_OR_CLOSE:
            return frozenset((OPEN, CLOSE))
        if pos is Pos.ROLE:
            return frozenset(self.schema.roles_by_type[state.event_type])
        if pos is Pos.ARG:
            return words | {CLOSE}
        return frozenset()

    def advance(self, state: TrieState, token: str) -> TrieState:
        if token not in self.allowed_tokens(state):
            raise ConstraintViolation(f"token {token!r} not allowed at {state.pos.value}")
        return self._step(state, token)

    def _step(self, state: TrieState, token: str) -> TrieState:
        pos = state.pos
        if pos is Pos.START:
            return TrieState(Pos.BOUNDARY, None, 1)
        if pos is Pos.BOUNDARY:
            if token == OPEN:
                return TrieState(Pos.TYPE, None, 2)
            return TrieState(Pos.DONE, None, 0)
        if pos is Pos.TYPE:
            return TrieState(Pos.TRIGGER_FIRST, token, 2)
        if pos is Pos.TRIGGER_FIRST:
            return TrieState(Pos.TRIGGER, state.event_type, 2)
        if pos in (Pos.TRIGGER, Pos.ARG_OR_CLOSE):
            if token == OPEN:
                return TrieState(Pos.ROLE, state.event_type, 3)
            if token == CLOSE:
                return TrieState(Pos.BOUNDARY, None, 1)
            return state
        if pos is Pos.ROLE:
            return TrieState(Pos.ARG_FIRST, state.event_type, 3)
        if pos is Pos.ARG_FIRST:
            return TrieState(Pos.ARG, state.event_type, 3)
        # Pos.ARG
        if token == CLOSE:
            return TrieState(Pos.ARG_OR_CLOSE, state.event_type, 2)
        return state

    def walk(self, tokens: Iterable[str], state: TrieState | None = None) -> TrieState:
        state = self.initial() if state is None else state
        for tok in tokens:
            state = self.advance(state, tok)
        return state

    def min_completion(self, state: TrieState) -> int:
        """Fewest tokens needed to reach the done state."""
        return _MIN_COMPLETION[state.pos]

    def closing_tokens(self, state: TrieState) -> list[str]:
        """A minimal-length completion, used when the length budget runs out.

        Positions that need a mention word cannot be closed without one; for
        those the shortest completion includes the first mention word.
        """
        out = []
        word = min(self.vocab.mentions) if self.vocab.mentions else None
        while not state.done:
            pos = state.pos
            if pos in (Pos.TRIGGER_FIRST, Pos.ARG_FIRST):
                tok = word
            elif pos is Pos.TYPE:
                tok = self.schema.event_types[0]
            elif pos is Pos.ROLE:
                tok = self.schema.roles_by_type[state.event_type][0]
            elif pos is Pos.START:
                tok = OPEN
            else:
                tok = CLOSE
            out.append(tok)
            state = self.advance(state, tok)
        return out


_MIN_COMPLETION = {
    Pos.DONE: 0,
    Pos.BOUNDARY: 1,
    Pos.START: 2,
    Pos.TRIGGER: 2,
    Pos.ARG_OR_CLOSE: 2,
    Pos.TRIGGER_FIRST: 3,
    Pos.TYPE: 4,
    Pos.ARG: 3,
    Pos.ARG_FIRST: 4,
    Pos.ROLE: 5,
}


@dataclass
class Splice:
    """A dictionary entry chosen by the retrieval pathway."""

    tokens: tuple[str, ...]


StepFn = Callable[[Sequence[Sequence[str]]], np.ndarray]
RetrieveFn = Callable[[Sequence[Sequence[str]], Sequence[int]], Sequence[Optional[Splice]]]


def constrained_generate(
    step_fn: StepFn,
    grammar: Grammar,
    vocab: Sequence[str],
    max_len: int,
    batch_size: int = 1,
    retrieve_fn: RetrieveFn | None = None,
    constrained: bool = True,
) -> list[list[str]]:
    """Greedy decoding restricted to grammar-allowed tokens.

    ``step_fn`` maps the current output prefixes (one per sequence) to a
    ``(batch, len(vocab))`` logit array for the next token. ``retrieve_fn``
    is asked, for sequences sitting at an argument-mention start, whether to
    splice a whole dictionary entry instead of generating a word.

    Output never exceeds ``max_len`` tokens: a token (or splice) is only
    admissible if the grammar can still be closed within the budget. With
    ``constrained=False`` plain greedy argmax is used and stops at the first
    balanced ``)`` or at ``max_len``.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    index = {tok: i for i, tok in enumerate(vocab)}
    outputs: list[list[str]] = [[] for _ in range(batch_size)]
    states = [grammar.initial() for _ in range(batch_size)]
    finished = [False] * batch_size
    depth = [0] * batch_size

    while not all(finished):
        active = [b for b in range(batch_size) if not finished[b]]
        if retrieve_fn is not None and constrained:
            at_start = [b for b in active if states[b].at_mention_start]
            if at_start:
                picks = retrieve_fn([outputs[b] for b in at_start], at_start)
                for b, pick in zip(at_start, picks):
                    if pick is None or not pick.tokens:
                        continue
                    if not all(t in grammar.vocab.mentions for t in pick.tokens):
                        continue
                    # a splice is a complete mention, so the argument is closed too
                    spliced = (*pick.tokens, CLOSE)
                    room = max_len - len(outputs[b]) - len(spliced)
                    if room < grammar.min_completion(TrieState(Pos.ARG_OR_CLOSE, None, 2)):
                        continue
                    for tok in spliced:
                        states[b] = grammar.advance(states[b], tok)
                    outputs[b].extend(spliced)
        logits = np.asarray(step_fn(outputs), dtype=np.float64)
        if logits.shape != (batch_size, len(vocab)):
            raise ValueError(f"step_fn returned shape {logits.shape}, expected {(batch_size, len(vocab))}")
        for b in active:
            row = logits[b]
            if not np.isfinite(row).any():
                raise ValueError("model produced no finite logits")
            if constrained:
                remaining = max_len - len(outputs[b])
                cands = [
                    index[t]
                    for t in grammar.allowed_tokens(states[b])
                    if t in index
                    and 1 + grammar.min_completion(grammar._step(states[b], t)) <= remaining
                ]
                if not cands:
                    # vocabulary lacks a needed token; close with grammar defaults
                    outputs[b].extend(grammar.closing_tokens(states[b]))
                    finished[b] = True
                    continue
                cands = np.asarray(sorted(cands))
                sub = row[cands]
                sub = np.where(np.isfinite(sub), sub, -np.inf)
                tok = vocab[int(cands[int(np.argmax(sub))])]
                states[b] = grammar.advance(states[b], tok)
                outputs[b].append(tok)
                finished[b] = states[b].done
            else:
                tok = vocab[int(np.nanargmax(np.where(np.isfinite(row), row, -np.inf)))]
                outputs[b].append(tok)
                depth[b] += (tok == OPEN) - (tok == CLOSE)
                finished[b] = depth[b] <= 0 or len(outputs[b]) >= max_len
    return outputs
