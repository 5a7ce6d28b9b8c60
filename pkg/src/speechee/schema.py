"""Event schemas, event records and the linearized record grammar.

A record set is serialized as a whitespace-separated token string::

    ( ( Attack fired ( Attacker the soldiers ) ) )

i.e. ``RS := "(" REC* ")"``, ``REC := "(" TYPE WORD+ ARG* ")"`` and
``ARG := "(" ROLE WORD+ ")"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

OPEN = "("
CLOSE = ")"


class SchemaError(ValueError):
    """A record or schema violates the event schema."""


class ParseError(ValueError):
    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (token {index})")
        self.reason = message
        self.index = index


def _label(text: str) -> str:
    # labels are single grammar tokens
    label = "_".join(str(text).split())
    if not label:
        raise SchemaError("empty label")
    if label in (OPEN, CLOSE):
        raise SchemaError(f"label may not be a structure token: {label!r}")
    return label


@dataclass(frozen=True)
class EventSchema:
    event_types: tuple[str, ...]
    roles_by_type: dict[str, tuple[str, ...]] = field(hash=False)

    def __post_init__(self):
        types = tuple(_label(t) for t in self.event_types)
        if len(set(types)) != len(types):
            raise SchemaError(f"duplicate event types in {list(types)}")
        roles = {}
        for raw_type, raw_roles in self.roles_by_type.items():
            etype = _label(raw_type)
            if etype not in types:
                raise SchemaError(f"roles given for unknown event type {etype!r}")
            rs = tuple(_label(r) for r in raw_roles)
            if len(set(rs)) != len(rs):
                raise SchemaError(f"duplicate roles for {etype!r}: {list(rs)}")
            roles[etype] = rs
        for etype in types:
            roles.setdefault(etype, ())
        object.__setattr__(self, "event_types", types)
        object.__setattr__(self, "roles_by_type", roles)

    @classmethod
    def from_dict(cls, obj: dict) -> "EventSchema":
        return cls(tuple(obj["event_types"]), dict(obj.get("roles", {})))

    def to_dict(self) -> dict:
        return {
            "event_types": list(self.event_types),
            "roles": {t: list(self.roles_by_type[t]) for t in self.event_types},
        }

    @classmethod
    def load(cls, path) -> "EventSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @property
    def labels(self) -> frozenset[str]:
        out = set(self.event_types)
        for roles in self.roles_by_type.values():
            out.update(roles)
        return frozenset(out)

    def validate(self, record: "EventRecord") -> None:
        if record.event_type not in self.roles_by_type:
            raise SchemaError(f"unknown event type {record.event_type!r} in record {record}")
        allowed = self.roles_by_type[record.event_type]
        for role, _ in record.arguments:
            if role not in allowed:
                raise SchemaError(
                    f"role {role!r} not defined for {record.event_type!r} in record {record}"
                )


@dataclass(frozen=True)
class EventRecord:
    """One event: its type, trigger mention and (role, mention) arguments.

    Mentions are stored as tuples of words. Roles may repeat.
    """

    event_type: str
    trigger: tuple[str, ...]
    arguments: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        trigger = _words(self.trigger)
        if not trigger:
            raise SchemaError(f"record of type {self.event_type!r} has an empty trigger")
        args = []
        for role, mention in self.arguments:
            words = _words(mention)
            if not words:
                raise SchemaError(f"argument {role!r} of {self.event_type!r} has an empty mention")
            args.append((role, words))
        object.__setattr__(self, "trigger", trigger)
        object.__setattr__(self, "arguments", tuple(args))

    @classmethod
    def from_dict(cls, obj: dict) -> "EventRecord":
        return cls(obj["type"], obj["trigger"], tuple((r, m) for r, m in obj.get("args", [])))

    def to_dict(self) -> dict:
        return {
            "type": self.event_type,
            "trigger": " ".join(self.trigger),
            "args": [[role, " ".join(m)] for role, m in self.arguments],
        }

    def __str__(self):
        args = ", ".join(f"{r}={' '.join(m)!r}" for r, m in self.arguments)
        return f"{self.event_type}({' '.join(self.trigger)!r}; {args})"


def _words(mention) -> tuple[str, ...]:
    if isinstance(mention, str):
        return tuple(mention.split())
    return tuple(mention)


@dataclass(frozen=True)
class RecordSet:
    records: tuple[EventRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def event_types(self) -> frozenset[str]:
        return frozenset(r.event_type for r in self.records)

    def validate(self, schema: EventSchema) -> None:
        for record in self.records:
            schema.validate(record)

    @classmethod
    def from_list(cls, objs: Iterable[dict]) -> "RecordSet":
        return cls(tuple(EventRecord.from_dict(o) for o in objs))

    def to_list(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


def linearize(rs: RecordSet, schema: EventSchema | None = None) -> list[str]:
    if schema is not None:
        rs.validate(schema)
    tokens = [OPEN]
    for rec in rs.records:
        tokens += [OPEN, rec.event_type, *rec.trigger]
        for role, mention in rec.arguments:
            tokens += [OPEN, role, *mention, CLOSE]
        tokens.append(CLOSE)
    tokens.append(CLOSE)
    return tokens


def _tokens(seq) -> list[str]:
    return seq.split() if isinstance(seq, str) else list(seq)


def parse(tokens, schema: EventSchema, mode: str = "strict"):
    """Parse a linearized token sequence back into a :class:`RecordSet`.

    In ``strict`` mode any grammar or schema violation raises
    :class:`ParseError`. In ``lenient`` mode the result is a pair
    ``(RecordSet, dropped)``: well-formed record blocks with valid labels are
    kept, everything else is skipped and counted.
    """
    toks = _tokens(tokens)
    if mode == "strict":
        return _parse_strict(toks, schema)
    if mode == "lenient":
        return _parse_lenient(toks, schema)
    raise ValueError(f"unknown parse mode {mode!r}")


def _parse_strict(toks: list[str], schema: EventSchema) -> RecordSet:
    depth = 0
    for i, tok in enumerate(toks):
        depth += (tok == OPEN) - (tok == CLOSE)
        if depth < 0:
            raise ParseError("unbalanced parentheses", i)
    if depth != 0:
        raise ParseError("unbalanced parentheses", len(toks))
    if not toks or toks[0] != OPEN:
        raise ParseError("expected '('", 0)
    records = []
    i = 1
    while i < len(toks) and toks[i] == OPEN:
        rec, i = _parse_record(toks, i, schema)
        records.append(rec)
    if i >= len(toks) or toks[i] != CLOSE:
        raise ParseError("expected '(' or ')'", i)
    if i != len(toks) - 1:
        raise ParseError("trailing tokens after record set", i + 1)
    return RecordSet(tuple(records))


def _parse_record(toks, i, schema):
    # toks[i] == "("
    start = i
    i += 1
    if i >= len(toks) or toks[i] in (OPEN, CLOSE):
        raise ParseError("expected event type", i)
    etype = toks[i]
    if etype not in schema.roles_by_type:
        raise ParseError(f"unknown event type {etype!r}", i)
    i += 1
    trigger, i = _mention(toks, i)
    if not trigger:
        raise ParseError("empty trigger mention", i)
    args = []
    while i < len(toks) and toks[i] == OPEN:
        i += 1
        if i >= len(toks) or toks[i] in (OPEN, CLOSE):
            raise ParseError("expected argument role", i)
        role = toks[i]
        if role not in schema.roles_by_type[etype]:
            if any(role in rs for rs in schema.roles_by_type.values()):
                raise ParseError(f"role {role!r} not defined for {etype!r}", i)
            raise ParseError(f"unknown role {role!r}", i)
        i += 1
        mention, i = _mention(toks, i)
        if not mention:
            raise ParseError("empty argument mention", i)
        if i >= len(toks) or toks[i] != CLOSE:
            raise ParseError("expected ')' after argument", i)
        i += 1
        args.append((role, mention))
    if i >= len(toks) or toks[i] != CLOSE:
        raise ParseError(f"expected ')' closing record opened at {start}", i)
    return EventRecord(etype, tuple(trigger), tuple(args)), i + 1


def _mention(toks, i):
    words = []
    while i < len(toks) and toks[i] not in (OPEN, CLOSE):
        words.append(toks[i])
        i += 1
    return words, i


def _parse_lenient(toks: list[str], schema: EventSchema) -> tuple[RecordSet, int]:
    records = []
    dropped = 0
    # record blocks are the depth-2 groups; the outer wrapper is optional
    depth = 0
    block_start = None
    for i, tok in enumerate(toks):
        if tok == OPEN:
            depth += 1
            if depth == 2:
                block_start = i
        elif tok == CLOSE:
            if depth == 2 and block_start is not None:
                block = toks[block_start : i + 1]
                try:
                    rec, end = _parse_record(block, 0, schema)
                    if end != len(block):
                        raise ParseError("trailing tokens in record", end)
                    records.append(rec)
                except (ParseError, SchemaError):
                    dropped += 1
                block_start = None
            depth = max(depth - 1, 0)
    if block_start is not None:
        # unterminated trailing block
        dropped += 1
    return RecordSet(tuple(records)), dropped


def normalize(rs: RecordSet) -> RecordSet:
    """Lowercase every mention; labels are left alone."""
    return RecordSet(
        tuple(
            EventRecord(
                r.event_type,
                tuple(w.lower() for w in r.trigger),
                tuple((role, tuple(w.lower() for w in m)) for role, m in r.arguments),
            )
            for r in rs.records
        )
    )


def read_jsonl(path) -> dict[str, RecordSet]:
    """Read the prediction/gold exchange format into ``{id: RecordSet}``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["id"])] = RecordSet.from_list(obj.get("records", []))
            except (json.JSONDecodeError, KeyError, TypeError, SchemaError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return out


def write_jsonl(path, sets: dict[str, RecordSet] | Sequence[tuple[str, RecordSet]]) -> None:
    items = sets.items() if isinstance(sets, dict) else sets
    with open(path, "w", encoding="utf-8") as fh:
        for cid, rs in items:
            fh.write(json.dumps({"id": cid, "records": rs.to_list()}) + "\n")
