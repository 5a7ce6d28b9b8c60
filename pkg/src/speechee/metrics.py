"""TI / TC / AI / AC micro-F1 over record sets."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Mapping

from .schema import RecordSet, normalize

METRICS = ("TI", "TC", "AI", "AC")


@dataclass
class Score:
    matched: int = 0
    n_pred: int = 0
    n_gold: int = 0

    @property
    def precision(self) -> float:
        return self.matched / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.matched / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class MetricReport:
    scores: dict[str, Score] = field(default_factory=lambda: {m: Score() for m in METRICS})
    # metrics excluded from Avg, e.g. TC on a single-type schema
    undefined: tuple[str, ...] = ()
    n_clips: int = 0

    def f1(self, metric: str) -> float:
        return self.scores[metric].f1

    @property
    def avg(self) -> float:
        used = [m for m in METRICS if m not in self.undefined]
        if not used:
            return 0.0
        return sum(self.scores[m].f1 for m in used) / len(used)

    def summary(self) -> dict[str, float]:
        out = {m: self.f1(m) for m in METRICS if m not in self.undefined}
        out["Avg"] = self.avg
        return out

    def __str__(self):
        return "  ".join(f"{k}={v:.4f}" for k, v in self.summary().items())


def tuples(rs: RecordSet) -> dict[str, Counter]:
    """Per-metric tuple multisets of one clip."""
    out = {m: Counter() for m in METRICS}
    for rec in rs.records:
        trig = " ".join(rec.trigger)
        out["TI"][(trig,)] += 1
        out["TC"][(rec.event_type, trig)] += 1
        for role, mention in rec.arguments:
            words = " ".join(mention)
            out["AI"][(rec.event_type, words)] += 1
            out["AC"][(rec.event_type, role, words)] += 1
    return out


def score(
    preds: Mapping[str, RecordSet],
    golds: Mapping[str, RecordSet],
    single_type: bool | None = None,
) -> MetricReport:
    """Micro-averaged scores of ``preds`` against ``golds``.

    Both sides are lowercased before matching. Tuples are matched as
    multisets, so a duplicated prediction of one gold tuple counts once.
    TC is left out of the average when the gold data has a single event
    type (or when ``single_type`` says so).
    """
    missing = set(preds) ^ set(golds)
    if missing:
        raise ValueError(f"prediction/gold ids differ: {sorted(missing)}")
    report = MetricReport(n_clips=len(golds))
    gold_types = set()
    for cid in sorted(golds):
        gold = normalize(golds[cid])
        pred = normalize(preds[cid])
        gold_types |= gold.event_types
        gt, pt = tuples(gold), tuples(pred)
        for m in METRICS:
            s = report.scores[m]
            s.matched += sum((gt[m] & pt[m]).values())
            s.n_pred += sum(pt[m].values())
            s.n_gold += sum(gt[m].values())
    if single_type is None:
        single_type = len(gold_types) == 1
    if single_type:
        report.undefined = ("TC",)
    return report


def _round(x: float) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN))


def report_to_dict(report: MetricReport) -> dict:
    out = {}
    for m in METRICS:
        s = report.scores[m]
        out[m] = {
            "precision": _round(s.precision),
            "recall": _round(s.recall),
            "f1": _round(s.f1),
            "matched": s.matched,
            "pred": s.n_pred,
            "gold": s.n_gold,
            "defined": m not in report.undefined,
        }
    out["Avg"] = _round(report.avg)
    out["clips"] = report.n_clips
    return out


def report_to_json(report: MetricReport) -> bytes:
    # fixed key order, no locale-dependent formatting
    return json.dumps(report_to_dict(report), indent=2, ensure_ascii=True).encode("ascii") + b"\n"


def report_from_json(data: bytes | str) -> MetricReport:
    obj = json.loads(data)
    report = MetricReport(n_clips=obj.get("clips", 0))
    undefined = []
    for m in METRICS:
        s = obj[m]
        report.scores[m] = Score(s["matched"], s["pred"], s["gold"])
        if not s.get("defined", True):
            undefined.append(m)
    report.undefined = tuple(undefined)
    return report
