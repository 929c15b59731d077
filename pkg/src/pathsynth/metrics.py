"""Exact-match and token-F1 scoring for short QA answers."""

from __future__ import annotations

import json
import unicodedata
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IdMismatch, ParseError

ARTICLES = frozenset({"a", "an", "the"})


def _is_punct(ch: str) -> bool:
    cat = unicodedata.category(ch)
    return cat[0] in "PS"


def normalize(text: str) -> str:
    """Lowercase, drop punctuation and symbols, drop articles, collapse spaces."""
    text = text.lower()
    text = "".join(ch for ch in text if not _is_punct(ch))
    return " ".join(tok for tok in text.split() if tok not in ARTICLES)


def exact_match(pred: str, gold: str) -> bool:
    return normalize(pred) == normalize(gold)


def f1(pred: str, gold: str) -> float:
    """Token F1 over the multiset of normalized tokens."""
    p_toks = normalize(pred).split()
    g_toks = normalize(gold).split()
    if not p_toks and not g_toks:
        return 1.0
    if not p_toks or not g_toks:
        return 0.0
    overlap = sum((Counter(p_toks) & Counter(g_toks)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(p_toks)
    recall = overlap / len(g_toks)
    return 2 * precision * recall / (precision + recall)


@dataclass
class SampleScore:
    sample_id: str
    em: bool
    f1: float
    termination: str | None = None
    prediction: str | None = None


@dataclass
class EvalReport:
    n: int
    em: float
    f1: float
    em_sum: float
    f1_sum: float
    per_sample: list[SampleScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "em": self.em,
            "f1": self.f1,
            "em_sum": self.em_sum,
            "f1_sum": self.f1_sum,
            "per_sample": [
                {"sample_id": s.sample_id, "em": s.em, "f1": s.f1,
                 "termination": s.termination}
                for s in self.per_sample
            ],
        }

    def table(self) -> str:
        lines = [
            f"{'samples':<10}{self.n:>10}",
            f"{'EM':<10}{100 * self.em:>10.2f}",
            f"{'F1':<10}{100 * self.f1:>10.2f}",
        ]
        terminations = Counter(s.termination for s in self.per_sample if s.termination)
        for kind, count in sorted(terminations.items()):
            lines.append(f"{kind:<20}{count:>10}")
        return "\n".join(lines)


def evaluate(predictions: Iterable[tuple[str, str | None]], golds: Mapping[str, str],
             terminations: Mapping[str, str] | None = None) -> EvalReport:
    """Score predictions against ``golds``; missing predictions score 0."""
    preds: dict[str, str | None] = {}
    for sample_id, pred in predictions:
        if sample_id not in golds:
            raise IdMismatch(f"prediction for unknown sample {sample_id!r}")
        if sample_id in preds:
            raise IdMismatch(f"duplicate prediction for sample {sample_id!r}")
        preds[sample_id] = pred
    terminations = terminations or {}
    scores = []
    for sample_id, gold in golds.items():
        pred = preds.get(sample_id)
        if pred is None:
            scores.append(SampleScore(sample_id, False, 0.0, terminations.get(sample_id), None))
            continue
        scores.append(SampleScore(sample_id, exact_match(pred, gold), f1(pred, gold),
                                  terminations.get(sample_id), pred))
    n = len(scores)
    em_sum = float(sum(s.em for s in scores))
    f1_sum = float(sum(s.f1 for s in scores))
    return EvalReport(n, em_sum / n if n else 0.0, f1_sum / n if n else 0.0,
                      em_sum, f1_sum, scores)


def read_predictions(path: str | Path) -> list[tuple[str, str | None]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out.append((str(rec["sample_id"]), rec.get("prediction")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad prediction line: {exc!r}", line=lineno, path=str(path)) from exc
    return out
