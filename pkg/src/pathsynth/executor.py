"""Executor-side path synthesis inside the simulated environment.

For each sub-question the golden evidence alone is used to derive a one
sentence answer, the golden facts that actually support that sentence are
picked by embedding similarity, and the model then writes a grounded
chain of thought over the full noisy pool.
"""

from __future__ import annotations

import logging
import random
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

from . import prompts
from .backends import (
    ChatMessage,
    EmbeddingBackend,
    GenerationBackend,
    GenerationRequest,
    cosine,
    embed,
    generate,
)
from .dataset_io import QaSample, SupportingFact, is_literal, parse_triple
from .errors import EmptyAnswer, GroundingError, TagError
from .tags import ParsedTurn, SearchCall, parse_turn, render_turn

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.9


@dataclass(frozen=True)
class GenParams:
    max_tokens: int = 512
    temperature: float = 0.0
    seed: int | None = 0

    def request(self, messages: Sequence[ChatMessage], attempt: int = 0) -> GenerationRequest:
        seed = None if self.seed is None else self.seed + attempt
        return GenerationRequest(tuple(messages), self.max_tokens, self.temperature, (), seed)


@dataclass(frozen=True)
class EvidenceSelection:
    answer_sentence: str
    selected: tuple[tuple[str, float], ...]
    threshold: float
    fallback_used: bool

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(fid for fid, _ in self.selected)

    def to_dict(self) -> dict[str, Any]:
        return {"answer_sentence": self.answer_sentence,
                "selected": [[fid, score] for fid, score in self.selected],
                "threshold": self.threshold, "fallback_used": self.fallback_used}

    @classmethod
    def from_dict(cls, d: dict) -> EvidenceSelection:
        return cls(d["answer_sentence"], tuple((fid, float(s)) for fid, s in d["selected"]),
                   float(d["threshold"]), bool(d["fallback_used"]))


def threshold_filter(scores: Sequence[float], tau: float) -> tuple[list[int], bool]:
    """Indices with score strictly above ``tau``; else the argmax (lowest index on ties)."""
    if not scores:
        raise ValueError("no scores to filter")
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    kept = [i for i, s in enumerate(scores) if s > tau]
    if kept:
        return kept, False
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return [best], True


def select_evidence(answer_sentence: str, golden: Sequence[SupportingFact], tau: float,
                    embed_backend: EmbeddingBackend) -> EvidenceSelection:
    """Golden facts whose embedding is close to the full answer sentence."""
    if not golden:
        raise ValueError("select_evidence needs at least one golden fact")
    vectors = embed(embed_backend, [answer_sentence] + [f.content for f in golden])
    answer_vec, fact_vecs = vectors[0], vectors[1:]
    scores = [cosine(v, answer_vec) for v in fact_vecs]
    kept, fallback = threshold_filter(scores, tau)
    return EvidenceSelection(answer_sentence,
                             tuple((golden[i].id, scores[i]) for i in kept), tau, fallback)


@dataclass(frozen=True)
class ExecutorRecord:
    sub_question: str
    presented_facts: tuple[SupportingFact, ...]
    turn: ParsedTurn
    selection: EvidenceSelection

    def __post_init__(self) -> None:
        if self.turn.kind != "select_answer":
            raise ValueError("executor record needs a select/answer turn")
        if self.selection.answer_sentence not in (self.turn.answer or ""):
            raise ValueError("answer sentence missing from the turn")
        if any(i >= len(self.presented_facts) for i in self.turn.selected):
            raise ValueError("select index outside the presented pool")

    @property
    def answer_sentence(self) -> str:
        return self.selection.answer_sentence

    @property
    def selected_ids(self) -> tuple[str, ...]:
        return tuple(self.presented_facts[i].id for i in self.turn.selected)

    def to_dict(self) -> dict[str, Any]:
        return {"sub_question": self.sub_question,
                "presented_facts": [f.to_dict() for f in self.presented_facts],
                "turn": render_turn(self.turn),
                "selection": self.selection.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ExecutorRecord:
        facts = tuple(SupportingFact(f["id"], f["kind"], f["content"], f.get("source_title"))
                      for f in d["presented_facts"])
        return cls(d["sub_question"], facts, parse_turn(d["turn"]),
                   EvidenceSelection.from_dict(d["selection"]))


def evidence_block(facts: Sequence[SupportingFact]) -> str:
    return "\n".join(f"[{i}] {f.display()}" for i, f in enumerate(facts))


_ANSWER_TAG = re.compile(r"<answer>(.*?)</answer>", re.S)


def _clean_answer(text: str) -> str:
    m = _ANSWER_TAG.search(text)
    if m is not None:
        text = m.group(1)
    return " ".join(text.split())


def answer_subquestion(question: str, golden: Sequence[SupportingFact],
                       backend: GenerationBackend, *, attempts: int = 3,
                       params: GenParams = GenParams()) -> str:
    """One declarative sentence answering ``question`` from the golden facts only."""
    if not golden:
        raise ValueError("answer_subquestion needs golden evidence")
    messages = [
        ChatMessage("system", prompts.load("answer_subquestion")),
        ChatMessage("user", f"Question: {question}\nEvidence:\n"
                    + "\n".join(f.display() for f in golden)),
    ]
    for attempt in range(attempts):
        sentence = _clean_answer(generate(backend, params.request(messages, attempt)))
        if sentence:
            return sentence
        logger.info("empty sub-answer for %r (attempt %d)", question, attempt + 1)
    raise EmptyAnswer(f"no answer for {question!r} after {attempts} attempts")


def cot_messages(question: str, answer_sentence: str, golden_indices: Sequence[int],
                 pool: Sequence[SupportingFact]) -> list[ChatMessage]:
    golden_lines = "\n".join(f"[{i}] {pool[i].display()}" for i in golden_indices)
    user = (f"Question: {question}\nSupporting evidence:\n{evidence_block(pool)}\n"
            f"Answer: {answer_sentence}\nGolden evidence: {golden_lines}")
    return [ChatMessage("system", prompts.load("executor_synthesis")), ChatMessage("user", user)]


def synth_cot(question: str, answer_sentence: str, selection: EvidenceSelection,
              pool: Sequence[SupportingFact], backend: GenerationBackend, *,
              attempts: int = 3, params: GenParams = GenParams()) -> ExecutorRecord:
    """Ask for a think/select/answer turn citing exactly the selected facts."""
    position = {f.id: i for i, f in enumerate(pool)}
    try:
        expected = tuple(sorted(position[fid] for fid in selection.ids))
    except KeyError as exc:
        raise GroundingError(f"selected fact {exc.args[0]} is not in the pool") from None
    messages = cot_messages(question, answer_sentence, expected, pool)
    problem = ""
    for attempt in range(attempts):
        text = generate(backend, params.request(messages, attempt))
        try:
            turn = parse_turn(text)
        except TagError as exc:
            problem = f"unparseable executor turn: {exc}"
            continue
        if turn.kind != "select_answer":
            problem = f"expected select/answer body, got {turn.kind}"
            continue
        if not turn.think:
            problem = "missing think block"
            continue
        cited = expected if len(pool) == 1 else tuple(sorted(set(turn.selected)))
        if cited != expected:
            problem = f"cited {list(turn.selected)}, golden selection is {list(expected)}"
            continue
        final = ParsedTurn(think=turn.think, selected=expected, answer=answer_sentence)
        return ExecutorRecord(question, tuple(pool), final, selection)
    raise GroundingError(f"{question!r}: {problem} (after {attempts} attempts)")


@dataclass(frozen=True)
class OracleReply:
    sentence: str
    candidates: tuple[str, ...] = ()


def candidate_surfaces(facts: Sequence[SupportingFact]) -> list[str]:
    """Non-literal objects of KG triples, in order; text facts yield nothing."""
    out = []
    for f in facts:
        if f.kind != "kg_triple":
            continue
        _, _, obj = parse_triple(f.content)
        if not is_literal(obj) and obj not in out:
            out.append(obj)
    return out


@dataclass
class ExecutorOracle:
    """Answers the planner's Search calls during synthesis and keeps the records."""

    sample: QaSample
    backend: GenerationBackend
    embed_backend: EmbeddingBackend
    tau: float = DEFAULT_TAU
    attempts: int = 3
    params: GenParams = GenParams()
    shuffle_seed: int | None = None
    records: list[ExecutorRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        pool = list(self.sample.facts)
        if self.shuffle_seed is not None:
            random.Random(f"{self.shuffle_seed}:{self.sample.sample_id}").shuffle(pool)
        self.pool = tuple(pool)
        wanted = set(self.sample.golden_ids)
        self.golden = [f for f in self.pool if f.id in wanted]

    def __call__(self, call: SearchCall, bindings=None) -> OracleReply:
        sentence = answer_subquestion(call.question, self.golden, self.backend,
                                      attempts=self.attempts, params=self.params)
        selection = select_evidence(sentence, self.golden, self.tau, self.embed_backend)
        record = synth_cot(call.question, sentence, selection, self.pool, self.backend,
                           attempts=self.attempts, params=self.params)
        self.records.append(record)
        chosen = [f for f in self.pool if f.id in set(selection.ids)]
        return OracleReply(sentence, tuple(candidate_surfaces(chosen)))
