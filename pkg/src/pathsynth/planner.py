"""Planner-side path synthesis: abductive decomposition and the think/action loop."""

from __future__ import annotations

import logging
import re
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

from . import prompts
from .backends import ChatMessage, GenerationBackend, generate
from .dataset_io import QaSample, parse_triple
from .errors import MalformedPlan, StepBudgetExceeded, TagError
from .executor import GenParams, OracleReply
from .tags import (
    ENTITY,
    PLAIN,
    BindingTable,
    CandidateBinding,
    ParsedTurn,
    SearchCall,
    format_candidates,
    observation_line,
    parse_turn,
    render_observation,
    render_turn,
)

logger = logging.getLogger(__name__)

PLAN_HEADER = "To solve this problem, I need to:"
PRONOUN_HEADS = frozenset({"this", "these", "it", "they"})

_ENUM = re.compile(r"^[ \t]*(\d+)[.)][ \t]+(.+?)[ \t]*$", re.M)


@dataclass(frozen=True)
class SynthesisLimits:
    max_steps: int = 8
    max_actions_per_step: int = 4
    max_plan_len: int = 8
    attempts: int = 3

    def __post_init__(self) -> None:
        for name in ("max_steps", "max_actions_per_step", "max_plan_len", "attempts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Plan:
    sub_questions: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sub_questions", tuple(self.sub_questions))
        if not self.sub_questions or not all(q.strip() for q in self.sub_questions):
            raise ValueError("plan needs at least one non-empty step")

    def render(self) -> str:
        lines = [PLAN_HEADER] + [f"{i}. {q}" for i, q in enumerate(self.sub_questions, 1)]
        return "\n".join(lines)


def parse_plan(text: str, max_plan_len: int = 8) -> Plan:
    """Pull the first ``1. ... 2. ...`` enumeration out of ``text``."""
    steps: list[str] = []
    for m in _ENUM.finditer(text):
        num = int(m.group(1))
        if num == len(steps) + 1:
            steps.append(m.group(2))
        elif steps:
            break
    if not steps:
        raise MalformedPlan("no numbered plan found")
    if len(steps) > max_plan_len:
        raise MalformedPlan(f"plan has {len(steps)} steps, limit is {max_plan_len}")
    return Plan(tuple(steps))


@dataclass(frozen=True)
class AgentState:
    plan: Plan
    past_thoughts: tuple[str, ...] = ()
    past_batches: tuple[tuple[SearchCall, ...], ...] = ()
    past_answers: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self) -> None:
        if not len(self.past_thoughts) == len(self.past_batches) == len(self.past_answers):
            raise ValueError("thoughts, batches and answers must have equal length")
        for batch, answers in zip(self.past_batches, self.past_answers):
            if len(batch) != len(answers):
                raise ValueError("each step needs one answer per Search call")

    @property
    def step_index(self) -> int:
        return len(self.past_batches) + 1

    def advance(self, thought: str, batch: Sequence[SearchCall], answers: Sequence[str]) -> AgentState:
        return AgentState(self.plan, self.past_thoughts + (thought,),
                          self.past_batches + (tuple(batch),), self.past_answers + (tuple(answers),))


def question_candidates(sample: QaSample) -> list[str]:
    """Topic entities named in the question, in order of appearance.

    Subjects of golden triples (or titles of golden passages) that occur in
    the question text; the question's own spelling is kept.
    """
    names = []
    for f in sample.golden_facts:
        if f.kind == "kg_triple":
            names.append(parse_triple(f.content)[0])
        elif f.source_title:
            names.append(f.source_title)
    q_folded = sample.question.casefold()
    found: dict[int, str] = {}
    for name in dict.fromkeys(names):
        pos = q_folded.find(name.casefold())
        if pos >= 0 and pos not in found:
            found[pos] = sample.question[pos:pos + len(name)]
    return [found[p] for p in sorted(found)]


def question_line(question: str, bindings: BindingTable | None) -> str:
    if bindings is not None and len(bindings):
        return f"Question: {question} Candidate: {format_candidates(list(bindings))}"
    return f"Question: {question}"


def synthesis_user_message(sample: QaSample, bindings: BindingTable | None = None) -> str:
    evidence = "\n".join(f.display() for f in sample.golden_facts)
    return (f"{question_line(sample.question, bindings)}\nAnswer: {sample.answer}\n"
            f"Supporting evidences:\n{evidence}")


def decompose(sample: QaSample, backend: GenerationBackend, *, dialect: str = PLAIN,
              limits: SynthesisLimits = SynthesisLimits(), params: GenParams = GenParams(),
              bindings: BindingTable | None = None) -> Plan:
    """Reverse-engineer a plan from question, answer and golden evidence."""
    messages = [
        ChatMessage("system", prompts.planner_synthesis(dialect)),
        ChatMessage("user", synthesis_user_message(sample, bindings) + "\n\n" + prompts.load("decompose")),
    ]
    problem: MalformedPlan | None = None
    for attempt in range(limits.attempts):
        text = generate(backend, params.request(messages, attempt))
        try:
            return parse_plan(text, limits.max_plan_len)
        except MalformedPlan as exc:
            problem = exc
            logger.info("%s: malformed plan (attempt %d): %s", sample.sample_id, attempt + 1, exc)
    raise MalformedPlan(f"{sample.sample_id}: {problem} (after {limits.attempts} attempts)")


def step_messages(state: AgentState, sample: QaSample, dialect: str,
                  bindings: BindingTable | None = None,
                  question_bindings: BindingTable | None = None) -> list[ChatMessage]:
    """Conversation conditioning the next planner turn on the agent state."""
    qb = question_bindings if question_bindings is not None else bindings
    messages = [
        ChatMessage("system", prompts.planner_synthesis(dialect)),
        ChatMessage("user", synthesis_user_message(sample, qb) + "\nPlan:\n" + state.plan.render()),
    ]
    for thought, batch, answers in zip(state.past_thoughts, state.past_batches, state.past_answers):
        turn = ParsedTurn(think=thought or None, actions=batch)
        messages.append(ChatMessage("assistant", render_turn(turn, dialect)))
        messages.append(ChatMessage("user", render_observation(answers, dialect)))
    return messages


def _check_turn(turn: ParsedTurn, limits: SynthesisLimits, bindings: BindingTable | None,
                strict: bool) -> None:
    if turn.kind not in ("actions", "final_answer"):
        raise TagError(TagError.MISSING_BODY, 0, f"planner turn has a {turn.kind} body")
    if len(turn.actions) > limits.max_actions_per_step:
        raise TagError(TagError.MALFORMED_SEARCH, 0,
                       f"{len(turn.actions)} calls exceed max_actions_per_step={limits.max_actions_per_step}")
    for call in turn.actions:
        words = call.question.split()
        if strict and words and words[0].lower().strip(",.") in PRONOUN_HEADS:
            raise TagError(TagError.MALFORMED_SEARCH, 0, f"pronoun-headed question {call.question!r}")
        if call.entity_ref is not None and bindings is not None and bindings.resolve(call.entity_ref) is None:
            raise TagError(TagError.MALFORMED_SEARCH, 0, f"unbound candidate [{call.entity_ref}]")


def synth_step(state: AgentState, sample: QaSample, backend: GenerationBackend, *,
               dialect: str = PLAIN, limits: SynthesisLimits = SynthesisLimits(),
               params: GenParams = GenParams(), strict: bool = True,
               bindings: BindingTable | None = None,
               question_bindings: BindingTable | None = None) -> ParsedTurn:
    """Generate the planner's next think + action (or final answer) turn."""
    if state.step_index > limits.max_steps:
        raise StepBudgetExceeded(f"{sample.sample_id}: step {state.step_index} > {limits.max_steps}")
    messages = step_messages(state, sample, dialect, bindings, question_bindings)
    problem: TagError | None = None
    for attempt in range(limits.attempts):
        text = generate(backend, params.request(messages, attempt))
        try:
            turn = parse_turn(text, dialect, strict=strict, bindings=bindings)
            _check_turn(turn, limits, bindings, strict)
        except TagError as exc:
            problem = exc
            logger.info("%s step %d: rejected turn (attempt %d): %s", sample.sample_id,
                        state.step_index, attempt + 1, exc)
            continue
        if state.step_index == 1:
            plan_text = state.plan.render()
            think = turn.think or ""
            if plan_text not in think:
                think = f"{plan_text}\n{think}" if think else plan_text
                turn = ParsedTurn(think=think, actions=turn.actions, answer=turn.answer)
        return turn
    assert problem is not None
    raise problem


@dataclass(frozen=True)
class PlannerPath:
    plan: Plan
    turns: tuple[ParsedTurn, ...]
    observations: tuple[tuple[str, ...], ...]
    final_answer: str
    dialect: str = PLAIN
    question_candidates: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.turns or self.turns[-1].kind != "final_answer":
            raise ValueError("a planner path ends with a final answer")
        actions = [t for t in self.turns if t.kind == "actions"]
        if len(actions) != len(self.turns) - 1:
            raise ValueError("every turn but the last must issue Search calls")
        # observation counts are checked by assemble(), which reports CountMismatch

    @property
    def step_count(self) -> int:
        return len(self.turns)

    @property
    def calls(self) -> list[SearchCall]:
        return [c for t in self.turns for c in t.actions]

    def to_dict(self) -> dict[str, Any]:
        return {"plan": list(self.plan.sub_questions),
                "turns": [render_turn(t, self.dialect) for t in self.turns],
                "observations": [list(o) for o in self.observations],
                "final_answer": self.final_answer,
                "dialect": self.dialect,
                "question_candidates": list(self.question_candidates)}

    @classmethod
    def from_dict(cls, d: dict, *, strict: bool = True) -> PlannerPath:
        dialect = d.get("dialect", PLAIN)
        turns = tuple(parse_turn(t, dialect, strict=strict) for t in d["turns"])
        return cls(Plan(tuple(d["plan"])), turns,
                   tuple(tuple(o) for o in d["observations"]), d["final_answer"], dialect,
                   tuple(d.get("question_candidates", ())))


Oracle = Callable[[SearchCall, BindingTable], "OracleReply | str"]


def run_episode(sample: QaSample, backend: GenerationBackend, executor_oracle: Oracle,
                limits: SynthesisLimits = SynthesisLimits(), *, dialect: str = PLAIN,
                plan: Plan | None = None, params: GenParams = GenParams(),
                strict: bool = True) -> PlannerPath:
    """Simulate the agent solving ``sample`` turn by turn until it answers."""
    candidates = question_candidates(sample) if dialect == ENTITY else []
    bindings = BindingTable(candidates) if dialect == ENTITY else None
    question_bindings = BindingTable(candidates) if dialect == ENTITY else None
    if plan is None:
        plan = decompose(sample, backend, dialect=dialect, limits=limits, params=params,
                         bindings=question_bindings)
    state = AgentState(plan)
    turns: list[ParsedTurn] = []
    observations: list[tuple[str, ...]] = []
    while state.step_index <= limits.max_steps:
        turn = synth_step(state, sample, backend, dialect=dialect, limits=limits, params=params,
                          strict=strict, bindings=bindings, question_bindings=question_bindings)
        turns.append(turn)
        if turn.kind == "final_answer":
            return PlannerPath(plan, tuple(turns), tuple(observations), turn.answer or "",
                               dialect, tuple(candidates))
        lines = []
        for call in turn.actions:
            reply = executor_oracle(call, bindings)
            if isinstance(reply, str):
                reply = OracleReply(reply)
            new: list[CandidateBinding] = []
            if bindings is not None:
                for surface in reply.candidates:
                    idx, is_new = bindings.bind(surface)
                    if is_new:
                        new.append(CandidateBinding(idx, surface))
            lines.append(observation_line(reply.sentence, new))
        observations.append(tuple(lines))
        state = state.advance(turn.think or "", turn.actions, lines)
    raise StepBudgetExceeded(f"{sample.sample_id}: no answer within {limits.max_steps} steps")
