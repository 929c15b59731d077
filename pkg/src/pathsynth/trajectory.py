"""Trajectory assembly, SFT formatting and JSONL persistence."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import prompts
from .backends import ChatMessage, check_alternation
from .dataset_io import QaSample, SupportingFact
from .errors import (
    AnswerMismatch,
    CitationError,
    CountMismatch,
    DialectMismatch,
    ObservationMismatch,
    ParseError,
    SchemaError,
)
from .executor import ExecutorRecord, evidence_block
from .metrics import normalize
from .planner import PlannerPath, question_line
from .tags import BindingTable, render_observation, render_turn, split_candidates

PLANNER_KIND = "planner_multi_turn"
EXECUTOR_KIND = "executor_single_turn"


@dataclass(frozen=True)
class Trajectory:
    sample_id: str
    question: str
    answer: str
    dataset_tag: str
    planner_path: PlannerPath
    executor_records: tuple[ExecutorRecord, ...]

    @property
    def plan(self):
        return self.planner_path.plan

    @property
    def final_answer(self) -> str:
        return self.planner_path.final_answer

    @property
    def dialect(self) -> str:
        return self.planner_path.dialect

    @property
    def action_count(self) -> int:
        return len(self.executor_records)

    def to_dict(self) -> dict[str, Any]:
        return {"sample_id": self.sample_id, "question": self.question, "answer": self.answer,
                "dataset_tag": self.dataset_tag, "planner_path": self.planner_path.to_dict(),
                "executor_records": [r.to_dict() for r in self.executor_records]}

    @classmethod
    def from_dict(cls, d: dict) -> Trajectory:
        return cls(d["sample_id"], d["question"], d["answer"], d.get("dataset_tag", ""),
                   PlannerPath.from_dict(d["planner_path"]),
                   tuple(ExecutorRecord.from_dict(r) for r in d["executor_records"]))


def assemble(sample: QaSample, planner_path: PlannerPath,
             records: Sequence[ExecutorRecord]) -> Trajectory:
    """Check that planner path and executor records form one consistent trajectory.

    Nothing is repaired: any inconsistency raises.
    """
    calls = planner_path.calls
    if len(records) != len(calls):
        raise CountMismatch(f"{sample.sample_id}: {len(calls)} Search calls but "
                            f"{len(records)} executor records")
    action_turns = [t for t in planner_path.turns if t.kind == "actions"]
    if len(planner_path.observations) != len(action_turns):
        raise CountMismatch(f"{sample.sample_id}: {len(action_turns)} action turns but "
                            f"{len(planner_path.observations)} observations")
    lines = []
    for i, (turn, obs) in enumerate(zip(action_turns, planner_path.observations), 1):
        if len(obs) != len(turn.actions):
            raise CountMismatch(f"{sample.sample_id}: step {i} issued {len(turn.actions)} calls "
                                f"but has {len(obs)} observation lines")
        lines.extend(obs)

    next_index = len(planner_path.question_candidates)
    golden = set(sample.golden_ids)
    for j, (call, record, line) in enumerate(zip(calls, records, lines)):
        if record.sub_question != call.question:
            raise ObservationMismatch(f"{sample.sample_id}: record {j} answers "
                                      f"{record.sub_question!r}, call asked {call.question!r}")
        sentence, bindings = split_candidates(line)
        if sentence != record.answer_sentence:
            raise ObservationMismatch(f"{sample.sample_id}: observation {j} {sentence!r} != "
                                      f"record answer {record.answer_sentence!r}")
        for b in bindings:
            if b.index != next_index:
                raise ObservationMismatch(f"{sample.sample_id}: candidate [{b.index}] out of "
                                          f"sequence, expected [{next_index}]")
            next_index += 1
        stray = [fid for fid in (*record.selected_ids, *record.selection.ids) if fid not in golden]
        if stray:
            raise CitationError(f"{sample.sample_id}: record {j} cites non-golden {stray}")

    if normalize(planner_path.final_answer) != normalize(sample.answer):
        raise AnswerMismatch(f"{sample.sample_id}: final answer {planner_path.final_answer!r} "
                             f"!= gold {sample.answer!r}")
    return Trajectory(sample.sample_id, sample.question, sample.answer, sample.dataset_tag,
                      planner_path, tuple(records))


# ---------------------------------------------------------------------------
# SFT records

@dataclass(frozen=True)
class SftRecord:
    kind: str
    messages: tuple[ChatMessage, ...]
    meta: dict = field(default_factory=dict, compare=True)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        roles = [m.role for m in self.messages]
        if self.kind == PLANNER_KIND:
            if len(roles) < 3 or roles[0] != "system" or roles[-1] != "assistant":
                raise ValueError("planner record: system, then user/assistant turns ending in assistant")
        elif self.kind == EXECUTOR_KIND:
            if roles != ["system", "user", "assistant"]:
                raise ValueError("executor record: exactly system, user, assistant")
        else:
            raise ValueError(f"unknown SFT kind {self.kind!r}")
        check_alternation(self.messages)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "messages": [m.to_dict() for m in self.messages],
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> SftRecord:
        return cls(d["kind"], tuple(ChatMessage(m["role"], m["content"]) for m in d["messages"]),
                   d.get("meta", {}))


def _question_bindings(traj: Trajectory) -> BindingTable | None:
    qc = traj.planner_path.question_candidates
    return BindingTable(qc) if qc else None


def format_planner(traj: Trajectory, system_prompt: str | None = None,
                   dialect: str | None = None) -> SftRecord:
    """Multi-turn planner conversation for one trajectory."""
    dialect = dialect or traj.dialect
    if dialect != traj.dialect:
        raise DialectMismatch(f"trajectory {traj.sample_id} is {traj.dialect}, asked for {dialect}")
    system_prompt = system_prompt if system_prompt is not None else prompts.planner_training(dialect)
    messages = [ChatMessage("system", system_prompt),
                ChatMessage("user", question_line(traj.question, _question_bindings(traj)))]
    n_action = sum(1 for t in traj.planner_path.turns if t.kind == "actions")
    if n_action != len(traj.planner_path.observations):
        raise CountMismatch(f"{traj.sample_id}: {n_action} action turns but "
                            f"{len(traj.planner_path.observations)} observations")
    observations = iter(traj.planner_path.observations)
    for turn in traj.planner_path.turns:
        messages.append(ChatMessage("assistant", render_turn(turn, dialect)))
        if turn.kind == "actions":
            messages.append(ChatMessage("user", render_observation(next(observations), dialect)))
    meta = {"sample_id": traj.sample_id, "dataset_tag": traj.dataset_tag,
            "prompt_version": prompts.PROMPT_VERSION, "dialect": dialect,
            "steps": traj.planner_path.step_count, "actions": traj.action_count}
    return SftRecord(PLANNER_KIND, tuple(messages), meta)


def executor_user_message(question: str, facts: Sequence[SupportingFact] | Sequence[str]) -> str:
    if facts and not isinstance(facts[0], str):
        block = evidence_block(facts)
    else:
        block = "\n".join(f"[{i}] {text}" for i, text in enumerate(facts))
    return f"Question: {question}\nSupporting evidences:\n{block}"


def format_executor(traj: Trajectory, system_prompt: str | None = None) -> list[SftRecord]:
    """One single-turn executor conversation per Search call."""
    system_prompt = system_prompt if system_prompt is not None else prompts.load("executor")
    step_of = [i for i, t in enumerate(traj.planner_path.turns, 1) for _ in t.actions]
    out = []
    for j, rec in enumerate(traj.executor_records):
        messages = (ChatMessage("system", system_prompt),
                    ChatMessage("user", executor_user_message(rec.sub_question, rec.presented_facts)),
                    ChatMessage("assistant", render_turn(rec.turn)))
        meta = {"sample_id": traj.sample_id, "dataset_tag": traj.dataset_tag,
                "prompt_version": prompts.PROMPT_VERSION, "record_index": j,
                "step_index": step_of[j]}
        out.append(SftRecord(EXECUTOR_KIND, messages, meta))
    return out


# ---------------------------------------------------------------------------
# persistence

def _write_jsonl(rows: Iterable[dict], path: str | Path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def _read_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                yield lineno, json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed JSON: {exc.msg}", line=lineno, path=str(path)) from exc


def write_sft(records: Iterable[SftRecord], path: str | Path) -> int:
    return _write_jsonl((r.to_dict() for r in records), path)


def read_sft(path: str | Path) -> list[SftRecord]:
    out = []
    for lineno, rec in _read_jsonl(path):
        try:
            out.append(SftRecord.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid SFT record: {exc}", line=lineno, path=str(path)) from exc
    return out


def write_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> int:
    return _write_jsonl((t.to_dict() for t in trajs), path)


def read_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    for lineno, rec in _read_jsonl(path):
        try:
            out.append(Trajectory.from_dict(rec))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise SchemaError(f"invalid trajectory: {exc}", line=lineno, path=str(path)) from exc
    return out


@dataclass(frozen=True)
class Reject:
    sample_id: str
    stage: str
    reason: str

    def to_dict(self) -> dict[str, str]:
        return {"sample_id": self.sample_id, "stage": self.stage, "reason": self.reason}


def write_rejects(rejects: Iterable[Reject], path: str | Path) -> int:
    return _write_jsonl((r.to_dict() for r in rejects), path)
