"""A rule-based stand-in for the LLM, used to record scripted fixtures.

It recognises which role a request is for by its system prompt and answers
from either a hand-written script (keyed by question) or generic rules
derived from the golden evidence in the prompt.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from pathsynth import prompts
from pathsynth.backends import GenerationRequest
from pathsynth.tags import ENTITY, NO_INFO, PLAIN

NO_INFO_TURN = NO_INFO


@dataclass
class Script:
    plan: list[str]
    # each step: (think, [(entity surface or None, sub-question), ...])
    steps: list[tuple[str, list[tuple[str | None, str]]]]
    final_think: str
    final_answer: str
    # sub-question -> (answer sentence, substring that must appear in cited evidence)
    answers: dict[str, tuple[str, str]] = field(default_factory=dict)
    cot: dict[str, str] = field(default_factory=dict)


_CANDS = re.compile(r"\[(\d+)\] (.+?)(?=, \[\d+\] |$)")
_EVIDENCE = re.compile(r"^\[(\d+)\] (.*)$", re.M)


def _question(user: str) -> str:
    first = user.split("\n", 1)[0]
    q = first[len("Question: "):] if first.startswith("Question: ") else first
    return q.split(" Candidate: ", 1)[0].strip()


def _bindings(texts: list[str]) -> dict[str, int]:
    out: dict[str, int] = {}
    for text in texts:
        for line in text.splitlines():
            if "Candidate: " not in line:
                continue
            for idx, name in _CANDS.findall(line.split("Candidate: ", 1)[1]):
                out.setdefault(name.strip(), int(idx))
    return out


def _tokens(text: str) -> set[str]:
    return set(re.findall(r"\w+", text.lower()))


def _triple(text: str):
    text = text.strip()
    if text.startswith("(") and text.endswith(")"):
        parts = text[1:-1].split(", ", 2)
        if len(parts) == 3:
            return parts
    return None


def _golden_lines(user: str) -> list[str]:
    """Evidence lines of a synthesis user message (between the header and plan/instruction)."""
    body = user.split("Supporting evidences:\n", 1)[1]
    body = body.split("\nPlan:\n", 1)[0].split("\n\n", 1)[0]
    return [ln for ln in body.splitlines() if ln.strip()]


def _subject(line: str) -> tuple[str, str | None]:
    t = _triple(line)
    if t:
        return t[0], t[1]
    return line.split(": ", 1)[0], None


def generic_script(question: str, answer: str, evidence: list[str], dialect: str) -> Script:
    plan, steps, answers = [], [], {}
    for i, line in enumerate(evidence):
        subj, rel = _subject(line)
        sq = f"What is the {rel} of {subj}?" if rel else f"What is known about {subj}?"
        t = _triple(line)
        sentence = f"The {rel} of {subj} is {t[2]}." if t else line.split(": ", 1)[-1]
        plan.append(f"Find the {rel} of {subj}." if rel else f"Find out what is known about {subj}.")
        think = "Now I need to search the first piece of information." if i == 0 else \
            "Now that I have the previous answer, I need to continue with the next step."
        steps.append((think, [(subj if dialect == ENTITY and t else None, sq)]))
        answers[sq] = (sentence, t[2] if t else sentence)
    return Script(plan, steps, "OK. Now I have all the necessary information to answer the question.",
                  answer, answers)


class SimulatedModel:
    """Callable ``GenerationRequest -> str`` usable with FunctionGenerator."""

    def __init__(self, scripts: dict[str, Script] | None = None):
        self.scripts = dict(scripts or {})
        self._roles = {
            prompts.load("planner_synthesis_plain"): ("synth", PLAIN),
            prompts.load("planner_synthesis_entity"): ("synth", ENTITY),
            prompts.load("planner_plain"): ("agent", PLAIN),
            prompts.load("planner_entity"): ("agent", ENTITY),
            prompts.load("answer_subquestion"): ("answer", None),
            prompts.load("executor_synthesis"): ("cot", None),
            prompts.load("executor"): ("executor", None),
        }

    def __call__(self, request: GenerationRequest) -> str:
        msgs = request.messages
        role, dialect = self._roles[msgs[0].content]
        user = msgs[1].content
        if role == "answer":
            return self._answer(user)
        if role == "cot":
            return self._cot(user)
        if role == "executor":
            return self._executor(user)
        question = _question(user)
        if role == "synth":
            script = self.scripts.get(question) or generic_script(
                question, user.split("\nAnswer: ", 1)[1].split("\n", 1)[0],
                _golden_lines(user), dialect)
            if len(msgs) == 2 and "\nPlan:\n" not in user:
                return self._plan(script)
            return self._planner_turn(script, msgs, dialect, agent=False)
        script = self.scripts.get(question)
        if script is None:
            return "<think> I cannot work this out. </think>\n<answer> unknown </answer>"
        return self._planner_turn(script, msgs, dialect, agent=True)

    # -- planner ---------------------------------------------------------

    @staticmethod
    def _plan(script: Script) -> str:
        return "To solve this problem, I need to:\n" + "\n".join(
            f"{i}. {p}" for i, p in enumerate(script.plan, 1))

    def _planner_turn(self, script: Script, msgs, dialect: str, agent: bool) -> str:
        history = msgs[2:]
        observations = [m.content for m in history if m.role == "user"]
        if agent:
            # a step only counts once every line of its observation found something
            done = sum(1 for o in observations if NO_INFO not in o)
        else:
            done = len(observations)
        if done >= len(script.steps):
            return f"<think>\n{script.final_think}\n</think>\n<answer> {script.final_answer} </answer>"
        think, calls = script.steps[done]
        if done == 0:
            think = self._plan(script) + "\n" + think
        known = _bindings([msgs[1].content] + observations)
        rendered = []
        for surface, sq in calls:
            if dialect == ENTITY and surface is not None:
                rendered.append(f'Search([{known[surface]}], "{sq}")')
            else:
                rendered.append(f'Search("{sq}")')
        if len(rendered) == 1:
            action = f"<action> {rendered[0]} </action>"
        else:
            action = "<action>\n" + "\n".join(rendered) + "\n</action>"
        return f"<think>\n{think}\n</think>\n{action}"

    # -- executor --------------------------------------------------------

    def _lookup(self, sq: str, evidence: list[str]) -> tuple[str, str]:
        for script in self.scripts.values():
            if sq in script.answers:
                return script.answers[sq]
        m = re.match(r"What is the (.+) of (.+)\?$", sq) or re.match(r"What is known about (.+)\?$", sq)
        for line in evidence:
            subj, rel = _subject(line)
            if m and m.groups()[-1] == subj and (rel is None or m.group(1) == rel):
                t = _triple(line)
                sentence = f"The {rel} of {subj} is {t[2]}." if t else line.split(": ", 1)[-1]
                return sentence, t[2] if t else sentence
        return NO_INFO, "\0"

    def _answer(self, user: str) -> str:
        sq = _question(user)
        evidence = user.split("\nEvidence:\n", 1)[1].splitlines()
        return self._lookup(sq, evidence)[0]

    def _cot(self, user: str) -> str:
        sq = _question(user)
        golden = user.split("\nGolden evidence: ", 1)[1]
        idx = [int(i) for i in re.findall(r"^\[(\d+)\]", golden, re.M)]
        answer = user.split("\nAnswer: ", 1)[1].split("\nGolden evidence:", 1)[0]
        think = None
        for script in self.scripts.values():
            think = script.cot.get(sq) or think
        if think is None:
            cited = " and ".join(f"[{i}]" for i in idx)
            think = f"The question asks: {sq} {cited} supports that {answer}"
        sel = ", ".join(f"[{i}]" for i in idx)
        return f"<think> {think} </think>\n<select> {sel} </select>\n<answer> {answer} </answer>"

    def _executor(self, user: str) -> str:
        sq = _question(user)
        block = user.split("Supporting evidences:\n", 1)[1]
        evidence = {int(i): text for i, text in _EVIDENCE.findall(block)}
        sentence, key = self._lookup(sq, list(evidence.values()))
        hits = [i for i, text in evidence.items() if key in text]
        if sentence == NO_INFO or not hits:
            return NO_INFO_TURN
        q_tokens = _tokens(sq)
        best = max(hits, key=lambda i: (len(q_tokens & _tokens(evidence[i])), -i))
        return (f"<think> The question asks: {sq} [{best}] contains the answer. </think>\n"
                f"<select> [{best}] </select>\n<answer> {sentence} </answer>")
