"""Parser and renderer for agent turns written in the tag language.

A turn is an optional ``<think>`` block followed by exactly one body:

    turn      ::= ws [think ws] body ws
    think     ::= "<think>" TEXT "</think>"
    body      ::= action | answer | select ws answer | NO_INFO
    action    ::= "<action>" ws call (NEWLINE ws call)* ws "</action>"
    answer    ::= "<answer>" TEXT "</answer>"
    select    ::= "<select>" ws index (ws [","] ws index)* ws "</select>"
    index     ::= "[" DIGITS "]"
    call      ::= "Search(" [entity ws "," ws] QUOTED ")"
    entity    ::= index | QUOTED | BARE
    NO_INFO   ::= "No relevant information found."

``QUOTED`` is a double-quoted string with backslash escapes. The ``plain``
dialect forbids the entity argument; the ``entity_anchored`` dialect
requires it.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

from .errors import BindingError, DialectMismatch, TagError

logger = logging.getLogger(__name__)

PLAIN = "plain"
ENTITY = "entity_anchored"
DIALECTS = (PLAIN, ENTITY)

NO_INFO = "No relevant information found."
KNOWN_TAGS = ("think", "action", "answer", "select")


@dataclass(frozen=True)
class SearchCall:
    question: str
    entity_ref: int | None = None
    entity: str | None = None

    def __post_init__(self) -> None:
        if not self.question or not self.question.strip():
            raise ValueError("Search question must be non-empty")
        if "\n" in self.question or (self.entity and "\n" in self.entity):
            raise ValueError("Search arguments must be single-line")
        if self.entity_ref is not None and self.entity is not None:
            raise ValueError("give entity_ref or entity, not both")
        if self.entity_ref is not None and self.entity_ref < 0:
            raise ValueError("entity_ref must be >= 0")
        if self.entity is not None and not self.entity.strip():
            raise ValueError("entity must be non-empty")

    @property
    def dialect(self) -> str:
        return PLAIN if self.entity_ref is None and self.entity is None else ENTITY


@dataclass(frozen=True)
class ParsedTurn:
    think: str | None = None
    actions: tuple[SearchCall, ...] = ()
    answer: str | None = None
    selected: tuple[int, ...] = ()
    no_info: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "selected", tuple(self.selected))
        bodies = sum([bool(self.actions), self.answer is not None and not self.selected,
                      bool(self.selected), self.no_info])
        if bodies != 1:
            raise ValueError("a turn needs exactly one body")
        if self.selected and self.answer is None:
            raise ValueError("select needs an answer")
        if any(i < 0 for i in self.selected):
            raise ValueError("selected indices must be non-negative")

    @property
    def kind(self) -> str:
        if self.actions:
            return "actions"
        if self.no_info:
            return "no_info"
        if self.selected:
            return "select_answer"
        return "final_answer"

    @property
    def final_answer(self) -> str | None:
        return self.answer if self.kind == "final_answer" else None


@dataclass(frozen=True)
class CandidateBinding:
    index: int
    surface: str


class BindingTable:
    """Candidate entities of one conversation, numbered 0, 1, 2, ... on first sight."""

    def __init__(self, surfaces: Iterable[str] = ()):
        self._by_index: list[str] = []
        self._by_surface: dict[str, int] = {}
        for s in surfaces:
            self.bind(s)

    def bind(self, surface: str) -> tuple[int, bool]:
        """Return ``(index, is_new)``; an already-bound surface keeps its index."""
        surface = surface.strip()
        if surface in self._by_surface:
            return self._by_surface[surface], False
        idx = len(self._by_index)
        self._by_index.append(surface)
        self._by_surface[surface] = idx
        return idx, True

    def resolve(self, index: int) -> str | None:
        return self._by_index[index] if 0 <= index < len(self._by_index) else None

    def index_of(self, surface: str) -> int | None:
        return self._by_surface.get(surface.strip())

    def __len__(self) -> int:
        return len(self._by_index)

    def __iter__(self):
        return iter(CandidateBinding(i, s) for i, s in enumerate(self._by_index))

    def as_list(self) -> list[str]:
        return list(self._by_index)


# ---------------------------------------------------------------------------
# parsing

_TAG = re.compile(r"<(/?)([A-Za-z][\w-]*)\s*>")
_OPEN_KNOWN = re.compile(r"<(think|action|answer|select)\s*>")
_WS = re.compile(r"\s*")
_Q = r'"(?:[^"\\\n]|\\.)*"'
_PLAIN_CALL = re.compile(rf"Search\(\s*(?P<q>{_Q})\s*\)")
_ENTITY_CALL = re.compile(
    rf"Search\(\s*(?:\[\s*(?P<idx>\d+)\s*\]|(?P<qent>{_Q})|(?P<bare>[^\s\",\[\]()][^\",\n]*?))"
    rf"\s*,\s*(?P<q>{_Q})\s*\)"
)
_SELECT_STRICT = re.compile(r"\s*\[\s*\d+\s*\](?:\s*,?\s*\[\s*\d+\s*\])*\s*")
_UNESCAPE = re.compile(r"\\(.)")


def _unquote(token: str) -> str:
    return _UNESCAPE.sub(r"\1", token[1:-1])


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _lookup_binding(bindings, surface: str) -> int | None:
    if bindings is None:
        return None
    if isinstance(bindings, BindingTable):
        return bindings.index_of(surface)
    return bindings.get(surface.strip())


def _call_from_match(m: re.Match, bindings) -> SearchCall:
    question = _unquote(m.group("q")).strip()
    groups = m.groupdict()
    if groups.get("idx") is not None:
        return SearchCall(question, entity_ref=int(groups["idx"]))
    if groups.get("qent") is not None:
        name = _unquote(groups["qent"]).strip()
    elif groups.get("bare") is not None:
        name = groups["bare"].strip()
    else:
        return SearchCall(question)
    ref = _lookup_binding(bindings, name)
    return SearchCall(question, entity_ref=ref) if ref is not None else SearchCall(question, entity=name)


def _parse_calls(text: str, inner: str, start: int, dialect: str, strict: bool,
                 bindings) -> tuple[SearchCall, ...]:
    if not inner.strip():
        raise TagError(TagError.EMPTY_ACTION, _byte_offset(text, start))
    calls: list[SearchCall] = []
    if strict:
        pos = start
        for line in inner.split("\n"):
            stripped = line.strip()
            line_start = pos + (len(line) - len(line.lstrip()))
            pos += len(line) + 1
            if not stripped:
                continue
            pattern = _PLAIN_CALL if dialect == PLAIN else _ENTITY_CALL
            m = pattern.fullmatch(stripped)
            if m is None or not _unquote(m.group("q")).strip():
                raise TagError(TagError.MALFORMED_SEARCH, _byte_offset(text, line_start),
                               f"{stripped[:60]!r} is not a valid {dialect} Search call")
            calls.append(_call_from_match(m, bindings))
        return tuple(calls)

    # lenient: take every recognizable call in either dialect, in order
    found = []
    for pattern in (_ENTITY_CALL, _PLAIN_CALL):
        found.extend((m.start(), m) for m in pattern.finditer(inner))
    found.sort(key=lambda pair: pair[0])
    last_end = -1
    for pos, m in found:
        if pos < last_end or not _unquote(m.group("q")).strip():
            continue
        last_end = m.end()
        call = _call_from_match(m, bindings)
        if dialect == PLAIN and call.dialect == ENTITY:
            logger.warning("dropping entity argument from Search call under plain dialect")
            call = SearchCall(call.question)
        calls.append(call)
    if not calls:
        raise TagError(TagError.MALFORMED_SEARCH, _byte_offset(text, start),
                       "no recognizable Search call in action block")
    return tuple(calls)


def _parse_select(text: str, inner: str, start: int, strict: bool) -> tuple[int, ...]:
    if strict and not _SELECT_STRICT.fullmatch(inner):
        raise TagError(TagError.MALFORMED_SELECT, _byte_offset(text, start),
                       f"{inner.strip()[:40]!r}")
    indices = tuple(int(d) for d in re.findall(r"\d+", inner))
    if not indices:
        raise TagError(TagError.MALFORMED_SELECT, _byte_offset(text, start), "no indices")
    return indices


def _scan(text: str, strict: bool) -> list[tuple[str, str, int, int]]:
    """Split ``text`` into ``(name, inner, inner_start, tag_start)`` blocks."""
    blocks = []
    pos, n = 0, len(text)
    while True:
        pos = _WS.match(text, pos).end()
        if pos >= n:
            return blocks
        if text.startswith(NO_INFO, pos):
            blocks.append(("no_info", "", pos, pos))
            pos += len(NO_INFO)
            continue
        tm = _TAG.match(text, pos)
        if tm is not None:
            closing, name = tm.group(1) == "/", tm.group(2)
            if name not in KNOWN_TAGS:
                if strict:
                    raise TagError(TagError.UNKNOWN, _byte_offset(text, pos), tm.group(0))
                logger.warning("skipping unknown tag %s", tm.group(0))
                pos = tm.end()
                continue
            if closing:
                if strict:
                    raise TagError(TagError.STRAY_TEXT, _byte_offset(text, pos),
                                   f"unmatched {tm.group(0)}")
                pos = tm.end()
                continue
            close = f"</{name}>"
            j = text.find(close, tm.end())
            after = j + len(close)
            if j < 0 and not strict:
                loose = re.compile(rf"</{name}(?=\s|$)").search(text, tm.end())
                if loose is not None:
                    j, after = loose.start(), loose.end()
            if j < 0:
                raise TagError(TagError.UNCLOSED, _byte_offset(text, pos), f"<{name}>")
            inner = text[tm.end():j]
            nested = _OPEN_KNOWN.search(inner)
            if nested is not None:
                raise TagError(TagError.UNCLOSED, _byte_offset(text, pos),
                               f"<{name}> not closed before {nested.group(0)}")
            blocks.append((name, inner, tm.end(), pos))
            pos = after
            continue
        if strict:
            raise TagError(TagError.STRAY_TEXT, _byte_offset(text, pos), repr(text[pos:pos + 40]))
        candidates = [i for i in (text.find("<", pos + 1), text.find(NO_INFO, pos + 1)) if i >= 0]
        nxt = min(candidates) if candidates else n
        logger.warning("skipping stray text %r", text[pos:nxt][:60])
        pos = nxt


def parse_turn(text: str, dialect: str = PLAIN, *, strict: bool = True,
               bindings: BindingTable | Mapping[str, int] | None = None) -> ParsedTurn:
    """Parse one assistant utterance.

    ``strict`` rejects any text outside recognized tags; lenient mode skips
    it with a warning and tolerates a closing tag missing its ``>``.
    Bare entity names in Search calls are turned into ``entity_ref`` when
    ``bindings`` knows the surface.
    """
    if dialect not in DIALECTS:
        raise ValueError(f"unknown dialect {dialect!r}")
    blocks = _scan(text, strict)
    think: str | None = None
    body = []
    for name, inner, start, tag_start in blocks:
        if name == "think":
            if think is not None:
                if strict:
                    raise TagError(TagError.DUPLICATE_THINK, _byte_offset(text, tag_start))
                logger.warning("ignoring second think block")
                continue
            if body and strict:
                raise TagError(TagError.STRAY_TEXT, _byte_offset(text, tag_start),
                               "think block after body")
            think = inner.strip()
        else:
            body.append((name, inner, start, tag_start))

    names = [b[0] for b in body]
    if not names:
        raise TagError(TagError.MISSING_BODY, _byte_offset(text, len(text)))
    if names == ["action"]:
        _, inner, start, _ = body[0]
        return ParsedTurn(think=think, actions=_parse_calls(text, inner, start, dialect, strict,
                                                             bindings))
    if names == ["answer"]:
        answer = body[0][1].strip()
        if not answer:
            raise TagError(TagError.MISSING_BODY, _byte_offset(text, body[0][3]), "empty answer")
        return ParsedTurn(think=think, answer=answer)
    if names == ["select", "answer"]:
        selected = _parse_select(text, body[0][1], body[0][2], strict)
        answer = body[1][1].strip()
        if not answer:
            raise TagError(TagError.MISSING_BODY, _byte_offset(text, body[1][3]), "empty answer")
        return ParsedTurn(think=think, selected=selected, answer=answer)
    if names == ["no_info"]:
        return ParsedTurn(think=think, no_info=True)
    if names == ["select"]:
        raise TagError(TagError.MISSING_BODY, _byte_offset(text, body[0][3]), "select without answer")
    # the second body block is where the grammar breaks
    offending = body[1][3] if len(body) > 1 else body[0][3]
    raise TagError(TagError.MULTIPLE_BODIES, _byte_offset(text, offending), " + ".join(names))


# ---------------------------------------------------------------------------
# rendering

def render_call(call: SearchCall, dialect: str) -> str:
    if call.dialect == ENTITY and dialect == PLAIN:
        raise DialectMismatch(f"entity-anchored call {call.question!r} under plain dialect")
    q = _quote(call.question)
    if call.entity_ref is not None:
        return f"Search([{call.entity_ref}], {q})"
    if call.entity is not None:
        return f"Search({_quote(call.entity)}, {q})"
    return f"Search({q})"


def render_turn(turn: ParsedTurn, dialect: str = PLAIN) -> str:
    """Canonical surface form of ``turn``.

    Planner turns put the think block on its own lines; executor turns
    (select/answer, no-info) keep it inline. A single Search call stays on
    the action line, several calls get one line each.
    """
    if dialect not in DIALECTS:
        raise ValueError(f"unknown dialect {dialect!r}")
    parts = []
    kind = turn.kind
    if turn.think is not None:
        if kind in ("select_answer", "no_info"):
            parts.append(f"<think> {turn.think} </think>")
        else:
            parts.append(f"<think>\n{turn.think}\n</think>")
    if kind == "actions":
        calls = [render_call(c, dialect) for c in turn.actions]
        if len(calls) == 1:
            parts.append(f"<action> {calls[0]} </action>")
        else:
            parts.append("<action>\n" + "\n".join(calls) + "\n</action>")
    elif kind == "final_answer":
        parts.append(f"<answer> {turn.answer} </answer>")
    elif kind == "select_answer":
        idx = ", ".join(f"[{i}]" for i in turn.selected)
        parts.append(f"<select> {idx} </select>")
        parts.append(f"<answer> {turn.answer} </answer>")
    else:
        parts.append(NO_INFO)
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# observations

_CANDIDATE = re.compile(r"\s*Candidate:\s*(?P<list>\[\s*\d+\s*\].*)$")
_CANDIDATE_ITEM = re.compile(r"\[\s*(\d+)\s*\]\s*(.+?)\s*(?=,\s*\[\s*\d+\s*\]|$)")
_HEADER = re.compile(r"^\s*(?:Observation|Obs):[ \t]*\n?")


def split_candidates(line: str) -> tuple[str, list[CandidateBinding]]:
    """Separate ``"sentence Candidate: [k] Name, ..."`` into its parts."""
    m = _CANDIDATE.search(line)
    if m is None:
        return line.strip(), []
    items = [CandidateBinding(int(i), name.strip())
             for i, name in _CANDIDATE_ITEM.findall(m.group("list"))]
    return line[:m.start()].strip(), items


def parse_observation(text: str) -> tuple[list[str], list[CandidateBinding]]:
    """Sentences (one per non-empty line) and the candidate bindings they introduce."""
    body = _HEADER.sub("", text, count=1)
    sentences: list[str] = []
    bindings: list[CandidateBinding] = []
    seen: set[int] = set()
    for line in body.split("\n"):
        if not line.strip():
            continue
        sentence, items = split_candidates(line)
        for b in items:
            if b.index in seen:
                raise BindingError(f"candidate index [{b.index}] introduced twice")
            seen.add(b.index)
            bindings.append(b)
        if sentence:
            sentences.append(sentence)
    return sentences, bindings


def format_candidates(bindings: Sequence[CandidateBinding]) -> str:
    return ", ".join(f"[{b.index}] {b.surface}" for b in bindings)


def observation_line(sentence: str, bindings: Sequence[CandidateBinding] = ()) -> str:
    if bindings:
        return f"{sentence} Candidate: {format_candidates(bindings)}"
    return sentence


def render_observation(lines: Sequence[str], dialect: str) -> str:
    """User-turn text for one step's observations (lines already carry candidates)."""
    if dialect == ENTITY:
        return "Observation: \n" + "\n".join(lines)
    return "Obs: " + "\n".join(lines)
