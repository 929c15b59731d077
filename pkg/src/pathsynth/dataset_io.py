"""Data model and loaders for multi-hop QA datasets, plus corpus construction.

Four on-disk shapes are understood:

``canonical``
    One JSON object per line with the fields of :class:`QaSample`.
``hotpot_like``
    HotpotQA records (``context`` as ``[title, [sentences]]`` pairs and
    ``supporting_facts`` as ``[title, sent_id]`` pairs). Every sentence
    becomes a ``text_sentence`` fact.
``musique_like``
    MuSiQue records with a ``paragraphs`` list carrying ``is_supporting``.
``wiki2_like``
    2WikiMultihopQA records whose ``evidences`` triples are the golden
    evidence. An optional ``triples`` list holds the full triple pool.

Non-canonical files may be JSONL or a single JSON array.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import EmptyInput, KindMismatch, ParseError, SchemaError

logger = logging.getLogger(__name__)

KINDS = ("text_sentence", "text_paragraph", "kg_triple")
FORMATS = ("canonical", "hotpot_like", "musique_like", "wiki2_like")


def render_triple(subject: str, relation: str, obj: str) -> str:
    return f"({subject}, {relation}, {obj})"


def parse_triple(content: str) -> tuple[str, str, str]:
    """Split ``"(s, r, o)"`` back into its fields.

    Subject and relation are taken up to the first two ``", "`` separators;
    any further commas belong to the object.
    """
    text = content.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise ValueError(f"not a triple: {content!r}")
    parts = text[1:-1].split(", ", 2)
    if len(parts) != 3 or not all(p.strip() for p in parts):
        raise ValueError(f"not a triple: {content!r}")
    return parts[0].strip(), parts[1].strip(), parts[2].strip()


@dataclass(frozen=True)
class SupportingFact:
    id: str
    kind: str
    content: str
    source_title: str | None = None

    def display(self) -> str:
        """Surface form used in prompts: ``"Title: text"`` or the bare triple."""
        if self.kind != "kg_triple" and self.source_title:
            return f"{self.source_title}: {self.content}"
        return self.content

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "kind": self.kind, "content": self.content,
                "source_title": self.source_title}


@dataclass(frozen=True)
class QaSample:
    sample_id: str
    question: str
    answer: str
    facts: tuple[SupportingFact, ...]
    golden_ids: tuple[str, ...]
    hop_count: int | None = None
    dataset_tag: str = "canonical"

    def fact(self, fact_id: str) -> SupportingFact:
        for f in self.facts:
            if f.id == fact_id:
                return f
        raise KeyError(fact_id)

    @property
    def golden_facts(self) -> list[SupportingFact]:
        """Golden facts in pool order."""
        wanted = set(self.golden_ids)
        return [f for f in self.facts if f.id in wanted]

    @property
    def is_kg(self) -> bool:
        return bool(self.facts) and all(f.kind == "kg_triple" for f in self.facts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "question": self.question,
            "answer": self.answer,
            "facts": [f.to_dict() for f in self.facts],
            "golden_ids": list(self.golden_ids),
            "hop_count": self.hop_count,
            "dataset_tag": self.dataset_tag,
        }


def validate_sample(sample: QaSample) -> list[str]:
    """Return every invariant violation of ``sample``; empty means valid."""
    problems: list[str] = []
    if not isinstance(sample.sample_id, str) or not sample.sample_id.strip():
        problems.append("sample_id: empty")
    if not isinstance(sample.question, str) or not sample.question.strip():
        problems.append("question: empty")
    if not isinstance(sample.answer, str) or not sample.answer.strip():
        problems.append("answer: empty")
    if sample.hop_count is not None and (not isinstance(sample.hop_count, int)
                                         or sample.hop_count < 1):
        problems.append(f"hop_count: must be a positive integer, got {sample.hop_count!r}")

    seen: set[str] = set()
    for i, f in enumerate(sample.facts):
        if f.id in seen:
            problems.append(f"facts[{i}].id: duplicate id {f.id!r}")
        seen.add(f.id)
        if f.kind not in KINDS:
            problems.append(f"facts[{i}].kind: unknown kind {f.kind!r}")
        if not isinstance(f.content, str) or not f.content.strip():
            problems.append(f"facts[{i}].content: empty")
        elif f.kind == "kg_triple":
            try:
                parse_triple(f.content)
            except ValueError:
                problems.append(f"facts[{i}].content: not a (subject, relation, object) triple")

    if not sample.golden_ids:
        problems.append("golden_ids: empty")
    for gid in sample.golden_ids:
        if gid not in seen:
            problems.append(f"golden_ids: dangling id {gid!r}")
    return problems


# ---------------------------------------------------------------------------
# loading

def _require(record: dict, name: str, line: int, path: str) -> Any:
    if name not in record or record[name] is None:
        raise SchemaError(f"missing required field {name!r}", field=name, line=line, path=path)
    return record[name]


def _fact_from_dict(d: Any, ordinal: int, sample_id: str, line: int, path: str) -> SupportingFact:
    if not isinstance(d, dict):
        raise SchemaError("facts entries must be objects", field="facts", line=line, path=path)
    fid = d.get("id") or f"{sample_id}#{ordinal}"
    kind = _require(d, "kind", line, path)
    content = _require(d, "content", line, path)
    return SupportingFact(id=str(fid), kind=kind, content=content,
                          source_title=d.get("source_title"))


def _from_canonical(rec: dict, line: int, path: str) -> QaSample:
    sid = str(_require(rec, "sample_id", line, path))
    facts = _require(rec, "facts", line, path)
    if not isinstance(facts, list):
        raise SchemaError("facts must be a list", field="facts", line=line, path=path)
    golden = _require(rec, "golden_ids", line, path)
    return QaSample(
        sample_id=sid,
        question=_require(rec, "question", line, path),
        answer=_require(rec, "answer", line, path),
        facts=tuple(_fact_from_dict(d, i, sid, line, path) for i, d in enumerate(facts)),
        golden_ids=tuple(str(g) for g in golden),
        hop_count=rec.get("hop_count"),
        dataset_tag=rec.get("dataset_tag") or "canonical",
    )


def _from_hotpot(rec: dict, line: int, path: str) -> QaSample:
    sid = str(rec.get("_id") or _require(rec, "id", line, path))
    context = _require(rec, "context", line, path)
    sup = _require(rec, "supporting_facts", line, path)
    # HF-style dict layout: {"title": [...], "sentences": [[...]]}
    if isinstance(context, dict):
        context = list(zip(context["title"], context["sentences"]))
    if isinstance(sup, dict):
        sup = list(zip(sup["title"], sup["sent_id"]))

    facts: list[SupportingFact] = []
    by_loc: dict[tuple[str, int], str] = {}
    for title, sentences in context:
        for sent_idx, sent in enumerate(sentences):
            text = sent.strip()
            if not text:
                continue
            fid = f"{sid}#{len(facts)}"
            by_loc[(title, sent_idx)] = fid
            facts.append(SupportingFact(fid, "text_sentence", text, title))
    golden: list[str] = []
    for title, sent_idx in sup:
        try:
            golden.append(by_loc[(title, int(sent_idx))])
        except KeyError:
            raise SchemaError(f"supporting fact [{title!r}, {sent_idx}] not in context",
                              field="supporting_facts", line=line, path=path) from None
    golden.sort(key=lambda g: int(g.rsplit("#", 1)[1]))
    return QaSample(sid, _require(rec, "question", line, path), _require(rec, "answer", line, path),
                    tuple(facts), tuple(dict.fromkeys(golden)), None, "hotpot_like")


def _from_musique(rec: dict, line: int, path: str) -> QaSample:
    sid = str(_require(rec, "id", line, path))
    paragraphs = _require(rec, "paragraphs", line, path)
    facts, golden = [], []
    for p in paragraphs:
        fid = f"{sid}#{len(facts)}"
        facts.append(SupportingFact(fid, "text_paragraph", p["paragraph_text"].strip(),
                                    p.get("title")))
        if p.get("is_supporting"):
            golden.append(fid)
    decomposition = rec.get("question_decomposition")
    return QaSample(sid, _require(rec, "question", line, path), _require(rec, "answer", line, path),
                    tuple(facts), tuple(golden), len(decomposition) if decomposition else None,
                    "musique_like")


def _from_wiki2(rec: dict, line: int, path: str) -> QaSample:
    sid = str(rec.get("_id") or _require(rec, "id", line, path))
    evidences = [tuple(e) for e in _require(rec, "evidences", line, path)]
    pool = [tuple(t) for t in rec.get("triples") or []]
    for e in evidences:
        if e not in pool:
            pool.append(e)
    facts = []
    golden_set = set(evidences)
    golden = []
    for s, r, o in pool:
        fid = f"{sid}#{len(facts)}"
        facts.append(SupportingFact(fid, "kg_triple", render_triple(s, r, o)))
        if (s, r, o) in golden_set:
            golden.append(fid)
    return QaSample(sid, _require(rec, "question", line, path), _require(rec, "answer", line, path),
                    tuple(facts), tuple(golden), len(evidences) or None, "wiki2_like")


_MAPPERS = {
    "canonical": _from_canonical,
    "hotpot_like": _from_hotpot,
    "musique_like": _from_musique,
    "wiki2_like": _from_wiki2,
}


def _iter_records(path: Path, allow_array: bool):
    text = path.read_text(encoding="utf-8")
    if allow_array and text.lstrip().startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno, path=str(path)) from exc
        for i, rec in enumerate(data, 1):
            yield i, rec
        return
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip():
            continue
        try:
            yield lineno, json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON line: {exc.msg}", line=lineno, path=str(path)) from exc


def load_samples(path: str | Path, format: str = "canonical", *,
                 validate: bool = True) -> list[QaSample]:
    """Load samples from ``path`` in the given ``format``, preserving order.

    With ``validate=True`` (the default) the first invalid sample raises
    :class:`SchemaError`. Linting callers pass ``validate=False`` and run
    :func:`validate_sample` themselves.
    """
    if format not in _MAPPERS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    mapper = _MAPPERS[format]
    samples = []
    for lineno, rec in _iter_records(path, allow_array=format != "canonical"):
        if not isinstance(rec, dict):
            raise ParseError("record is not a JSON object", line=lineno, path=str(path))
        try:
            sample = mapper(rec, lineno, str(path))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"cannot map record: {exc!r}", line=lineno, path=str(path)) from exc
        if validate:
            problems = validate_sample(sample)
            if problems:
                raise SchemaError("; ".join(problems), field=problems[0].split(":", 1)[0],
                                  line=lineno, path=str(path))
        samples.append(sample)
    return samples


def write_samples(samples: Iterable[QaSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# corpus + triple store

def normalize_passage(text: str) -> str:
    """Dedup key: NFC normalization plus whitespace collapse."""
    return " ".join(unicodedata.normalize("NFC", text).split())


@dataclass(frozen=True)
class CorpusEntry:
    doc_id: str
    title: str
    text: str

    def display(self) -> str:
        return f"{self.title}: {self.text}" if self.title else self.text


@dataclass
class Corpus:
    entries: list[CorpusEntry]
    index_meta: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({"doc_id": e.doc_id, "title": e.title, "text": e.text},
                                    ensure_ascii=False) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> Corpus:
        entries = []
        for lineno, rec in _iter_records(Path(path), allow_array=False):
            try:
                entries.append(CorpusEntry(str(rec["doc_id"]), rec.get("title") or "", rec["text"]))
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"bad corpus entry: {exc!r}", line=lineno, path=str(path)) from exc
        return cls(entries)


def build_corpus(samples: Sequence[QaSample]) -> Corpus:
    """Pool every distinct supporting passage of ``samples`` into one corpus."""
    if not samples:
        raise EmptyInput("build_corpus needs at least one sample")
    seen: set[str] = set()
    entries = []
    for sample in samples:
        for f in sample.facts:
            key = normalize_passage(f.content)
            if not key or key in seen:
                continue
            seen.add(key)
            entries.append(CorpusEntry(f"doc-{len(entries):06d}", f.source_title or "", f.content))
    return Corpus(entries)


_DISAMBIG = re.compile(r"\s*\([^()]*\)$")


def _fold(name: str) -> str:
    return normalize_passage(name).casefold()


@dataclass
class TripleStore:
    triples: list[tuple[str, str, str]] = field(default_factory=list)
    subject_index: dict[str, list[int]] = field(default_factory=dict)

    def add(self, subject: str, relation: str, obj: str) -> bool:
        row = (subject, relation, obj)
        if not all(x.strip() for x in row):
            raise ValueError(f"triple fields must be non-empty: {row!r}")
        if row in self._rows:
            return False
        self._rows.add(row)
        self.subject_index.setdefault(subject, []).append(len(self.triples))
        self.triples.append(row)
        self._folded = None
        return True

    def __post_init__(self) -> None:
        self._rows = set(self.triples)
        if self.triples and not self.subject_index:
            for i, (s, _, _) in enumerate(self.triples):
                self.subject_index.setdefault(s, []).append(i)
        self._folded: dict[str, str] | None = None
        self._bare: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def subjects(self) -> list[str]:
        return list(self.subject_index)

    def _fold_tables(self) -> tuple[dict[str, str], dict[str, list[str]]]:
        if self._folded is None:
            self._folded = {_fold(s): s for s in self.subject_index}
            self._bare = {}
            for s in self.subject_index:
                self._bare.setdefault(_fold(_DISAMBIG.sub("", s)), []).append(s)
        return self._folded, self._bare

    def lookup(self, subject: str) -> list[tuple[str, str, str]]:
        """All triples with ``subject``.

        Falls back to a case-insensitive match, then to subjects that only
        differ by a trailing disambiguator such as ``"Naresh Kumar (tennis)"``.
        """
        ids = self.subject_index.get(subject)
        if ids is None:
            folded, bare = self._fold_tables()
            canonical = folded.get(_fold(subject))
            if canonical is not None:
                ids = self.subject_index[canonical]
            else:
                ids = [i for s in bare.get(_fold(subject), []) for i in self.subject_index[s]]
        return [self.triples[i] for i in ids]


def build_triple_store(samples: Sequence[QaSample]) -> TripleStore:
    store = TripleStore()
    for sample in samples:
        for f in sample.facts:
            if f.kind != "kg_triple":
                raise KindMismatch(f"{sample.sample_id}: fact {f.id} has kind {f.kind}, "
                                   "expected kg_triple")
            store.add(*parse_triple(f.content))
    return store


_LITERAL = re.compile(
    r"^(?:[-+]?\d[\d,.:/\-TZ ]*|\d{1,2} \w+ \d{3,4}|\w+ \d{1,2}, \d{3,4}|Q\d+)$"
)


def is_literal(value: str) -> bool:
    """True for dates, numbers and bare Wikidata ids, which never become candidates."""
    return bool(_LITERAL.match(value.strip()))
