"""Inference-time planner/executor loop over real retrieval."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from filelock import FileLock

from . import prompts
from .backends import (
    ChatMessage,
    EmbeddingBackend,
    GenerationBackend,
    GenerationRequest,
    embed,
    generate,
)
from .dataset_io import Corpus, SupportingFact, TripleStore, is_literal, parse_triple, render_triple
from .errors import (
    BackendError,
    IndexMissing,
    TagError,
    UnknownSample,
    UnresolvedEntity,
    ZeroVector,
)
from .metrics import normalize
from .planner import question_line
from .tags import (
    NO_INFO,
    PLAIN,
    BindingTable,
    CandidateBinding,
    SearchCall,
    observation_line,
    parse_turn,
    render_observation,
    render_turn,
)
from .trajectory import executor_user_message

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievedItem:
    key: str
    score: float
    content: str


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    items: tuple[RetrievedItem, ...]
    k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        if len(self.items) > self.k:
            raise ValueError(f"{len(self.items)} items exceed k={self.k}")
        scores = [it.score for it in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("scores must be non-increasing")

    def to_dict(self) -> dict[str, Any]:
        return {"query": self.query, "k": self.k,
                "items": [[it.key, it.score, it.content] for it in self.items]}


# ---------------------------------------------------------------------------
# dense index + on-disk embedding cache

_MAGIC = b"PSEMB001"
_HEADER = struct.Struct("<8sII64s")


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for e in corpus.entries:
        h.update(f"{e.doc_id}\t{e.title}\t{e.text}\n".encode("utf-8"))
    return h.hexdigest()


def write_embedding_cache(path: str | Path, matrix: np.ndarray, digest: str) -> None:
    """Header ``(magic, dim, count, digest)`` then row-major little-endian float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count, dim = matrix.shape
    with FileLock(str(path) + ".lock"):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(_HEADER.pack(_MAGIC, dim, count, digest.encode("ascii")))
                fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def read_embedding_cache(path: str | Path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise IndexMissing(f"{path}: truncated header")
        magic, dim, count, digest = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise IndexMissing(f"{path}: not an embedding cache")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != dim * count:
        raise IndexMissing(f"{path}: expected {dim * count} floats, found {data.size}")
    return data.reshape(count, dim).astype(np.float64), digest.decode("ascii")


@dataclass
class DenseIndex:
    corpus: Corpus
    matrix: np.ndarray  # unit-normalized rows
    backend_name: str

    @classmethod
    def from_embeddings(cls, corpus: Corpus, vectors: np.ndarray, backend_name: str = "precomputed"):
        matrix = np.asarray(vectors, dtype=np.float64)
        if matrix.shape[0] != len(corpus):
            raise ValueError("one embedding per corpus entry required")
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ZeroVector("corpus contains an all-zero embedding")
        corpus.index_meta = {"dim": int(matrix.shape[1]), "count": int(matrix.shape[0])}
        return cls(corpus, matrix / norms, backend_name)

    @classmethod
    def build(cls, corpus: Corpus, embed_backend: EmbeddingBackend,
              cache_dir: str | Path | None = None, batch_size: int = 64) -> DenseIndex:
        if not len(corpus):
            raise IndexMissing("cannot index an empty corpus")
        key = hashlib.sha256(f"{corpus_digest(corpus)}|{embed_backend.name}|{embed_backend.dim}"
                             .encode()).hexdigest()
        cache_path = Path(cache_dir) / f"{key[:24]}.emb" if cache_dir is not None else None
        if cache_path is not None and cache_path.exists():
            matrix, digest = read_embedding_cache(cache_path)
            if digest == key and matrix.shape == (len(corpus), embed_backend.dim):
                logger.info("loaded %d cached embeddings from %s", len(corpus), cache_path)
                return cls.from_embeddings(corpus, matrix, embed_backend.name)
            logger.warning("stale embedding cache %s; rebuilding", cache_path)
        texts = [e.display() for e in corpus.entries]
        rows: list[np.ndarray] = []
        for start in range(0, len(texts), batch_size):
            rows.extend(embed(embed_backend, texts[start:start + batch_size]))
        # round through float32 so a fresh index ranks exactly like one loaded from cache
        matrix = np.vstack(rows).astype(np.float32).astype(np.float64)
        if cache_path is not None:
            write_embedding_cache(cache_path, matrix, key)
        return cls.from_embeddings(corpus, matrix, embed_backend.name)


def retrieve_dense(index: DenseIndex | None, query: str, k: int,
                   embed_backend: EmbeddingBackend) -> RetrievalResult:
    """Top-``k`` entries by cosine; ties broken by ``doc_id``."""
    if index is None or index.matrix is None or not len(index.corpus):
        raise IndexMissing("dense index has not been built")
    if k < 1:
        raise ValueError("k must be positive")
    q = embed(embed_backend, [query])[0]
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ZeroVector("query embedding is all-zero")
    scores = index.matrix @ (q / norm)
    ids = [e.doc_id for e in index.corpus.entries]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:k]
    items = tuple(RetrievedItem(ids[i], float(np.clip(scores[i], -1.0, 1.0)),
                                index.corpus.entries[i].display()) for i in order)
    return RetrievalResult(query, items, k)


def retrieve_distractor(sample_id: str, store: Mapping[str, Sequence[SupportingFact]],
                        query: str = "") -> RetrievalResult:
    """The sample's own supporting-fact pool, in its original order."""
    if sample_id not in store:
        raise UnknownSample(f"no fact set for sample {sample_id!r}")
    facts = store[sample_id]
    items = tuple(RetrievedItem(f.id, 1.0, f.display()) for f in facts)
    return RetrievalResult(query, items, max(len(items), 1))


def _subject_in_question(store: TripleStore, question: str) -> str | None:
    folded = question.casefold()
    hits = [s for s in store.subjects if s.casefold() in folded]
    return max(hits, key=len) if hits else None


def retrieve_triples(store: TripleStore, call: SearchCall,
                     bindings: BindingTable | None = None) -> RetrievalResult:
    """All triples whose subject is the call's entity."""
    if call.entity_ref is not None:
        entity = bindings.resolve(call.entity_ref) if bindings is not None else None
        if entity is None:
            raise UnresolvedEntity(f"candidate [{call.entity_ref}] is not bound")
    elif call.entity is not None:
        entity = call.entity
    else:
        entity = _subject_in_question(store, call.question)
        if entity is None:
            raise UnresolvedEntity(f"no known subject in {call.question!r}")
    rows = store.lookup(entity)
    items = tuple(RetrievedItem(render_triple(*r), 1.0, render_triple(*r)) for r in rows)
    return RetrievalResult(call.question, items, max(len(items), 1))


Retriever = Callable[[SearchCall, "BindingTable | None"], RetrievalResult]


@dataclass
class DenseRetriever:
    index: DenseIndex
    embed_backend: EmbeddingBackend
    k: int = 5

    def __call__(self, call: SearchCall, bindings: BindingTable | None = None) -> RetrievalResult:
        return retrieve_dense(self.index, call.question, self.k, self.embed_backend)


@dataclass
class DistractorRetriever:
    store: Mapping[str, Sequence[SupportingFact]]
    sample_id: str

    def __call__(self, call: SearchCall, bindings: BindingTable | None = None) -> RetrievalResult:
        return retrieve_distractor(self.sample_id, self.store, call.question)


@dataclass
class TripleRetriever:
    store: TripleStore

    def __call__(self, call: SearchCall, bindings: BindingTable | None = None) -> RetrievalResult:
        return retrieve_triples(self.store, call, bindings)


# ---------------------------------------------------------------------------
# the loop

@dataclass(frozen=True)
class RunLimits:
    max_steps: int = 8
    max_actions_per_step: int = 4
    retrieval_k: int = 5
    max_tokens: int = 512
    temperature: float = 0.0
    seed: int | None = 0
    max_parse_failures: int = 3

    def __post_init__(self) -> None:
        for name in ("max_steps", "max_actions_per_step", "retrieval_k", "max_tokens",
                     "max_parse_failures"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def request(self, messages, bump: int = 0) -> GenerationRequest:
        seed = None if self.seed is None else self.seed + bump
        return GenerationRequest(tuple(messages), self.max_tokens, self.temperature, (), seed)


ANSWERED = "answered"
STEP_BUDGET = "step_budget"
PROTOCOL_FAILURE = "protocol_failure"


@dataclass
class AnswerTrace:
    question: str
    sample_id: str | None = None
    turns: list[dict[str, str]] = field(default_factory=list)
    retrievals: list[RetrievalResult] = field(default_factory=list)
    action_count: int = 0
    final_answer: str | None = None
    termination: str = STEP_BUDGET
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"sample_id": self.sample_id, "question": self.question, "turns": self.turns,
                "retrievals": [r.to_dict() for r in self.retrievals],
                "action_count": self.action_count, "final_answer": self.final_answer,
                "termination": self.termination, "notes": self.notes}


def _item_candidates(items: Sequence[RetrievedItem]) -> list[str]:
    out = []
    for it in items:
        try:
            _, _, obj = parse_triple(it.content)
        except ValueError:
            continue
        if not is_literal(obj) and obj not in out:
            out.append(obj)
    return out


def execute_subquestion(question: str, result: RetrievalResult, backend: GenerationBackend,
                        limits: RunLimits, system_prompt: str) -> tuple[str, list[RetrievedItem]]:
    """Executor step at inference: answer sentence (or the no-info line) and cited items."""
    if not result.items:
        return NO_INFO, []
    messages = [ChatMessage("system", system_prompt),
                ChatMessage("user", executor_user_message(question, [it.content for it in result.items]))]
    text = generate(backend, limits.request(messages))
    try:
        turn = parse_turn(text, strict=False)
    except TagError:
        return NO_INFO, []
    if turn.answer is None or turn.no_info:
        return NO_INFO, []
    sentence = " ".join(turn.answer.split())
    if normalize(sentence) == normalize(NO_INFO):
        return NO_INFO, []
    cited = [result.items[i] for i in turn.selected if i < len(result.items)]
    return sentence, cited


def run_agent(question: str, planner_backend: GenerationBackend,
              executor_backend: GenerationBackend, retriever: Retriever,
              limits: RunLimits = RunLimits(), *, dialect: str = PLAIN,
              planner_prompt: str | None = None, executor_prompt: str | None = None,
              question_candidates: Sequence[str] = (), sample_id: str | None = None) -> AnswerTrace:
    """Answer ``question`` with the planner/executor loop.

    Never raises for model misbehaviour; the outcome is in ``termination``.
    """
    planner_prompt = planner_prompt if planner_prompt is not None else prompts.planner_training(dialect)
    executor_prompt = executor_prompt if executor_prompt is not None else prompts.load("executor")
    bindings = BindingTable(question_candidates) if dialect != PLAIN else None
    trace = AnswerTrace(question, sample_id)
    messages = [ChatMessage("system", planner_prompt),
                ChatMessage("user", question_line(question, bindings))]
    trace.turns.append({"role": "user", "content": messages[-1].content})
    failures = 0
    steps = 0
    while steps < limits.max_steps:
        try:
            text = generate(planner_backend, limits.request(messages, failures))
        except BackendError as exc:
            trace.notes.append(f"planner backend error: {exc}")
            trace.termination = PROTOCOL_FAILURE
            return trace
        try:
            turn = parse_turn(text, dialect, strict=False, bindings=bindings)
            if turn.kind not in ("actions", "final_answer"):
                raise TagError(TagError.MISSING_BODY, 0, f"planner emitted a {turn.kind} body")
            if len(turn.actions) > limits.max_actions_per_step:
                raise TagError(TagError.MALFORMED_SEARCH, 0, "too many Search calls")
        except TagError as exc:
            failures += 1
            trace.notes.append(f"unparseable planner turn: {exc}")
            if failures >= limits.max_parse_failures:
                trace.termination = PROTOCOL_FAILURE
                return trace
            continue
        failures = 0
        steps += 1
        rendered = render_turn(turn, dialect)
        trace.turns.append({"role": "assistant", "content": rendered})
        if turn.kind == "final_answer":
            trace.final_answer = turn.answer
            trace.termination = ANSWERED
            return trace

        lines = []
        for call in turn.actions:
            trace.action_count += 1
            try:
                result = retriever(call, bindings)
            except (UnresolvedEntity, UnknownSample, IndexMissing) as exc:
                trace.notes.append(f"retrieval failed for {call.question!r}: {exc}")
                result = RetrievalResult(call.question, (), max(limits.retrieval_k, 1))
            trace.retrievals.append(result)
            try:
                sentence, cited = execute_subquestion(call.question, result, executor_backend,
                                                      limits, executor_prompt)
            except BackendError as exc:
                trace.notes.append(f"executor backend error: {exc}")
                sentence, cited = NO_INFO, []
            new: list[CandidateBinding] = []
            if bindings is not None:
                for surface in _item_candidates(cited):
                    idx, is_new = bindings.bind(surface)
                    if is_new:
                        new.append(CandidateBinding(idx, surface))
            lines.append(observation_line(sentence, new))
        observation = render_observation(lines, dialect)
        messages.append(ChatMessage("assistant", rendered))
        messages.append(ChatMessage("user", observation))
        trace.turns.append({"role": "user", "content": observation})
    trace.termination = STEP_BUDGET
    return trace
