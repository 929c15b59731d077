"""Command-line entry point: ``pathsynth <subcommand> [--config run.json] [flags]``.

Exit codes: 0 ok, 1 configuration or input error, 2 backend unreachable,
3 nothing produced (zero yield, empty input) or lint violations.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import signal
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from . import agent as agent_rt
from .backends import (
    EmbeddingBackend,
    GenerationBackend,
    HashingEmbedder,
    OpenAIChatBackend,
    OpenAIEmbeddingBackend,
    ScriptedEmbedder,
    ScriptedGenerator,
    Throttle,
)
from .dataset_io import (
    FORMATS,
    Corpus,
    QaSample,
    build_corpus,
    build_triple_store,
    load_samples,
    validate_sample,
)
from .errors import BackendUnavailable, IdMismatch, IndexMissing, ParseError, PathSynthError, TagError
from .executor import GenParams
from .metrics import evaluate, read_predictions
from .pipeline import AUTO, SynthesisSettings, synthesize, write_outputs
from .planner import SynthesisLimits
from .tags import DIALECTS, ENTITY, PLAIN, parse_turn
from .trajectory import format_executor, format_planner, read_trajectories, write_sft

logger = logging.getLogger("pathsynth")

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_EMPTY = 0, 1, 2, 3
ENV_PREFIX = "EVIPATH_"


class ConfigError(PathSynthError):
    pass


@dataclass
class RunConfig:
    """Every knob of a run. The config file is a JSON object with these keys."""

    dataset: str | None = None
    dataset_format: str = "canonical"
    out_dir: str = "out"
    trajectories: str | None = None
    predictions: str | None = None
    corpus: str | None = None
    index_cache: str | None = None

    gen_backend: str = "openai"          # openai | scripted
    gen_url: str | None = None
    gen_key: str | None = None
    gen_model: str = "default"
    gen_script: str | None = None
    emb_backend: str = "hashing"         # openai | scripted | hashing
    emb_url: str | None = None
    emb_key: str | None = None
    emb_model: str = "default"
    emb_dim: int = 512
    emb_script: str | None = None
    max_in_flight: int = 8
    rate_per_sec: float | None = None
    request_timeout: float = 60.0

    dialect: str = AUTO
    tau: float = 0.9
    max_steps: int = 8
    max_actions_per_step: int = 4
    max_plan_len: int = 8
    attempts: int = 3
    retrieval_k: int = 5
    retrieval_mode: str = "distractor"   # distractor | dense | triples
    max_tokens: int = 512
    temperature: float = 0.0
    seed: int = 0
    strict: bool = True
    shuffle_seed: int | None = None
    workers: int = 8
    shard_size: int = 1000
    log_file: str | None = None

    def check(self) -> None:
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        for name in ("max_steps", "max_actions_per_step", "max_plan_len", "attempts",
                     "retrieval_k", "max_tokens", "max_in_flight", "workers", "shard_size",
                     "emb_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dataset_format not in FORMATS:
            raise ConfigError(f"dataset_format must be one of {FORMATS}")
        if self.dialect not in (AUTO, *DIALECTS):
            raise ConfigError(f"dialect must be one of {(AUTO, *DIALECTS)}")
        if self.gen_backend not in ("openai", "scripted"):
            raise ConfigError(f"unknown gen_backend {self.gen_backend!r}")
        if self.emb_backend not in ("openai", "scripted", "hashing"):
            raise ConfigError(f"unknown emb_backend {self.emb_backend!r}")
        if self.retrieval_mode not in ("distractor", "dense", "triples"):
            raise ConfigError(f"unknown retrieval_mode {self.retrieval_mode!r}")

    def require_file(self, name: str) -> Path:
        value = getattr(self, name)
        if not value:
            raise ConfigError(f"{name} is required for this command")
        path = Path(value)
        if not path.exists():
            raise ConfigError(f"{name}: {path} does not exist")
        return path

    @property
    def limits(self) -> SynthesisLimits:
        return SynthesisLimits(self.max_steps, self.max_actions_per_step, self.max_plan_len,
                               self.attempts)

    @property
    def params(self) -> GenParams:
        return GenParams(self.max_tokens, self.temperature, self.seed)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    kind = _FIELD_TYPES[name]
    try:
        if kind.startswith("bool"):
            if isinstance(value, str):
                if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if kind.startswith("int"):
            if isinstance(value, bool):
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind}") from None
    return str(value)


def load_config(path: str | None, overrides: dict[str, Any],
                environ: dict[str, str] | None = None) -> RunConfig:
    """Merge file < environment (``EVIPATH_<KEY>``) < explicit flags."""
    environ = os.environ if environ is None else environ
    values: dict[str, Any] = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(doc) - set(_FIELD_TYPES))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        values.update({k: _coerce(k, v) for k, v in doc.items()})
    for name in _FIELD_TYPES:
        env = environ.get(ENV_PREFIX + name.upper())
        if env is not None and env != "":
            values[name] = _coerce(name, env)
    values.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    cfg.check()
    return cfg


# ---------------------------------------------------------------------------
# logging

class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        row = {"ts": round(record.created, 6), "level": record.levelname,
               "logger": record.name, "msg": record.getMessage()}
        for key in ("stage", "seconds", "count"):
            if hasattr(record, key):
                row[key] = getattr(record, key)
        if record.exc_info:
            row["exc"] = self.formatException(record.exc_info)
        return json.dumps(row, ensure_ascii=False)


def setup_logging(log_file: str | None, verbose: bool) -> logging.Handler:
    handler: logging.Handler = (logging.FileHandler(log_file, encoding="utf-8") if log_file
                                else logging.StreamHandler(sys.stderr))
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger("pathsynth")
    root.handlers = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO if log_file else logging.WARNING)
    root.propagate = False
    return handler


@contextlib.contextmanager
def stage(name: str, **extra):
    t0 = time.perf_counter()
    try:
        yield
    finally:
        logger.info("stage %s done", name,
                    extra={"stage": name, "seconds": round(time.perf_counter() - t0, 6), **extra})


# ---------------------------------------------------------------------------
# backends from config

def make_generator(cfg: RunConfig) -> GenerationBackend:
    throttle = Throttle(cfg.max_in_flight, cfg.rate_per_sec)
    if cfg.gen_backend == "scripted":
        return ScriptedGenerator.from_file(cfg.require_file("gen_script"), throttle=throttle)
    if not cfg.gen_url:
        raise ConfigError("gen_url (or EVIPATH_GEN_URL) is required for the openai backend")
    return OpenAIChatBackend(cfg.gen_url, cfg.gen_model, cfg.gen_key, timeout=cfg.request_timeout,
                             throttle=throttle)


def make_embedder(cfg: RunConfig) -> EmbeddingBackend:
    if cfg.emb_backend == "hashing":
        return HashingEmbedder(cfg.emb_dim)
    if cfg.emb_backend == "scripted":
        return ScriptedEmbedder.from_file(cfg.require_file("emb_script"),
                                          fallback=HashingEmbedder(cfg.emb_dim))
    if not cfg.emb_url:
        raise ConfigError("emb_url (or EVIPATH_EMB_URL) is required for the openai backend")
    return OpenAIEmbeddingBackend(cfg.emb_url, cfg.emb_model, cfg.emb_dim, cfg.emb_key,
                                  timeout=cfg.request_timeout,
                                  throttle=Throttle(cfg.max_in_flight, cfg.rate_per_sec))


def _load_dataset(cfg: RunConfig, validate: bool = True) -> list[QaSample]:
    path = cfg.require_file("dataset")
    with stage("load_dataset"):
        return load_samples(path, cfg.dataset_format, validate=validate)


def _trajectory_files(cfg: RunConfig) -> list[Path]:
    src = Path(cfg.trajectories) if cfg.trajectories else Path(cfg.out_dir) / "trajectories"
    if src.is_dir():
        return sorted(src.glob("*.jsonl"))
    if src.exists():
        return [src]
    raise ConfigError(f"trajectories: {src} does not exist")


def _dump_json(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synthesize(cfg: RunConfig) -> int:
    samples = load_samples(cfg.require_file("dataset"), cfg.dataset_format, validate=False)
    if not samples:
        print("no samples in dataset", file=sys.stderr)
        return EXIT_EMPTY
    backend = make_generator(cfg)
    embedder = make_embedder(cfg)
    with stage("ping"):
        backend.ping()
        embedder.ping()
    settings = SynthesisSettings(cfg.dialect, cfg.tau, cfg.limits, cfg.params, cfg.strict,
                                 cfg.shuffle_seed, cfg.workers)
    stop = threading.Event()
    previous = None
    if threading.current_thread() is threading.main_thread():
        previous = signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        with stage("synthesize", count=len(samples)):
            result = synthesize(samples, backend, embedder, settings, stop=stop)
    finally:
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)
    with stage("write"):
        write_outputs(result, cfg.out_dir, cfg.shard_size)
    summary = result.summary()
    for name, seconds in summary["stage_seconds"].items():
        logger.info("episode stage total", extra={"stage": name, "seconds": seconds})
    print(json.dumps({k: v for k, v in summary.items() if k != "stage_seconds"}, indent=2))
    for r in result.rejects:
        print(f"rejected {r.sample_id} [{r.stage}] {r.reason}", file=sys.stderr)
    return EXIT_OK if result.trajectories else EXIT_EMPTY


def cmd_format(cfg: RunConfig) -> int:
    trajs = []
    with stage("read_trajectories"):
        for path in _trajectory_files(cfg):
            trajs.extend(read_trajectories(path))
    if not trajs:
        print("no trajectories to format", file=sys.stderr)
        return EXIT_EMPTY
    trajs.sort(key=lambda t: t.sample_id)
    with stage("format", count=len(trajs)):
        planner = [format_planner(t) for t in trajs]
        executor = [r for t in trajs for r in format_executor(t)]
    out = Path(cfg.out_dir) / "sft"
    write_sft(planner, out / "planner.jsonl")
    write_sft(executor, out / "executor.jsonl")
    print(json.dumps({"trajectories": len(trajs), "planner_records": len(planner),
                      "executor_records": len(executor)}))
    return EXIT_OK


def _question_entities(store, question: str) -> list[str]:
    folded = question.casefold()
    found: dict[int, str] = {}
    for s in sorted(store.subjects, key=len, reverse=True):
        pos = folded.find(s.casefold())
        if pos >= 0 and not any(p <= pos < p + len(v) for p, v in found.items()):
            found[pos] = s
    return [found[p] for p in sorted(found)]


def cmd_agent(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    if not samples:
        return EXIT_EMPTY
    backend = make_generator(cfg)
    limits = agent_rt.RunLimits(cfg.max_steps, cfg.max_actions_per_step, cfg.retrieval_k,
                                cfg.max_tokens, cfg.temperature, cfg.seed)
    mode = cfg.retrieval_mode
    store = None
    if mode == "dense":
        corpus_path = cfg.require_file("corpus")
        embedder = make_embedder(cfg)
        with stage("ping"):
            backend.ping()
            embedder.ping()
        with stage("index"):
            index = agent_rt.DenseIndex.build(Corpus.read(corpus_path), embedder,
                                              cache_dir=cfg.index_cache)
        shared = agent_rt.DenseRetriever(index, embedder, cfg.retrieval_k)
    else:
        with stage("ping"):
            backend.ping()
        if mode == "triples":
            pool = (load_samples(cfg.require_file("corpus"), "canonical") if cfg.corpus
                    else samples)
            store = build_triple_store(pool)
            shared = agent_rt.TripleRetriever(store)
        else:
            facts = {s.sample_id: s.facts for s in samples}

    def run(sample: QaSample) -> agent_rt.AnswerTrace:
        retriever = (agent_rt.DistractorRetriever(facts, sample.sample_id)
                     if mode == "distractor" else shared)
        dialect = cfg.dialect if cfg.dialect != AUTO else (ENTITY if sample.is_kg else PLAIN)
        candidates = _question_entities(store, sample.question) if store and dialect == ENTITY else ()
        return agent_rt.run_agent(sample.question, backend, backend, retriever, limits,
                                  dialect=dialect, question_candidates=candidates,
                                  sample_id=sample.sample_id)

    with stage("agent", count=len(samples)):
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            traces = list(pool.map(run, samples))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps({"sample_id": t.sample_id, "prediction": t.final_answer,
                                 "termination": t.termination}, ensure_ascii=False) + "\n")
    with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")
    counts: dict[str, int] = {}
    for t in traces:
        counts[t.termination] = counts.get(t.termination, 0) + 1
    print(json.dumps({"questions": len(traces), "terminations": dict(sorted(counts.items()))}))
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    pred_path = Path(cfg.predictions) if cfg.predictions else Path(cfg.out_dir) / "predictions.jsonl"
    if not pred_path.exists():
        raise ConfigError(f"predictions: {pred_path} does not exist")
    preds = read_predictions(pred_path)
    terminations = {}
    with open(pred_path, encoding="utf-8") as fh:
        for raw in fh:
            if raw.strip():
                rec = json.loads(raw)
                if rec.get("termination"):
                    terminations[str(rec["sample_id"])] = rec["termination"]
    report = evaluate(preds, {s.sample_id: s.answer for s in samples}, terminations)
    _dump_json(report.to_dict(), Path(cfg.out_dir) / "report.json")
    print(report.table())
    return EXIT_OK


def _lint_trajectory_record(rec: dict) -> list[str]:
    problems = []
    sid = rec.get("sample_id", "?")
    path = rec.get("planner_path") or {}
    dialect = path.get("dialect", PLAIN)
    for i, text in enumerate(path.get("turns", [])):
        try:
            parse_turn(text, dialect, strict=True)
        except TagError as exc:
            problems.append(f"{sid}: planner turn {i}: offset {exc.offset}: {exc.kind}: {exc.detail}")
    for j, r in enumerate(rec.get("executor_records", [])):
        try:
            parse_turn(r.get("turn", ""), strict=True)
        except TagError as exc:
            problems.append(f"{sid}: executor record {j}: offset {exc.offset}: {exc.kind}: {exc.detail}")
    return problems


def cmd_validate(cfg: RunConfig) -> int:
    if not cfg.dataset and not cfg.trajectories:
        raise ConfigError("validate needs --dataset and/or --trajectories")
    problems: list[str] = []
    checked = 0
    if cfg.dataset:
        for s in _load_dataset(cfg, validate=False):
            checked += 1
            problems.extend(f"{s.sample_id}: {p}" for p in validate_sample(s))
    if cfg.trajectories:
        for path in _trajectory_files(cfg):
            with open(path, encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, 1):
                    if not raw.strip():
                        continue
                    checked += 1
                    try:
                        rec = json.loads(raw)
                    except json.JSONDecodeError as exc:
                        problems.append(f"{path}:{lineno}: malformed JSON: {exc.msg}")
                        continue
                    problems.extend(_lint_trajectory_record(rec))
    for p in problems:
        print(p)
    print(json.dumps({"checked": checked, "violations": len(problems)}), file=sys.stderr)
    return EXIT_EMPTY if problems else EXIT_OK


def cmd_build_corpus(cfg: RunConfig) -> int:
    samples = _load_dataset(cfg)
    corpus = build_corpus(samples)
    out = Path(cfg.corpus) if cfg.corpus else Path(cfg.out_dir) / "corpus.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write(out)
    print(json.dumps({"samples": len(samples), "entries": len(corpus), "path": str(out)}))
    return EXIT_OK


COMMANDS = {
    "synthesize": cmd_synthesize,
    "format": cmd_format,
    "agent": cmd_agent,
    "eval": cmd_eval,
    "validate": cmd_validate,
    "build-corpus": cmd_build_corpus,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathsynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.type.startswith("bool"):
                p.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
            else:
                p.add_argument(flag, dest=f.name, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    handler = setup_logging(cfg.log_file, args.verbose)
    try:
        with stage(f"cmd:{args.command}"):
            return COMMANDS[args.command](cfg)
    except BackendUnavailable as exc:
        print(f"backend unreachable: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ConfigError, ParseError, IdMismatch, IndexMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PathSynthError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        handler.flush()
        if isinstance(handler, logging.FileHandler):
            handler.close()

