"""Batch synthesis: per-sample episodes on a worker pool, then sharded output."""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import Counter
from collections.abc import Callable, Sequence
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

from .backends import EmbeddingBackend, GenerationBackend
from .dataset_io import QaSample, validate_sample
from .errors import PathSynthError
from .executor import DEFAULT_TAU, ExecutorOracle, GenParams
from .planner import SynthesisLimits, decompose, question_candidates, run_episode
from .tags import ENTITY, PLAIN, BindingTable
from .trajectory import Reject, Trajectory, assemble, write_rejects, write_trajectories

logger = logging.getLogger(__name__)

AUTO = "auto"


@dataclass(frozen=True)
class SynthesisSettings:
    dialect: str = AUTO
    tau: float = DEFAULT_TAU
    limits: SynthesisLimits = SynthesisLimits()
    params: GenParams = GenParams()
    strict: bool = True
    shuffle_seed: int | None = None
    workers: int = 8

    def __post_init__(self) -> None:
        if self.dialect not in (AUTO, PLAIN, ENTITY):
            raise ValueError(f"unknown dialect {self.dialect!r}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    def dialect_for(self, sample: QaSample) -> str:
        if self.dialect == AUTO:
            return ENTITY if sample.is_kg else PLAIN
        return self.dialect


@dataclass
class Outcome:
    sample_id: str
    trajectory: Trajectory | None = None
    reject: Reject | None = None
    timings: dict[str, float] = field(default_factory=dict)


def _reject(sample_id: str, stage: str, exc: Exception | str, timings: dict) -> Outcome:
    reason = exc if isinstance(exc, str) else f"{type(exc).__name__}: {exc}"
    return Outcome(sample_id, reject=Reject(sample_id, stage, reason), timings=timings)


def synthesize_one(sample: QaSample, backend: GenerationBackend, embed_backend: EmbeddingBackend,
                   settings: SynthesisSettings = SynthesisSettings()) -> Outcome:
    """decompose -> episode -> assemble for one sample; failures become rejects."""
    timings: dict[str, float] = {}
    issues = validate_sample(sample)
    if issues:
        return _reject(sample.sample_id, "validate", "; ".join(issues), timings)
    dialect = settings.dialect_for(sample)
    qb = BindingTable(question_candidates(sample)) if dialect == ENTITY else None

    t0 = time.perf_counter()
    try:
        plan = decompose(sample, backend, dialect=dialect, limits=settings.limits,
                         params=settings.params, bindings=qb)
    except (PathSynthError, ValueError) as exc:
        return _reject(sample.sample_id, "decompose", exc, timings)
    finally:
        timings["decompose"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    oracle = ExecutorOracle(sample, backend, embed_backend, settings.tau,
                            settings.limits.attempts, settings.params, settings.shuffle_seed)
    try:
        path = run_episode(sample, backend, oracle, settings.limits, dialect=dialect, plan=plan,
                           params=settings.params, strict=settings.strict)
    except (PathSynthError, ValueError) as exc:
        return _reject(sample.sample_id, "episode", exc, timings)
    finally:
        timings["episode"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        traj = assemble(sample, path, oracle.records)
    except (PathSynthError, ValueError) as exc:
        return _reject(sample.sample_id, "assemble", exc, timings)
    finally:
        timings["assemble"] = time.perf_counter() - t0
    return Outcome(sample.sample_id, trajectory=traj, timings=timings)


@dataclass
class SynthesisResult:
    trajectories: list[Trajectory]
    rejects: list[Reject]
    input_count: int
    interrupted: bool = False
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        by_reason = Counter(f"{r.stage}:{r.reason.split(':', 1)[0]}" for r in self.rejects)
        return {"input": self.input_count, "accepted": len(self.trajectories),
                "rejected": len(self.rejects), "interrupted": self.interrupted,
                "by_reason": dict(sorted(by_reason.items())),
                "stage_seconds": {k: round(v, 6) for k, v in sorted(self.stage_seconds.items())}}


def synthesize(samples: Sequence[QaSample], backend: GenerationBackend,
               embed_backend: EmbeddingBackend, settings: SynthesisSettings = SynthesisSettings(),
               *, stop: threading.Event | None = None,
               on_outcome: Callable[[Outcome], None] | None = None) -> SynthesisResult:
    """Run every sample on a thread pool.

    Setting ``stop`` lets in-flight episodes finish and skips the rest.
    Results are sorted by sample id so output never depends on scheduling.
    """
    stop = stop or threading.Event()
    outcomes: list[Outcome] = []
    seen: set[str] = set()
    dupes: list[Outcome] = []
    unique = []
    for s in samples:
        if s.sample_id in seen:
            dupes.append(_reject(s.sample_id, "validate", "duplicate sample_id", {}))
        else:
            seen.add(s.sample_id)
            unique.append(s)

    pending = iter(unique)
    interrupted = False
    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        running = set()

        def top_up():
            while len(running) < settings.workers * 2 and not stop.is_set():
                s = next(pending, None)
                if s is None:
                    return
                running.add(pool.submit(synthesize_one, s, backend, embed_backend, settings))

        top_up()
        try:
            while running:
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in done:
                    running.discard(fut)
                    out = fut.result()
                    outcomes.append(out)
                    if on_outcome is not None:
                        on_outcome(out)
                top_up()
        except KeyboardInterrupt:
            stop.set()
            logger.warning("interrupted; draining %d in-flight episodes", len(running))
            for fut in running:
                outcomes.append(fut.result())
    # never drop silently: whatever was not started is accounted as skipped
    for s in pending:
        interrupted = True
        outcomes.append(_reject(s.sample_id, "interrupted", "not started before shutdown", {}))

    outcomes.extend(dupes)
    trajs = sorted((o.trajectory for o in outcomes if o.trajectory is not None),
                   key=lambda t: t.sample_id)
    rejects = sorted((o.reject for o in outcomes if o.reject is not None),
                     key=lambda r: (r.sample_id, r.stage))
    stage_seconds: Counter = Counter()
    for o in outcomes:
        stage_seconds.update(o.timings)
    return SynthesisResult(trajs, rejects, len(samples), interrupted, dict(stage_seconds))


def write_outputs(result: SynthesisResult, out_dir: str | Path, shard_size: int = 1000) -> list[Path]:
    """``trajectories/shard-NNNNN.jsonl`` (sorted by sample id), ``rejects.jsonl``, summary."""
    out_dir = Path(out_dir)
    traj_dir = out_dir / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    for old in traj_dir.glob("shard-*.jsonl"):
        old.unlink()
    paths = []
    for i in range(0, max(len(result.trajectories), 1), shard_size):
        chunk = result.trajectories[i:i + shard_size]
        if not chunk:
            break
        path = traj_dir / f"shard-{i // shard_size:05d}.jsonl"
        write_trajectories(chunk, path)
        paths.append(path)
    write_rejects(result.rejects, out_dir / "rejects.jsonl")
    summary = result.summary()
    summary.pop("stage_seconds")  # timings vary run to run; they go to the log instead
    (out_dir / "synthesis_summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                                    encoding="utf-8")
    return paths
