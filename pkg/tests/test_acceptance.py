"""Acceptance suite: one printed PASS/FAIL line per criterion, then the assertion.

Run alone with ``pytest tests/test_acceptance.py -s`` to see only the verdicts.
"""

import json
import math
import random
import threading
import time

import numpy as np
import pytest

from conftest import FIXTURES, write_jsonl
from gen_turns import random_turn
from mutations import all_mutations
from pathsynth.agent import (
    DenseIndex,
    DistractorRetriever,
    TripleRetriever,
    retrieve_dense,
)
from pathsynth.backends import (
    FunctionGenerator,
    HashingEmbedder,
    ScriptedEmbedder,
    Throttle,
)
from pathsynth.cli import main
from pathsynth.dataset_io import Corpus, CorpusEntry, build_triple_store, load_samples
from pathsynth.errors import PathSynthError
from pathsynth.executor import select_evidence
from pathsynth.metrics import exact_match, f1, normalize
from pathsynth.pipeline import SynthesisSettings, synthesize, write_outputs
from pathsynth.tags import ENTITY, PLAIN, BindingTable, SearchCall, parse_turn, render_turn
from pathsynth.trajectory import assemble
from simllm import SimulatedModel
from test_metrics import METRIC_ORACLE
from worked import EXPECTED_ACTIONS, EXPECTED_SELECTIONS, SAMPLES, SCRIPTS, synthetic_samples
from worked_turns import COLLEGIAN_FINAL, COLLEGIAN_STEP1, COLLEGIAN_STEP2, LAISHA_EXECUTOR, WORKED

TAU = 0.9


@pytest.fixture
def verdict(capsys):
    def report(n: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, f"criterion {n} failed: {detail}"
    return report


# 1 -------------------------------------------------------------------------

_ALPHABET = ("abcxyzÀéßøŁż0123456789" + " \t\n" + ".,;:!?'\"-()[]«»¿¡" + "ΑβГд中文")
_WORDS = ("the", "a", "an", "The", "A", "AN", "theater", "apple", "1960", "Ł")


def _random_string(rng: random.Random) -> str:
    parts = []
    for _ in range(rng.randint(0, 8)):
        if rng.random() < 0.4:
            parts.append(rng.choice(_WORDS))
        else:
            parts.append("".join(rng.choice(_ALPHABET) for _ in range(rng.randint(0, 6))))
    return rng.choice((" ", "", "  ", "\n")).join(parts)


def test_criterion_1_metric_oracle(verdict):
    t0 = time.perf_counter()
    bad = [(p, g) for p, g, em, sc in METRIC_ORACLE
           if exact_match(p, g) is not em or abs(f1(p, g) - sc) > 1e-9]
    rng = random.Random(20241015)
    not_idem = 0
    for _ in range(10_000):
        s = _random_string(rng)
        n = normalize(s)
        if normalize(n) != n:
            not_idem += 1
    elapsed = time.perf_counter() - t0
    ok = not bad and not_idem == 0 and len(METRIC_ORACLE) == 12 and elapsed < 5
    verdict(1, "metric oracle", ok,
            f"{12 - len(bad)}/12 oracle cases, {10_000 - not_idem}/10000 idempotent, {elapsed:.2f}s < 5s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_tag_round_trip(verdict):
    t0 = time.perf_counter()
    failures = 0
    for dialect in (PLAIN, ENTITY):
        rng = random.Random(f"round-trip-{dialect}")
        for _ in range(1000):
            turn = random_turn(rng, dialect)
            if parse_turn(render_turn(turn, dialect), dialect) != turn:
                failures += 1
    worked_ok = sum(parse_turn(text, d, strict=strict) == expected
                    for _, text, d, strict, expected in WORKED)
    verbatim = all(render_turn(parse_turn(t)) == t
                   for t in (COLLEGIAN_STEP1, COLLEGIAN_STEP2, COLLEGIAN_FINAL, LAISHA_EXECUTOR))
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and worked_ok == len(WORKED) and verbatim and elapsed < 10
    verdict(2, "tag protocol round-trip", ok,
            f"{2000 - failures}/2000 random turns, {worked_ok}/{len(WORKED)} worked turns, "
            f"verbatim re-render {verbatim}, {elapsed:.2f}s < 10s")


# 3 -------------------------------------------------------------------------

def _brute_force(answer, facts, tau):
    """Independent filter: pure-Python cosine, strict >, argmax fallback at lowest index."""
    def cos(u, v):
        dot = sum(a * b for a, b in zip(u, v))
        return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))

    scores = [cos(vec, answer) for vec in facts]
    kept = [i for i, s in enumerate(scores) if s > tau]
    if kept:
        return kept, False, scores
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return [best], True, scores


def _angle(deg):
    return [math.cos(math.radians(deg)), math.sin(math.radians(deg))]


# hand-derived: cos 0 = 1, cos 20 = 0.940, cos 25 = 0.906, cos 26 = 0.899, cos 60 = 0.5
HAND_2D = [
    ([0, 20, 60], [0, 1]),
    ([26, 60, 90], [0]),        # nothing above 0.9: argmax fallback
    ([60, 25, 25], [1, 2]),
    ([90, 45, 45], [1]),        # fallback tie goes to the lower index
]


def test_criterion_3_evidence_selection(verdict, worked_samples, golden_trajectories):
    from pathsynth.dataset_io import SupportingFact

    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = fallback_wrong = monotone_broken = 0
    for case in range(200):
        dim = int(rng.integers(2, 9))
        n = int(rng.integers(1, 7))
        answer = rng.normal(size=dim)
        # pull some facts towards the answer so both branches get exercised
        vecs = [answer * rng.uniform(0, 3) + rng.normal(size=dim) * rng.uniform(0.05, 1.5)
                for _ in range(n)]
        if case % 10 == 0 and n > 1:
            vecs[-1] = vecs[0].copy()  # an exact tie
        table = {"answer": answer.tolist(), **{f"f{i}": v.tolist() for i, v in enumerate(vecs)}}
        emb = ScriptedEmbedder(table)
        facts = [SupportingFact(f"id{i}", "text_sentence", f"f{i}") for i in range(n)]
        previous: set | None = None
        for tau in (0.3, 0.6, 0.8, 0.9, 0.95, 0.99):
            sel = select_evidence("answer", facts, tau, emb)
            kept, fallback, scores = _brute_force(table["answer"], [table[f"f{i}"] for i in range(n)], tau)
            if list(sel.ids) != [f"id{i}" for i in kept] or sel.fallback_used != fallback:
                mismatches += 1
            if sel.fallback_used != all(s <= tau for s in scores):
                fallback_wrong += 1
            above = {fid for fid, s in sel.selected if s > tau}
            if previous is not None and not above <= previous:
                monotone_broken += 1
            previous = above

    hand_ok = True
    for angles, expected in HAND_2D:
        table = {"answer": _angle(0), **{f"f{i}": _angle(a) for i, a in enumerate(angles)}}
        facts = [SupportingFact(f"id{i}", "text_sentence", f"f{i}") for i in range(len(angles))]
        sel = select_evidence("answer", facts, TAU, ScriptedEmbedder(table))
        hand_ok &= list(sel.ids) == [f"id{i}" for i in expected]

    # the worked samples: recompute the selection for every golden answer sentence
    embedder = HashingEmbedder(512)
    worked_ok = True
    for sid, traj in golden_trajectories.items():
        sample = worked_samples[sid]
        got = [list(select_evidence(r.answer_sentence, sample.golden_facts, TAU, embedder).ids)
               for r in traj.executor_records]
        worked_ok &= got == EXPECTED_SELECTIONS[sid]
    elapsed = time.perf_counter() - t0
    ok = (mismatches == fallback_wrong == monotone_broken == 0 and hand_ok and worked_ok
          and elapsed < 5)
    verdict(3, "evidence selection oracle", ok,
            f"200 fixtures x 6 thresholds: {mismatches} mismatches, {fallback_wrong} fallback errors, "
            f"{monotone_broken} monotonicity breaks; hand 2D {hand_ok}; worked tau=0.9 {worked_ok}; "
            f"{elapsed:.2f}s < 5s")


# 4 -------------------------------------------------------------------------

def test_criterion_4_synthesis_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    args = ["--dataset", str(FIXTURES / "worked_samples.jsonl"), "--out-dir", str(tmp_path),
            "--gen-backend", "scripted", "--gen-script", str(FIXTURES / "synth_script.jsonl"),
            "--emb-backend", "hashing"]
    codes = (main(["synthesize", *args]), main(["format", *args]))
    summary = json.loads((tmp_path / "synthesis_summary.json").read_text())
    planner = (tmp_path / "sft" / "planner.jsonl").read_bytes()
    executor = (tmp_path / "sft" / "executor.jsonl").read_bytes()
    shard = (tmp_path / "trajectories" / "shard-00000.jsonl").read_bytes()
    same = (planner == (FIXTURES / "golden" / "planner.jsonl").read_bytes()
            and executor == (FIXTURES / "golden" / "executor.jsonl").read_bytes()
            and shard == (FIXTURES / "golden" / "trajectories.jsonl").read_bytes())
    n_planner = len(planner.splitlines())
    n_exec = len(executor.splitlines())
    elapsed = time.perf_counter() - t0
    ok = (codes == (0, 0) and summary["accepted"] == 5 and same and n_planner == 5
          and n_exec == sum(EXPECTED_ACTIONS.values()) == 12 and elapsed < 30)
    verdict(4, "end-to-end synthesis determinism", ok,
            f"accepted {summary['accepted']}/5, byte-identical to goldens {same}, "
            f"planner records {n_planner}, executor records {n_exec} = sum N 12, {elapsed:.2f}s < 30s")


# 5 -------------------------------------------------------------------------

def test_criterion_5_trajectory_validation(verdict, worked_samples, golden_trajectories, tmp_path):
    caught = total = 0
    for sid, traj in golden_trajectories.items():
        sample = worked_samples[sid]
        for name, path, records, err in all_mutations(traj, sample):
            total += 1
            try:
                assemble(sample, path, records)
            except err:
                caught += 1
            except PathSynthError:
                pass

    # a mixed batch through the pipeline: valid, malformed, and a wrong gold answer
    rows = [*SAMPLES,
            dict(SAMPLES[0], sample_id="dangling", golden_ids=["nope"]),
            dict(SAMPLES[0], sample_id="wrong_gold", answer="1961"),
            dict(SAMPLES[2], sample_id="no_facts", facts=[], golden_ids=["l1"])]
    samples = load_samples(write_jsonl(tmp_path / "mixed.jsonl", rows), validate=False)
    result = synthesize(samples, FunctionGenerator(SimulatedModel(SCRIPTS)), HashingEmbedder(512))
    accounted = len(result.trajectories) + len(result.rejects)
    stages = sorted((r.sample_id, r.stage, r.reason.split(":", 1)[0]) for r in result.rejects)
    expected = [("dangling", "validate", "golden_ids"), ("no_facts", "validate", "golden_ids"),
                ("wrong_gold", "assemble", "AnswerMismatch")]
    ok = caught == total == 15 and accounted == len(rows) and stages == expected
    verdict(5, "trajectory validation", ok,
            f"{caught}/{total} mutations rejected with the designated error; "
            f"accepted {len(result.trajectories)} + rejected {len(result.rejects)} = input {len(rows)}")


# 6 -------------------------------------------------------------------------

def _agent(tmp_path, dataset, corpus, tag):
    out = tmp_path / tag
    common = ["--dataset", str(FIXTURES / dataset), "--out-dir", str(out),
              "--gen-backend", "scripted", "--gen-script", str(FIXTURES / "agent_script.jsonl"),
              "--emb-backend", "hashing", "--retrieval-mode", "dense",
              "--corpus", str(FIXTURES / corpus), "--index-cache", str(tmp_path / "cache")]
    code = main(["agent", *common])
    code_eval = main(["eval", *common])
    preds = [json.loads(x) for x in (out / "predictions.jsonl").read_text().splitlines()]
    traces = [json.loads(x) for x in (out / "traces.jsonl").read_text().splitlines()]
    report = json.loads((out / "report.json").read_text())
    return code, code_eval, preds, traces, report


def test_criterion_6_agent_runtime(verdict, tmp_path):
    docs = len(Corpus.read(FIXTURES / "collegian_corpus.jsonl"))
    cold = _agent(tmp_path, "collegian_eval.jsonl", "collegian_corpus.jsonl", "cold")
    warm = _agent(tmp_path, "collegian_eval.jsonl", "collegian_corpus.jsonl", "warm")
    adv = _agent(tmp_path, "adversarial_eval.jsonl", "distractor_corpus.jsonl", "adversarial")
    (c_pred,), (a_pred,) = cold[2], adv[2]
    traces = cold[3] + warm[3] + adv[3]
    counts_ok = all(len(t["retrievals"]) == t["action_count"] for t in traces)
    ok = (docs == 4 and cold[:2] == adv[:2] == (0, 0)
          and c_pred["termination"] == "answered" and c_pred["prediction"] == "1960"
          and cold[4]["em"] == 1.0 and warm[2] == cold[2]
          and a_pred["termination"] == "step_budget" and adv[4]["em"] == 0.0 and counts_ok)
    verdict(6, "agent runtime", ok,
            f"collegian over {docs} docs: {c_pred['termination']} {c_pred['prediction']!r} "
            f"EM {cold[4]['em']}; cached index agrees {warm[2] == cold[2]}; adversarial: "
            f"{a_pred['termination']} EM {adv[4]['em']}; retrievals == actions {counts_ok}")


# 7 -------------------------------------------------------------------------

def test_criterion_7_retrievers(verdict, worked_samples):
    rng = np.random.default_rng(11)
    vectors = rng.normal(size=(50, 16))
    vectors[17] = vectors[3] * 2.0       # same direction: tied score with doc 3
    vectors[42] = vectors[8]             # identical: tied with doc 8
    # doc ids deliberately not in row order so the tie-break is visible
    ids = [f"doc-{(i * 37) % 50:06d}" for i in range(50)]
    corpus = Corpus([CorpusEntry(ids[i], f"T{i}", f"passage {i}") for i in range(50)])
    index = DenseIndex.from_embeddings(corpus, vectors)
    queries = {f"q{j}": rng.normal(size=16).tolist() for j in range(20)}
    queries["q-tie-a"] = vectors[3].tolist()
    queries["q-tie-b"] = vectors[8].tolist()
    emb = ScriptedEmbedder(queries)

    def brute(q, k):
        qn = math.sqrt(sum(x * x for x in q))
        scored = []
        for i, row in enumerate(vectors.tolist()):
            rn = math.sqrt(sum(x * x for x in row))
            scored.append((-sum(a * b for a, b in zip(row, q)) / (rn * qn), ids[i]))
        scored.sort()
        return [doc for _, doc in scored[:k]], [-s for s, _ in scored[:k]]

    dense_ok = True
    for name, q in queries.items():
        for k in (1, 5, 10, 50):
            res = retrieve_dense(index, name, k, emb)
            want_ids, want_scores = brute(q, k)
            dense_ok &= [it.key for it in res.items] == want_ids
            dense_ok &= all(abs(it.score - s) < 1e-9 for it, s in zip(res.items, want_scores))

    store = {sid: s.facts for sid, s in worked_samples.items()}
    distractor_ok = all(
        [(it.key, it.content) for it in DistractorRetriever(store, sid)(SearchCall("q?")).items]
        == [(f.id, f.display()) for f in s.facts]
        for sid, s in worked_samples.items())

    zul = worked_samples["zulawski"]
    triples = TripleRetriever(build_triple_store([zul]))(
        SearchCall("Who is the mother of Xawery Żuławski?", entity_ref=0),
        BindingTable(["Xawery Żuławski"]))
    expected = [f.content for f in zul.facts if f.content.startswith("(Xawery Żuławski,")]
    triple_ok = [it.content for it in triples.items] == expected and len(expected) == 8
    ok = dense_ok and distractor_ok and triple_ok
    verdict(7, "retriever correctness", ok,
            f"dense top-k vs brute force over 22 queries x 4 k {dense_ok}; distractor verbatim "
            f"{distractor_ok}; Żuławski triples {len(triples.items)}/8")


# 8 -------------------------------------------------------------------------

def _throughput_run(samples, out_dir):
    sim = SimulatedModel({})

    def slow(request):
        time.sleep(0.005)
        return sim(request)

    throttle = Throttle(8)
    gen = FunctionGenerator(slow, name="mock-5ms", throttle=throttle)
    t0 = time.perf_counter()
    result = synthesize(samples, gen, HashingEmbedder(512), SynthesisSettings(workers=8))
    elapsed = time.perf_counter() - t0
    paths = write_outputs(result, out_dir, shard_size=250)
    return elapsed, result, [p.read_bytes() for p in paths], throttle.peak_in_flight


def test_criterion_8_throughput(verdict, tmp_path):
    samples = load_samples(write_jsonl(tmp_path / "syn.jsonl", synthetic_samples(1000)))
    first = _throughput_run(samples, tmp_path / "a")
    second = _throughput_run(samples, tmp_path / "b")
    elapsed, result, shards, peak = first
    deterministic = shards == second[2] and len(shards) == 4
    ok = (elapsed < 60 and len(result.trajectories) == 1000 and deterministic
          and max(peak, second[3]) <= 8 and threading.active_count() < 50)
    verdict(8, "throughput and concurrency", ok,
            f"1000 samples in {elapsed:.1f}s (< 60s), accepted {len(result.trajectories)}, "
            f"shards identical across runs {deterministic}, peak in-flight {max(peak, second[3])} <= 8")
