"""Acceptance gate: one test per criterion, each recorded as a PASS/FAIL line
in the terminal summary (see ``conftest.pytest_terminal_summary``)."""

from __future__ import annotations

import hashlib
import json
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from afl.agents import AgentConfig
from afl.backend import Backend, BackendError, HttpBackend, ChatRequest, OracleUserBackend, ScriptedRecBackend
from afl.cli import main
from afl.config import build_resources, load_config, parse_config
from afl.domain import CandidateList, Item, K_RATIOS, RunConfig, UserSequence
from afl.evalbench import (
    audit_position,
    eval_recommendation,
    hit_ratio_at_1,
    popularity_tiers,
    prf1,
    recommendation_cases,
    run_popularity_audit,
    tier_shares,
)
from afl.ingest import build_sim_panel, popularity_counts, sample_candidates
from afl.loop import LoopCase, LoopEnv, feedback_loop
from afl.recmodel import PairwiseMF, PopularityScorer, gradient_check, top_k

from stub_server import StubServer, StubState


@pytest.fixture(scope="module")
def bundled():
    cfg, registry = load_config(None)
    cfg = replace(cfg, eval_split="all", concurrency=4, artifacts_dir="/nonexistent-artifacts")
    start = time.perf_counter()
    res = build_resources(cfg, registry)
    return cfg, res, time.perf_counter() - start


def _scorer_hr(res, cfg, k):
    cases, _ = recommendation_cases(cfg, res)
    return Fraction(sum(c.truth in top_k(res.rec_model, c.history, c.candidates, k) for c in cases), len(cases))


def test_criterion_01_loop_equivalence(bundled, criterion):
    with criterion(1) as c:
        cfg, res, setup = bundled
        assert len({s.user for s in res.split.all_sequences()}) == 200 and len(res.catalog) == 500
        start = time.perf_counter()
        cells = []
        for k in (1, 2, 3, 4, 10, 20):
            report = eval_recommendation(replace(cfg, max_epoch=k), res)
            expected = _scorer_hr(res, cfg, k)
            assert report.n_cases == 200 and report.n_errored == 0
            assert Fraction(report.hit_ratio_at_1).limit_denominator(200) == expected
            assert report.hit_ratio_at_1 == expected.numerator / expected.denominator
            cells.append(f"K={k}:{report.hit_ratio_at_1:.3f}")
        elapsed = time.perf_counter() - start + setup
        assert elapsed < 30, f"took {elapsed:.1f}s"
        c.detail = f"{' '.join(cells)} (200 users, {elapsed:.1f}s incl. training)"


def test_criterion_02_monotone(bundled, criterion):
    with criterion(2) as c:
        cfg, res, _ = bundled
        values = [eval_recommendation(replace(cfg, max_epoch=k), res).hit_ratio_at_1 for k in range(1, 21)]
        assert all(a <= b for a, b in zip(values, values[1:])), values
        c.detail = f"HR@1 over K=1..20 rises {values[0]:.3f} -> {values[-1]:.3f}, never decreasing"


class Chaotic(Backend):
    """Deterministic per-request noise: valid, off-list or garbled replies."""

    kind = "chaotic"

    def __init__(self, side):
        self.side = side

    def chat(self, request):
        rng = random.Random(hashlib.sha256(json.dumps(request.tag, sort_keys=True).encode()).digest())
        roll = rng.random()
        if roll < 0.15:
            return "I would rather not say."
        if self.side == "rec":
            titles = request.state["titles"]
            pick = rng.choice(titles) if roll < 0.85 else "Nonexistent Artist"
            return f"Reason: chosen at random\nItem: {pick}"
        return f"Reason: coin flip\nDecision: {'yes' if rng.random() < 0.3 else 'no'}"


class CountingScorer(PopularityScorer):
    def __init__(self, scores):
        super().__init__({}, list(scores))
        self.scores = scores

    def score_items(self, history, items):
        return np.array([self.scores[i] for i in items])


def test_criterion_03_algorithm_conformance(criterion):
    with criterion(3) as c:
        rng = np.random.default_rng(2024)
        catalog = {i: Item(i, f"Artist {i:03d}") for i in range(1, 201)}
        violations = fallbacks = 0
        for n in range(1000):
            items = rng.choice(np.arange(1, 201), size=20, replace=False)
            cands = CandidateList(tuple(int(i) for i in items), int(rng.integers(20)))
            scores = {int(i): float(s) for i, s in zip(items, rng.normal(size=20))}
            scorer = CountingScorer(scores)
            chaotic = n % 2 == 1
            env = LoopEnv(
                AgentConfig(Chaotic("rec") if chaotic else ScriptedRecBackend(), catalog),
                AgentConfig(Chaotic("user") if chaotic else OracleUserBackend(), catalog),
                scorer, scorer,
                max_epoch=int(rng.integers(1, 21)),
                use_rec_model=bool(rng.random() < 0.8),
                use_reward_model=bool(rng.random() < 0.8),
                fallback_scorer=scorer,
            )
            history = tuple(int(i) for i in rng.choice(np.setdiff1d(np.arange(1, 201), items), size=5))
            out, state = feedback_loop(env, LoopCase(f"u{n}", history, cands, cands.positive), f"fuzz/{n}")
            i_ms = {t.i_m for t in out.transcript}
            expected_im = top_k(scorer, history, cands, 1)[0] if env.use_rec_model else None
            fallbacks += sum(bool(t.fallback_flags) for t in out.transcript)
            ok = (
                i_ms == {expected_im}
                and len(state.rec_memory) == out.iterations_used - (1 if out.accepted else 0)
                and state.rec_memory.entries == state.user_memory.entries
                and out.final_item == out.transcript[-1].i_r
                and 1 <= out.iterations_used <= env.max_epoch
                and [t.round for t in out.transcript] == list(range(1, out.iterations_used + 1))
                and all(t.i_r in cands for t in out.transcript)
            )
            violations += not ok
        assert violations == 0
        c.detail = f"1000 fuzzed loops (half with noisy backends, {fallbacks} fallback turns), 0 violations"


def test_criterion_04_metric_oracles(criterion):
    with criterion(4) as c:
        rng = random.Random(4)
        for _ in range(10_000):
            n = rng.randint(1, 60)
            decisions = [(rng.random() < 0.4, rng.random() < 0.5) for _ in range(n)]  # (label, said yes)
            tp = sum(l and y for l, y in decisions)
            fp = sum((not l) and y for l, y in decisions)
            fn = sum(l and not y for l, y in decisions)
            tn = n - tp - fp - fn
            m = prf1(tp, fp, fn, tn)
            yes = [l for l, y in decisions if y]
            pos = [y for l, y in decisions if l]
            p = Fraction(sum(yes), len(yes)) if yes else Fraction(0)
            r = Fraction(sum(pos), len(pos)) if pos else Fraction(0)
            f = 2 * p * r / (p + r) if p + r else Fraction(0)
            for got, want in ((m.precision, p), (m.recall, r), (m.f1, f)):
                assert f"{got:.10f}" == f"{float(want):.10f}"
            outcomes = [(rng.randint(1, 5), rng.randint(1, 5)) for _ in range(rng.randint(1, 60))]
            hr = Fraction(sum(a == b for a, b in outcomes), len(outcomes))
            assert f"{hit_ratio_at_1(outcomes):.10f}" == f"{float(hr):.10f}"
        c.detail = "10,000 confusion tables and 10,000 outcome lists agree with Fraction recounts"


def test_criterion_05_candidate_protocol(criterion):
    with criterion(5) as c:
        rng = np.random.default_rng(5)
        catalog = {i: Item(i, f"I{i}") for i in range(1, 301)}
        for n in range(10_000):
            length = int(rng.integers(1, 60))
            hist = tuple(int(i) for i in rng.integers(1, 301, size=length))
            seq = UserSequence(f"u{n % 500}", hist, tuple(range(length)))
            policy = ("random", "first", "last")[n % 3]
            cl = sample_candidates(seq, hist[-1], catalog, seed=n % 7, policy=policy)
            assert len(cl.items) == 20 and len(set(cl.items)) == 20
            assert cl.items.count(hist[-1]) == 1 and cl.positive == hist[-1]
            assert not (set(cl.items) - {hist[-1]}) & set(hist)
            assert cl == sample_candidates(seq, hist[-1], catalog, seed=n % 7, policy=policy)
        panels = 0
        for n in range(600):
            length = int(rng.integers(60, 120))
            hist = tuple(int(i) for i in rng.permutation(np.arange(1, 301))[:length])
            seq = UserSequence(f"p{n}", hist, tuple(range(length)))
            for k, want in zip(K_RATIOS, ((10, 10), (5, 15), (2, 18))):
                panel = build_sim_panel(seq, 0.8, k, catalog, seed=n)
                labels = [lab for _, lab in panel.items]
                assert (labels.count(True), labels.count(False)) == want
                panels += 1
        c.detail = f"10,000 candidate lists, {panels} panels at 10/10, 5/15, 2/18; 0 violations"


def test_criterion_06_gradient_check(criterion):
    with criterion(6) as c:
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(100):
            n, d = int(rng.integers(3, 21)), int(rng.integers(1, 6))
            vocab = list(range(1, n + 1))
            model = PairwiseMF(vocab, rng.normal(0, 0.5, (n, d)), rng.normal(0, 0.5, (n, d)), rng.normal(0, 0.5, n), window=int(rng.integers(1, 6)))
            sample = [
                (list(rng.choice(vocab, size=int(rng.integers(0, 6)))), int(rng.choice(vocab)), int(rng.choice(vocab)))
                for _ in range(int(rng.integers(1, 11)))
            ]
            worst = max(worst, gradient_check(model, sample, l2=float(rng.choice([0.0, 1e-4, 1e-2]))))
        assert worst < 1e-4
        c.detail = f"100 random instances, max relative error {worst:.2e}"


def test_criterion_07_position_invariance(bundled, criterion):
    with criterion(7) as c:
        cfg, res, _ = bundled
        audit = audit_position(replace(cfg, max_epochs_sweep=(1, 2, 3, 4)), res)
        for k in ("1", "2", "3", "4"):
            hrs = {audit.hit_ratio[p][k] for p in ("first", "random", "last")}
            outs = {frozenset(map(tuple, audit.outcomes[p][k])) for p in ("first", "random", "last")}
            assert len(hrs) == 1 and len(outs) == 1
        c.detail = "first/random/last identical per-case outcomes for max_epoch 1..4 " + str(
            [round(audit.hit_ratio["first"][k], 3) for k in ("1", "2", "3", "4")]
        )


def test_criterion_08_popularity_partition(bundled, criterion):
    with criterion(8) as c:
        cfg, res, _ = bundled
        audit = run_popularity_audit(cfg, res, popularity_counts(res.split))
        for shares in [*audit.shares.values(), audit.baseline]:
            assert abs(sum(shares.values()) - 1) <= 1e-9
        rng = np.random.default_rng(8)
        counts = {int(i): int(cnt) for i, cnt in zip(rng.permutation(np.arange(1, 1001)), rng.poisson(3, 1000))}
        order = sorted(counts, key=lambda i: (-counts[i], i))
        naive = {}
        for rank, item in enumerate(order):
            pct = 100 * rank / len(order)
            naive[item] = "top20" if pct < 20 else "mid20to50" if pct < 50 else "bottom50"
        assert popularity_tiers(counts) == naive
        for _ in range(200):
            items = list(rng.integers(1, 1100, size=int(rng.integers(1, 50))))
            assert abs(sum(tier_shares(items, popularity_tiers(counts)).values()) - 1) <= 1e-9
        c.detail = "shares sum to 1 on every run; 1,000-item tiers equal the percentile oracle"


def test_criterion_09_replay_determinism(tmp_path, criterion, capsys):
    with criterion(9) as c:
        base = ["--output-dir", str(tmp_path), "--eval-split", "all", "--test-subsample", "60"]
        runs = [
            ("eval-rec", []),
            ("eval-sim", ["--k", "9"]),
            ("rerank", ["--ranker", "user-agent"]),
            ("ablate", ["--no-reward-model"]),
        ]
        for cmd, extra in runs:
            assert main([cmd, *base, *extra, "--run-id", f"{cmd}-live"]) == 0
            assert main([cmd, *base, *extra, "--run-id", f"{cmd}-replay", "--replay", str(tmp_path / f"{cmd}-live")]) == 0
            live = sorted((tmp_path / f"{cmd}-live").glob("*.metrics.json"))
            again = sorted((tmp_path / f"{cmd}-replay").glob("*.metrics.json"))
            assert live and [p.name for p in live] == [p.name for p in again]
            for a, b in zip(live, again):
                assert a.read_bytes() == b.read_bytes()
        capsys.readouterr()
        c.detail = "eval-rec, eval-sim, rerank, ablate replayed from transcripts: metrics byte-identical"


def test_criterion_10_http_contract(criterion):
    with criterion(10) as c:
        state = StubState(delay=0.03)
        with StubServer(state) as srv:
            backend = HttpBackend(srv.base_url, "m", max_in_flight=4, backoff=0.0)
            with ThreadPoolExecutor(16) as pool:
                list(pool.map(lambda n: backend.chat(ChatRequest((("user", "x"),), tag={"n": n})), range(48)))
        assert state.max_in_flight <= 4 and state.requests == 48
        peak = state.max_in_flight

        retry = StubState(statuses=[429, 500, 200])
        with StubServer(retry) as srv:
            assert HttpBackend(srv.base_url, "m", attempts=3, backoff=0.0).chat(ChatRequest((("user", "x"),)))
        assert retry.requests == 3

        fail = StubState(statuses=[503, 502, 504, 200])
        with StubServer(fail) as srv:
            with pytest.raises(BackendError) as err:
                HttpBackend(srv.base_url, "m", attempts=3, backoff=0.0).chat(ChatRequest((("user", "x"),)))
        assert fail.requests == 3 and err.value.status == 504

        client = StubState(statuses=[404])
        with StubServer(client) as srv:
            with pytest.raises(BackendError):
                HttpBackend(srv.base_url, "m", attempts=3, backoff=0.0).chat(ChatRequest((("user", "x"),)))
        assert client.requests == 1
        c.detail = f"peak in-flight {peak}/4; 429,500 then 200 -> 3 requests; 3x5xx -> error after 3; 404 not retried"


def test_criterion_11_default_snapshot(tmp_path, criterion, capsys):
    with criterion(11) as c:
        cfg, _ = parse_config({})
        assert cfg == RunConfig()
        for cmd, extra in (("eval-rec", []), ("eval-sim", ["--k", "9"]), ("audit-position", []), ("audit-popularity", [])):
            assert main([cmd, "--output-dir", str(tmp_path), "--run-id", cmd, "--test-subsample", "10", *extra]) == 0
        reports = sorted(tmp_path.glob("*/*.report.json"))
        assert len(reports) == 4
        for path in reports:
            doc = json.loads(path.read_text())
            snap = doc["config"]
            assert snap["split_ratios"] == [0.8, 0.1, 0.1]
            assert snap["candidate_size"] == 20 and snap["max_epoch"] == 4
            assert snap["supported_k_ratios"] == [1, 3, 9] and snap["k_ratio"] in (1, 3, 9)
            assert doc["provenance"]["split_sizes"] == {"train": 160, "validation": 20, "test": 20}
        capsys.readouterr()
        c.detail = "8:1:1 (160/20/20), candidate_size 20, max_epoch 4, k in {1,3,9} in all 4 report snapshots"
