"""Metrics and experiment drivers.

Experiments: next-item recommendation (HitRatio@1 over a 20-candidate slate),
user simulation (precision/recall/F1 over 1:k judgment panels), a
recommend-then-rerank baseline, model ablations, and the popularity and
position bias audits. Every driver is a deterministic function of
(config, resources); per-case work fans out through ``loop.run_concurrently``
and is folded back in user order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .agents import AgentConfig, DomainNouns, ReplyParseError, Templates, judge, recommend_list
from .backend import Backend, BackendError
from .domain import (
    AFLError,
    CandidateList,
    Item,
    RecTurn,
    RunConfig,
)
from .ingest import (
    DatasetSplit,
    PanelError,
    SamplingError,
    build_sim_panel,
    sample_candidates,
    subsample,
    user_rng,
)
from .loop import (
    CaseResult,
    LoopCase,
    LoopEnv,
    LoopState,
    TranscriptWriter,
    feedback_loop,
    initial_state,
    run_case,
    run_concurrently,
)
from .recmodel import Scorer, reward_score, top_k

logger = logging.getLogger(__name__)

TIERS = ("top20", "mid20to50", "bottom50")


class UndefinedMetricError(AFLError):
    pass


def hit_ratio_at_1(outcomes: Sequence[tuple[int | None, int | None]]) -> float:
    """Fraction of (final item, truth) pairs that agree."""
    if not outcomes:
        raise UndefinedMetricError("HitRatio@1 of zero cases is undefined")
    return sum(1 for final, truth in outcomes if final == truth) / len(outcomes)


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False


def prf1(tp: int, fp: int, fn: int, tn: int = 0) -> PRF1:
    """Precision, recall and F1; empty denominators give 0 and raise a flag."""
    if tp + fp + fn + tn < 1:
        raise UndefinedMetricError("empty confusion table")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # 2pr/(p+r) rewritten over counts
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return PRF1(precision, recall, f1, tp + fp == 0, tp + fn == 0)


@dataclass
class MetricsReport:
    task: str
    n_cases: int
    n_errored: int
    seed: int
    hit_ratio_at_1: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    confusion: dict[str, int] | None = None
    flags: list[str] = field(default_factory=list)
    cases: list[dict[str, Any]] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("hit_ratio_at_1", "precision", "recall", "f1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise AFLError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        out = {k: v for k, v in self.__dict__.items() if v is not None}
        if not self.extra:
            out.pop("extra")
        return out

    def summary_lines(self) -> list[str]:
        lines = [f"{self.task}: n_cases={self.n_cases} n_errored={self.n_errored}"]
        for name in ("hit_ratio_at_1", "precision", "recall", "f1"):
            v = getattr(self, name)
            if v is not None:
                lines.append(f"{name}={v:.4f}")
        return lines


@dataclass(frozen=True)
class PopularityAudit:
    shares: dict[str, dict[str, float]]
    baseline: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {"shares": self.shares, "baseline": self.baseline}


@dataclass(frozen=True)
class PositionAudit:
    hit_ratio: dict[str, dict[str, float]]
    outcomes: dict[str, dict[str, list[list[Any]]]]

    def to_dict(self) -> dict[str, Any]:
        return {"hit_ratio": self.hit_ratio, "outcomes": self.outcomes}


@dataclass(frozen=True)
class Resources:
    """Loaded inputs shared read-only by every experiment."""

    catalog: Mapping[int, Item]
    split: DatasetSplit
    rec_model: Scorer
    reward_model: Scorer
    rec_backend: Backend
    user_backend: Backend
    fallback_scorer: Scorer | None = None
    templates: Templates | None = None
    nouns: DomainNouns | None = None
    provenance: Mapping[str, Any] = field(default_factory=dict)


def _agent(cfg: RunConfig, res: Resources, backend: Backend) -> AgentConfig:
    kwargs: dict[str, Any] = {}
    if res.templates is not None:
        kwargs["templates"] = res.templates
    if res.nouns is not None:
        kwargs["nouns"] = res.nouns
    return AgentConfig(
        backend=backend,
        catalog=res.catalog,
        history_cap=cfg.history_cap,
        parse_retries=cfg.parse_retries,
        fallback_threshold=cfg.fallback_threshold,
        **kwargs,
    )


def make_env(cfg: RunConfig, res: Resources) -> LoopEnv:
    return LoopEnv(
        rec_agent=_agent(cfg, res, res.rec_backend),
        user_agent=_agent(cfg, res, res.user_backend),
        rec_model=res.rec_model,
        reward_model=res.reward_model,
        fallback_scorer=res.fallback_scorer,
        max_epoch=cfg.max_epoch,
        use_rec_model=cfg.use_rec_model,
        use_reward_model=cfg.use_reward_model,
        refresh_model_suggestion=cfg.refresh_model_suggestion,
        reward_temperature=cfg.reward_temperature,
    )


def eval_sequences(cfg: RunConfig, split: DatasetSplit):
    if cfg.eval_split == "all":
        seqs = sorted(split.all_sequences(), key=lambda s: s.user)
    else:
        seqs = sorted(getattr(split, cfg.eval_split), key=lambda s: s.user)
    return subsample(seqs, cfg.test_subsample, cfg.seed)


def recommendation_cases(cfg: RunConfig, res: Resources, policy: str | None = None):
    """Hold out each sequence's last item and build its candidate slate.

    Returns (cases, skipped) where skipped lists (user, reason) for sequences
    that cannot form a case.
    """
    cases, skipped = [], []
    for seq in eval_sequences(cfg, res.split):
        if len(seq) < 2:
            skipped.append((seq.user, "sequence shorter than 2"))
            continue
        target = seq.items[-1]
        try:
            cands = sample_candidates(
                seq, target, res.catalog, cfg.seed, policy or cfg.ordering_policy, cfg.candidate_size
            )
        except SamplingError as exc:
            skipped.append((seq.user, str(exc)))
            continue
        cases.append(LoopCase(seq.user, seq.items[:-1], cands, target))
    return cases, skipped


def _case_row(r: CaseResult) -> dict[str, Any]:
    row: dict[str, Any] = {"user": r.user, "truth": r.truth, "final_item": r.final_item, "hit": r.hit}
    if r.outcome is not None:
        row["accepted"] = r.outcome.accepted
        row["iterations"] = r.outcome.iterations_used
        row["fallbacks"] = sorted({f for t in r.outcome.transcript for f in t.fallback_flags})
    if r.error is not None:
        row["error"] = r.error
    return row


def _write(writer: TranscriptWriter | None, results: Iterable[CaseResult]) -> None:
    if writer is None:
        return
    for r in results:
        writer.write(r.records)


def _run_id(label: str, cfg: RunConfig, user: str) -> str:
    return f"{label}/K{cfg.max_epoch}/{cfg.ordering_policy}/{user}"


def run_recommendation(
    cfg: RunConfig, res: Resources, label: str = "eval-rec", writer: TranscriptWriter | None = None
) -> tuple[list[CaseResult], list[tuple[str, str]]]:
    env = make_env(cfg, res)
    cases, skipped = recommendation_cases(cfg, res)
    results = run_concurrently(
        lambda c: run_case(env, c, _run_id(label, cfg, c.user)), cases, cfg.concurrency
    )
    _write(writer, results)
    return results, skipped


def _rec_report(task: str, cfg: RunConfig, results: list[CaseResult], skipped) -> MetricsReport:
    ok = [r for r in results if not r.errored]
    n_errored = len(results) - len(ok) + len(skipped)
    hr = hit_ratio_at_1([(r.final_item, r.truth) for r in ok])
    cases = [_case_row(r) for r in results] + [
        {"user": u, "error": why, "skipped": True} for u, why in skipped
    ]
    cases.sort(key=lambda row: row["user"])
    return MetricsReport(task, len(ok), n_errored, cfg.seed, hit_ratio_at_1=hr, cases=cases)


def eval_recommendation(
    cfg: RunConfig, res: Resources, label: str = "eval-rec", writer: TranscriptWriter | None = None
) -> MetricsReport:
    """Run the loop on every evaluation sequence and aggregate HitRatio@1.

    Errored cases (backend failures) are excluded from the denominator and
    counted in ``n_errored``.
    """
    results, skipped = run_recommendation(cfg, res, label, writer)
    return _rec_report("recommendation", cfg, results, skipped)


def run_ablation(
    cfg: RunConfig,
    res: Resources,
    use_rec_model: bool,
    use_reward_model: bool,
    writer: TranscriptWriter | None = None,
) -> MetricsReport:
    """Same pipeline as ``eval_recommendation`` with prompt blocks switched off."""
    if use_rec_model and use_reward_model:
        label = "eval-rec"
    else:
        label = f"ablate-rec{int(use_rec_model)}-reward{int(use_reward_model)}"
    ablated = replace(cfg, use_rec_model=use_rec_model, use_reward_model=use_reward_model)
    report = eval_recommendation(ablated, res, label, writer)
    report.extra["flags"] = {"use_rec_model": use_rec_model, "use_reward_model": use_reward_model}
    return report


def _stand_in_reason(res: Resources, item: int, nouns: DomainNouns | None) -> str:
    activity = nouns.activity if nouns else "listening"
    return f"{res.catalog[item].title} is recommended because it may match your {activity} history."


def _sim_case(cfg: RunConfig, res: Resources, env: LoopEnv, seq, label: str) -> CaseResult:
    log: list[dict[str, Any]] = []
    try:
        panel = build_sim_panel(seq, cfg.init_fraction, cfg.k_ratio, res.catalog, cfg.seed, cfg.candidate_size)
    except PanelError as exc:
        logger.info("skipping user %s: %s", seq.user, exc)
        return CaseResult(seq.user, None, error=str(exc), extra={"skipped": True})
    history = seq.items[: panel.init_length]
    run_id = f"{label}/k{cfg.k_ratio}/{seq.user}"
    panel_ids = [i for i, _ in panel.items]
    try:
        state: LoopState | None = None
        if cfg.sim_loop_episode:
            held = seq.items[panel.init_length :]
            if cfg.sim_loop_target == "next":
                target = held[0]
            else:
                rng = user_rng(cfg.seed, seq.user, "sim-target")
                target = held[int(rng.integers(len(held)))]
            cands = sample_candidates(seq, target, res.catalog, cfg.seed, cfg.ordering_policy, cfg.candidate_size)
            _, state = feedback_loop(env, LoopCase(seq.user, history, cands, target), run_id + "/episode", log)
        if state is None:
            first_pos = next(n for n, (_, lab) in enumerate(panel.items) if lab)
            state = LoopState(
                run_id=run_id, user=seq.user, epoch=1, max_epoch=cfg.max_epoch, history=history,
                candidates=CandidateList(tuple(panel_ids), first_pos),
                use_rec_model=cfg.use_rec_model, use_reward_model=cfg.use_reward_model,
            )
        else:
            state = replace(state, run_id=run_id)
        decisions = []
        for item, label_ in panel.items:
            turn = RecTurn(item, _stand_in_reason(res, item, res.nouns), None)
            score = reward_score(res.reward_model, history, item, cfg.reward_temperature) if cfg.use_reward_model else None
            d = judge(
                env.user_agent, state, turn, score, log, probe=item,
                ground_truth=item if label_ else None, candidates=panel_ids,
            )
            decisions.append({"item": item, "label": label_, "decision": d.accepted, "fallback": d.fallback})
            log.append({"type": "judgment", "run_id": run_id, "user": seq.user, **decisions[-1]})
    except (BackendError, SamplingError) as exc:
        log.append({"type": "error", "run_id": run_id, "user": seq.user, "error": str(exc)})
        return CaseResult(seq.user, None, error=str(exc), records=log)
    memory_len = len(state.user_memory)
    return CaseResult(seq.user, None, records=log, extra={"decisions": decisions, "memory_len": memory_len})


def confusion_from_decisions(decisions: Iterable[Mapping[str, Any]]) -> dict[str, int]:
    c = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for d in decisions:
        if d["label"]:
            c["tp" if d["decision"] else "fn"] += 1
        else:
            c["fp" if d["decision"] else "tn"] += 1
    return c


def eval_user_sim(cfg: RunConfig, res: Resources, label: str = "eval-sim", writer: TranscriptWriter | None = None) -> MetricsReport:
    """Judge every item of each user's 1:k panel; aggregate confusion over all users.

    When ``sim_loop_episode`` is set, one feedback-loop episode first fills the
    user agent's memory, which then conditions every panel judgment.
    """
    env = make_env(cfg, res)
    seqs = eval_sequences(cfg, res.split)
    results = run_concurrently(lambda s: _sim_case(cfg, res, env, s, label), seqs, cfg.concurrency)
    _write(writer, results)
    ok = [r for r in results if not r.errored]
    all_decisions = [d for r in ok for d in r.extra["decisions"]]
    if not all_decisions:
        raise UndefinedMetricError(
            f"no user produced a 1:{cfg.k_ratio} simulation panel ({len(results)} skipped); "
            "a larger k or a smaller init_fraction needs fewer held-out positives"
        )
    conf = confusion_from_decisions(all_decisions)
    if sum(conf.values()) != cfg.candidate_size * len(ok):
        raise AFLError("confusion counts do not cover every panel item")
    m = prf1(**conf)
    flags = [f for f, on in (("precision_undefined", m.precision_undefined), ("recall_undefined", m.recall_undefined)) if on]
    if cfg.debug:
        recount = _recount(all_decisions)
        if (recount.precision, recount.recall, recount.f1) != (m.precision, m.recall, m.f1):
            raise AFLError("prf1 disagrees with the raw decision recount")
    cases = []
    for r in results:
        row: dict[str, Any] = {"user": r.user}
        if r.errored:
            row["error"] = r.error
        else:
            c = confusion_from_decisions(r.extra["decisions"])
            row.update(c, memory_len=r.extra["memory_len"])
        cases.append(row)
    return MetricsReport(
        "user_simulation", len(ok), len(results) - len(ok), cfg.seed,
        precision=m.precision, recall=m.recall, f1=m.f1, confusion=conf, flags=flags, cases=cases,
        extra={"k_ratio": cfg.k_ratio},
    )


def _recount(decisions: Sequence[Mapping[str, Any]]) -> PRF1:
    """Independent per-item recount used as a debug-mode cross-check."""
    pos = [d for d in decisions if d["label"]]
    said_yes = [d for d in decisions if d["decision"]]
    hits = [d for d in said_yes if d["label"]]
    p = len(hits) / len(said_yes) if said_yes else 0.0
    r = len(hits) / len(pos) if pos else 0.0
    f = 2 * len(hits) / (len(said_yes) + len(pos)) if hits else 0.0
    return PRF1(p, r, f)


def rerank(
    cfg: RunConfig,
    env: LoopEnv,
    case: LoopCase,
    run_id: str,
    ranker: str,
    ranker_scorer: Scorer | None,
) -> CaseResult:
    log: list[dict[str, Any]] = []
    state = replace(initial_state(env, case, run_id), max_epoch=1)
    try:
        listed = recommend_list(env.rec_agent, state, cfg.rerank_size, log)
        if ranker == "scorer":
            scores = ranker_scorer.score_items(case.history, listed)  # type: ignore[union-attr]
            # stable on list position for equal scores
            order = sorted(range(len(listed)), key=lambda n: (-scores[n], n))
            final = listed[order[0]]
        else:
            final = listed[0]
            for n, item in enumerate(listed):
                score = None
                if env.use_reward_model and env.reward_model is not None:
                    score = reward_score(env.reward_model, case.history, item, env.reward_temperature)
                turn = RecTurn(item, "One of the top candidates from the recommendation list.", state.model_item)
                if judge(env.user_agent, state, turn, score, log, probe=n).accepted:
                    final = item
                    break
    except (BackendError, ReplyParseError) as exc:
        log.append({"type": "error", "run_id": run_id, "user": case.user, "error": str(exc)})
        return CaseResult(case.user, case.truth, error=str(exc), records=log)
    log.append({"type": "rerank", "run_id": run_id, "user": case.user, "list": listed, "final_item": final})
    return CaseResult(case.user, case.truth, final, records=log, extra={"list": listed})


def rerank_baseline(
    cfg: RunConfig,
    res: Resources,
    ranker: str | None = None,
    ranker_scorer: Scorer | None = None,
    writer: TranscriptWriter | None = None,
) -> MetricsReport:
    """Recommender emits a top-n list once; a ranker picks the final item.

    ``ranker="scorer"`` reorders by ``ranker_scorer`` (default: the reward
    model). ``ranker="user-agent"`` walks the list and keeps the first item the
    user agent accepts, else the list head.
    """
    ranker = ranker or cfg.ranker
    env = make_env(cfg, res)
    scorer = ranker_scorer or res.reward_model
    cases, skipped = recommendation_cases(cfg, res)
    label = f"rerank-{ranker}"
    results = run_concurrently(
        lambda c: rerank(cfg, env, c, _run_id(label, cfg, c.user), ranker, scorer), cases, cfg.concurrency
    )
    _write(writer, results)
    report = _rec_report(f"rerank_{ranker.replace('-', '_')}", cfg, results, skipped)
    report.extra["rerank_size"] = cfg.rerank_size
    return report


def popularity_tiers(counts: Mapping[int, int]) -> dict[int, str]:
    """Tier per item by count rank (descending count, ascending id on ties).

    Rank r (0-based) of N items sits at percentile r/N: top20 below 20%,
    mid20to50 below 50%, bottom50 otherwise. Integer comparisons keep the
    cut exact.
    """
    ranked = sorted(counts, key=lambda i: (-counts[i], i))
    n = len(ranked)
    return {
        item: TIERS[0] if 5 * r < n else TIERS[1] if 2 * r < n else TIERS[2]
        for r, item in enumerate(ranked)
    }


def tier_shares(items: Sequence[int], tiers: Mapping[int, str]) -> dict[str, float]:
    if not items:
        raise UndefinedMetricError("no recommended items to classify")
    shares = dict.fromkeys(TIERS, 0)
    for i in items:
        shares[tiers.get(i, TIERS[2])] += 1
    return {t: shares[t] / len(items) for t in TIERS}


def audit_popularity(
    final_items: Mapping[str, Sequence[int]], counts: Mapping[int, int], baseline_items: Sequence[int]
) -> PopularityAudit:
    """Tier shares of final recommendations per setting, plus the base scorer's shares."""
    tiers = popularity_tiers(counts)
    return PopularityAudit(
        {setting: tier_shares(items, tiers) for setting, items in final_items.items()},
        tier_shares(baseline_items, tiers),
    )


def run_popularity_audit(
    cfg: RunConfig, res: Resources, counts: Mapping[int, int], writer: TranscriptWriter | None = None
) -> PopularityAudit:
    finals: dict[str, list[int]] = {}
    baseline: list[int] = []
    for k in cfg.max_epochs_sweep:
        results, _ = run_recommendation(replace(cfg, max_epoch=k), res, "audit-popularity", writer)
        finals[str(k)] = [r.final_item for r in results if r.final_item is not None]
    cases, _ = recommendation_cases(cfg, res)
    baseline = [top_k(res.rec_model, c.history, c.candidates, 1)[0] for c in cases]
    return audit_popularity(finals, counts, baseline)


def audit_position(cfg: RunConfig, res: Resources, writer: TranscriptWriter | None = None) -> PositionAudit:
    """HitRatio@1 with the positive placed first, at random, or last, per max_epoch.

    Negatives depend only on (seed, user), so the three policies see the same
    candidate sets in different orders.
    """
    hr: dict[str, dict[str, float]] = {}
    outcomes: dict[str, dict[str, list[list[Any]]]] = {}
    for policy in ("first", "random", "last"):
        hr[policy], outcomes[policy] = {}, {}
        for k in cfg.max_epochs_sweep:
            run_cfg = replace(cfg, ordering_policy=policy, max_epoch=k)
            results, skipped = run_recommendation(run_cfg, res, "audit-position", writer)
            report = _rec_report("recommendation", run_cfg, results, skipped)
            hr[policy][str(k)] = report.hit_ratio_at_1  # type: ignore[assignment]
            outcomes[policy][str(k)] = [[r.user, r.final_item, r.hit] for r in results]
    return PositionAudit(hr, outcomes)


def config_snapshot(cfg: RunConfig) -> dict[str, Any]:
    snap = cfg.to_dict()
    snap["supported_k_ratios"] = [1, 3, 9]
    return snap


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_report(
    directory: str | Path,
    name: str,
    metrics: Mapping[str, Any],
    cfg: RunConfig,
    provenance: Mapping[str, Any],
) -> tuple[Path, Path]:
    """Write ``<name>.metrics.json`` (metrics and per-case table only) and
    ``<name>.report.json`` (config snapshot, provenance and metrics)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mpath, rpath = directory / f"{name}.metrics.json", directory / f"{name}.report.json"
    mpath.write_text(_dump(dict(metrics)), encoding="utf-8")
    rpath.write_text(
        _dump({"config": config_snapshot(cfg), "provenance": dict(provenance), "metrics": dict(metrics)}),
        encoding="utf-8",
    )
    return mpath, rpath
