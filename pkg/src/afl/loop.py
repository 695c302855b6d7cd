"""The feedback loop between the recommendation agent and the user agent.

Per case: the recommendation model's suggestion is computed once, then each
round the recommender proposes an item, the reward model scores it and the
user agent accepts or rejects it. A rejection appends the same
(item, recommender reason, user reason) triple to both memories. The loop
stops on acceptance or after ``max_epoch`` rounds and returns the last item.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .agents import AgentConfig, judge, recommend
from .backend import BackendError
from .domain import (
    AgentMemory,
    CandidateList,
    Decision,
    InvariantError,
    LoopOutcome,
    MemoryEntry,
    RecTurn,
    TurnRecord,
)
from .recmodel import Scorer, reward_score, top_k

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class LoopState:
    run_id: str
    user: str
    epoch: int
    max_epoch: int
    history: tuple[int, ...]
    candidates: CandidateList
    rec_memory: AgentMemory = field(default_factory=lambda: AgentMemory("recommendation"))
    user_memory: AgentMemory = field(default_factory=lambda: AgentMemory("user"))
    rejected: tuple[int, ...] = ()
    model_item: int | None = None
    # scores the recommender side may see: the rec model's, or the fallback scorer's when ablated
    candidate_scores: tuple[float, ...] = ()
    ground_truth: int | None = None
    use_rec_model: bool = True
    use_reward_model: bool = True

    def __post_init__(self) -> None:
        # epoch may sit at max_epoch + 1 once the final round has been rejected
        if not 1 <= self.epoch <= self.max_epoch + 1:
            raise InvariantError(f"epoch {self.epoch} outside [1, {self.max_epoch + 1}]")
        if not set(self.rejected) <= set(self.candidates.items):
            raise InvariantError("rejected items must come from the candidate list")
        if len(self.rec_memory) != self.epoch - 1 or len(self.user_memory) != self.epoch - 1:
            raise InvariantError("memory lengths must equal epoch - 1")


@dataclass(frozen=True)
class LoopCase:
    user: str
    history: tuple[int, ...]
    candidates: CandidateList
    truth: int | None = None


@dataclass(frozen=True)
class LoopEnv:
    """Immutable per-experiment inputs shared by every concurrent loop."""

    rec_agent: AgentConfig
    user_agent: AgentConfig
    rec_model: Scorer
    reward_model: Scorer | None
    fallback_scorer: Scorer | None = None
    max_epoch: int = 4
    use_rec_model: bool = True
    use_reward_model: bool = True
    refresh_model_suggestion: bool = False
    reward_temperature: float = 1.0


def update_memories(state: LoopState, turn: RecTurn, decision: Decision) -> LoopState:
    """Record a rejected round in both memories and advance the epoch."""
    if decision.accepted:
        raise InvariantError("memories are only updated after a rejection")
    entry = MemoryEntry(state.epoch, turn.item, turn.reason, decision.reason)
    rejected = state.rejected if turn.item in state.rejected else state.rejected + (turn.item,)
    return replace(
        state,
        epoch=state.epoch + 1,
        rec_memory=state.rec_memory.append(entry),
        user_memory=state.user_memory.append(entry),
        rejected=rejected,
    )


def initial_state(env: LoopEnv, case: LoopCase, run_id: str) -> LoopState:
    history = tuple(case.history)
    if env.use_rec_model:
        scorer: Scorer | None = env.rec_model
    else:
        scorer = env.fallback_scorer
    if scorer is not None:
        scores = tuple(float(s) for s in scorer.score_items(history, case.candidates.items))
    else:
        scores = tuple(0.0 for _ in case.candidates.items)
    model_item = top_k(env.rec_model, history, case.candidates, 1)[0] if env.use_rec_model else None
    return LoopState(
        run_id=run_id,
        user=case.user,
        epoch=1,
        max_epoch=env.max_epoch,
        history=history,
        candidates=case.candidates,
        model_item=model_item,
        candidate_scores=scores,
        ground_truth=case.truth,
        use_rec_model=env.use_rec_model,
        use_reward_model=env.use_reward_model,
    )


def _refreshed_suggestion(env: LoopEnv, state: LoopState) -> int | None:
    ranked = top_k(env.rec_model, state.history, state.candidates, len(state.candidates))
    fresh = [c for c in ranked if c not in state.rejected]
    return fresh[0] if fresh else ranked[0]


def feedback_loop(
    env: LoopEnv, case: LoopCase, run_id: str, log: list | None = None
) -> tuple[LoopOutcome, LoopState]:
    """Run one loop; returns the outcome and the final state (with both memories)."""
    state = initial_state(env, case, run_id)
    turns: list[TurnRecord] = []
    turn: RecTurn | None = None
    decision: Decision | None = None
    while state.epoch <= state.max_epoch:
        if env.refresh_model_suggestion and env.use_rec_model and state.epoch > 1:
            state = replace(state, model_item=_refreshed_suggestion(env, state))
        turn = recommend(env.rec_agent, state, log)
        score = None
        if env.use_reward_model and env.reward_model is not None:
            score = reward_score(env.reward_model, state.history, turn.item, env.reward_temperature)
        decision = judge(env.user_agent, state, turn, score, log)
        flags = []
        if turn.attempts > 1:
            flags.append("rec_reask")
        if turn.fallback:
            flags.append("rec_fallback")
        if decision.attempts > 1:
            flags.append("user_reask")
        if decision.fallback:
            flags.append("user_fallback")
        record = TurnRecord(
            round=state.epoch,
            i_m=state.model_item,
            i_r=turn.item,
            r_r=turn.reason,
            s_raw=score.raw if score else None,
            s_norm=score.normalized if score else None,
            d_u=decision.accepted,
            r_u=decision.reason,
            fallback_flags=tuple(flags),
            prompt_hashes=(turn.prompt_hash, decision.prompt_hash),
        )
        turns.append(record)
        if log is not None:
            log.append({"type": "turn", "run_id": run_id, "user": case.user, **record.to_dict()})
        if decision.accepted:
            break
        state = update_memories(state, turn, decision)
    assert turn is not None and decision is not None
    outcome = LoopOutcome(turn.item, decision.accepted, len(turns), tuple(turns))
    return outcome, state


def run_feedback_loop(env: LoopEnv, case: LoopCase, run_id: str, log: list | None = None) -> LoopOutcome:
    return feedback_loop(env, case, run_id, log)[0]


@dataclass
class CaseResult:
    """Outcome of one case inside an experiment, plus the records it produced."""

    user: str
    truth: int | None
    final_item: int | None = None
    outcome: LoopOutcome | None = None
    error: str | None = None
    records: list[dict[str, Any]] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def errored(self) -> bool:
        return self.error is not None

    @property
    def hit(self) -> bool:
        return self.final_item is not None and self.final_item == self.truth


def run_case(env: LoopEnv, case: LoopCase, run_id: str) -> CaseResult:
    """Run one case, converting backend/parse failures into an errored result."""
    log: list[dict[str, Any]] = []
    try:
        outcome = run_feedback_loop(env, case, run_id, log)
    except BackendError as exc:
        logger.warning("case %s errored: %s", run_id, exc)
        log.append({"type": "error", "run_id": run_id, "user": case.user, "error": str(exc)})
        return CaseResult(case.user, case.truth, error=str(exc), records=log)
    log.append(
        {"type": "outcome", "run_id": run_id, "user": case.user, "truth": case.truth, **outcome.to_dict()}
    )
    return CaseResult(case.user, case.truth, outcome.final_item, outcome, records=log)


def run_concurrently(fn: Callable[[T], R], items: Sequence[T], concurrency: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` with at most ``concurrency`` workers, preserving order."""
    if concurrency <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(fn, items))


class TranscriptWriter:
    """Append-serialized JSONL writer; one instance per output file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def write(self, records: Iterable[dict[str, Any]]) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_transcript(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
