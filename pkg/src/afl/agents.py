"""Recommendation and user agents: prompt rendering, backend calls and reply parsing.

The recommendation agent maps (memory, history, model suggestion) to an item
and a reason; the user agent maps (memory, history, recommended item, reason,
reward score) to a yes/no decision and a reason. Both re-ask on malformed
replies and fall back to a deterministic rule once the retry budget is spent.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import yaml

from .backend import Backend, ChatRequest, chat
from .domain import (
    NO_PRIOR_ROUNDS,
    AFLError,
    AgentMemory,
    CandidateList,
    Decision,
    Item,
    RecTurn,
    RewardScore,
)

if TYPE_CHECKING:
    from .loop import LoopState

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"


class RenderError(AFLError):
    pass


class ReplyParseError(AFLError):
    pass


@dataclass(frozen=True)
class DomainNouns:
    item: str
    items: str
    activity: str
    verb: str
    past_verb: str
    persona: str

    def as_dict(self) -> dict[str, str]:
        return dict(self.__dict__)


NOUNS = {
    "music": DomainNouns("music artist", "music artists", "listening", "listen to", "listened to", "music listener"),
    "game": DomainNouns("game", "games", "playing", "play", "played", "game player"),
    "movie": DomainNouns("movie", "movies", "watching", "watch", "watched", "movie viewer"),
}

_REQUIRED = {
    "rec": {
        "prompt": ("{memory}", "{history}", "{candidates}", "{suggestion_block}", "Item:"),
        "list_prompt": ("{history}", "{candidates}", "{suggestion_block}", "Item:"),
        "memory": ("{round}", "{title}", "{rec_reason}", "{user_reason}"),
        "suggestion_block": ("{suggestion}",),
        "system": (),
        "reminder": (),
    },
    "user": {
        "prompt": ("{memory}", "{history}", "{recommended}", "{rec_reason}", "{score_block}", "Decision:"),
        "memory": ("{round}", "{title}", "{rec_reason}", "{user_reason}"),
        "score_block": ("{score}",),
        "score_tip": (),
        "system": (),
        "reminder": (),
    },
}


@dataclass(frozen=True)
class Templates:
    rec: Mapping[str, str]
    user: Mapping[str, str]


def load_templates(directory: str | Path | None = None) -> Templates:
    """Read ``rec.yaml`` and ``user.yaml``; missing files fall back to the shipped defaults."""
    sides = {}
    for side, required in _REQUIRED.items():
        path = Path(directory) / f"{side}.yaml" if directory else None
        if path is None or not path.exists():
            path = TEMPLATE_DIR / f"{side}.yaml"
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
        for key, markers in required.items():
            if key not in data:
                raise RenderError(f"{path}: missing template {key!r}")
            absent = [m for m in markers if m not in data[key]]
            if absent:
                raise RenderError(f"{path}: template {key!r} lacks {absent}")
        sides[side] = {k: data[k] for k in required}
    return Templates(**sides)


@dataclass(frozen=True)
class PromptBundle:
    system: str
    body: str
    round: int
    side: str

    def messages(self) -> tuple[tuple[str, str], ...]:
        return (("system", self.system), ("user", self.body))

    @property
    def digest(self) -> str:
        return hashlib.sha256(f"{self.system}\x00{self.body}".encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ParsedRecReply:
    reason: str
    item: int


@dataclass(frozen=True)
class ParsedUserReply:
    reason: str
    decision: bool


def _title(catalog: Mapping[int, Item], item_id: int) -> str:
    try:
        return catalog[item_id].title
    except KeyError:
        raise RenderError(f"item {item_id} has no catalog title") from None


def _titles(catalog, ids: Sequence[int]) -> str:
    return ", ".join(_title(catalog, i) for i in ids)


def render_memory(memory: AgentMemory, template: str, catalog, nouns: DomainNouns) -> str:
    if not memory.entries:
        return NO_PRIOR_ROUNDS
    blocks = [
        template.format(
            round=e.round,
            title=_title(catalog, e.item),
            rec_reason=e.rec_reason,
            user_reason=e.user_reason,
            **nouns.as_dict(),
        )
        for e in memory.entries
    ]
    return "\n\n" + "\n\n".join(blocks)


def render_rec_prompt(
    memory: AgentMemory,
    history: Sequence[int],
    model_item: int | None,
    candidates: CandidateList,
    catalog: Mapping[int, Item],
    nouns: DomainNouns,
    templates: Templates,
    history_cap: int = 50,
    list_size: int | None = None,
) -> PromptBundle:
    """Render the recommender prompt; ``model_item=None`` drops the suggestion block.

    ``list_size`` switches to the multi-item variant used by the re-ranking baseline.
    """
    if memory.owner != "recommendation":
        raise RenderError(f"recommendation prompt given {memory.owner!r} memory")
    t = templates.rec
    words = nouns.as_dict()
    suggestion = ""
    if model_item is not None:
        suggestion = "\n" + t["suggestion_block"].format(suggestion=_title(catalog, model_item), **words) + "\n"
    fields = dict(
        history=_titles(catalog, list(history)[-history_cap:]) if history else "(none)",
        candidates=_titles(catalog, candidates.items),
        memory=render_memory(memory, t["memory"], catalog, nouns),
        suggestion_block=suggestion,
        n=list_size,
        **words,
    )
    body = (t["list_prompt"] if list_size else t["prompt"]).format(**fields)
    return PromptBundle(t["system"].format(**words), body, len(memory) + 1, "rec")


def render_user_prompt(
    memory: AgentMemory,
    history: Sequence[int],
    turn: RecTurn,
    score: RewardScore | None,
    candidates: CandidateList | Sequence[int] | None,
    catalog: Mapping[int, Item],
    nouns: DomainNouns,
    templates: Templates,
    history_cap: int = 50,
) -> PromptBundle:
    """Render the user-agent prompt; ``score=None`` drops the reward-score block and tip."""
    if memory.owner != "user":
        raise RenderError(f"user prompt given {memory.owner!r} memory")
    if not history:
        raise RenderError("user prompt requires a non-empty interaction history")
    t = templates.user
    words = nouns.as_dict()
    if isinstance(candidates, CandidateList):
        cand_ids: Sequence[int] = candidates.items
    else:
        cand_ids = list(candidates or ())
    score_block = score_tip = ""
    if score is not None:
        score_block = "\n" + t["score_block"].format(score=f"{score.normalized:.4f}", **words) + "\n"
        score_tip = "\n" + t["score_tip"].format(**words) + "\n"
    body = t["prompt"].format(
        history=_titles(catalog, list(history)[-history_cap:]),
        candidates=_titles(catalog, cand_ids) if cand_ids else "(not shown)",
        recommended=_title(catalog, turn.item),
        rec_reason=turn.reason,
        memory=render_memory(memory, t["memory"], catalog, nouns),
        score_block=score_block,
        score_tip=score_tip,
        **words,
    )
    return PromptBundle(t["system"].format(**words), body, len(memory) + 1, "user")


_LABEL = r"^[\s>*_#-]*{name}[\s*_]*:[\s*_]*(.*)$"
_ITEM_RE = re.compile(_LABEL.format(name="item"), re.IGNORECASE)
_REASON_RE = re.compile(_LABEL.format(name="reason"), re.IGNORECASE)
_DECISION_RE = re.compile(_LABEL.format(name="decision"), re.IGNORECASE)
_STRIP = " \t\"'`*_.[]<>"


def normalize_title(text: str) -> str:
    return " ".join(text.strip(_STRIP).split()).casefold()


def _reason(lines: list[str]) -> str:
    """Text of the last ``Reason:`` block, up to the next labelled line."""
    starts = [n for n, line in enumerate(lines) if _REASON_RE.match(line)]
    if not starts:
        return ""
    first = _REASON_RE.match(lines[starts[-1]]).group(1)  # type: ignore[union-attr]
    parts = [first]
    for line in lines[starts[-1] + 1 :]:
        if _ITEM_RE.match(line) or _DECISION_RE.match(line):
            break
        parts.append(line)
    return "\n".join(parts).strip().strip("*").strip()


def resolve_title(text: str, candidates: Sequence[int], catalog: Mapping[int, Item]) -> int:
    """Map a free-text title to a candidate id.

    Ladder: exact, then case/whitespace/quote-insensitive, then unique substring.
    Any title that collides with another candidate after normalization is
    treated as ambiguous.
    """
    raw = text.strip()
    key = normalize_title(raw)
    if not key:
        raise ReplyParseError("empty item title")
    titled = [(c, _title(catalog, c)) for c in candidates]
    normalized = [(c, normalize_title(t)) for c, t in titled]
    norm_hits = [c for c, n in normalized if n == key]
    exact = [c for c, t in titled if t.strip() == raw]
    if exact or norm_hits:
        if len(norm_hits) == 1 and len(exact) <= 1:
            return norm_hits[0]
        raise ReplyParseError(f"title {raw!r} matches several candidates")
    sub = [c for c, n in normalized if n and (key in n or n in key)]
    if len(sub) == 1:
        return sub[0]
    if sub:
        raise ReplyParseError(f"title {raw!r} is a substring of several candidates")
    raise ReplyParseError(f"title {raw!r} is not on the candidate list")


def parse_rec_reply(text: str, candidates: CandidateList | Sequence[int], catalog: Mapping[int, Item]) -> ParsedRecReply:
    cand = candidates.items if isinstance(candidates, CandidateList) else tuple(candidates)
    lines = text.splitlines()
    item_lines = [m.group(1) for m in map(_ITEM_RE.match, lines) if m]
    if not item_lines:
        raise ReplyParseError("reply has no 'Item:' line")
    item = resolve_title(item_lines[-1], cand, catalog)
    return ParsedRecReply(_reason(lines) or "(no reason given)", item)


def parse_rec_list(
    text: str, candidates: CandidateList | Sequence[int], catalog: Mapping[int, Item], n: int
) -> tuple[str, list[int]]:
    """All ``Item:`` lines in order, resolved and de-duplicated; fewer than ``n`` is an error."""
    cand = candidates.items if isinstance(candidates, CandidateList) else tuple(candidates)
    lines = text.splitlines()
    out: list[int] = []
    for m in map(_ITEM_RE.match, lines):
        if not m:
            continue
        try:
            item = resolve_title(m.group(1), cand, catalog)
        except ReplyParseError:
            continue
        if item not in out:
            out.append(item)
    if len(out) < n:
        raise ReplyParseError(f"reply lists {len(out)} valid candidates, need {n}")
    return _reason(lines) or "(no reason given)", out[:n]


def parse_user_reply(text: str) -> ParsedUserReply:
    lines = text.splitlines()
    decisions = [m.group(1) for m in map(_DECISION_RE.match, lines) if m]
    if not decisions:
        raise ReplyParseError("reply has no 'Decision:' line")
    words = set(re.findall(r"[a-z]+", decisions[-1].lower()))
    yes, no = "yes" in words, "no" in words
    if yes == no:
        raise ReplyParseError(f"ambiguous decision {decisions[-1]!r}")
    return ParsedUserReply(_reason(lines) or "(no reason given)", yes)


@dataclass(frozen=True)
class AgentConfig:
    """Everything an agent needs besides per-loop state. Shared read-only across loops."""

    backend: Backend
    catalog: Mapping[int, Item]
    nouns: DomainNouns = NOUNS["music"]
    templates: Templates = field(default_factory=load_templates)
    history_cap: int = 50
    parse_retries: int = 2
    temperature: float = 0.0
    max_tokens: int | None = None
    fallback_threshold: float = 0.5


def _tag(state: LoopState, side: str, attempt: int, **extra: Any) -> dict[str, Any]:
    return {"run": state.run_id, "user": state.user, "round": state.epoch, "side": side, "attempt": attempt, **extra}


def _ask(cfg: AgentConfig, bundle: PromptBundle, tag_fn, vstate: dict, parse, log):
    """Chat, parse and re-ask with a format reminder. Returns (parsed or None, attempts)."""
    messages = list(bundle.messages())
    reminder = (cfg.templates.rec if bundle.side == "rec" else cfg.templates.user)["reminder"]
    for attempt in range(cfg.parse_retries + 1):
        request = ChatRequest(tuple(messages), cfg.temperature, cfg.max_tokens, tag_fn(attempt), vstate)
        text = chat(cfg.backend, request, log)
        try:
            return parse(text), attempt + 1
        except ReplyParseError as exc:
            logger.info("unparseable %s reply (attempt %d): %s", bundle.side, attempt + 1, exc)
            messages += [("assistant", text), ("user", reminder.format(**cfg.nouns.as_dict()))]
    return None, cfg.parse_retries + 1


def _rec_view(cfg: AgentConfig, state: LoopState, **extra: Any) -> dict[str, Any]:
    # never carries the ground truth
    return {
        "candidates": list(state.candidates.items),
        "titles": [_title(cfg.catalog, c) for c in state.candidates.items],
        "scores": list(state.candidate_scores),
        "rejected": sorted(state.rejected),
        **extra,
    }


def recommend(cfg: AgentConfig, state: LoopState, log: list | None = None) -> RecTurn:
    """One recommendation turn: render, chat, parse; fall back to the model suggestion."""
    bundle = render_rec_prompt(
        state.rec_memory, state.history, state.model_item if state.use_rec_model else None,
        state.candidates, cfg.catalog, cfg.nouns, cfg.templates, cfg.history_cap,
    )
    parsed, attempts = _ask(
        cfg, bundle, lambda a: _tag(state, "rec", a), _rec_view(cfg, state),
        lambda text: parse_rec_reply(text, state.candidates, cfg.catalog), log,
    )
    if parsed is not None:
        return RecTurn(parsed.item, parsed.reason, state.model_item, False, attempts, bundle.digest)
    if state.use_rec_model and state.model_item is not None:
        item = state.model_item
    else:
        item = _best(state.candidates.items, state.candidate_scores)
    reason = "Fallback: the reply could not be parsed, so the top-scored candidate is recommended."
    return RecTurn(item, reason, state.model_item, True, attempts, bundle.digest)


def recommend_list(cfg: AgentConfig, state: LoopState, n: int, log: list | None = None) -> list[int]:
    """Single-pass top-``n`` list for the re-ranking baseline; raises if unparseable."""
    bundle = render_rec_prompt(
        state.rec_memory, state.history, state.model_item if state.use_rec_model else None,
        state.candidates, cfg.catalog, cfg.nouns, cfg.templates, cfg.history_cap, list_size=n,
    )
    parsed, _ = _ask(
        cfg, bundle, lambda a: _tag(state, "rec-list", a), _rec_view(cfg, state, mode="list", n=n),
        lambda text: parse_rec_list(text, state.candidates, cfg.catalog, n), log,
    )
    if parsed is None:
        raise ReplyParseError(f"recommendation list for {state.user} unparseable after retries")
    return parsed[1]


_FROM_STATE = object()


def _best(items: Sequence[int], scores: Sequence[float]) -> int:
    return min(zip(items, scores), key=lambda p: (-p[1], p[0]))[0]


def judge(
    cfg: AgentConfig,
    state: LoopState,
    turn: RecTurn,
    score: RewardScore | None,
    log: list | None = None,
    probe: int | None = None,
    ground_truth: Any = _FROM_STATE,
    candidates: CandidateList | Sequence[int] | None = None,
) -> Decision:
    """User-agent decision on ``turn``; ``probe`` distinguishes panel judgments in tags."""
    cands = state.candidates if candidates is None else candidates
    bundle = render_user_prompt(
        state.user_memory, state.history, turn, score if state.use_reward_model else None,
        cands, cfg.catalog, cfg.nouns, cfg.templates, cfg.history_cap,
    )
    extra = {} if probe is None else {"probe": probe}
    view = {
        "item": turn.item,
        "normalized": score.normalized if (score and state.use_reward_model) else None,
        "raw": score.raw if (score and state.use_reward_model) else None,
        "ground_truth": state.ground_truth if ground_truth is _FROM_STATE else ground_truth,
    }
    parsed, attempts = _ask(
        cfg, bundle, lambda a: _tag(state, "user", a, **extra), view, parse_user_reply, log,
    )
    if parsed is not None:
        return Decision(parsed.decision, parsed.reason, False, attempts, bundle.digest)
    accepted = bool(view["normalized"] is not None and view["normalized"] >= cfg.fallback_threshold)
    reason = "Fallback: the reply could not be parsed, so the reward-score threshold decided."
    return Decision(accepted, reason, True, attempts, bundle.digest)
