"""Core value types shared across the package.

Every value here is a frozen dataclass; collections are stored as tuples so
instances can be shared between evaluation threads without copying.
Each type round-trips through ``to_dict`` / ``from_dict`` (plain JSON types).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping

ORDERING_POLICIES = ("random", "first", "last")
K_RATIOS = (1, 3, 9)
SCORER_KINDS = ("popularity", "markov1", "mf-pairwise")
BACKEND_KINDS = ("http", "scripted-rec", "oracle-user", "threshold-user", "replay")
NO_PRIOR_ROUNDS = "(no prior rounds)"


class AFLError(Exception):
    """Base class for all errors raised by this package."""


class InvariantError(AFLError, ValueError):
    """A value was constructed in violation of its type invariants."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise InvariantError(msg)


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


class _Serializable:
    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))  # type: ignore[arg-type]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]):
        kwargs = {}
        for f in fields(cls):  # type: ignore[arg-type]
            if f.name not in data:
                continue
            value = data[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class Item(_Serializable):
    id: int
    title: str

    def __post_init__(self) -> None:
        _check(isinstance(self.id, int), f"item id must be int, got {self.id!r}")
        _check(bool(self.title and self.title.strip()), f"item {self.id} has an empty title")


@dataclass(frozen=True)
class InteractionEvent(_Serializable):
    user: str
    item: int
    timestamp: int

    def __post_init__(self) -> None:
        _check(self.timestamp >= 0, f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class UserSequence(_Serializable):
    """One user's interactions, oldest first."""

    user: str
    items: tuple[int, ...]
    timestamps: tuple[int, ...]

    def __post_init__(self) -> None:
        _check(len(self.items) >= 1, f"user {self.user}: empty sequence")
        _check(len(self.items) == len(self.timestamps), f"user {self.user}: length mismatch")
        _check(
            all(a <= b for a, b in zip(self.timestamps, self.timestamps[1:])),
            f"user {self.user}: timestamps not sorted",
        )

    @property
    def last_timestamp(self) -> int:
        return self.timestamps[-1]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class CandidateList(_Serializable):
    """Evaluation slate with one hidden positive.

    ``positive_index`` is harness-only information and must never be rendered
    into a prompt for the recommendation side.
    """

    items: tuple[int, ...]
    positive_index: int
    ordering_policy: str = "random"

    def __post_init__(self) -> None:
        n = len(self.items)
        _check(n >= 2, "candidate list needs at least 2 items")
        _check(len(set(self.items)) == n, "duplicate candidates")
        _check(0 <= self.positive_index < n, "positive index out of range")
        _check(self.ordering_policy in ORDERING_POLICIES, f"unknown policy {self.ordering_policy!r}")
        if self.ordering_policy == "first":
            _check(self.positive_index == 0, "policy 'first' requires the positive at index 0")
        elif self.ordering_policy == "last":
            _check(self.positive_index == n - 1, "policy 'last' requires the positive at the end")

    @property
    def positive(self) -> int:
        return self.items[self.positive_index]

    def __contains__(self, item: object) -> bool:
        return item in self.items

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class MemoryEntry(_Serializable):
    """One rejected round: the item, the recommender's reason and the user's reason."""

    round: int
    item: int
    rec_reason: str
    user_reason: str

    def __post_init__(self) -> None:
        _check(self.round >= 1, "memory rounds start at 1")
        _check(bool(self.rec_reason.strip()), "empty recommendation reason")
        _check(bool(self.user_reason.strip()), "empty user reason")


@dataclass(frozen=True)
class AgentMemory(_Serializable):
    owner: str
    entries: tuple[MemoryEntry, ...] = ()

    def __post_init__(self) -> None:
        _check(self.owner in ("recommendation", "user"), f"unknown memory owner {self.owner!r}")
        rounds = [e.round for e in self.entries]
        _check(all(a < b for a, b in zip(rounds, rounds[1:])), "memory rounds must strictly increase")

    def append(self, entry: MemoryEntry) -> AgentMemory:
        return replace(self, entries=self.entries + (entry,))

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AgentMemory:
        return cls(
            owner=data["owner"],
            entries=tuple(MemoryEntry.from_dict(e) for e in data.get("entries", ())),
        )


@dataclass(frozen=True)
class RewardScore(_Serializable):
    raw: float
    normalized: float

    def __post_init__(self) -> None:
        _check(0.0 <= self.normalized <= 1.0, f"normalized score {self.normalized} outside [0, 1]")

    @classmethod
    def from_raw(cls, raw: float, temperature: float = 1.0) -> RewardScore:
        return cls(raw=float(raw), normalized=sigmoid(raw / temperature))


def sigmoid(x: float) -> float:
    # split on sign so neither branch overflows
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass(frozen=True)
class RecTurn(_Serializable):
    item: int
    reason: str
    model_suggestion: int | None
    fallback: bool = False
    attempts: int = 1
    prompt_hash: str = ""


@dataclass(frozen=True)
class Decision(_Serializable):
    accepted: bool
    reason: str
    fallback: bool = False
    attempts: int = 1
    prompt_hash: str = ""

    def __post_init__(self) -> None:
        _check(bool(self.reason.strip()), "decision reason must be non-empty")


@dataclass(frozen=True)
class TurnRecord(_Serializable):
    round: int
    i_m: int | None
    i_r: int
    r_r: str
    s_raw: float | None
    s_norm: float | None
    d_u: bool
    r_u: str
    fallback_flags: tuple[str, ...] = ()
    prompt_hashes: tuple[str, ...] = ()


@dataclass(frozen=True)
class LoopOutcome(_Serializable):
    final_item: int
    accepted: bool
    iterations_used: int
    transcript: tuple[TurnRecord, ...]

    def __post_init__(self) -> None:
        _check(self.iterations_used >= 1, "at least one iteration")
        _check(self.iterations_used == len(self.transcript), "iterations_used != transcript length")
        last = self.transcript[-1]
        _check(self.final_item == last.i_r, "final item must be the last recommended item")
        if self.accepted:
            _check(last.d_u, "accepted outcome requires an accepting last turn")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LoopOutcome:
        return cls(
            final_item=data["final_item"],
            accepted=data["accepted"],
            iterations_used=data["iterations_used"],
            transcript=tuple(TurnRecord.from_dict(t) for t in data["transcript"]),
        )


@dataclass(frozen=True)
class ScorerSpec(_Serializable):
    kind: str = "mf-pairwise"
    hyperparameters: dict[str, Any] = field(default_factory=dict)
    artifact: str | None = None

    def __post_init__(self) -> None:
        _check(self.kind in SCORER_KINDS, f"unknown scorer kind {self.kind!r}")


@dataclass(frozen=True)
class BackendSpec(_Serializable):
    """Which text-generation backend an agent talks to, plus kind-specific settings."""

    kind: str = "scripted-rec"
    settings: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check(self.kind in BACKEND_KINDS, f"unknown backend kind {self.kind!r}")
        required = {"http": ("base_url", "model"), "replay": ("path",)}.get(self.kind, ())
        missing = [k for k in required if k not in self.settings]
        _check(not missing, f"backend {self.kind!r} missing settings: {missing}")


@dataclass(frozen=True)
class RunConfig(_Serializable):
    dataset: str = "synthetic"
    interactions_path: str | None = None
    catalog_path: str | None = None
    nouns: str = "music"
    template_dir: str | None = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    max_epoch: int = 4
    candidate_size: int = 20
    k_ratio: int = 1
    ordering_policy: str = "random"
    rec_model: ScorerSpec = field(default_factory=ScorerSpec)
    reward_model: ScorerSpec = field(default_factory=ScorerSpec)
    fallback_scorer: ScorerSpec = field(default_factory=lambda: ScorerSpec(kind="popularity"))
    rec_backend: BackendSpec = field(default_factory=BackendSpec)
    user_backend: BackendSpec = field(default_factory=lambda: BackendSpec(kind="oracle-user"))
    use_rec_model: bool = True
    use_reward_model: bool = True
    refresh_model_suggestion: bool = False
    concurrency: int = 4
    retry_budget: int = 3
    parse_retries: int = 2
    history_cap: int = 50
    init_fraction: float = 0.8
    reward_temperature: float = 1.0
    fallback_threshold: float = 0.5
    test_subsample: int | None = None
    eval_split: str = "test"
    max_epochs_sweep: tuple[int, ...] = (1, 2, 3, 4)
    sim_loop_episode: bool = True
    sim_loop_target: str = "next"
    rerank_size: int = 5
    ranker: str = "scorer"
    debug: bool = False
    artifacts_dir: str = "artifacts"
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        _check(len(self.split_ratios) == 3, "split ratios must be a triple")
        _check(all(r > 0 for r in self.split_ratios), "split ratios must be positive")
        _check(abs(sum(self.split_ratios) - 1.0) < 1e-9, "split ratios must sum to 1")
        _check(self.max_epoch >= 1, "max_epoch must be >= 1")
        _check(self.candidate_size >= 2, "candidate_size must be >= 2")
        _check(self.k_ratio in K_RATIOS, f"k_ratio must be one of {K_RATIOS}")
        _check(self.ordering_policy in ORDERING_POLICIES, f"unknown policy {self.ordering_policy!r}")
        _check(self.concurrency >= 1, "concurrency must be >= 1")
        _check(self.retry_budget >= 1, "retry budget must allow one attempt")
        _check(self.parse_retries >= 0, "parse_retries must be >= 0")
        _check(0.0 < self.init_fraction < 1.0, "init_fraction must be in (0, 1)")
        _check(self.reward_temperature > 0, "reward temperature must be positive")
        _check(self.eval_split in ("train", "validation", "test", "all"), "bad eval_split")
        _check(self.sim_loop_target in ("next", "sampled"), "bad sim_loop_target")
        _check(self.ranker in ("scorer", "user-agent"), "bad ranker")
        _check(all(k >= 1 for k in self.max_epochs_sweep), "sweep values must be >= 1")
        _check(self.rerank_size >= 1, "rerank_size must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        kwargs = dict(data)
        for name in ("rec_model", "reward_model", "fallback_scorer"):
            if name in kwargs and isinstance(kwargs[name], Mapping):
                kwargs[name] = ScorerSpec.from_dict(kwargs[name])
        for name in ("rec_backend", "user_backend"):
            if name in kwargs and isinstance(kwargs[name], Mapping):
                kwargs[name] = BackendSpec.from_dict(kwargs[name])
        for name in ("split_ratios", "max_epochs_sweep"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)
