"""Interaction-log loading, chronological splitting and evaluation-instance sampling."""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import (
    K_RATIOS,
    AFLError,
    CandidateList,
    InteractionEvent,
    InvariantError,
    Item,
    UserSequence,
)

logger = logging.getLogger(__name__)


class DataError(AFLError):
    pass


class LogParseError(DataError):
    def __init__(self, path: str | Path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


class UnknownItemError(DataError):
    pass


class SplitError(DataError):
    pass


class SamplingError(DataError):
    pass


class PanelError(DataError):
    pass


@dataclass(frozen=True)
class InteractionLog:
    events: tuple[InteractionEvent, ...]
    catalog: Mapping[int, Item]

    def __post_init__(self) -> None:
        for ev in self.events:
            if ev.item not in self.catalog:
                raise UnknownItemError(f"event for user {ev.user} references unknown item {ev.item}")

    def sequences(self) -> list[UserSequence]:
        """Per-user sequences, stably sorted by timestamp, ordered by user id."""
        grouped: dict[str, list[InteractionEvent]] = defaultdict(list)
        for ev in self.events:
            grouped[ev.user].append(ev)
        out = []
        for user in sorted(grouped):
            evs = sorted(grouped[user], key=lambda e: e.timestamp)
            out.append(
                UserSequence(user, tuple(e.item for e in evs), tuple(e.timestamp for e in evs))
            )
        return out

    @property
    def users(self) -> set[str]:
        return {e.user for e in self.events}


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[UserSequence, ...]
    validation: tuple[UserSequence, ...]
    test: tuple[UserSequence, ...]

    def assignments(self) -> list[tuple[str, str]]:
        rows = []
        for name in ("train", "validation", "test"):
            rows.extend((seq.user, name) for seq in getattr(self, name))
        return sorted(rows)

    def all_sequences(self) -> tuple[UserSequence, ...]:
        return self.train + self.validation + self.test

    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "validation": len(self.validation), "test": len(self.test)}


@dataclass(frozen=True)
class SimPanel:
    """A 20-item judgment set for one simulated user; labels are True for positives."""

    user: str
    items: tuple[tuple[int, bool], ...]
    k: int
    init_length: int

    def __post_init__(self) -> None:
        n_pos = sum(1 for _, label in self.items if label)
        n_neg = len(self.items) - n_pos
        if self.k not in K_RATIOS or n_pos * self.k != n_neg:
            raise InvariantError(f"panel for {self.user}: {n_pos}/{n_neg} is not 1:{self.k}")
        if len({i for i, _ in self.items}) != len(self.items):
            raise InvariantError(f"panel for {self.user}: duplicate items")


def _read_tsv(path: Path, arity: int) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != arity:
                raise LogParseError(path, lineno, f"expected {arity} columns, got {len(cols)}")
            yield lineno, cols


def load_catalog(path: str | Path) -> dict[int, Item]:
    path = Path(path)
    catalog: dict[int, Item] = {}
    for lineno, (raw_id, title) in _read_tsv(path, 2):
        try:
            item_id = int(raw_id)
        except ValueError:
            raise LogParseError(path, lineno, f"non-integer item id {raw_id!r}") from None
        if item_id in catalog:
            raise LogParseError(path, lineno, f"duplicate item id {item_id}")
        try:
            catalog[item_id] = Item(item_id, title)
        except InvariantError as exc:
            raise LogParseError(path, lineno, str(exc)) from None
    return catalog


def load_interactions(path: str | Path, catalog_path: str | Path | None = None) -> InteractionLog:
    """Load ``user<TAB>item<TAB>timestamp`` rows plus the ``item<TAB>title`` catalog.

    The catalog defaults to ``catalog.tsv`` next to the interactions file.
    """
    path = Path(path)
    catalog_path = Path(catalog_path) if catalog_path else path.with_name("catalog.tsv")
    events = []
    for lineno, (user, raw_item, raw_ts) in _read_tsv(path, 3):
        try:
            item, ts = int(raw_item), int(raw_ts)
        except ValueError:
            raise LogParseError(path, lineno, f"non-integer field in {raw_item!r}, {raw_ts!r}") from None
        if ts < 0:
            raise LogParseError(path, lineno, f"negative timestamp {ts}")
        if not user:
            raise LogParseError(path, lineno, "empty user id")
        events.append(InteractionEvent(user, item, ts))
    catalog = load_catalog(catalog_path)
    return InteractionLog(tuple(events), catalog)


def chronological_split(
    log: InteractionLog | Sequence[UserSequence],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> DatasetSplit:
    """Split whole user sequences by their last-event time.

    Validation and test sizes are floored (but at least one each); train takes
    the remainder, so the latest sequences never feed training.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise SplitError(f"invalid split ratios {ratios}")
    seqs = log.sequences() if isinstance(log, InteractionLog) else list(log)
    n = len(seqs)
    if n < 3:
        raise SplitError(f"need at least 3 sequences to split, got {n}")
    # stable: equal end-times keep user-id order
    seqs = sorted(seqs, key=lambda s: s.last_timestamp)
    n_val = max(1, math.floor(n * ratios[1] + 1e-9))
    n_test = max(1, math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise SplitError(f"{n} sequences leave no training data")
    return DatasetSplit(
        train=tuple(seqs[:n_train]),
        validation=tuple(seqs[n_train : n_train + n_val]),
        test=tuple(seqs[n_train + n_val :]),
    )


def write_split_manifest(split: DatasetSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user, name in split.assignments():
            fh.write(f"{user}\t{name}\n")


def derive_seed(seed: int, user: str, purpose: str = "") -> int:
    digest = hashlib.sha256(f"{seed}\x1f{user}\x1f{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def user_rng(seed: int, user: str, purpose: str = "") -> np.random.Generator:
    """RNG stream that depends only on (global seed, user, purpose)."""
    return np.random.default_rng(derive_seed(seed, user, purpose))


def subsample(seqs: Sequence[UserSequence], n: int | None, seed: int) -> list[UserSequence]:
    """Uniform sample of ``n`` sequences without replacement, returned in input order."""
    seqs = list(seqs)
    if n is None or n >= len(seqs):
        return seqs
    rng = np.random.default_rng(derive_seed(seed, "", "test-subsample"))
    keep = set(rng.choice(len(seqs), size=n, replace=False).tolist())
    return [s for i, s in enumerate(seqs) if i in keep]


def sample_candidates(
    seq: UserSequence,
    target: int,
    catalog: Mapping[int, Item] | Iterable[int],
    seed: int,
    policy: str = "random",
    size: int = 20,
) -> CandidateList:
    """Target plus ``size - 1`` items the user never interacted with.

    Negatives are drawn before placement, so the candidate *set* is the same
    for every ordering policy under a given (seed, user).
    """
    history = set(seq.items)
    history.add(target)
    pool = sorted(i for i in catalog if i not in history)
    if len(pool) < size - 1:
        raise SamplingError(
            f"user {seq.user}: only {len(pool)} unseen items, need {size - 1} negatives"
        )
    rng = user_rng(seed, seq.user, "candidates")
    negatives = [pool[i] for i in rng.choice(len(pool), size=size - 1, replace=False)]
    if policy == "first":
        items = [target] + negatives
    elif policy == "last":
        items = negatives + [target]
    elif policy == "random":
        items = [target] + negatives
        items = [items[i] for i in rng.permutation(size)]
    else:
        raise SamplingError(f"unknown ordering policy {policy!r}")
    return CandidateList(tuple(int(i) for i in items), items.index(target), policy)


def build_sim_panel(
    seq: UserSequence,
    init_fraction: float,
    k: int,
    catalog: Mapping[int, Item] | Iterable[int],
    seed: int,
    size: int = 20,
) -> SimPanel:
    """Judgment panel: positives from the held-out tail, negatives never seen by the user.

    The first ``floor(init_fraction * len)`` interactions initialize the agent;
    an item counts as a positive only if it appears after that point and not before.
    """
    if k not in K_RATIOS:
        raise PanelError(f"k must be one of {K_RATIOS}, got {k}")
    if size % (1 + k):
        raise PanelError(f"panel size {size} not divisible by 1+{k}")
    n_pos = size // (1 + k)
    n_init = max(1, math.floor(len(seq) * init_fraction + 1e-9))
    init_items = set(seq.items[:n_init])
    held_out = sorted({i for i in seq.items[n_init:] if i not in init_items})
    if len(held_out) < n_pos:
        raise PanelError(
            f"user {seq.user}: {len(held_out)} held-out positives, need {n_pos} for 1:{k}"
        )
    seen = set(seq.items)
    pool = sorted(i for i in catalog if i not in seen)
    if len(pool) < size - n_pos:
        raise PanelError(f"user {seq.user}: not enough unseen items for negatives")
    rng = user_rng(seed, seq.user, f"panel-{k}")
    pos = [held_out[i] for i in rng.choice(len(held_out), size=n_pos, replace=False)]
    neg = [pool[i] for i in rng.choice(len(pool), size=size - n_pos, replace=False)]
    labeled = [(int(i), True) for i in pos] + [(int(i), False) for i in neg]
    labeled = [labeled[i] for i in rng.permutation(size)]
    return SimPanel(seq.user, tuple(labeled), k, n_init)


def popularity_counts(split: DatasetSplit) -> dict[int, int]:
    """Training-set interaction counts; items seen only outside train map to 0."""
    counts = Counter(i for seq in split.train for i in seq.items)
    for seq in split.validation + split.test:
        for i in seq.items:
            counts.setdefault(i, 0)
    return dict(sorted(counts.items()))
