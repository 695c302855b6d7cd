"""Lightweight trainable scorers.

Three kinds share one interface and serve both as the recommendation agent's
suggestion model and as the user agent's (frozen) reward model:

* ``popularity``  -- training interaction counts
* ``markov1``     -- first-order transition counts with add-one smoothing
* ``mf-pairwise`` -- history-window factorization fit with a pairwise
  log-sigmoid ranking loss

Artifacts are written as a single JSON document with a version header; float
values round-trip exactly so retraining with the same seed yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .domain import AFLError, CandidateList, RewardScore, UserSequence

logger = logging.getLogger(__name__)

FORMAT_TAG = "afl-scorer"
FORMAT_VERSION = 1

MF_DEFAULTS: dict[str, Any] = {
    "dim": 32,
    "lr": 0.05,
    "l2": 1e-4,
    "epochs": 30,
    "window": 10,
    "batch_size": 16,
    "init_std": 0.1,
}


class TrainingError(AFLError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


class ArtifactError(AFLError):
    pass


@dataclass(frozen=True)
class TrainReport:
    losses: tuple[float, ...]
    wall_clock: float
    seed: int


class Scorer(ABC):
    """Common interface; subclasses are immutable once built."""

    kind: str
    vocab: tuple[int, ...]
    meta: dict[str, Any]

    @abstractmethod
    def score_items(self, history: Sequence[int], items: Sequence[int]) -> np.ndarray:
        """Scores for ``items`` given ``history`` (oldest first)."""

    def score(self, history: Sequence[int], item: int) -> float:
        return float(self.score_items(history, [item])[0])

    @abstractmethod
    def _params(self) -> dict[str, Any]: ...

    def to_json(self) -> dict[str, Any]:
        return {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "vocab": list(self.vocab),
            "params": self._params(),
            "meta": self.meta,
        }


class PopularityScorer(Scorer):
    kind = "popularity"

    def __init__(self, counts: Mapping[int, int], vocab: Iterable[int] | None = None, meta=None):
        self.counts = dict(sorted((int(k), int(v)) for k, v in counts.items()))
        self.vocab = tuple(sorted(set(vocab) if vocab is not None else self.counts))
        self.meta = dict(meta or {})

    def score_items(self, history, items):
        return np.array([self.counts.get(i, 0) for i in items], dtype=np.float64)

    def _params(self):
        return {"counts": [[k, v] for k, v in self.counts.items()]}


class MarkovScorer(Scorer):
    """P(next | last) with add-one smoothing over the vocabulary."""

    kind = "markov1"

    def __init__(self, transitions: Mapping[int, Mapping[int, int]], vocab: Iterable[int], meta=None):
        self.vocab = tuple(sorted(set(vocab)))
        self.transitions = {
            int(a): dict(sorted((int(b), int(c)) for b, c in row.items()))
            for a, row in sorted(transitions.items())
        }
        self.row_totals = {a: sum(row.values()) for a, row in self.transitions.items()}
        self.meta = dict(meta or {})

    def transition(self, a: int, b: int) -> int:
        return self.transitions.get(a, {}).get(b, 0)

    def score_items(self, history, items):
        n_vocab = len(self.vocab)
        if not history:
            return np.full(len(items), 1.0 / n_vocab)
        row = self.transitions.get(history[-1], {})
        total = self.row_totals.get(history[-1], 0)
        return np.array([(row.get(i, 0) + 1.0) / (total + n_vocab) for i in items])

    def _params(self):
        return {
            "transitions": [[a, b, c] for a, row in self.transitions.items() for b, c in row.items()]
        }


class PairwiseMF(Scorer):
    """score(h, i) = mean(P[last w of h]) . Q[i] + bias[i]."""

    kind = "mf-pairwise"

    def __init__(self, vocab, P, Q, bias, window: int = 10, meta=None):
        self.vocab = tuple(int(v) for v in vocab)
        self.index = {item: n for n, item in enumerate(self.vocab)}
        self.P = np.array(P, dtype=np.float64).reshape(len(self.vocab), -1)
        self.Q = np.array(Q, dtype=np.float64).reshape(len(self.vocab), -1)
        self.bias = np.array(bias, dtype=np.float64).reshape(len(self.vocab))
        for arr in (self.P, self.Q, self.bias):
            arr.setflags(write=False)
        if self.P.shape[1] < 1 or self.P.shape != self.Q.shape:
            raise ArtifactError(f"bad embedding shapes {self.P.shape} / {self.Q.shape}")
        self.window = int(window)
        self.meta = dict(meta or {})

    @classmethod
    def zeros(cls, vocab: Sequence[int], dim: int, window: int = 10) -> PairwiseMF:
        n = len(vocab)
        return cls(vocab, np.zeros((n, dim)), np.zeros((n, dim)), np.zeros(n), window)

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    def context(self, history: Sequence[int]) -> np.ndarray:
        idx = [self.index[i] for i in history if i in self.index][-self.window :]
        if not idx:
            return np.zeros(self.dim)
        return self.P[idx].mean(axis=0)

    def score_items(self, history, items):
        ctx = self.context(history)
        known = [self.index.get(i) for i in items]
        out = np.empty(len(items))
        if any(k is None for k in known):
            # out-of-vocabulary items get the worst in-vocabulary score
            floor = float((self.Q @ ctx + self.bias).min())
        for n, k in enumerate(known):
            out[n] = floor if k is None else self.Q[k] @ ctx + self.bias[k]
        return out

    def _params(self):
        return {
            "window": self.window,
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
            "bias": self.bias.tolist(),
        }


ScorerArtifact = Scorer


def _sequences(train: Any) -> list[UserSequence]:
    if hasattr(train, "train"):
        return list(train.train)
    return list(train)


def train(
    kind: str,
    train_split: Any,
    hyperparameters: Mapping[str, Any] | None = None,
    seed: int = 0,
    extra_vocab: Iterable[int] = (),
) -> tuple[Scorer, TrainReport]:
    """Fit a scorer on training sequences (a ``DatasetSplit`` or a list of sequences).

    ``extra_vocab`` widens the vocabulary beyond the training items, e.g. to the
    whole catalog so unseen items receive a learned (low) score.
    """
    seqs = _sequences(train_split)
    if not seqs or not any(len(s) for s in seqs):
        raise TrainingError("empty training set")
    hp = dict(hyperparameters or {})
    vocab = sorted({i for s in seqs for i in s.items} | set(extra_vocab))
    start = time.perf_counter()
    meta = {"seed": seed, "hyperparameters": hp, "n_sequences": len(seqs)}
    if kind == "popularity":
        counts = Counter(i for s in seqs for i in s.items)
        model: Scorer = PopularityScorer(counts, vocab, meta)
        losses: tuple[float, ...] = ()
    elif kind == "markov1":
        trans: dict[int, Counter] = defaultdict(Counter)
        for s in seqs:
            for a, b in zip(s.items, s.items[1:]):
                trans[a][b] += 1
        model = MarkovScorer(trans, vocab, meta)
        losses = ()
    elif kind == "mf-pairwise":
        model, losses = _train_mf(seqs, vocab, hp, seed, meta)
    else:
        raise TrainingError(f"unknown scorer kind {kind!r}")
    model.meta["final_loss"] = losses[-1] if losses else None
    report = TrainReport(losses, time.perf_counter() - start, seed)
    return model, report


def _pad_contexts(contexts: Sequence[Sequence[int]], window: int) -> np.ndarray:
    out = np.full((len(contexts), window), -1, dtype=np.int64)
    for r, ctx in enumerate(contexts):
        ctx = list(ctx)[-window:]
        if ctx:
            out[r, : len(ctx)] = ctx
    return out


def pairwise_objective(
    P: np.ndarray,
    Q: np.ndarray,
    bias: np.ndarray,
    ctx: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    l2: float,
) -> tuple[float, float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Summed pairwise log-loss plus (l2/2)·||params||², and its gradient.

    ``ctx`` holds vocabulary indices padded with -1; ``pos``/``neg`` are
    vocabulary indices. Returns (objective, mean data loss, (dP, dQ, dbias)).
    """
    mask = ctx >= 0
    counts = np.maximum(mask.sum(axis=1), 1).astype(np.float64)
    safe = np.where(mask, ctx, 0)
    ctx_vec = (P[safe] * mask[..., None]).sum(axis=1) / counts[:, None]
    q_diff = Q[pos] - Q[neg]
    margin = (ctx_vec * q_diff).sum(axis=1) + bias[pos] - bias[neg]
    data_losses = np.logaddexp(0.0, -margin)
    reg = 0.5 * l2 * (np.sum(P * P) + np.sum(Q * Q) + np.sum(bias * bias))
    objective = float(data_losses.sum() + reg)

    # d softplus(-m) / dm = -sigmoid(-m)
    g = -0.5 * (1.0 - np.tanh(margin / 2.0))
    dP = l2 * P
    dQ = l2 * Q
    db = l2 * bias
    np.add.at(dQ, pos, g[:, None] * ctx_vec)
    np.add.at(dQ, neg, -g[:, None] * ctx_vec)
    np.add.at(db, pos, g)
    np.add.at(db, neg, -g)
    d_ctx = (g / counts)[:, None] * q_diff
    rows, cols = np.nonzero(mask)
    np.add.at(dP, ctx[rows, cols], d_ctx[rows])
    return objective, float(data_losses.mean()), (dP, dQ, db)


def _train_mf(seqs, vocab, hp, seed, meta) -> tuple[PairwiseMF, tuple[float, ...]]:
    cfg = {**MF_DEFAULTS, **hp}
    dim, window, batch = int(cfg["dim"]), int(cfg["window"]), int(cfg["batch_size"])
    lr, l2, epochs = float(cfg["lr"]), float(cfg["l2"]), int(cfg["epochs"])
    if dim < 1 or window < 1 or batch < 1 or epochs < 1:
        raise TrainingError(f"invalid hyperparameters {cfg}")
    meta["hyperparameters"] = cfg
    index = {item: n for n, item in enumerate(vocab)}
    n_items = len(vocab)
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, cfg["init_std"], size=(n_items, dim))
    Q = rng.normal(0.0, cfg["init_std"], size=(n_items, dim))
    bias = np.zeros(n_items)

    contexts, positives, seen_sets = [], [], []
    for s in seqs:
        idx = [index[i] for i in s.items]
        seen = frozenset(idx)
        for t in range(1, len(idx)):
            contexts.append(idx[max(0, t - window) : t])
            positives.append(idx[t])
            seen_sets.append(seen)
    if not contexts:
        raise TrainingError("training sequences need at least two interactions")
    ctx_all = _pad_contexts(contexts, window)
    pos_all = np.array(positives, dtype=np.int64)
    n = len(positives)

    losses = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        neg_all = rng.integers(0, n_items, size=n)
        for r in range(n):
            # resample negatives that the user actually interacted with
            tries = 0
            while neg_all[r] in seen_sets[r] and tries < 20:
                neg_all[r] = rng.integers(0, n_items)
                tries += 1
        epoch_loss = 0.0
        for start in range(0, n, batch):
            sel = order[start : start + batch]
            _, mean_loss, (dP, dQ, db) = pairwise_objective(
                P, Q, bias, ctx_all[sel], pos_all[sel], neg_all[sel], l2
            )
            P -= lr * dP
            Q -= lr * dQ
            bias -= lr * db
            epoch_loss += mean_loss * len(sel)
        epoch_loss /= n
        if not math.isfinite(epoch_loss) or not np.isfinite(P).all() or not np.isfinite(Q).all():
            raise DivergenceError(epoch, epoch_loss)
        losses.append(epoch_loss)
        logger.debug("mf-pairwise epoch %d loss %.6f", epoch, epoch_loss)
    meta["epochs"] = epochs
    meta["losses"] = losses
    return PairwiseMF(vocab, P, Q, bias, window, meta), tuple(losses)


def score(artifact: Scorer, history: Sequence[int], item: int) -> float:
    return artifact.score(history, item)


def top_k(artifact: Scorer, history: Sequence[int], candidates: CandidateList | Sequence[int], k: int) -> list[int]:
    """Candidates by descending score, ties broken by ascending item id."""
    items = list(candidates.items if isinstance(candidates, CandidateList) else candidates)
    if not 1 <= k <= len(items):
        raise ValueError(f"k={k} outside [1, {len(items)}]")
    scores = artifact.score_items(history, items)
    ranked = sorted(zip(items, scores.tolist()), key=lambda p: (-p[1], p[0]))
    return [item for item, _ in ranked[:k]]


def reward_score(artifact: Scorer, history: Sequence[int], item: int, temperature: float = 1.0) -> RewardScore:
    return RewardScore.from_raw(artifact.score(history, item), temperature)


def gradient_check(
    artifact: PairwiseMF,
    sample: Sequence[tuple[Sequence[int], int, int]],
    l2: float | None = None,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``sample`` holds (context items, positive item, negative item) triples of
    item ids. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    if l2 is None:
        l2 = float(artifact.meta.get("hyperparameters", {}).get("l2", MF_DEFAULTS["l2"]))
    idx = artifact.index
    ctx = _pad_contexts([[idx[i] for i in c] for c, _, _ in sample], artifact.window)
    pos = np.array([idx[p] for _, p, _ in sample], dtype=np.int64)
    neg = np.array([idx[q] for _, _, q in sample], dtype=np.int64)
    params = [artifact.P.copy(), artifact.Q.copy(), artifact.bias.copy()]
    _, _, grads = pairwise_objective(*params, ctx, pos, neg, l2)
    worst = 0.0
    for arr, grad in zip(params, grads):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = pairwise_objective(*params, ctx, pos, neg, l2)[0]
            flat[j] = orig - h
            down = pairwise_objective(*params, ctx, pos, neg, l2)[0]
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            err = abs(gflat[j] - numeric) / max(abs(gflat[j]), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def dumps_artifact(artifact: Scorer) -> str:
    return json.dumps(artifact.to_json(), sort_keys=True, separators=(",", ":"))


def artifact_hash(artifact: Scorer) -> str:
    return hashlib.sha256(dumps_artifact(artifact).encode()).hexdigest()


def save_artifact(artifact: Scorer, path: str | Path) -> str:
    """Write the artifact; returns its sha256."""
    text = dumps_artifact(artifact)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text + "\n", encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def loads_artifact(text: str) -> Scorer:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"artifact is not valid JSON: {exc}") from None
    if doc.get("format") != FORMAT_TAG:
        raise ArtifactError(f"not a scorer artifact (format={doc.get('format')!r})")
    if doc.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"artifact version {doc.get('version')!r} != supported {FORMAT_VERSION}")
    kind, vocab, params, meta = doc["kind"], doc["vocab"], doc["params"], doc.get("meta", {})
    if kind == "popularity":
        return PopularityScorer({k: v for k, v in params["counts"]}, vocab, meta)
    if kind == "markov1":
        trans: dict[int, dict[int, int]] = defaultdict(dict)
        for a, b, c in params["transitions"]:
            trans[a][b] = c
        return MarkovScorer(trans, vocab, meta)
    if kind == "mf-pairwise":
        model = PairwiseMF(vocab, params["P"], params["Q"], params["bias"], params["window"], meta)
        if not all(np.isfinite(a).all() for a in (model.P, model.Q, model.bias)):
            raise ArtifactError("artifact contains non-finite parameters")
        return model
    raise ArtifactError(f"unknown scorer kind {kind!r}")


def load_artifact(path: str | Path) -> Scorer:
    return loads_artifact(Path(path).read_text(encoding="utf-8"))
