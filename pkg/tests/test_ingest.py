from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from afl.domain import InteractionEvent, Item, UserSequence
from afl.ingest import (
    InteractionLog,
    LogParseError,
    PanelError,
    SamplingError,
    SplitError,
    UnknownItemError,
    build_sim_panel,
    chronological_split,
    load_interactions,
    popularity_counts,
    sample_candidates,
    subsample,
    write_split_manifest,
)
from afl.synthetic import make_synthetic


def _catalog(n):
    return {i: Item(i, f"Item {i}") for i in range(1, n + 1)}


def _write(tmp_path, rows, catalog_rows=("1\tA", "2\tB", "3\tC")):
    (tmp_path / "interactions.tsv").write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    (tmp_path / "catalog.tsv").write_text("".join(r + "\n" for r in catalog_rows), encoding="utf-8")
    return tmp_path / "interactions.tsv"


def test_load_three_rows_two_users(tmp_path):
    log = load_interactions(_write(tmp_path, ["u1\t1\t10", "u2\t2\t5", "u1\t3\t7"]))
    assert len(log.events) == 3 and log.users == {"u1", "u2"}
    seqs = {s.user: s for s in log.sequences()}
    assert seqs["u1"].items == (3, 1)


def test_ties_keep_file_order(tmp_path):
    log = load_interactions(_write(tmp_path, ["u1\t2\t5", "u1\t1\t5", "u1\t3\t4"]))
    assert log.sequences()[0].items == (3, 2, 1)


def test_non_integer_item_reports_line(tmp_path):
    with pytest.raises(LogParseError) as err:
        load_interactions(_write(tmp_path, ["u1\tx\t12"]))
    assert err.value.line == 1


def test_wrong_arity_reports_line(tmp_path):
    with pytest.raises(LogParseError) as err:
        load_interactions(_write(tmp_path, ["u1\t1\t12", "u1\t2"]))
    assert err.value.line == 2


def test_unknown_item(tmp_path):
    with pytest.raises(UnknownItemError):
        load_interactions(_write(tmp_path, ["u1\t9\t12"]))


def _seqs(n):
    return [UserSequence(f"u{i:02d}", (1, 2), (i, 100 + i)) for i in range(n)]


def test_split_ten_sequences():
    split = chronological_split(_seqs(10))
    assert split.sizes() == {"train": 8, "validation": 1, "test": 1}
    assert split.test[0].user == "u09"


def test_split_too_small():
    with pytest.raises(SplitError):
        chronological_split(_seqs(2))


def test_split_excludes_future_from_train():
    log = make_synthetic(n_users=50, n_items=100, cluster_size=10, seed=1)
    split = chronological_split(log)
    train_end = [s.last_timestamp for s in split.train]
    test_end = [s.last_timestamp for s in split.test]
    assert all(a <= b for a in train_end for b in test_end)
    assert max(train_end) < min(test_end)


@given(st.lists(st.integers(0, 10**6), min_size=3, max_size=80))
def test_split_is_partition(ends):
    seqs = [UserSequence(f"u{i}", (1,), (t,)) for i, t in enumerate(ends)]
    split = chronological_split(seqs)
    users = [s.user for s in split.all_sequences()]
    assert sorted(users) == sorted(s.user for s in seqs)
    n = len(seqs)
    assert len(split.validation) == max(1, int(n * 0.1 + 1e-9))
    assert len(split.test) == max(1, int(n * 0.1 + 1e-9))


def test_manifest(tmp_path):
    split = chronological_split(_seqs(10))
    write_split_manifest(split, tmp_path / "m.tsv")
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert len(lines) == 10 and "u09\ttest" in lines


def test_candidates_contract():
    seq = UserSequence("u1", (1, 2, 3, 4), (1, 2, 3, 4))
    cat = _catalog(100)
    a = sample_candidates(seq, 4, cat, seed=7, policy="random")
    assert a == sample_candidates(seq, 4, cat, seed=7, policy="random")
    assert a != sample_candidates(seq, 4, cat, seed=8, policy="random")
    assert len(a) == 20 and a.positive == 4
    assert not set(a.items) - {4} & {1, 2, 3}


def test_candidate_policies_share_the_set():
    seq = UserSequence("u1", (1, 2, 3), (1, 2, 3))
    cat = _catalog(60)
    lists = {p: sample_candidates(seq, 3, cat, 0, p) for p in ("first", "random", "last")}
    assert lists["first"].positive_index == 0
    assert lists["last"].positive_index == 19
    assert len({frozenset(c.items) for c in lists.values()}) == 1


def test_candidates_insufficient_negatives():
    seq = UserSequence("u1", (1, 2, 3), (1, 2, 3))
    with pytest.raises(SamplingError):
        sample_candidates(seq, 3, _catalog(20), 0)


@settings(max_examples=60)
@given(
    st.lists(st.integers(1, 80), min_size=1, max_size=40),
    st.integers(0, 2**31),
    st.sampled_from(["first", "random", "last"]),
)
def test_candidates_property(history, seed, policy):
    seq = UserSequence("u", tuple(history), tuple(range(len(history))))
    cl = sample_candidates(seq, history[-1], _catalog(120), seed, policy)
    assert len(set(cl.items)) == 20
    assert [i for i in cl.items if i == history[-1]] == [history[-1]]
    assert not (set(cl.items) - {history[-1]}) & set(history)


@pytest.mark.parametrize("k,n_pos", [(1, 10), (3, 5), (9, 2)])
def test_panel_counts(k, n_pos):
    items = tuple(range(1, 61))
    seq = UserSequence("u", items, tuple(range(60)))
    panel = build_sim_panel(seq, 0.5, k, _catalog(200), seed=0)
    pos = [i for i, lab in panel.items if lab]
    neg = [i for i, lab in panel.items if not lab]
    assert (len(pos), len(neg)) == (n_pos, 20 - n_pos)
    assert all(i > 30 for i in pos)
    assert not set(neg) & set(items)


def test_panel_positives_exclude_init_items():
    # items after the init segment that were already seen are not positives
    items = (1, 2, 3, 4, 5, 6, 7, 8, 1, 2)
    seq = UserSequence("u", items, tuple(range(10)))
    with pytest.raises(PanelError):
        build_sim_panel(seq, 0.8, 9, _catalog(100), 0)


def test_panel_short_heldout():
    seq = UserSequence("u", (1, 2, 3, 4, 5), tuple(range(5)))
    with pytest.raises(PanelError):
        build_sim_panel(seq, 0.8, 3, _catalog(100), 0)


def test_popularity_counts_train_only():
    split = chronological_split(
        [
            UserSequence("a", (1, 1, 1, 1, 1), (1, 2, 3, 4, 5)),
            UserSequence("b", (2,), (6,)),
            UserSequence("c", (3, 1), (7, 8)),
        ]
    )
    counts = popularity_counts(split)
    assert counts[1] == 5 and counts[3] == 0


def test_popularity_counts_brute_force():
    log = make_synthetic(n_users=60, n_items=150, cluster_size=10, seed=2)
    split = chronological_split(log)
    train_users = {s.user for s in split.train}
    tally = Counter(e.item for e in log.events if e.user in train_users)
    counts = popularity_counts(split)
    assert {i: c for i, c in counts.items() if c} == dict(tally)


def test_subsample_deterministic():
    seqs = _seqs(30)
    a = subsample(seqs, 10, 4)
    assert a == subsample(seqs, 10, 4) and len(a) == 10
    assert subsample(seqs, None, 4) == seqs


def test_log_rejects_unknown_item_directly():
    with pytest.raises(UnknownItemError):
        InteractionLog((InteractionEvent("u", 5, 0),), _catalog(3))
