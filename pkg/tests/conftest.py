from __future__ import annotations

import pytest

from afl.domain import RunConfig
from afl.evalbench import Resources
from afl.ingest import chronological_split
from afl.recmodel import train
from afl.synthetic import make_synthetic
from afl.backend import OracleUserBackend, ScriptedRecBackend


@pytest.fixture(scope="session")
def small_log():
    return make_synthetic(n_users=40, n_items=120, cluster_size=10, min_len=8, max_len=20, seed=3)


@pytest.fixture(scope="session")
def small_split(small_log):
    return chronological_split(small_log)


@pytest.fixture(scope="session")
def small_markov(small_log, small_split):
    return train("markov1", small_split, seed=0, extra_vocab=small_log.catalog)[0]


@pytest.fixture(scope="session")
def small_popularity(small_log, small_split):
    return train("popularity", small_split, seed=0, extra_vocab=small_log.catalog)[0]


@pytest.fixture(scope="session")
def small_resources(small_log, small_split, small_markov, small_popularity):
    """Scripted/oracle resources over the small log with cheap scorers."""
    return Resources(
        catalog=small_log.catalog,
        split=small_split,
        rec_model=small_markov,
        reward_model=small_markov,
        fallback_scorer=small_popularity,
        rec_backend=ScriptedRecBackend(),
        user_backend=OracleUserBackend(),
    )


@pytest.fixture()
def small_cfg():
    return RunConfig(eval_split="all", concurrency=1)


ACCEPTANCE: list[tuple[int, bool, str]] = []


class _Criterion:
    def __init__(self, number: int):
        self.number = number
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{exc_type.__name__}: {exc}"
        ACCEPTANCE.append((self.number, ok, detail))
        return False


@pytest.fixture()
def criterion():
    """``with criterion(n) as c: ...`` records one pass/fail line for criterion n."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
