"""Synthetic interaction logs with planted sequential structure.

Items are grouped into clusters; each user mostly walks forward through the
items of a home cluster (item -> next item in the cluster), with occasional
jumps inside the cluster and rare jumps anywhere. A first-order or
history-window model can learn this; popularity alone cannot.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .domain import InteractionEvent, Item
from .ingest import InteractionLog

_SYLLABLES = (
    "ka", "lo", "mi", "ra", "ven", "tor", "sil", "qua", "dex", "nor",
    "bel", "fin", "zu", "pra", "mon", "lys", "ter", "gho", "vak", "rin",
)


def _title(item: int) -> str:
    a = _SYLLABLES[item % 20]
    b = _SYLLABLES[(item // 20) % 20]
    c = _SYLLABLES[(item * 7 + 3) % 20]
    return f"{(a + b).capitalize()} {c.capitalize()} {item:03d}"


def make_synthetic(
    n_users: int = 200,
    n_items: int = 500,
    cluster_size: int = 20,
    min_len: int = 15,
    max_len: int = 40,
    p_step: float = 0.4,
    p_jump: float = 0.2,
    seed: int = 0,
) -> InteractionLog:
    rng = np.random.default_rng(seed)
    n_clusters = n_items // cluster_size
    catalog = {i: Item(i, _title(i)) for i in range(1, n_items + 1)}
    events = []
    for u in range(n_users):
        user = f"u{u:04d}"
        home = int(rng.integers(n_clusters))
        base = home * cluster_size + 1
        length = int(rng.integers(min_len, max_len + 1))
        t = int(rng.integers(0, 1_000_000))
        pos = int(rng.integers(cluster_size))
        for _ in range(length):
            r = rng.random()
            if r < p_step:
                pos = (pos + 1) % cluster_size
                item = base + pos
            elif r < 1 - p_jump:
                pos = int(rng.integers(cluster_size))
                item = base + pos
            else:
                item = int(rng.integers(1, n_items + 1))
            events.append(InteractionEvent(user, item, t))
            t += int(rng.integers(60, 3600))
    return InteractionLog(tuple(events), catalog)


def write_log(log: InteractionLog, directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    inter, cat = directory / "interactions.tsv", directory / "catalog.tsv"
    with open(inter, "w", encoding="utf-8", newline="\n") as fh:
        for ev in log.events:
            fh.write(f"{ev.user}\t{ev.item}\t{ev.timestamp}\n")
    with open(cat, "w", encoding="utf-8", newline="\n") as fh:
        for item_id in sorted(log.catalog):
            fh.write(f"{item_id}\t{log.catalog[item_id].title}\n")
    return inter, cat


def bundled_dataset_dir() -> Path:
    return Path(__file__).parent / "data" / "synthetic"
