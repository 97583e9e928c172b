"""Planted-cluster interaction generator.

Users and items are split into ``groups`` blocks. A user rates an item of
its own group with probability ``p_in`` and of another group with
probability ``p_out``; in-group ratings are mostly positive (4-5), cross-group
ratings mostly not. Item genre is the item's group, relabelled at random for
a ``genre_noise`` fraction of items.

With ``release_span > 0`` items are released at staggered times: item ``i``
becomes available at a uniform time in ``[0, release_span * horizon)`` and
all its interactions fall after that, so late items reach the train split
with short histories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class PlantedData:
    users: list[str]
    items: list[str]
    ratings: np.ndarray
    timestamps: np.ndarray
    user_group: dict[str, int]
    item_group: dict[str, int]
    item_genre: dict[str, int]


def planted_clusters(n_users: int = 200, n_items: int = 100, groups: int = 4, p_in: float = 0.3,
                     p_out: float = 0.02, genre_noise: float = 0.1, release_span: float = 0.0,
                     seed: int = 0, horizon: int = 10_000_000) -> PlantedData:
    rng = np.random.default_rng(seed)
    ug = np.arange(n_users) % groups
    ig = np.arange(n_items) % groups
    genre = ig.copy()
    noisy = rng.random(n_items) < genre_noise
    genre[noisy] = rng.integers(groups, size=int(noisy.sum()))
    same = ug[:, None] == ig[None, :]
    hit = rng.random((n_users, n_items)) < np.where(same, p_in, p_out)
    uu, ii = np.nonzero(hit)
    liked = rng.random(len(uu)) < np.where(same[uu, ii], 0.9, 0.2)
    ratings = np.where(liked, rng.integers(4, 6, size=len(uu)), rng.integers(1, 4, size=len(uu)))
    release = (rng.random(n_items) * release_span * horizon).astype(np.int64)
    stamps = release[ii] + (rng.random(len(uu)) * (horizon - release[ii])).astype(np.int64)
    order = rng.permutation(len(uu))
    users = [f"u{u}" for u in uu[order]]
    items = [f"i{i}" for i in ii[order]]
    return PlantedData(users, items, ratings[order], stamps[order],
                       {f"u{u}": int(ug[u]) for u in range(n_users)},
                       {f"i{i}": int(ig[i]) for i in range(n_items)},
                       {f"i{i}": int(genre[i]) for i in range(n_items)})


def write_planted(data: PlantedData, directory) -> tuple[Path, Path]:
    """Write ``ratings.csv`` (no header) and ``items.csv`` (with header)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ratings = d / "ratings.csv"
    with open(ratings, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerows(zip(data.users, data.items, data.ratings.tolist(), data.timestamps.tolist()))
    items = d / "items.csv"
    with open(items, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item", "genre"])
        for i, g in data.item_genre.items():
            w.writerow([i, f"g{g}"])
    with open(d / "groups.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "kind", "group"])
        for u, g in data.user_group.items():
            w.writerow([u, "user", g])
        for i, g in data.item_group.items():
            w.writerow([i, "item", g])
    return ratings, items
