"""Interaction logs: loading, binarizing, chronological splitting, sequences."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


class ParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class InteractionLog:
    """Column-oriented interaction records sorted by timestamp.

    ``users``/``items`` hold dense internal ids; ``user_ids``/``item_ids`` map
    an internal id back to the external string id.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.users)

    @property
    def user_count(self) -> int:
        return len(self.user_ids)

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    @property
    def records(self) -> list[InteractionRecord]:
        return list(self.iter_records())

    def iter_records(self) -> Iterator[InteractionRecord]:
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield InteractionRecord(int(u), int(i), int(r), int(t))

    def take(self, index) -> "InteractionLog":
        """Subset of records sharing this log's id maps."""
        return InteractionLog(self.users[index], self.items[index], self.ratings[index],
                              self.timestamps[index], self.user_ids, self.item_ids)

    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}


def _dense_ids(values: list[str]) -> tuple[np.ndarray, tuple[str, ...]]:
    mapping: dict[str, int] = {}
    dense = np.empty(len(values), dtype=np.int64)
    for k, v in enumerate(values):
        dense[k] = mapping.setdefault(v, len(mapping))
    return dense, tuple(mapping)


def from_records(users, items, ratings, timestamps) -> InteractionLog:
    """Build a sorted log from parallel sequences of external ids and values.

    Internal ids are assigned in order of first appearance after the stable
    sort by timestamp.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    order = np.argsort(ts, kind="stable")
    users = [str(users[k]) for k in order]
    items = [str(items[k]) for k in order]
    ratings = np.asarray(ratings, dtype=np.int64)[order]
    if ratings.size and (ratings.min() < 0 or ratings.max() > 5):
        raise ValueError("ratings must lie in [0, 5]")
    if ts.size and ts.min() < 0:
        raise ValueError("timestamps must be non-negative")
    u, user_ids = _dense_ids(users)
    i, item_ids = _dense_ids(items)
    return InteractionLog(u, i, ratings, ts[order], user_ids, item_ids)


def load_interactions(path, delimiter: str = ",", header: bool = False) -> InteractionLog:
    """Read ``user, item, rating, timestamp`` rows.

    Multi-character delimiters (MovieLens ``::``) are supported. Ratings may
    be written as floats as long as they are whole numbers.
    """
    path = Path(path)
    users, items, ratings, stamps = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if header and line_no == 1:
                continue
            parts = [p.strip() for p in line.split(delimiter)]
            if len(parts) < 4:
                raise ParseError(path, line_no, f"expected 4 columns, got {len(parts)}")
            try:
                rating = float(parts[2])
                stamp = int(parts[3])
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if not rating.is_integer() or not 0 <= rating <= 5:
                raise ParseError(path, line_no, f"rating {parts[2]!r} is not an integer in [0, 5]")
            if stamp < 0:
                raise ParseError(path, line_no, f"negative timestamp {stamp}")
            users.append(parts[0])
            items.append(parts[1])
            ratings.append(int(rating))
            stamps.append(stamp)
    if not users:
        raise ValueError(f"{path}: no interaction records")
    return from_records(users, items, ratings, stamps)


def binarize(log: InteractionLog, threshold: int = 3) -> InteractionLog:
    """Keep records rated strictly above ``threshold`` and re-index entities."""
    if not 0 <= threshold <= 5:
        raise ValueError(f"threshold {threshold} outside [0, 5]")
    keep = log.ratings > threshold
    if not keep.any():
        raise ValueError(f"no records rated above {threshold}")
    sub = log.take(keep)
    return from_records([log.user_ids[u] for u in sub.users], [log.item_ids[i] for i in sub.items],
                        sub.ratings, sub.timestamps)


@dataclass(frozen=True)
class SplitDataset:
    train: InteractionLog
    valid: InteractionLog
    test: InteractionLog
    boundaries: tuple[int, ...]  # first timestamp of valid and of test

    @property
    def user_count(self) -> int:
        return self.train.user_count

    @property
    def item_count(self) -> int:
        return self.train.item_count


def split_sizes(n: int, ratios=(8, 1, 1)) -> tuple[int, ...]:
    """Floor every slice but the first; the remainder goes to the first (train)."""
    total = sum(ratios)
    tail = [n * r // total for r in ratios[1:]]
    return (n - sum(tail), *tail)


def split_chronological(log: InteractionLog, ratios=(8, 1, 1)) -> SplitDataset:
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError(f"need three positive ratios, got {ratios}")
    n = len(log)
    if n < sum(ratios):
        raise ValueError(f"{n} records cannot fill a {':'.join(map(str, ratios))} split")
    order = np.argsort(log.timestamps, kind="stable")
    n_train, n_valid, _ = split_sizes(n, ratios)
    parts = np.split(order, [n_train, n_train + n_valid])
    train, valid, test = (log.take(p) for p in parts)
    return SplitDataset(train, valid, test,
                        (int(valid.timestamps[0]), int(test.timestamps[0])))


class SequenceStore:
    """Per-entity train histories, oldest first.

    ``user_seqs[u]`` holds the last ``max_seq_len`` items user ``u`` interacted
    with; ``item_seqs[i]`` the last users of item ``i``. Histories up to a
    cutoff time are available through :meth:`before`.
    """

    def __init__(self, train: InteractionLog, max_seq_len: int = 50):
        if len(train) == 0:
            raise ValueError("empty train split")
        if max_seq_len < 1:
            raise ValueError("max_seq_len must be positive")
        self.max_seq_len = max_seq_len
        self.n_users = train.user_count
        self.n_items = train.item_count
        self._hist = {
            "user": self._group(train.users, train.items, train.timestamps, self.n_users),
            "item": self._group(train.items, train.users, train.timestamps, self.n_items),
        }
        self.user_seqs = [ids[-max_seq_len:] for ids, _ in self._hist["user"]]
        self.item_seqs = [ids[-max_seq_len:] for ids, _ in self._hist["item"]]

    @staticmethod
    def _group(keys, values, stamps, n):
        order = np.lexsort((np.arange(len(keys)), stamps, keys))
        keys, values, stamps = keys[order], values[order], stamps[order]
        bounds = np.searchsorted(keys, np.arange(n + 1))
        return [(values[a:b], stamps[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

    def history(self, kind: str, entity: int) -> tuple[np.ndarray, np.ndarray]:
        """All train counterparts of ``entity`` with their timestamps."""
        return self._hist[kind][entity]

    def sequence(self, kind: str, entity: int) -> np.ndarray:
        return (self.user_seqs if kind == "user" else self.item_seqs)[entity]

    def count_before(self, kind: str, entity: int, time: int | None) -> int:
        ids, stamps = self._hist[kind][entity]
        if time is None:
            return len(ids)
        return int(np.searchsorted(stamps, time, side="left"))

    def before(self, kind: str, entity: int, time: int | None) -> np.ndarray:
        """Last ``max_seq_len`` counterparts strictly earlier than ``time`` (all if None)."""
        ids, _ = self._hist[kind][entity]
        c = self.count_before(kind, entity, time)
        return ids[max(0, c - self.max_seq_len):c]

    def last_time(self, kind: str, entity: int) -> int | None:
        stamps = self._hist[kind][entity][1]
        return int(stamps[-1]) if len(stamps) else None

    def padded(self, kind: str, entities, times=None) -> tuple[np.ndarray, np.ndarray]:
        """Stack sequences into ``(index, mask)`` arrays of width ``max_seq_len``."""
        entities = np.asarray(entities)
        idx = np.zeros((len(entities), self.max_seq_len), dtype=np.int64)
        mask = np.zeros((len(entities), self.max_seq_len))
        for row, e in enumerate(entities):
            t = None if times is None else times[row]
            seq = self.before(kind, int(e), None if t is None else int(t))
            idx[row, :len(seq)] = seq
            mask[row, :len(seq)] = 1.0
        return idx, mask


def build_sequences(train: InteractionLog, max_seq_len: int = 50) -> SequenceStore:
    return SequenceStore(train, max_seq_len)


class NegativeSampler:
    """Uniform sampling of items a user has no train interaction with."""

    def __init__(self, train: InteractionLog, n_items: int | None = None):
        self.n_items = train.item_count if n_items is None else n_items
        self.positives: list[set[int]] = [set() for _ in range(train.user_count)]
        for u, i in zip(train.users, train.items):
            self.positives[u].add(int(i))

    def sample(self, user: int, rng: np.random.Generator) -> int:
        seen = self.positives[user]
        if len(seen) >= self.n_items:
            raise ValueError(f"user {user} has interacted with every item")
        while True:
            j = int(rng.integers(self.n_items))
            if j not in seen:
                return j

    def sample_batch(self, users, rng: np.random.Generator) -> np.ndarray:
        return np.array([self.sample(int(u), rng) for u in users], dtype=np.int64)


def sample_negative(sampler: NegativeSampler, user: int, rng: np.random.Generator) -> int:
    return sampler.sample(user, rng)


def write_log(log: InteractionLog, path, delimiter: str = ",") -> None:
    """Write records with external ids, header included."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["user", "item", "rating", "timestamp"])
        for r in log.iter_records():
            w.writerow([log.user_ids[r.user_id], log.item_ids[r.item_id], r.rating, r.timestamp])


def write_id_map(ids, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "external_id"])
        for k, e in enumerate(ids):
            w.writerow([k, e])


def read_id_map(path) -> tuple[str, ...]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [None] * len(rows)
    for k, e in rows:
        ids[int(k)] = e
    return tuple(ids)


def save_split(split: SplitDataset, directory) -> None:
    """Persist a split as three record files, two id maps and a manifest."""
    d = Path(directory)
    write_id_map(split.train.user_ids, d / "user_ids.csv")
    write_id_map(split.train.item_ids, d / "item_ids.csv")
    for name in ("train", "valid", "test"):
        part = getattr(split, name)
        with open(d / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "item", "rating", "timestamp"])
            w.writerows(zip(part.users.tolist(), part.items.tolist(),
                            part.ratings.tolist(), part.timestamps.tolist()))
    with open(d / "split_manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "records", "first_timestamp", "last_timestamp"])
        for name in ("train", "valid", "test"):
            part = getattr(split, name)
            w.writerow([name, len(part), int(part.timestamps[0]), int(part.timestamps[-1])])


def load_split(directory) -> SplitDataset:
    d = Path(directory)
    user_ids = read_id_map(d / "user_ids.csv")
    item_ids = read_id_map(d / "item_ids.csv")
    parts = {}
    for name in ("train", "valid", "test"):
        arr = np.loadtxt(d / f"{name}.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        parts[name] = InteractionLog(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(),
                                     arr[:, 3].copy(), user_ids, item_ids)
    return SplitDataset(parts["train"], parts["valid"], parts["test"],
                        (int(parts["valid"].timestamps[0]), int(parts["test"].timestamps[0])))


def load_attributes(path, id_order, delimiter: str = ","):
    """Read an entity attribute file: ``id, attr_1, ..., attr_k`` with a header row.

    Returns ``(family_names, codes, vocabularies)`` where ``codes`` has one row
    per entry of ``id_order``. Code 0 is the unknown slot; entities missing
    from the file or with empty values get 0.
    """
    index = {e: k for k, e in enumerate(id_order)}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise ValueError(f"{path}: empty attribute file")
    names = [h.strip() for h in rows[0][1:]]
    vocab: list[dict[str, int]] = [{} for _ in names]
    codes = np.zeros((len(id_order), len(names)), dtype=np.int64)
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise ParseError(path, line_no, f"expected {len(names) + 1} columns, got {len(row)}")
        k = index.get(row[0].strip())
        if k is None:
            continue
        for f, value in enumerate(row[1:]):
            value = value.strip()
            if value:
                codes[k, f] = vocab[f].setdefault(value, len(vocab[f]) + 1)
    return names, codes, [tuple(v) for v in vocab]
