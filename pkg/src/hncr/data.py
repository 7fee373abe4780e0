"""Rating ingestion, implicit-feedback conversion, splitting and negative sampling."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

HEADER_WORDS = {"rating", "ratings", "score", "value", "label", "r"}


class DataError(ValueError):
    """Input data cannot be used (unreadable, too many malformed lines...)."""


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    item_id: str
    rating: float


def load_ratings(path, fmt: str = "auto", max_malformed: float = 0.01) -> list[RatingRecord]:
    """Parse a ``user item rating`` file (tab or comma separated, optional header).

    Extra trailing columns such as timestamps are ignored. Lines that
    cannot be parsed are skipped and counted; if more than
    ``max_malformed`` of the data lines are bad the load is aborted.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read ratings file {path}: {exc}") from exc

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        log.warning("ratings file %s is empty", path)
        return []

    if fmt == "auto":
        fmt = "tsv" if "\t" in lines[0] else "csv"
    if fmt not in ("tsv", "csv"):
        raise DataError(f"unknown ratings format {fmt!r}")
    delim = "\t" if fmt == "tsv" else ","
    rows = csv.reader(lines, delimiter=delim)

    records, bad, seen = [], 0, 0
    for lineno, row in enumerate(rows):
        row = [f.strip() for f in row]
        if lineno == 0 and len(row) >= 3 and row[2].lower() in HEADER_WORDS:
            continue
        seen += 1
        if len(row) < 3 or not row[0] or not row[1]:
            bad += 1
            continue
        try:
            rating = float(row[2])
        except ValueError:
            bad += 1
            continue
        if not math.isfinite(rating):
            bad += 1
            continue
        records.append(RatingRecord(row[0], row[1], rating))

    if bad:
        log.warning("%s: skipped %d malformed line(s) out of %d", path, bad, seen)
    if seen and bad / seen > max_malformed:
        raise DataError(
            f"{path}: {bad} of {seen} lines malformed ({bad / seen:.1%} > {max_malformed:.0%})"
        )
    return records


class IdIndex:
    """Bijection between original string ids and dense 0..n-1 indices."""

    def __init__(self, ids: Iterable[str] = ()):
        self._ids: list[str] = []
        self._pos: dict[str, int] = {}
        for i in ids:
            self.add(i)

    def add(self, key: str) -> int:
        idx = self._pos.get(key)
        if idx is None:
            idx = self._pos[key] = len(self._ids)
            self._ids.append(key)
        return idx

    def __len__(self):
        return len(self._ids)

    def __getitem__(self, key: str) -> int:
        return self._pos[key]

    def __contains__(self, key):
        return key in self._pos

    def original(self, idx: int) -> str:
        return self._ids[idx]

    @property
    def ids(self) -> list[str]:
        return list(self._ids)


def parse_positive_rule(rule: str):
    """Return a predicate on ratings; ``"all"`` or a threshold such as ``">=4"``."""
    rule = rule.strip().replace(" ", "")
    if rule in ("all", "observed"):
        return lambda r: True
    m = re.fullmatch(r"(>=|>)(-?\d+(?:\.\d+)?)", rule)
    if not m:
        raise ValueError(f"unsupported positive rule {rule!r} (use 'all' or '>=X')")
    thr = float(m.group(2))
    if m.group(1) == ">=":
        return lambda r: r >= thr
    return lambda r: r > thr


@dataclass
class Interactions:
    users: IdIndex
    items: IdIndex
    pairs: np.ndarray  # (P, 2) int, unique rows
    positive_rule: str = "all"

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)


def to_implicit(records: Sequence[RatingRecord], positive_rule: str = "all") -> Interactions:
    """Turn ratings into unique positive (user, item) pairs.

    Every user and item seen in ``records`` is indexed, including those
    whose ratings all fail the rule.
    """
    keep = parse_positive_rule(positive_rule)
    users, items = IdIndex(), IdIndex()
    seen = set()
    pairs = []
    for rec in records:
        u = users.add(rec.user_id)
        i = items.add(rec.item_id)
        if keep(rec.rating) and (u, i) not in seen:
            seen.add((u, i))
            pairs.append((u, i))
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return Interactions(users, items, arr, positive_rule)


@dataclass
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_dataset(pairs: np.ndarray, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Split:
    """Random disjoint train/validation/test partition of the positive pairs."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(pairs)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    tr, va, te = np.split(order, [n_train, n_train + n_val])
    return Split(pairs[tr], pairs[va], pairs[te])


@dataclass
class LabeledPairs:
    pairs: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,) in {0, 1}

    def __len__(self):
        return len(self.labels)


def user_positive_sets(pairs: np.ndarray, n_users: int) -> list[set]:
    sets = [set() for _ in range(n_users)]
    for u, i in pairs:
        sets[u].add(int(i))
    return sets


def sample_unrated(rng, rated: set, n_items: int, count: int, exclude: set = frozenset()):
    """Draw up to ``count`` distinct items outside ``rated | exclude``, uniformly."""
    blocked = len(rated) + len(exclude - rated)
    avail = n_items - blocked
    if count >= avail:
        pool = np.array([i for i in range(n_items) if i not in rated and i not in exclude], dtype=np.int64)
        return rng.permutation(pool)
    if avail < 4 * count:
        pool = np.array([i for i in range(n_items) if i not in rated and i not in exclude], dtype=np.int64)
        return rng.choice(pool, size=count, replace=False)
    picked: list[int] = []
    taken = set()
    while len(picked) < count:
        for i in rng.integers(0, n_items, size=2 * (count - len(picked)) + 8):
            i = int(i)
            if i in rated or i in exclude or i in taken:
                continue
            taken.add(i)
            picked.append(i)
            if len(picked) == count:
                break
    return np.array(picked, dtype=np.int64)


def negative_sample(
    split_pairs: np.ndarray, all_pairs: np.ndarray, n_users: int, n_items: int, seed: int = 0
) -> LabeledPairs:
    """Label a split's positives 1 and add as many never-rated items per user labelled 0."""
    rng = np.random.default_rng(seed)
    rated = user_positive_sets(all_pairs, n_users)
    per_user = np.bincount(split_pairs[:, 0], minlength=n_users) if len(split_pairs) else np.zeros(n_users, int)
    neg_u, neg_i = [], []
    for u in np.flatnonzero(per_user):
        want = int(per_user[u])
        drawn = sample_unrated(rng, rated[u], n_items, want)
        if len(drawn) < want:
            log.warning("user %d: only %d unrated items for %d negatives", u, len(drawn), want)
        neg_u.extend([u] * len(drawn))
        neg_i.extend(drawn.tolist())
    negs = np.column_stack([np.array(neg_u, dtype=np.int64), np.array(neg_i, dtype=np.int64)]).reshape(-1, 2)
    pairs = np.concatenate([split_pairs.reshape(-1, 2), negs])
    labels = np.concatenate([np.ones(len(split_pairs), dtype=np.int64), np.zeros(len(negs), dtype=np.int64)])
    return LabeledPairs(pairs, labels)


@dataclass
class InteractionMatrix:
    """Binary user-item matrix plus row/column adjacency lists."""

    Y: sp.csr_matrix
    user_items: list[np.ndarray]
    item_users: list[np.ndarray]

    @property
    def n_users(self):
        return self.Y.shape[0]

    @property
    def n_items(self):
        return self.Y.shape[1]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.Y.indptr)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.Y.indices, minlength=self.n_items)


def build_interaction_matrix(train: np.ndarray, n_users: int, n_items: int) -> InteractionMatrix:
    train = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    Y = sp.csr_matrix(
        (np.ones(len(train)), (train[:, 0], train[:, 1])), shape=(n_users, n_items), dtype=np.float64
    )
    Y.sum_duplicates()
    Y.data[:] = 1.0
    Y.sort_indices()
    Yc = Y.tocsc()
    user_items = [Y.indices[Y.indptr[a] : Y.indptr[a + 1]].astype(np.int64) for a in range(n_users)]
    item_users = [Yc.indices[Yc.indptr[i] : Yc.indptr[i + 1]].astype(np.int64) for i in range(n_items)]
    return InteractionMatrix(Y, user_items, item_users)


def degree_histogram(Y, side: str = "user") -> list[tuple[int, int]]:
    """Sorted ``(degree, count)`` pairs over nodes with at least one interaction."""
    Y = sp.csr_matrix(Y)
    if side == "user":
        deg = np.diff(Y.indptr)
    elif side == "item":
        deg = np.bincount(Y.indices, minlength=Y.shape[1])
    else:
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")
    deg = deg[deg > 0]
    if deg.size == 0:
        return []
    values, counts = np.unique(deg, return_counts=True)
    return [(int(d), int(c)) for d, c in zip(values, counts)]


def write_histogram_csv(path, hist) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["degree", "count"])
        w.writerows(hist)


@dataclass
class Dataset:
    """Everything the model and evaluator need from one prepared dataset."""

    interactions: Interactions
    split: Split
    validation: LabeledPairs
    test: LabeledPairs
    matrix: InteractionMatrix
    seed: int = 0
    ratios: tuple = (0.6, 0.2, 0.2)
    meta: dict = field(default_factory=dict)

    @property
    def n_users(self):
        return self.interactions.n_users

    @property
    def n_items(self):
        return self.interactions.n_items

    @property
    def train(self):
        return self.split.train

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "positive_rule": self.interactions.positive_rule,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_positives": int(len(self.interactions.pairs)),
            "n_train": int(len(self.split.train)),
            "n_validation": int(len(self.split.validation)),
            "n_test": int(len(self.split.test)),
            "n_validation_labeled": len(self.validation),
            "n_test_labeled": len(self.test),
            **self.meta,
        }


def build_dataset(interactions: Interactions, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """Split, negative-sample validation and test, and build the training matrix.

    The split and each split's negatives use independent streams derived
    from ``seed``.
    """
    s_split, s_val, s_test = np.random.SeedSequence(seed).spawn(3)
    split = split_dataset(interactions.pairs, ratios, seed=_int_seed(s_split))
    M, N = interactions.n_users, interactions.n_items
    val = negative_sample(split.validation, interactions.pairs, M, N, seed=_int_seed(s_val))
    test = negative_sample(split.test, interactions.pairs, M, N, seed=_int_seed(s_test))
    matrix = build_interaction_matrix(split.train, M, N)
    meta = {
        "split_seed": _int_seed(s_split),
        "validation_negatives_seed": _int_seed(s_val),
        "test_negatives_seed": _int_seed(s_test),
    }
    return Dataset(interactions, split, val, test, matrix, seed=seed, ratios=tuple(ratios), meta=meta)


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def write_manifest(path, dataset: Dataset) -> None:
    Path(path).write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + "\n")
