"""CTR and top-K metrics, sparsity bins and the embedding-hierarchy analyses."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import sample_unrated, user_positive_sets


class UndefinedMetric(ValueError):
    """Metric is undefined for the given input (e.g. AUC with one class)."""


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Computed from the rank sum of the positives with average ranks for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """Pairwise-comparison AUC; quadratic, used as an oracle."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetric("AUC needs both positive and negative labels")
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (pos.size * neg.size)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.size == 0:
        raise UndefinedMetric("accuracy of an empty set")
    return float(np.mean((scores >= threshold) == labels))


# ---------------------------------------------------------------- top-K


@dataclass
class RankingTask:
    user: int
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def candidates(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives])


def rank_candidates(items: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Items by descending score, ties broken by ascending item id."""
    order = np.lexsort((items, -scores))
    return items[order]


def hits_at_k(task: RankingTask, scores: np.ndarray, K: int) -> int:
    ranked = rank_candidates(task.candidates, np.asarray(scores, dtype=np.float64))
    return int(np.isin(ranked[:K], task.positives).sum())


def precision_recall_at_k(task: RankingTask, scores, K: int) -> tuple[float, float]:
    """``(hits/K, hits/|positives|)`` for one user; ``scores`` align with ``task.candidates``."""
    if task.positives.size == 0:
        raise UndefinedMetric("user has no test positives")
    h = hits_at_k(task, scores, K)
    return h / K, h / task.positives.size


def build_ranking_tasks(test_pairs, all_pairs, n_users, n_items, n_negatives=1000, seed=0):
    """One task per test user: its test positives plus ``n_negatives`` items it never rated."""
    rng = np.random.default_rng(seed)
    rated = user_positive_sets(all_pairs, n_users)
    by_user: dict[int, list] = {}
    for u, i in np.asarray(test_pairs).reshape(-1, 2):
        by_user.setdefault(int(u), []).append(int(i))
    tasks = []
    for u in sorted(by_user):
        negs = sample_unrated(rng, rated[u], n_items, n_negatives)
        tasks.append(RankingTask(u, np.array(sorted(set(by_user[u])), dtype=np.int64), np.sort(negs)))
    return tasks


def topk_report(tasks, score_fn, ks=(2, 5, 10, 20, 50, 100)) -> dict:
    """Mean P@K and R@K over users with at least one test positive."""
    prec = {k: [] for k in ks}
    rec = {k: [] for k in ks}
    for task in tasks:
        if task.positives.size == 0:
            continue
        cand = task.candidates
        s = np.asarray(score_fn(np.full(cand.size, task.user), cand))
        ranked = rank_candidates(cand, s)
        hit = np.isin(ranked, task.positives)
        cum = np.cumsum(hit)
        for k in ks:
            h = int(cum[min(k, cum.size) - 1])
            prec[k].append(h / k)
            rec[k].append(h / task.positives.size)
    return {
        "precision": {k: float(np.mean(v)) if v else math.nan for k, v in prec.items()},
        "recall": {k: float(np.mean(v)) if v else math.nan for k, v in rec.items()},
        "users": sum(1 for t in tasks if t.positives.size),
    }


# ---------------------------------------------------------------- sparsity bins


@dataclass
class Bin:
    lo: int
    hi: int
    users: np.ndarray
    interactions: int

    @property
    def label(self) -> str:
        return f"[{self.lo},{self.hi})"


def sparsity_bins(users, degrees, n_bins: int = 4) -> list[Bin]:
    """Group users by training degree into bins holding similar interaction totals.

    Users are ordered by (degree, id) and cut where the running total of
    their training interactions crosses each ``k/n_bins`` fraction. Each bin
    reports ``[lo, hi)`` with ``lo`` its smallest degree and ``hi`` one past
    its largest.
    """
    users = np.unique(np.asarray(users, dtype=np.int64))
    if users.size == 0:
        return []
    deg = np.asarray(degrees)[users].astype(np.int64)
    order = np.lexsort((users, deg))
    users, deg = users[order], deg[order]
    n_bins = max(1, min(n_bins, users.size))
    weight = np.maximum(deg, 1).astype(np.float64)
    cum = np.cumsum(weight)
    total = cum[-1]
    cuts = [0]
    for k in range(1, n_bins):
        j = int(np.searchsorted(cum, total * k / n_bins, side="left")) + 1
        j = min(max(j, cuts[-1] + 1), users.size - (n_bins - k))
        cuts.append(j)
    cuts.append(users.size)
    bins = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        d = deg[a:b]
        bins.append(Bin(int(d.min()), int(d.max()) + 1, users[a:b], int(d.sum())))
    return bins


def sparsity_report(bins, labeled, score_fn) -> list[dict]:
    """Per-bin accuracy and AUC over the labeled pairs of each bin's users."""
    rows = []
    for b in bins:
        mask = np.isin(labeled.pairs[:, 0], b.users)
        pairs, labels = labeled.pairs[mask], labeled.labels[mask]
        row = {"bin": b.label, "users": int(b.users.size), "interactions": b.interactions}
        if labels.size:
            s = score_fn(pairs[:, 0], pairs[:, 1])
            row["accuracy"] = accuracy(s, labels)
            try:
                row["auc"] = auc(s, labels)
            except UndefinedMetric:
                row["auc"] = math.nan
        else:
            row["accuracy"] = row["auc"] = math.nan
        rows.append(row)
    return rows


# ---------------------------------------------------------------- hierarchy


def origin_distances(params) -> np.ndarray:
    """Backend distance to the origin of every user then every item embedding."""
    from .ball import distance0

    emb = np.concatenate([params["user_emb"], params["item_emb"]])
    if params.backend == "hyperbolic":
        return distance0(emb, params.c)
    return np.linalg.norm(emb, axis=-1)


def hierarchy_bins(params, matrix, n_groups: int = 4) -> list[dict]:
    """Average training degree of node groups ordered by distance to the origin.

    Users and items are pooled, sorted from nearest to farthest and split
    into ``n_groups`` groups whose sizes differ by at most one.
    """
    dist = origin_distances(params)
    degree = np.concatenate([matrix.user_degrees(), matrix.item_degrees()]).astype(np.float64)
    order = np.lexsort((np.arange(dist.size), dist))
    rows = []
    for g, idx in enumerate(np.array_split(order, n_groups), start=1):
        rows.append(
            {
                "group": g,
                "nodes": int(idx.size),
                "min_dist": float(dist[idx].min()) if idx.size else math.nan,
                "max_dist": float(dist[idx].max()) if idx.size else math.nan,
                "avg_degree": float(degree[idx].mean()) if idx.size else math.nan,
            }
        )
    return rows


def embedding_scatter(params, sample_n: int = 400, seed: int = 0, nodes=None) -> list[dict]:
    """Distance to origin and mean distance to the other sampled nodes.

    Nodes are indexed users first, then items. The average column is
    ``None`` when fewer than two nodes are sampled.
    """
    from .ball import distance

    emb = np.concatenate([params["user_emb"], params["item_emb"]])
    n_users = params.n_users
    if nodes is None:
        rng = np.random.default_rng(seed)
        nodes = np.sort(rng.choice(emb.shape[0], size=min(sample_n, emb.shape[0]), replace=False))
    nodes = np.asarray(nodes, dtype=np.int64)
    x = emb[nodes]
    d0 = origin_distances(params)[nodes]
    if params.backend == "hyperbolic":
        D = distance(x[:, None, :], x[None, :, :], params.c)
    else:
        D = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    rows = []
    for k, node in enumerate(nodes):
        avg = float(D[k].sum() / (len(nodes) - 1)) if len(nodes) > 1 else None
        kind = "user" if node < n_users else "item"
        local = int(node if node < n_users else node - n_users)
        rows.append({"node": f"{kind}:{local}", "dist_to_origin": float(d0[k]), "avg_dist_to_others": avg})
    return rows


def write_rows_csv(path, rows: list[dict]) -> None:
    if not rows:
        with open(path, "w", newline="") as fh:
            fh.write("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
