"""Semantic-neighbor construction from the training interactions.

Three steps per side (users or items): build a weighted relational graph
linking nodes that share a counterpart, embed it with a first-order LINE
objective, then take each node's K nearest nodes in that latent space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionMatrix

log = logging.getLogger(__name__)

WEIGHT_MODES = ("paper", "common", "none")
HEAT_T = 100.0


@dataclass
class RelationalGraph:
    """Undirected weighted graph stored as a symmetric CSR matrix without diagonal."""

    W: sp.csr_matrix
    side: str
    weight_mode: str = "paper"

    @property
    def n_nodes(self) -> int:
        return self.W.shape[0]

    @property
    def n_edges(self) -> int:
        return self.W.nnz // 2

    def has_edge(self, a: int, b: int) -> bool:
        return self.W[a, b] != 0

    def neighbors(self, a: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.W.indptr[a], self.W.indptr[a + 1]
        return self.W.indices[lo:hi], self.W.data[lo:hi]

    def degrees(self) -> np.ndarray:
        return np.diff(self.W.indptr)

    def edge_list(self):
        """Each undirected edge once, as ``(a, b, w)`` arrays with ``a < b``."""
        coo = sp.triu(self.W, k=1).tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.copy()


def _side_matrix(matrix: InteractionMatrix, side: str) -> sp.csr_matrix:
    if side == "user":
        return matrix.Y.tocsr()
    if side == "item":
        return matrix.Y.T.tocsr()
    raise ValueError(f"side must be 'user' or 'item', got {side!r}")


def edge_weight(a: int, b: int, matrix: InteractionMatrix, side: str = "user", t: float = HEAT_T):
    """Heat-kernel times co-interaction-popularity weight between two nodes.

    Returns ``None`` when the nodes share no counterpart (there is no edge).
    """
    if a == b:
        raise ValueError("no self-loops in a relational graph")
    if side == "user":
        own, other = matrix.user_items, matrix.item_users
    else:
        own, other = matrix.item_users, matrix.user_items
    common = np.intersect1d(own[a], own[b], assume_unique=True)
    if common.size == 0:
        return None
    sq = len(own[a]) + len(own[b]) - 2 * common.size
    h = math.exp(-sq / t)
    c = 2.0 / common.size * sum(1.0 / len(other[v]) for v in common)
    return h * c


def edge_weight_user(a: int, b: int, matrix: InteractionMatrix, t: float = HEAT_T):
    return edge_weight(a, b, matrix, "user", t)


def build_relational_graph(
    matrix: InteractionMatrix, side: str = "user", weight_mode: str = "paper", t: float = HEAT_T
) -> RelationalGraph:
    """Link every pair of nodes with at least one common counterpart.

    ``weight_mode``: ``paper`` (heat kernel x popularity), ``common``
    (number of shared counterparts) or ``none`` (all weights 1).
    """
    if weight_mode not in WEIGHT_MODES:
        raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
    Y = _side_matrix(matrix, side)
    counter_deg = np.asarray(Y.sum(axis=0)).ravel()
    own_deg = np.diff(Y.indptr).astype(np.float64)

    common = (Y @ Y.T).tocoo()
    off = common.row != common.col
    rows, cols, n_common = common.row[off], common.col[off], common.data[off]

    if rows.size == 0:
        w = np.zeros(0)
    elif weight_mode == "none":
        w = np.ones_like(n_common)
    elif weight_mode == "common":
        w = n_common.astype(np.float64)
    else:
        inv = np.divide(1.0, counter_deg, out=np.zeros_like(counter_deg), where=counter_deg > 0)
        pop = (Y @ sp.diags(inv) @ Y.T).tocsr()
        pop_ab = np.asarray(pop[rows, cols]).ravel()
        sq = own_deg[rows] + own_deg[cols] - 2.0 * n_common
        h = np.exp(-sq / t)
        c = 2.0 / n_common * pop_ab
        w = h * c
    n = Y.shape[0]
    W = sp.csr_matrix((np.asarray(w, dtype=np.float64), (rows, cols)), shape=(n, n))
    W.sort_indices()
    return RelationalGraph(W, side, weight_mode)


# ---------------------------------------------------------------- LINE


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def embed_relational_graph(
    graph: RelationalGraph,
    dim: int = 64,
    epochs: int = 50,
    negatives: int = 5,
    seed: int = 0,
    lr: float = 0.025,
    batch_size: int = 256,
) -> np.ndarray:
    """First-order LINE embedding of a relational graph.

    Edges are sampled in proportion to their weight (each in a random
    orientation); every positive pair is pushed together through
    ``log σ(z_a·z_b)`` and ``negatives`` noise nodes drawn from
    ``deg^0.75`` are pushed away. ``epochs`` counts passes of
    ``n_edges`` samples. The learning rate decays linearly.
    """
    rng = np.random.default_rng(seed)
    n = graph.n_nodes
    z = (rng.random((n, dim)) - 0.5) / math.sqrt(dim)
    src, dst, w = graph.edge_list()
    if src.size == 0:
        log.warning("%s graph has no edges; latent space is all zeros", graph.side)
        return np.zeros((n, dim))

    edge_p = w / w.sum()
    deg = np.zeros(n)
    np.add.at(deg, src, w)
    np.add.at(deg, dst, w)
    noise = deg**0.75
    noise /= noise.sum()

    total = max(1, epochs * src.size)
    done = 0
    while done < total:
        b = min(batch_size, total - done)
        e = rng.choice(src.size, size=b, p=edge_p)
        flip = rng.random(b) < 0.5
        a = np.where(flip, dst[e], src[e])
        c = np.where(flip, src[e], dst[e])
        neg = rng.choice(n, size=(b, negatives), p=noise)
        valid = (neg != a[:, None]) & (neg != c[:, None])
        rate = lr * max(1e-4, 1.0 - done / total)

        za, zc, zn = z[a], z[c], z[neg]
        g_pos = 1.0 - _sigmoid(np.einsum("bd,bd->b", za, zc))
        g_neg = -_sigmoid(np.einsum("bd,bkd->bk", za, zn)) * valid
        grad_a = g_pos[:, None] * zc + np.einsum("bk,bkd->bd", g_neg, zn)
        grad_c = g_pos[:, None] * za
        grad_n = g_neg[:, :, None] * za[:, None, :]

        np.add.at(z, a, rate * grad_a)
        np.add.at(z, c, rate * grad_c)
        np.add.at(z, neg.ravel(), rate * grad_n.reshape(-1, dim))
        done += b
    return z


# ---------------------------------------------------------------- neighbor sets


@dataclass
class NeighborSets:
    side: str
    K: int
    lists: list  # list[np.ndarray], nearest first
    seed: int = 0
    weight_mode: str = "paper"
    mode: str = "semantic"

    def __len__(self):
        return len(self.lists)

    def __getitem__(self, node: int) -> np.ndarray:
        return self.lists[node]

    def __eq__(self, other):
        if not isinstance(other, NeighborSets):
            return NotImplemented
        return (
            (self.side, self.K, self.seed, self.weight_mode, self.mode)
            == (other.side, other.K, other.seed, other.weight_mode, other.mode)
            and len(self.lists) == len(other.lists)
            and all(np.array_equal(a, b) for a, b in zip(self.lists, other.lists))
        )

    @classmethod
    def empty(cls, side: str, n: int) -> "NeighborSets":
        return cls(side, 0, [np.zeros(0, dtype=np.int64) for _ in range(n)])


def _select_nearest(d: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K smallest finite entries of ``d``, ties by smaller index."""
    finite = np.isfinite(d)
    n_ok = int(finite.sum())
    k = min(K, n_ok)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if k < n_ok:
        kth = np.partition(d, k - 1)[k - 1]
        cand = np.flatnonzero(d <= kth)
    else:
        cand = np.flatnonzero(finite)
    order = np.lexsort((cand, d[cand]))
    return cand[order][:k].astype(np.int64)


def semantic_neighbors(
    latent: np.ndarray,
    K: int,
    candidates: np.ndarray | None = None,
    side: str = "user",
    accelerated: bool = False,
    block: int | None = None,
) -> NeighborSets:
    """Exact Euclidean K-nearest neighbors of every node in ``latent``.

    ``candidates`` is an optional boolean mask of nodes allowed to appear
    in (and to receive) neighbor lists; excluded nodes get empty lists.
    ``accelerated`` switches to a Gram-matrix distance expansion, which is
    faster but may order near-ties differently.
    """
    z = np.asarray(latent, dtype=np.float64)
    n, dim = z.shape
    ok = np.ones(n, dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
    lists = [np.zeros(0, dtype=np.int64) for _ in range(n)]
    if K <= 0 or n == 0:
        return NeighborSets(side, max(K, 0), lists)
    if block is None:
        block = max(1, min(1024, 4_000_000 // max(1, n * (1 if accelerated else dim))))
    sq = np.einsum("nd,nd->n", z, z)
    for start in range(0, n, block):
        q = np.arange(start, min(n, start + block))
        if accelerated:
            d = sq[q, None] + sq[None, :] - 2.0 * z[q] @ z.T
            np.maximum(d, 0.0, out=d)
        else:
            diff = z[q, None, :] - z[None, :, :]
            d = np.einsum("bnd,bnd->bn", diff, diff)
        d[:, ~ok] = np.inf
        d[np.arange(len(q)), q] = np.inf
        for row, node in enumerate(q):
            if ok[node]:
                lists[node] = _select_nearest(d[row], K)
    return NeighborSets(side, K, lists)


def cooccurrence_neighbors(graph: RelationalGraph, K: int) -> NeighborSets:
    """The K direct graph neighbors with the largest edge weight, ties by smaller id."""
    lists = []
    for a in range(graph.n_nodes):
        nb, w = graph.neighbors(a)
        if K <= 0 or nb.size == 0:
            lists.append(np.zeros(0, dtype=np.int64))
            continue
        order = np.lexsort((nb, -w))
        lists.append(nb[order][:K].astype(np.int64))
    return NeighborSets(graph.side, max(K, 0), lists, weight_mode=graph.weight_mode, mode="cooccurrence")


def build_neighbor_sets(
    matrix: InteractionMatrix,
    side: str,
    K: int,
    weight_mode: str = "paper",
    mode: str = "semantic",
    dim: int = 64,
    epochs: int = 50,
    negatives: int = 5,
    seed: int = 0,
    accelerated: bool = False,
):
    """Full neighbor pipeline for one side; returns ``(NeighborSets, latent or None)``.

    Nodes without any relational edge get empty neighbor lists and are
    never chosen as someone else's neighbor.
    """
    graph = build_relational_graph(matrix, side, weight_mode)
    if mode == "cooccurrence":
        sets = cooccurrence_neighbors(graph, K)
        sets.seed = seed
        return sets, None
    if mode != "semantic":
        raise ValueError(f"neighbor mode must be 'semantic' or 'cooccurrence', got {mode!r}")
    latent = embed_relational_graph(graph, dim=dim, epochs=epochs, negatives=negatives, seed=seed)
    connected = graph.degrees() > 0
    sets = semantic_neighbors(latent, K, candidates=connected, side=side, accelerated=accelerated)
    sets.seed, sets.weight_mode = seed, weight_mode
    return sets, latent


# ---------------------------------------------------------------- files


class NeighborFileError(ValueError):
    pass


def save_neighbor_sets(path, sets: NeighborSets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        tag = sets.weight_mode + ("+cooc" if sets.mode == "cooccurrence" else "")
        fh.write(f"{sets.side} {sets.K} {sets.seed} {tag}\n")
        for node, nb in enumerate(sets.lists):
            fh.write(f"{node}:" + "".join(f" {int(x)}" for x in nb) + "\n")


def load_neighbor_sets(path, n_nodes: int | None = None) -> NeighborSets:
    """Read a neighbor file; ``n_nodes`` (if given) must match the file."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise NeighborFileError(f"cannot read neighbor file {path}: {exc}") from exc
    if not lines:
        raise NeighborFileError(f"{path}: empty neighbor file")
    head = lines[0].split()
    if len(head) != 4 or head[0] not in ("user", "item"):
        raise NeighborFileError(f"{path}: bad header {lines[0]!r}")
    try:
        side, K, seed, weight_mode = head[0], int(head[1]), int(head[2]), head[3]
        lists = []
        for expected, line in enumerate(lines[1:]):
            node, _, rest = line.partition(":")
            if int(node) != expected:
                raise NeighborFileError(f"{path}: node {node} out of order (expected {expected})")
            lists.append(np.array([int(x) for x in rest.split()], dtype=np.int64))
    except ValueError as exc:
        if isinstance(exc, NeighborFileError):
            raise
        raise NeighborFileError(f"{path}: corrupt neighbor file ({exc})") from exc
    n = len(lists)
    if n_nodes is not None and n != n_nodes:
        raise NeighborFileError(f"{path}: file has {n} {side}s, dataset has {n_nodes}")
    for node, nb in enumerate(lists):
        if nb.size and (nb.min() < 0 or nb.max() >= n or node in nb):
            raise NeighborFileError(f"{path}: invalid neighbor id in line for node {node}")
    mode = "cooccurrence" if weight_mode.endswith("+cooc") else "semantic"
    return NeighborSets(side, K, lists, seed=seed, weight_mode=weight_mode.removesuffix("+cooc"), mode=mode)


def save_latent(path, latent: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for node, row in enumerate(np.asarray(latent)):
            fh.write(f"{node} " + " ".join(repr(float(x)) for x in row) + "\n")


def load_latent(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        rows.append([float(x) for x in parts[1:]])
    return np.array(rows, dtype=np.float64)
