"""Two-tower neighbor-aggregating recommender on the Poincaré ball.

A user tower and an item tower share one structure: the target embedding
is combined with attention-weighted semantic neighbors and interaction
history in the tangent space at the origin, mapped back to the ball and
passed through ``L`` Möbius layers. The two tower outputs are scored with
a Fermi-Dirac decoder on their distance.

Selecting the ``euclidean`` backend gives the Euclidean counterpart, where
Möbius operations become ordinary vector operations and the exponential
and logarithmic maps become identities.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import ball
from .data import Dataset, InteractionMatrix, LabeledPairs, user_positive_sets
from .neighbors import NeighborSets

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EPS_PROB = 1e-12
LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------- backends


class HyperbolicBackend:
    tag = "hyperbolic"

    def __init__(self, c: float = 1.0):
        if c <= 0:
            raise ValueError("hyperbolic backend needs c > 0")
        self.c = float(c)

    def add(self, x, y):
        return ball.mobius_add(x, y, self.c)

    def matvec(self, m, x):
        return ball.mobius_matvec(m, x, self.c)

    def distance(self, x, y):
        return ball.distance(x, y, self.c)

    def distance0(self, x):
        return ball.distance0(x, self.c)

    def expmap0(self, v):
        return ball.expmap0(v, self.c)

    def logmap0(self, x):
        return ball.logmap0(x, self.c)

    def activation(self, x):
        return ball.expmap0(ad.leaky_relu(ball.logmap0(x, self.c), LEAKY_SLOPE), self.c)

    def project(self, x):
        return ball.project(x, self.c)

    def riemannian(self, theta, g):
        return ball.riemannian_rescale(theta, g, self.c)


class EuclideanBackend:
    tag = "euclidean"
    c = 0.0

    def add(self, x, y):
        return x + y

    def matvec(self, m, x):
        return ad.matvec(m, x)

    def distance(self, x, y):
        return ad.norm(x - y, keepdims=False)

    def distance0(self, x):
        return ad.norm(x, keepdims=False)

    def expmap0(self, v):
        return v

    def logmap0(self, x):
        return x

    def activation(self, x):
        return ad.leaky_relu(x, LEAKY_SLOPE)

    def project(self, x):
        return x

    def riemannian(self, theta, g):
        return g


def make_backend(tag: str, c: float = 1.0):
    if tag == "hyperbolic":
        return HyperbolicBackend(c)
    if tag == "euclidean":
        return EuclideanBackend()
    raise ValueError(f"unknown backend {tag!r}")


# ---------------------------------------------------------------- configuration


@dataclass
class HyperParams:
    dim: int = 64
    layers: int | None = None  # 1 for the hyperbolic backend, 2 for the Euclidean one
    tau: float = 0.1
    c: float = 1.0
    r: float = 2.0
    t: float = 1.0
    K_u: int = 15
    K_v: int = 15
    lr: float = 1e-3
    lr_layers: float | None = None
    batch: int = 1024
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    backend: str = "hyperbolic"
    no_semantic: bool = False
    no_history: bool = False
    uniform_attention: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.layers is None:
            self.layers = 1 if self.backend == "hyperbolic" else 2
        if self.tau <= 0 or self.t <= 0:
            raise ValueError("tau and t must be positive")
        if self.dim < 1 or self.layers < 0:
            raise ValueError("need dim >= 1 and layers >= 0")
        if self.backend == "hyperbolic" and self.c <= 0:
            raise ValueError("hyperbolic backend needs c > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def variant(self) -> str:
        """Conventional model name for this configuration, e.g. ``HNCR-S``."""
        base = "HNCR" if self.backend == "hyperbolic" else "ENCR"
        tags = [s for s, on in (("S", self.no_semantic), ("H", self.no_history), ("A", self.uniform_attention)) if on]
        return base + "".join("-" + t for t in tags)


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    """Named float64 arrays plus geometry tag.

    Names: ``user_emb`` (M, d), ``item_emb`` (N, d) and, per layer l,
    ``user_W{l}``/``item_W{l}`` (d, d) and ``user_b{l}``/``item_b{l}`` (d,).
    """

    arrays: dict
    layers: int
    backend: str = "hyperbolic"
    c: float = 1.0

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def n_users(self):
        return self.arrays["user_emb"].shape[0]

    @property
    def n_items(self):
        return self.arrays["item_emb"].shape[0]

    @property
    def dim(self):
        return self.arrays["user_emb"].shape[1]

    def names(self):
        return list(self.arrays)

    def ball_names(self):
        return [n for n in self.arrays if n.endswith("_emb") or "_b" in n]

    def matrix_names(self):
        return [n for n in self.arrays if "_W" in n]

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.layers, self.backend, self.c)

    def in_ball(self) -> bool:
        if self.backend != "hyperbolic":
            return True
        limit = (1.0 - ball.EPS_BALL) / math.sqrt(self.c) * (1 + 1e-12)
        return all(
            np.all(np.linalg.norm(np.atleast_2d(self.arrays[n]), axis=-1) <= limit) for n in self.ball_names()
        )


def init_params(n_users: int, n_items: int, dim: int, layers: int, seed: int = 0,
                backend: str = "hyperbolic", c: float = 1.0, scale: float = 1e-3) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {
        "user_emb": rng.uniform(-scale, scale, (n_users, dim)),
        "item_emb": rng.uniform(-scale, scale, (n_items, dim)),
    }
    bound = 1.0 / math.sqrt(dim)
    for side in ("user", "item"):
        for l in range(layers):
            arrays[f"{side}_W{l}"] = rng.uniform(-bound, bound, (dim, dim))
            arrays[f"{side}_b{l}"] = rng.uniform(-scale, scale, dim)
    return ModelParams(arrays, layers, backend, c if backend == "hyperbolic" else 0.0)


# ---------------------------------------------------------------- graph context


@dataclass
class Adjacency:
    """CSR-style ragged lists: members of row r are ``indices[indptr[r]:indptr[r+1]]``."""

    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_lists(cls, lists) -> "Adjacency":
        counts = np.array([len(x) for x in lists], dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        indices = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if len(lists) else np.zeros(0, np.int64)
        return cls(indptr, indices.astype(np.int64))

    def expand(self, rows: np.ndarray):
        """Flatten the members of ``rows``: returns ``(owner position, member id, counts)``."""
        rows = np.asarray(rows, dtype=np.int64)
        starts = self.indptr[rows]
        counts = self.indptr[rows + 1] - starts
        total = int(counts.sum())
        owners = np.repeat(np.arange(len(rows)), counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        members = self.indices[np.repeat(starts, counts) + offsets]
        return owners, members, counts


@dataclass
class GraphContext:
    user_neighbors: Adjacency
    item_neighbors: Adjacency
    user_history: Adjacency
    item_history: Adjacency

    @classmethod
    def build(cls, matrix: InteractionMatrix, user_sets: NeighborSets | None, item_sets: NeighborSets | None):
        M, N = matrix.n_users, matrix.n_items
        us = user_sets.lists if user_sets is not None else [[] for _ in range(M)]
        its = item_sets.lists if item_sets is not None else [[] for _ in range(N)]
        if len(us) != M or len(its) != N:
            raise ValueError("neighbor sets do not match the dataset size")
        return cls(
            Adjacency.from_lists(us),
            Adjacency.from_lists(its),
            Adjacency.from_lists(matrix.user_items),
            Adjacency.from_lists(matrix.item_users),
        )

    def neighbors(self, side):
        return self.user_neighbors if side == "user" else self.item_neighbors

    def history(self, side):
        return self.user_history if side == "user" else self.item_history


# ---------------------------------------------------------------- forward


def attention_weights(backend, anchor, candidates, tau: float, owners=None, n_owners: int = 1,
                      uniform: bool = False):
    """Softmax over ``-distance(anchor, candidate) / tau`` within each owner group.

    With a single anchor, ``anchor`` is (d,) and ``candidates`` (n, d). For
    grouped use, ``anchor`` holds one row per candidate and ``owners`` maps
    candidates to groups.
    """
    n = np.shape(ad.value_of(candidates))[0]
    if n == 0:
        raise ValueError("attention needs at least one candidate")
    if owners is None:
        owners = np.zeros(n, dtype=np.int64)
        n_owners = 1
    counts = np.bincount(owners, minlength=n_owners)
    if uniform:
        return 1.0 / counts[owners].astype(np.float64)
    logits = -backend.distance(anchor, candidates) / tau
    top = np.full(n_owners, -np.inf)
    np.maximum.at(top, owners, ad.value_of(logits))
    e = ad.exp(logits - top[owners])
    total = ad.segment_sum(e, owners, n_owners)
    return e / ad.take(total, owners)


def _aggregate_term(backend, anchor, table, adjacency: Adjacency, ids, tau, uniform):
    owners, members, counts = adjacency.expand(ids)
    if members.size == 0:
        return None
    cand = ad.take(table, members)
    w = attention_weights(backend, ad.take(anchor, owners), cand, tau, owners, len(ids), uniform)
    logs = backend.logmap0(cand)
    return ad.segment_sum(ad.reshape(w, (-1, 1)) * logs, owners, len(ids))


def aggregate(backend, anchor, neighbor_terms):
    """``exp0(log0(anchor) + Σ tangent terms)``; ``None`` terms contribute nothing."""
    tangent = backend.logmap0(anchor)
    for term in neighbor_terms:
        if term is not None:
            tangent = tangent + term
    return backend.expmap0(tangent)


def layer_forward(backend, x, W, b):
    """``σ(W ⊗ (x ⊕ b))`` with the activation applied in the tangent space at 0."""
    return backend.activation(backend.matvec(W, backend.add(x, b)))


def tower(P, side: str, ids, ctx: GraphContext, hp: HyperParams, backend):
    """Final representations of ``ids`` for one side; ``P`` maps names to arrays or Tensors."""
    other = "item" if side == "user" else "user"
    own_table, other_table = P[f"{side}_emb"], P[f"{other}_emb"]
    anchor = ad.take(own_table, ids)
    terms = []
    if not hp.no_semantic:
        terms.append(_aggregate_term(backend, anchor, own_table, ctx.neighbors(side), ids, hp.tau, hp.uniform_attention))
    if not hp.no_history:
        terms.append(_aggregate_term(backend, anchor, other_table, ctx.history(side), ids, hp.tau, hp.uniform_attention))
    x = aggregate(backend, anchor, terms)
    for l in range(hp.layers):
        x = layer_forward(backend, x, P[f"{side}_W{l}"], P[f"{side}_b{l}"])
    return x


def fermi_dirac(dist, r: float, t: float):
    """``1 / (exp((d - r) / t) + 1)``."""
    return ad.sigmoid((r - dist) / t)


def forward(P, users, items, ctx, hp, backend):
    """Tower outputs for aligned ``users``/``items`` arrays."""
    uq, uinv = np.unique(users, return_inverse=True)
    iq, iinv = np.unique(items, return_inverse=True)
    U = tower(P, "user", uq, ctx, hp, backend)
    V = tower(P, "item", iq, ctx, hp, backend)
    return ad.take(U, uinv), ad.take(V, iinv)


def predict(P, users, items, ctx, hp, backend):
    u, v = forward(P, users, items, ctx, hp, backend)
    return fermi_dirac(backend.distance(u, v), hp.r, hp.t)


def triplet_loss(P, batch: np.ndarray, ctx, hp, backend):
    """Binary cross-entropy over positives and sampled negatives, summed over the batch."""
    users = np.concatenate([batch[:, 0], batch[:, 0]])
    items = np.concatenate([batch[:, 1], batch[:, 2]])
    y = predict(P, users, items, ctx, hp, backend)
    y = ad.clamp(y, EPS_PROB, 1.0 - EPS_PROB)
    n = len(batch)
    pos = ad.take(y, np.arange(n))
    neg = ad.take(y, np.arange(n, 2 * n))
    return -(ad.sum(ad.log(pos)) + ad.sum(ad.log(1.0 - neg)))


# ---------------------------------------------------------------- sampling


class TripletSampler:
    """Uniform (user, positive, negative) triplets from the training pairs."""

    def __init__(self, train: np.ndarray, n_users: int, n_items: int, seed: int = 0):
        if len(train) == 0:
            raise ValueError("cannot sample triplets from an empty training split")
        self.train = np.asarray(train, dtype=np.int64)
        self.n_items = n_items
        self.seed = seed
        self.rated = user_positive_sets(self.train, n_users)
        self._full = {u for u, s in enumerate(self.rated) if len(s) >= n_items}
        if len(self._full) == len(set(self.train[:, 0].tolist())):
            raise ValueError("every training user has interacted with every item")

    def sample(self, batch: int, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, step])
        out = np.empty((batch, 3), dtype=np.int64)
        filled = 0
        while filled < batch:
            pick = self.train[rng.integers(0, len(self.train), size=batch - filled)]
            for u, v in pick:
                if u in self._full:
                    continue
                rated = self.rated[u]
                while True:
                    neg = int(rng.integers(0, self.n_items))
                    if neg not in rated:
                        break
                out[filled] = (u, v, neg)
                filled += 1
        return out


def sample_triplets(train, n_users, n_items, batch, seed=0, step=0):
    return TripletSampler(train, n_users, n_items, seed).sample(batch, step)


# ---------------------------------------------------------------- optimisation


def loss_and_grads(params: ModelParams, batch, ctx, hp, backend):
    tape = ad.Tape()
    leaves = {k: tape.variable(v, name=k) for k, v in params.arrays.items()}
    loss = triplet_loss(leaves, batch, ctx, hp, backend)
    grads = ad.gradient(loss, leaves.values())
    return float(ad.value_of(loss)), grads


def rsgd_step(params: ModelParams, grads: dict, lr: float, backend, lr_layers: float | None = None) -> ModelParams:
    """One Riemannian SGD step in place; returns ``params``.

    Ball-valued parameters move along the rescaled gradient and are
    retracted by projection; layer matrices take a plain SGD step.
    ``lr_layers`` (default ``lr``) is the step for the per-layer matrices
    and biases, which collect gradient from every pair in the batch.
    """
    ball_names = set(params.ball_names()) if backend.tag == "hyperbolic" else set()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            warnings.warn(f"non-finite gradient for {name}; update skipped", RuntimeWarning, stacklevel=2)
            continue
        theta = params.arrays[name]
        step = lr if (lr_layers is None or name.endswith("_emb")) else lr_layers
        if name in ball_names:
            rows = np.flatnonzero(np.any(g != 0, axis=-1)) if g.ndim == 2 else None
            if rows is None:
                params.arrays[name] = backend.project(theta - step * backend.riemannian(theta, g))
            elif rows.size:
                upd = theta[rows] - step * backend.riemannian(theta[rows], g[rows])
                theta[rows] = backend.project(upd)
        else:
            params.arrays[name] = theta - step * g
    return params


# ---------------------------------------------------------------- scoring


class Scorer:
    """Precomputed tower outputs for every user and item of a trained model."""

    def __init__(self, params: ModelParams, ctx: GraphContext, hp: HyperParams):
        self.hp = hp
        self.backend = make_backend(params.backend, params.c if params.backend == "hyperbolic" else 1.0)
        P = params.arrays
        self.U = tower(P, "user", np.arange(params.n_users), ctx, hp, self.backend)
        self.V = tower(P, "item", np.arange(params.n_items), ctx, hp, self.backend)

    def representations(self) -> ModelParams:
        """Tower outputs packed as parameters, for the embedding analyses."""
        c = self.backend.c if self.backend.tag == "hyperbolic" else 0.0
        return ModelParams({"user_emb": np.asarray(self.U), "item_emb": np.asarray(self.V)}, 0, self.backend.tag, c)

    def score(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        d = self.backend.distance(self.U[users], self.V[items])
        return np.asarray(fermi_dirac(d, self.hp.r, self.hp.t))


# ---------------------------------------------------------------- training


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params, trace):
        super().__init__(message)
        self.params = params
        self.trace = trace


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_auc: float
    val_acc: float


@dataclass
class TrainResult:
    params: ModelParams
    trace: list
    best_epoch: int
    hp: HyperParams
    seconds: float = 0.0


def _auc(scores, labels):
    from .metrics import auc

    return auc(scores, labels)


def _acc(scores, labels):
    from .metrics import accuracy

    return accuracy(scores, labels)


def train(dataset: Dataset, user_sets, item_sets, hp: HyperParams, progress=None) -> TrainResult:
    """Fit the model with RSGD on freshly sampled triplets every step.

    After each epoch the validation pairs are scored; the parameters with
    the best validation AUC are kept and training stops after
    ``hp.patience`` epochs without improvement. Without validation pairs
    the final parameters are returned.
    """
    started = time.perf_counter()
    backend = make_backend(hp.backend, hp.c)
    ctx = GraphContext.build(dataset.matrix, user_sets, item_sets)
    params = init_params(dataset.n_users, dataset.n_items, hp.dim, hp.layers, hp.seed, hp.backend, hp.c)
    best, best_auc, best_epoch = params.copy(), -math.inf, 0
    trace: list[EpochStats] = []
    if hp.epochs <= 0:
        return TrainResult(params, trace, 0, hp, time.perf_counter() - started)

    sampler = TripletSampler(dataset.train, dataset.n_users, dataset.n_items, hp.seed)
    steps_per_epoch = max(1, math.ceil(len(dataset.train) / hp.batch))
    val = dataset.validation
    has_val = len(val) > 0 and 0 < int(val.labels.sum()) < len(val)
    step = 0
    stale = 0
    for epoch in range(1, hp.epochs + 1):
        total = 0.0
        for _ in range(steps_per_epoch):
            batch = sampler.sample(hp.batch, step)
            step += 1
            try:
                loss, grads = loss_and_grads(params, batch, ctx, hp, backend)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best, trace) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}: loss is not finite", best, trace)
            total += loss
            rsgd_step(params, grads, hp.lr, backend, hp.lr_layers)
        if hp.debug and not params.in_ball():
            raise AssertionError(f"epoch {epoch}: a ball parameter left the ball")
        if has_val:
            scores = Scorer(params, ctx, hp).score(val.pairs[:, 0], val.pairs[:, 1])
            vauc, vacc = _auc(scores, val.labels), _acc(scores, val.labels)
        else:
            vauc = vacc = float("nan")
        trace.append(EpochStats(epoch, total / steps_per_epoch, vauc, vacc))
        if progress is not None:
            progress(trace[-1])
        if has_val:
            if vauc > best_auc:
                best, best_auc, best_epoch, stale = params.copy(), vauc, epoch, 0
            else:
                stale += 1
                if stale >= hp.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
        else:
            best, best_epoch = params, epoch
    return TrainResult(best, trace, best_epoch, hp, time.perf_counter() - started)


def write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,val_auc,val_acc\n")
        for s in trace:
            fh.write(f"{s.epoch},{s.loss!r},{s.val_auc!r},{s.val_acc!r}\n")


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParams, hp: HyperParams, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "backend": params.backend,
        "c": params.c,
        "layers": params.layers,
        "n_users": params.n_users,
        "n_items": params.n_items,
        "hyperparams": asdict(hp),
        "variant": hp.variant,
        **(extra or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params.arrays)


def load_checkpoint(path):
    """Return ``(ModelParams, HyperParams, metadata)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    params = ModelParams(arrays, meta["layers"], meta["backend"], meta["c"])
    return params, HyperParams.from_dict(meta["hyperparams"]), meta
