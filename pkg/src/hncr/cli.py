"""Command line entry point: prepare, train, evaluate, rank, analyze.

Exit codes: 0 success, 2 input error, 3 training failure, 4 incompatible
artifacts (checkpoint or neighbor files built for a different dataset or
configuration). The reason goes to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ABLATIONS, BACKENDS, NEIGHBOR_MODES, ConfigError, RunConfig, dump_config, load_config
from .data import (
    DataError,
    Dataset,
    build_dataset,
    user_positive_sets,
    degree_histogram,
    load_ratings,
    to_implicit,
    write_histogram_csv,
)
from .metrics import (
    UndefinedMetric,
    accuracy,
    auc,
    build_ranking_tasks,
    embedding_scatter,
    hierarchy_bins,
    sparsity_bins,
    sparsity_report,
    topk_report,
    write_rows_csv,
)
from .model import GraphContext, Scorer, TrainingDiverged, load_checkpoint, save_checkpoint, train, write_trace
from .neighbors import (
    WEIGHT_MODES,
    NeighborFileError,
    build_neighbor_sets,
    build_relational_graph,
    cooccurrence_neighbors,
    load_neighbor_sets,
    save_latent,
    save_neighbor_sets,
)

log = logging.getLogger("hncr")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_INCOMPATIBLE = 0, 2, 3, 4

SEED_STREAMS = ("line_user", "line_item", "model", "ranking")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def derive_seed(root: int, stream: str) -> int:
    """Independent child seed of ``root`` for a named randomness stream."""
    ss = np.random.SeedSequence([root, SEED_STREAMS.index(stream) + 1])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@contextlib.contextmanager
def staged(path: Path):
    """Yield a temporary sibling path and move it onto ``path`` only on success."""
    tmp = path.with_name(f".{path.name}.partial")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text(path: Path, text: str) -> None:
    with staged(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def fingerprint(ds: Dataset) -> str:
    """Hash of the id index, split settings and positive rule of a prepared dataset."""
    h = hashlib.sha256()
    for ids in (ds.interactions.users.ids, ds.interactions.items.ids):
        h.update("\x1f".join(ids).encode())
        h.update(b"\x1e")
    h.update(json.dumps([ds.seed, list(ds.ratios), ds.interactions.positive_rule]).encode())
    h.update(np.ascontiguousarray(ds.split.train).tobytes())
    return h.hexdigest()[:16]


def load_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.path:
        raise CliError("no dataset path: set [data] path in the config or pass --data")
    if not Path(cfg.path).is_file():
        raise CliError(f"dataset file not found: {cfg.path}")
    try:
        records = load_ratings(cfg.path, cfg.format)
        inter = to_implicit(records, cfg.positive_rule)
        if len(inter.pairs) == 0:
            raise CliError(f"{cfg.path}: no positive interactions under rule {cfg.positive_rule!r}")
        ds = build_dataset(inter, cfg.ratios, cfg.seed)
    except (DataError, ValueError) as exc:
        if isinstance(exc, CliError):
            raise
        raise CliError(str(exc)) from exc
    if len(ds.split.train) == 0:
        raise CliError("training split is empty")
    ds.meta["fingerprint"] = fingerprint(ds)
    return ds


def neighbor_paths(out: Path):
    return out / "user_neighbors.txt", out / "item_neighbors.txt"


def resolve_neighbors(cfg: RunConfig, ds: Dataset, out: Path, weight_mode: str, neighbor_mode: str,
                      K_u: int, K_v: int, need: bool):
    """Neighbor sets for training or scoring.

    Co-occurrence sets are cheap and rebuilt from the training matrix;
    semantic sets are read from the files written by ``prepare`` and must
    match the requested settings and the dataset size.
    """
    if not need:
        return None, None
    if neighbor_mode == "cooccurrence":
        out_sets = []
        for side, K in (("user", K_u), ("item", K_v)):
            sets = cooccurrence_neighbors(build_relational_graph(ds.matrix, side, weight_mode), K)
            sets.seed = cfg.seed
            out_sets.append(sets)
        return tuple(out_sets)
    loaded = []
    for path, side, n, K in zip(neighbor_paths(out), ("user", "item"), (ds.n_users, ds.n_items), (K_u, K_v)):
        if not path.is_file():
            raise CliError(f"{path} not found; run 'hncr prepare' with the same config first")
        try:
            sets = load_neighbor_sets(path)
        except NeighborFileError as exc:
            raise CliError(str(exc)) from exc
        if sets.side != side or len(sets) != n:
            raise CliError(f"{path}: built for {len(sets)} {sets.side}s, dataset has {n} {side}s", EXIT_INCOMPATIBLE)
        want = (K, weight_mode, "semantic", derive_seed(cfg.seed, f"line_{side}"))
        got = (sets.K, sets.weight_mode, sets.mode, sets.seed)
        if got != want:
            raise CliError(
                f"{path}: neighbor file has K={got[0]} weight_mode={got[1]} mode={got[2]} seed={got[3]}, "
                f"config wants K={want[0]} weight_mode={want[1]} mode={want[2]} seed={want[3]}; rerun prepare",
                EXIT_INCOMPATIBLE,
            )
        loaded.append(sets)
    return tuple(loaded)


def checkpoint_path(args, out: Path) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / "model.npz"


def open_checkpoint(path: Path, ds: Dataset):
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}; run 'hncr train' first")
    try:
        params, hp, meta = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}") from exc
    if (params.n_users, params.n_items) != (ds.n_users, ds.n_items) or meta.get("fingerprint") != ds.meta["fingerprint"]:
        raise CliError(
            f"checkpoint {path} was trained on a different dataset or split "
            f"({params.n_users}x{params.n_items}, fingerprint {meta.get('fingerprint')}; "
            f"dataset {ds.n_users}x{ds.n_items}, fingerprint {ds.meta['fingerprint']})",
            EXIT_INCOMPATIBLE,
        )
    return params, hp, meta


def scorer_for(cfg, ds, out, params, hp, meta) -> Scorer:
    us, its = resolve_neighbors(
        cfg, ds, out, meta["weight_mode"], meta["neighbor_mode"], hp.K_u, hp.K_v, need=not hp.no_semantic
    )
    return Scorer(params, GraphContext.build(ds.matrix, us, its), hp)


def write_kv(path: Path, items: dict) -> None:
    write_text(path, "".join(f"{k} = {v}\n" for k, v in items.items()))


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return x


# ---------------------------------------------------------------- commands


def cmd_prepare(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg)
    nb = cfg.neighbors
    seeds = {s: derive_seed(cfg.seed, s) for s in SEED_STREAMS}
    results = {}
    for side, K, dim in (("user", nb.K_u, nb.l_u), ("item", nb.K_v, nb.l_v)):
        started = time.perf_counter()
        sets, latent = build_neighbor_sets(
            ds.matrix, side, K, nb.weight_mode, nb.neighbor_mode, dim=dim, epochs=nb.line_epochs,
            negatives=nb.line_negatives, seed=seeds[f"line_{side}"], accelerated=nb.accelerated,
        )
        log.info("%s neighbors built in %.1fs", side, time.perf_counter() - started)
        results[side] = (sets, latent)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, side in zip(neighbor_paths(out), ("user", "item")):
        sets, latent = results[side]
        with staged(path) as tmp:
            save_neighbor_sets(tmp, sets)
        if latent is not None:
            with staged(out / f"{side}_latent.txt") as tmp:
                save_latent(tmp, latent)
    manifest = {
        **ds.manifest(),
        "seeds": {"root": cfg.seed, **seeds},
        "weight_mode": nb.weight_mode,
        "neighbor_mode": nb.neighbor_mode,
        "K_u": nb.K_u,
        "K_v": nb.K_v,
        "l_u": nb.l_u,
        "l_v": nb.l_v,
        "dataset": cfg.path,
        "version": __version__,
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_text(out / "config.ini", dump_config(cfg))
    print(f"prepared {ds.n_users} users, {ds.n_items} items, {len(ds.train)} training pairs -> {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg)
    out = Path(cfg.out)
    hp = cfg.hyperparams()
    hp.seed = derive_seed(cfg.seed, "model")
    nb = cfg.neighbors
    us, its = resolve_neighbors(cfg, ds, out, nb.weight_mode, nb.neighbor_mode, nb.K_u, nb.K_v,
                                need=not hp.no_semantic)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.ini", dump_config(cfg))
    extra = {
        "seed": cfg.seed,
        "fingerprint": ds.meta["fingerprint"],
        "variant": cfg.variant,
        "weight_mode": nb.weight_mode,
        "neighbor_mode": nb.neighbor_mode,
    }

    def progress(s):
        log.info("epoch %d loss %.4f val_auc %.4f val_acc %.4f", s.epoch, s.loss, s.val_auc, s.val_acc)

    try:
        res = train(ds, us, its, hp, progress=progress)
    except TrainingDiverged as exc:
        with staged(out / "model.npz") as tmp:
            save_checkpoint(tmp, exc.params, hp, {**extra, "diverged": str(exc)})
        with staged(out / "trace.csv") as tmp:
            write_trace(tmp, exc.trace)
        raise CliError(f"training diverged: {exc}; last good parameters kept in {out / 'model.npz'}", EXIT_TRAIN)

    with staged(out / "model.npz") as tmp:
        save_checkpoint(tmp, res.params, hp, {**extra, "best_epoch": res.best_epoch, "seconds": res.seconds})
    with staged(out / "trace.csv") as tmp:
        write_trace(tmp, res.trace)
    best = next((s for s in res.trace if s.epoch == res.best_epoch), None)
    summary = {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "model_seed": hp.seed,
        "epochs_run": len(res.trace),
        "best_epoch": res.best_epoch,
        "best_val_auc": _fmt(best.val_auc) if best else "",
        "seconds": round(res.seconds, 3),
        "fingerprint": ds.meta["fingerprint"],
    }
    write_kv(out / "train_summary.txt", summary)
    print(f"trained {cfg.variant}: best epoch {res.best_epoch} of {len(res.trace)} -> {out / 'model.npz'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg)
    out = Path(cfg.out)
    ckpt = checkpoint_path(args, out)
    params, hp, meta = open_checkpoint(ckpt, ds)
    scorer = scorer_for(cfg, ds, out, params, hp, meta)

    test = ds.test
    scores = scorer.score(test.pairs[:, 0], test.pairs[:, 1])
    try:
        test_auc = auc(scores, test.labels)
    except UndefinedMetric:
        test_auc = math.nan
    test_acc = accuracy(scores, test.labels) if len(test) else math.nan

    ks = tuple(cfg.eval.ks)
    rank_seed = derive_seed(cfg.seed, "ranking")
    runs, run_seeds = [], []
    for r in range(cfg.eval.repeats):
        seed = int(np.random.SeedSequence([rank_seed, r]).generate_state(1, dtype=np.uint32)[0])
        tasks = build_ranking_tasks(ds.split.test, ds.interactions.pairs, ds.n_users, ds.n_items,
                                    cfg.eval.n_negatives, seed)
        runs.append(topk_report(tasks, scorer.score, ks))
        run_seeds.append(seed)

    out.mkdir(parents=True, exist_ok=True)
    split_seed, neg_seed = ds.meta["split_seed"], ds.meta["test_negatives_seed"]
    with staged(out / "ctr_report.csv") as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "split_seed", "negatives_seed"])
        w.writerow(["auc", _fmt(test_auc), split_seed, neg_seed])
        w.writerow(["accuracy", _fmt(test_acc), split_seed, neg_seed])
    with staged(out / "topk_report.csv") as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "precision", "recall", "precision_std", "recall_std", "repeats", "seeds"])
        for k in ks:
            p = np.array([r["precision"][k] for r in runs])
            rc = np.array([r["recall"][k] for r in runs])
            w.writerow([k, repr(float(p.mean())), repr(float(rc.mean())), repr(float(p.std())),
                        repr(float(rc.std())), len(runs), " ".join(map(str, run_seeds))])
    summary = {
        "variant": meta.get("variant", hp.variant),
        "checkpoint": str(ckpt),
        "fingerprint": ds.meta["fingerprint"],
        "root_seed": cfg.seed,
        "split_seed": split_seed,
        "test_negatives_seed": neg_seed,
        "model_seed": hp.seed,
        "ranking_seeds": " ".join(map(str, run_seeds)),
        "test_pairs": len(test),
        "test_auc": _fmt(test_auc),
        "test_accuracy": _fmt(test_acc),
        "ranking_users": runs[0]["users"] if runs else 0,
        "ranking_negatives": cfg.eval.n_negatives,
        "repeats": len(runs),
    }
    for k in ks:
        summary[f"precision@{k}"] = repr(float(np.mean([r["precision"][k] for r in runs])))
        summary[f"recall@{k}"] = repr(float(np.mean([r["recall"][k] for r in runs])))
    write_kv(out / "report.txt", summary)
    print(f"{summary['variant']}: test AUC {test_auc:.4f}, accuracy {test_acc:.4f} -> {out / 'report.txt'}")
    return EXIT_OK


def cmd_rank(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg)
    out = Path(cfg.out)
    params, hp, meta = open_checkpoint(checkpoint_path(args, out), ds)
    scorer = scorer_for(cfg, ds, out, params, hp, meta)
    top = args.top
    if top < 1:
        raise CliError("--top must be positive")
    users = range(ds.n_users)
    if args.users:
        index = ds.interactions.users
        missing = [u for u in args.users if u not in index]
        if missing:
            raise CliError(f"unknown user id(s): {', '.join(missing[:5])}")
        users = [index[u] for u in args.users]
    items = np.arange(ds.n_items)
    # every known positive is excluded, not only the training ones
    rated = user_positive_sets(ds.interactions.pairs, ds.n_users)
    out.mkdir(parents=True, exist_ok=True)
    with staged(out / "recommendations.tsv") as tmp, open(tmp, "w", encoding="utf-8") as fh:
        fh.write("user\trank\titem\tscore\n")
        for u in users:
            cand = np.setdiff1d(items, np.fromiter(rated[u], dtype=np.int64), assume_unique=True)
            s = scorer.score(np.full(cand.size, u), cand)
            order = np.lexsort((cand, -s))[:top]
            uid = ds.interactions.users.original(u)
            for rank, j in enumerate(order, start=1):
                fh.write(f"{uid}\t{rank}\t{ds.interactions.items.original(int(cand[j]))}\t{float(s[j])!r}\n")
    print(f"top-{top} recommendations for {len(users)} users -> {out / 'recommendations.tsv'}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    ds = load_dataset(cfg)
    out = Path(cfg.out)
    ckpt = checkpoint_path(args, out)
    model = None
    if ckpt.is_file():
        params, hp, meta = open_checkpoint(ckpt, ds)
        model = (params, scorer_for(cfg, ds, out, params, hp, meta))
    elif getattr(args, "checkpoint", None):
        raise CliError(f"checkpoint not found: {ckpt}")
    out.mkdir(parents=True, exist_ok=True)
    for side in ("user", "item"):
        with staged(out / f"degree_hist_{side}.csv") as tmp:
            write_histogram_csv(tmp, degree_histogram(ds.matrix.Y, side))
    written = ["degree_hist_user.csv", "degree_hist_item.csv"]
    if model is None:
        print("no checkpoint: wrote degree histograms only", file=sys.stderr)
    else:
        params, scorer = model
        test_users = np.unique(ds.split.test[:, 0]) if len(ds.split.test) else np.zeros(0, dtype=np.int64)
        bins = sparsity_bins(test_users, ds.matrix.user_degrees(), cfg.eval.n_bins)
        rows = sparsity_report(bins, ds.test, scorer.score)
        with staged(out / "sparsity.csv") as tmp:
            write_rows_csv(tmp, [{k: _fmt(v) for k, v in r.items()} for r in rows])
        final = scorer.representations()
        with staged(out / "hierarchy.csv") as tmp:
            write_rows_csv(tmp, hierarchy_bins(final, ds.matrix, cfg.eval.n_groups))
        with staged(out / "hierarchy_base.csv") as tmp:
            write_rows_csv(tmp, hierarchy_bins(params, ds.matrix, cfg.eval.n_groups))
        with staged(out / "scatter.csv") as tmp:
            write_rows_csv(tmp, embedding_scatter(final, cfg.eval.sample_n, seed=cfg.seed))
        written += ["sparsity.csv", "hierarchy.csv", "hierarchy_base.csv", "scatter.csv"]
    print(f"wrote {', '.join(written)} -> {out}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rank": cmd_rank,
    "analyze": cmd_analyze,
}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--data", metavar="PATH", help="ratings file (overrides [data] path)")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--backend", choices=BACKENDS)
    common.add_argument("--weight-mode", choices=WEIGHT_MODES)
    common.add_argument("--neighbor-mode", choices=NEIGHBOR_MODES)
    common.add_argument("--ablate", choices=ABLATIONS, action="append", help="repeatable")
    common.add_argument("--repeats", type=int, help="ranking repeats for evaluate")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=[],
                        help="override any config value, e.g. model.epochs=20")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="hncr", description="Hyperbolic neighbor-aggregating recommender: build, train, evaluate, analyze."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build relational graphs and neighbor sets")
    sub.add_parser("train", parents=[common], help="train a model and keep the best-validation checkpoint")
    for name, text in (("evaluate", "CTR and top-K metrics on the test split"),
                       ("analyze", "degree histograms, sparsity bins, hierarchy and scatter CSVs")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", metavar="PATH", help="defaults to OUT/model.npz")
    p = sub.add_parser("rank", parents=[common], help="write top-N recommendations per user")
    p.add_argument("--checkpoint", metavar="PATH", help="defaults to OUT/model.npz")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--users", nargs="*", metavar="ID", help="original user ids (default: all)")
    return parser


def effective_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.data:
        overrides.append(f"data.path={args.data}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out:
        overrides.append(f"run.out={args.out}")
    if args.backend:
        overrides.append(f"model.backend={args.backend}")
    if args.weight_mode:
        overrides.append(f"neighbors.weight_mode={args.weight_mode}")
    if args.neighbor_mode:
        overrides.append(f"neighbors.neighbor_mode={args.neighbor_mode}")
    if args.ablate:
        overrides.append("model.ablate=" + ",".join(dict.fromkeys(args.ablate)))
    if args.repeats is not None:
        overrides.append(f"eval.repeats={args.repeats}")
    return load_config(args.config, overrides).validate()


def thread_cap():
    """Context limiting BLAS/OpenMP pools to ``HNCR_THREADS`` workers when set."""
    raw = os.environ.get("HNCR_THREADS", "").strip()
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(f"HNCR_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = effective_config(args)
        with thread_cap():
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"hncr {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CliError as exc:
        print(f"hncr {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
