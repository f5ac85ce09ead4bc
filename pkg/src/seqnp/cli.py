"""Command-line surface.

Six subcommands share one flat config file: `synth` writes a generated
interaction TSV, `ingest` parses a TSV into a cached sequence store,
`train` fits a model with checkpointing and a per-epoch curve CSV, `eval`
scores a checkpoint against held-out users, `predict` ranks the catalog
for an ad-hoc item window, and `verify` runs the correctness battery.

Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import pathlib
import sys

import numpy as np

from .config import ConfigError, RunConfig, parse_config, render_echo
from .corpus import (Catalog, CorpusError, SynthConfig, build_sequences,
                     load_interactions, load_sequences, save_sequences,
                     split_users, synth_generate, window, write_interactions)
from .decoder import top_k
from .evalkit import (ModelRanker, PopularityRanker, RandomRanker,
                      evaluate_sequences, popularity_counts, prefix_windows)
from .model import Model
from .trainer import (CheckpointError, TrainConfig, load_checkpoint,
                      model_from_checkpoint, restore_rng, save_checkpoint,
                      train)

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4


class _Abort(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _load_run_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig(train=TrainConfig())
    try:
        return parse_config(args.config)
    except FileNotFoundError:
        raise _Abort(EXIT_CONFIG, f"config file not found: {args.config}")
    except ConfigError as exc:
        raise _Abort(EXIT_CONFIG, f"config error: {exc}")


def _write_echo(run: RunConfig, command: str):
    outdir = pathlib.Path(run.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{command}.echo.cfg"
    path.write_text(render_echo(run), encoding="utf-8")
    return path


def _load_corpus(run: RunConfig):
    """Sequences + catalog from the cache if present, else from raw data."""
    cfg = run.train
    if run.cache and pathlib.Path(run.cache).exists():
        try:
            return load_sequences(run.cache)
        except (CorpusError, OSError, ValueError) as exc:
            raise _Abort(EXIT_DATA, f"cannot read cache {run.cache}: {exc}")
    if not run.data:
        raise _Abort(EXIT_DATA, "no usable input: set `data` or `cache`")
    try:
        interactions = load_interactions(run.data, feedback=cfg.feedback,
                                         rating_max=cfg.rating_max)
        catalog = Catalog()
        sequences = build_sequences(interactions, catalog, cfg.cap)
    except (CorpusError, OSError) as exc:
        raise _Abort(EXIT_DATA, f"cannot ingest {run.data}: {exc}")
    return catalog, sequences


def _split_sequences(catalog, sequences, run: RunConfig):
    cfg = run.train
    try:
        splits = split_users(catalog, cfg.ratios(),
                             np.random.default_rng(cfg.seed))
    except CorpusError as exc:
        raise _Abort(EXIT_DATA, str(exc))
    by_user = {s.user_index: s for s in sequences}
    out = {}
    for name, indices in splits.items():
        out[name] = [by_user[u] for u in indices if u in by_user]
    return out


# subcommands --------------------------------------------------------------


def _cmd_synth(args) -> int:
    run = _load_run_config(args)
    scfg = SynthConfig(users=run.synth_users, items=run.synth_items,
                       genres=run.synth_genres, seq_len=run.synth_seq_len,
                       p_stay=run.synth_p_stay,
                       concentration=run.synth_concentration,
                       popularity_skew=run.synth_popularity_skew,
                       feedback=run.train.feedback)
    try:
        scfg.validate()
    except ValueError as exc:
        raise _Abort(EXIT_CONFIG, f"config error: {exc}")
    rng = np.random.default_rng(run.train.seed)
    interactions = synth_generate(scfg, rng)
    out = args.out or str(pathlib.Path(run.outdir) / "synth.tsv")
    pathlib.Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_interactions(out, interactions)
    _write_echo(run, "synth")
    print(f"wrote {len(interactions)} interactions for {scfg.users} users "
          f"over {scfg.items} items to {out}")
    return EXIT_OK


def _cmd_ingest(args) -> int:
    run = _load_run_config(args)
    if not run.data:
        raise _Abort(EXIT_DATA, "ingest needs a `data` path in the config")
    cfg = run.train
    try:
        interactions = load_interactions(run.data, feedback=cfg.feedback,
                                         rating_max=cfg.rating_max)
        catalog = Catalog()
        sequences = build_sequences(interactions, catalog, cfg.cap)
    except (CorpusError, OSError) as exc:
        raise _Abort(EXIT_DATA, f"cannot ingest {run.data}: {exc}")
    cache = run.cache or str(pathlib.Path(run.outdir) / "sequences.json")
    pathlib.Path(cache).parent.mkdir(parents=True, exist_ok=True)
    save_sequences(cache, catalog, sequences)
    _write_echo(run, "ingest")
    print(f"ingested {len(interactions)} interactions: "
          f"{catalog.user_count} users, {catalog.item_count} items, "
          f"cap {cfg.cap}; cached to {cache}")
    return EXIT_OK


def _cmd_train(args) -> int:
    run = _load_run_config(args)
    cfg = run.train
    catalog, sequences = _load_corpus(run)
    split = _split_sequences(catalog, sequences, run)
    user_windows = [(s.user_index, window(s, cfg.window, cfg.basket))
                    for s in split["train"]]
    user_windows = [(u, w) for u, w in user_windows if w]
    if not user_windows:
        raise _Abort(EXIT_DATA, "no trainable user sequences after the split")

    outdir = pathlib.Path(run.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run.checkpoint or str(outdir / "model.ckpt")
    curve_path = outdir / "curve.csv"

    rng = np.random.default_rng(cfg.seed)
    history = []
    start_epoch = 0
    model = None
    if args.resume:
        try:
            ckpt = load_checkpoint(ckpt_path)
            model = model_from_checkpoint(ckpt, cfg)
            restore_rng(ckpt, rng)
            history = ckpt.history
            start_epoch = ckpt.epoch
        except FileNotFoundError:
            raise _Abort(EXIT_DATA, f"no checkpoint to resume at {ckpt_path}")
        except CheckpointError as exc:
            raise _Abort(EXIT_DATA, f"cannot resume: {exc}")
        print(f"resuming from epoch {start_epoch}")
    if model is None:
        model = Model(cfg, catalog.item_count, catalog.user_count,
                      np.random.default_rng(cfg.seed))

    trained_users = set(u for u, _ in user_windows)
    val_eval = None
    if split["validation"]:
        val_seqs = split["validation"]

        def val_eval(m):
            ranker = ModelRanker(m, trained_users, cfg.new_user_embedding)
            report = evaluate_sequences(ranker, val_seqs, cfg.window,
                                        cfg.basket, (10,),
                                        cfg.eval_context_mode,
                                        cfg.eval_context_size,
                                        cfg.exclude_seen)
            return report.metrics[10]["ndcg"]

    running = list(history)
    with open(curve_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "nll", "wass", "total", "val-ndcg@10"])
        for row in running:
            writer.writerow([row.epoch, repr(row.nll), repr(row.wass),
                             repr(row.total), repr(row.val_ndcg)])

        def on_epoch(row):
            running.append(row)
            writer.writerow([row.epoch, repr(row.nll), repr(row.wass),
                             repr(row.total), repr(row.val_ndcg)])
            fh.flush()
            save_checkpoint(ckpt_path, model, cfg, rng, row.epoch,
                            history_rows=running)
            print(f"epoch {row.epoch}: nll {row.nll:.6f} wass {row.wass:.6f} "
                  f"total {row.total:.6f} val-ndcg@10 {row.val_ndcg:.4f}")

        history_out = train(model, user_windows, cfg, rng, val_eval=val_eval,
                            on_epoch=on_epoch, start_epoch=start_epoch,
                            history=history)

    save_checkpoint(ckpt_path, model, cfg, rng, len(history_out.rows),
                    history_rows=history_out.rows)
    _write_echo(run, "train")
    tag = "early stop" if history_out.stopped_early else "epoch budget"
    print(f"finished after {len(history_out.rows)} epochs ({tag}); "
          f"checkpoint {ckpt_path}, curve {curve_path}")
    return EXIT_OK


def _load_model(run: RunConfig, default_name="model.ckpt"):
    path = run.checkpoint or str(pathlib.Path(run.outdir) / default_name)
    try:
        ckpt = load_checkpoint(path)
        return model_from_checkpoint(ckpt, run.train, strict=False), ckpt
    except FileNotFoundError:
        raise _Abort(EXIT_DATA, f"checkpoint not found: {path}")
    except CheckpointError as exc:
        raise _Abort(EXIT_DATA, f"cannot load checkpoint {path}: {exc}")


def _cmd_eval(args) -> int:
    run = _load_run_config(args)
    cfg = run.train
    catalog, sequences = _load_corpus(run)
    split = _split_sequences(catalog, sequences, run)
    split_name = args.split or run.eval_split
    if split_name not in split:
        raise _Abort(EXIT_CONFIG,
                     f"config error: eval_split must be one of {sorted(split)}")
    target_seqs = split[split_name]
    if not target_seqs:
        raise _Abort(EXIT_DATA, f"split {split_name!r} holds no sequences")

    model, _ = _load_model(run)
    trained = set(s.user_index for s in split["train"])
    rankers = {"model": ModelRanker(model, trained, cfg.new_user_embedding)}
    if args.baselines:
        counts = popularity_counts(split["train"], catalog.item_count)
        rankers["popularity"] = PopularityRanker(counts)
        rankers["random"] = RandomRanker(catalog.item_count,
                                         np.random.default_rng(cfg.seed))
    outdir = pathlib.Path(run.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, ranker in rankers.items():
        report = evaluate_sequences(ranker, target_seqs, cfg.window,
                                    cfg.basket, cfg.cutoffs,
                                    cfg.eval_context_mode,
                                    cfg.eval_context_size, cfg.exclude_seen)
        print(f"== {name} on {split_name} ==")
        print(report.format_table())
        line = report.to_json_line()
        print(line)
        (outdir / f"eval.{name}.{split_name}.json").write_text(
            line + "\n", encoding="utf-8")
    _write_echo(run, "eval")
    return EXIT_OK


def _cmd_predict(args) -> int:
    run = _load_run_config(args)
    cfg = run.train
    catalog, _ = _load_corpus(run)
    model, _ = _load_model(run)

    tokens = [t.strip() for t in args.items.split(",") if t.strip()]
    if not tokens:
        raise _Abort(EXIT_DATA, "--items must name at least one item")
    indices = []
    for tok in tokens:
        idx = catalog.item_to_index.get(tok)
        if idx is None:
            raise _Abort(EXIT_DATA, f"unknown item id: {tok}")
        indices.append(idx)

    windows = prefix_windows(np.asarray(indices, dtype=np.int64), cfg.window)
    query = windows[-1]
    take = min(cfg.eval_context_size, windows.shape[0]) \
        if cfg.eval_context_mode == "clamped-episode" else 1
    context = windows[-take:]

    if args.user is not None and args.user in catalog.user_to_index:
        e_u = model.tables.user_table.data[catalog.user_to_index[args.user]]
    else:
        e_u = np.zeros(cfg.embed_dim)
    score = model.score_query(context, query, e_u)
    exclude = tuple(int(i) for i in query if i != 0) if cfg.exclude_seen else ()
    ranked = top_k(score.y, args.k, exclude=exclude)
    ids = [catalog.index_to_item[int(i)] for i in ranked]
    print(",".join(ids))
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import battery_report, run_battery
    results = run_battery(log=None if args.quiet else print)
    if args.quiet:
        print(battery_report(results), end="")
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqnp",
        description="Sequential recommender with episodic latent conditioning")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.set_defaults(fn=fn)
        return p

    p = add("synth", _cmd_synth, "generate a synthetic interaction TSV")
    p.add_argument("--out", help="output TSV path (default <outdir>/synth.tsv)")

    add("ingest", _cmd_ingest, "parse an interaction TSV into a sequence cache")

    p = add("train", _cmd_train, "train a model and write curve + checkpoint")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the config")

    p = add("eval", _cmd_eval, "evaluate a checkpoint on a held-out split")
    p.add_argument("--split", choices=("train", "validation", "test"),
                   help="override the eval_split config key")
    p.add_argument("--baselines", action="store_true",
                   help="also score popularity and random baselines")

    p = add("predict", _cmd_predict, "rank the catalog for an item window")
    p.add_argument("--items", required=True,
                   help="comma-separated item ids, oldest first")
    p.add_argument("--k", type=int, default=10, help="list length")
    p.add_argument("--user", help="optional user id for the profile embedding")

    p = add("verify", _cmd_verify, "run the correctness battery")
    p.add_argument("--quiet", action="store_true",
                   help="print only the final report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _Abort as exc:
        print(f"seqnp {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
