"""Command-line entry point: ingest -> train -> eval / similar / analogy / impute / export.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import catalog as cat
from . import sessions as ses
from .coldstart import ImputationPolicy, impute_cold_rows
from .errors import DataValidationError, DivergenceError
from .evaluator import (FILTERED, MODEL_SCORE, RAW, EvalReport, analogy, cold_start_eval, config_hash,
                        hits_at_k, market_similarity, most_similar, reports_csv, reports_table,
                        write_text_atomic)
from .manifest import RunManifest
from .model import Checkpoint, export_tsv, load_checkpoint, save_checkpoint
from .trainer import TrainState, checkpoint_of, load_config, train

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4

log = logging.getLogger("hotelemb")


class UsageError(Exception):
    pass


def _need_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def _need_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _args_hash(args, exclude=("out", "func", "verbose", "audit")):
    """Hash of the options that shape results; output locations are left out."""
    return config_hash({k: v for k, v in vars(args).items() if k not in exclude})


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


# -- gen-synthetic ------------------------------------------------------------

def cmd_gen_synthetic(args):
    from .synthetic import generate
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = generate(args.hotels, args.markets, args.clusters, args.sessions, args.seed,
                     args.p_market, args.p_cluster, popularity_sigma=args.popularity_sigma)
    ses.write_click_log(out / "clicks.csv", world.events)
    cat.write_catalog(out / "catalog.csv", world.records, world.schema)
    (out / "schema.txt").write_text(world.schema.to_text(), encoding="utf-8")
    truth = {"sessions": len(world.sessions), "clicks": len(world.events), "hotels": len(world.records),
             "markets": args.markets, "clusters": world.cluster_of, "generator": world.params}
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True), encoding="utf-8")
    m = RunManifest("gen-synthetic", config_hash(world.params), seeds={"generator": args.seed})
    for name in ("clicks.csv", "catalog.csv", "schema.txt", "truth.json"):
        m.add_artifact(name, out / name)
    m.write(out)
    print(f"wrote {len(world.sessions)} sessions, {len(world.events)} clicks, "
          f"{len(world.records)} hotels to {out}")


# -- ingest -------------------------------------------------------------------

def cmd_ingest(args):
    clicks = _need_file(args.clicks, "click log")
    catalog_path = _need_file(args.catalog, "catalog")
    schema_path = _need_file(args.schema, "schema")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = cat.load_schema(schema_path)
    records = cat.load_catalog(catalog_path, schema)
    events = ses.load_click_log(clicks)
    sessions = ses.sessionize(events, args.gap_days)
    if not sessions:
        log.warning("click log produced no sessions")
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if sessions:
        corpus = ses.split_corpus(sessions, ratios, args.seed)
    else:
        corpus = ses.SessionCorpus([], [], [], args.seed, ratios)

    held = []
    if args.holdout_frac > 0:
        rng = np.random.default_rng(args.holdout_seed)
        ids = sorted(r.hotel_id for r in records)
        n = int(round(args.holdout_frac * len(ids)))
        held = sorted(rng.choice(ids, size=n, replace=False).tolist())
        corpus.train = strip_hotels(corpus.train, set(held))
        (out / "heldout.txt").write_text("\n".join(held) + ("\n" if held else ""), encoding="utf-8")

    vocab = cat.build_vocab(records, corpus.train)
    enc = corpus.encode(vocab)
    amen, geo = cat.encode_catalog(records, schema, vocab)
    enc.save(out / "corpus.npz")
    np.savez(out / "inputs.npz", amenities=amen.astype(np.float32), geo=geo.astype(np.float32))
    write_vocab(out / "vocab.tsv", vocab)
    shutil.copyfile(catalog_path, out / "catalog.csv")
    shutil.copyfile(schema_path, out / "schema.txt")
    if held:
        # raw sessions are kept so cold-start evaluation can find the held-out clicks
        with (out / "all_sessions.txt").open("w", encoding="utf-8") as fh:
            for s in sessions:
                fh.write(" ".join(s) + "\n")

    n_pairs = sum(ses.pair_count(len(s), args.window) for s in enc.train)
    summary = {"sessions": len(sessions), "train": len(enc.train), "validation": len(enc.validation),
               "test": len(enc.test), "pairs": n_pairs, "hotels": len(vocab),
               "cold_start": int(vocab.cold_start.sum()), "held_out": len(held)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    m = RunManifest("ingest", _args_hash(args), seeds={"split": args.seed, "holdout": args.holdout_seed})
    m.add_input("clicks", clicks)
    m.add_input("catalog", catalog_path)
    m.add_input("schema", schema_path)
    for name in ("corpus.npz", "inputs.npz", "vocab.tsv", "summary.json"):
        m.add_artifact(name, out / name)
    m.extra = summary
    m.write(out)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))


def strip_hotels(sessions, drop):
    """Remove clicks on ``drop`` hotels, re-collapse repeats, keep sessions of length >= 2."""
    out = []
    for s in sessions:
        kept = []
        for h in s:
            if h in drop or (kept and kept[-1] == h):
                continue
            kept.append(h)
        if len(kept) >= 2:
            out.append(kept)
    return out


def write_vocab(path, vocab):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["index", "hotel_id", "market_id", "frequency", "cold_start"])
        for i, h in enumerate(vocab.hotel_ids):
            w.writerow([i, h, vocab.markets[vocab.market_of[i]], int(vocab.frequencies[i]),
                        int(vocab.frequencies[i] == 0)])


def read_vocab(path):
    ids, markets, freq = [], [], []
    with Path(path).open(encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        next(r)
        for row in r:
            ids.append(row[1])
            markets.append(row[2])
            freq.append(int(row[3]))
    names = sorted(set(markets))
    idx = {m: i for i, m in enumerate(names)}
    return cat.Vocabulary(ids, np.array(freq), np.array([idx[m] for m in markets]), names)


def load_corpus_dir(path):
    d = _need_dir(path, "corpus")
    for name in ("corpus.npz", "inputs.npz", "vocab.tsv"):
        _need_file(d / name, f"corpus file {name}")
    corpus = ses.SessionCorpus.load(d / "corpus.npz")
    with np.load(d / "inputs.npz") as z:
        amen, geo = z["amenities"], z["geo"]
    return d, corpus, read_vocab(d / "vocab.tsv"), amen, geo


# -- train --------------------------------------------------------------------

_TRAIN_FLAGS = ("mode", "learning_rate", "decay_rate", "decay_steps", "batch_size", "epochs", "max_pairs",
                "window", "negatives", "optimizer", "init_seed", "shuffle_seed", "sampler_seed",
                "checkpoint_every", "eval_every", "log_every")


def cmd_train(args):
    d, corpus, vocab, amen, geo = load_corpus_dir(args.corpus)
    overrides = {k: getattr(args, k) for k in _TRAIN_FLAGS}
    if args.dims:
        overrides["dims"] = tuple(_ints(args.dims))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config:
        _need_file(args.config, "config file")
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    state = None
    if args.resume:
        state = TrainState.from_checkpoint(load_checkpoint(_need_file(args.resume, "checkpoint")))
    else:
        (out / "metrics.jsonl").unlink(missing_ok=True)
    state = train(corpus, vocab, cfg, amen, geo, out_dir=out, state=state, stop_at_step=args.stop_at_step)
    from .plotting import plot_training
    if state.history:
        plot_training(state.history, out / "training.png")
    m = RunManifest("train", config_hash(cfg.to_dict()),
                    seeds={k: getattr(cfg, k) for k in ("init_seed", "shuffle_seed", "sampler_seed")})
    m.add_input("corpus", d / "corpus.npz")
    m.add_input("inputs", d / "inputs.npz")
    for name in ("checkpoint.ckpt", "metrics.jsonl", "config.txt", "training.png", "best.ckpt"):
        if (out / name).exists():
            m.add_artifact(name, out / name)
    m.extra = {"steps": state.step, "final_loss": state.running_loss}
    m.write(out)
    print(f"trained {state.step} steps, running loss {state.running_loss:.4f}, "
          f"checkpoint {out / 'checkpoint.ckpt'}")


# -- eval ---------------------------------------------------------------------

def _load_ckpt(path):
    return load_checkpoint(_need_file(path, "checkpoint"))


def _scorer(vector):
    return MODEL_SCORE if vector == MODEL_SCORE else f"cosine:{vector}"


def cmd_eval(args):
    d, corpus, vocab_c, amen, geo = load_corpus_dir(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ks = _ints(args.k)
    from . import plotting
    m = RunManifest("eval", _args_hash(args))
    reports = []
    if args.task == "hits":
        ckpt = _load_ckpt(args.checkpoint[0])
        pairs = ses.next_click_pairs(getattr(corpus, args.split))
        for cand in args.candidates.split(","):
            for vec in args.vector.split(","):
                reports.append(hits_at_k(ckpt.params, pairs, ks, ckpt.vocab.market_of, cand, _scorer(vec),
                                         ckpt.amenities, ckpt.geo))
    elif args.task == "coldstart":
        held_path = _need_file(d / "heldout.txt", "held-out list (ingest with --holdout-frac)")
        held_ids = [h for h in held_path.read_text().split() if h]
        schema = cat.load_schema(d / "schema.txt")
        records = cat.load_catalog(d / "catalog.csv", schema)
        raw = [line.split() for line in (d / "all_sessions.txt").read_text().splitlines() if line.strip()]
        variants = {}
        for path in args.checkpoint:
            ckpt = _load_ckpt(path)
            held = [ckpt.vocab.index(h) for h in held_ids]
            imputed, _ = impute_cold_rows(ckpt.params, ckpt.vocab, records, schema, targets=held)
            variants[f"{ckpt.params.mode}_random"] = ckpt.params
            variants[f"{ckpt.params.mode}_imputed"] = imputed
        pairs = ses.next_click_pairs([[ckpt.vocab.index(h) for h in s] for s in raw])
        res = cold_start_eval(held, pairs, variants, ckpt.vocab.market_of, corpus.train, ks,
                              ckpt.amenities, ckpt.geo)
        reports = list(res.values())
    elif args.task == "similarity":
        ckpt = _load_ckpt(args.checkpoint[0])
        emb = ckpt.embeddings()
        names = args.markets.split(",") if args.markets else list(ckpt.vocab.markets)
        try:
            midx = [ckpt.vocab.markets.index(n) for n in names]
        except ValueError as exc:
            raise DataValidationError(f"unknown market: {exc}") from None
        vec = args.vector.split(",")[0]
        if vec == MODEL_SCORE:
            vec = "enriched"
        sim = market_similarity(emb, ckpt.vocab.market_of, midx, vec, names=names, seed=args.seed)
        write_text_atomic(out / f"market_similarity_{vec}.csv", sim.to_csv())
        fig = plotting.plot_market_similarity(sim, out / f"market_similarity_{vec}.png")
        m.add_artifact("market_similarity.csv", out / f"market_similarity_{vec}.csv")
        m.add_artifact("market_similarity.png", fig)
        m.write(out)
        print(f"mean diagonal - mean off-diagonal = {sim.separation():.4f}")
        print(sim.to_csv(), end="")
        return
    else:
        raise UsageError(f"unknown task {args.task!r}")
    h = _args_hash(args)
    for r in reports:
        r.config_hash = h
    write_text_atomic(out / f"{args.task}.csv", reports_csv(reports))
    table = reports_table(reports)
    write_text_atomic(out / f"{args.task}.txt", table)
    fig = plotting.plot_hits(reports, out / f"{args.task}.png", title=args.task)
    for name in (f"{args.task}.csv", f"{args.task}.txt"):
        m.add_artifact(name, out / name)
    m.add_artifact(f"{args.task}.png", fig)
    m.write(out)
    print(table, end="")


# -- queries ------------------------------------------------------------------

def _query_manifest(args, command, ckpt_path):
    m = RunManifest(command, _args_hash(args))
    m.add_input("checkpoint", ckpt_path)
    m.write(Path(ckpt_path).parent)


def cmd_similar(args):
    ckpt = _load_ckpt(args.checkpoint)
    res = most_similar(ckpt.embeddings(), ckpt.vocab, args.hotel, args.k, args.scope, args.vector)
    for rank, (h, c) in enumerate(res, start=1):
        print(f"{rank}\t{h}\t{c:.6f}")
    _query_manifest(args, "similar", args.checkpoint)


def cmd_analogy(args):
    ckpt = _load_ckpt(args.checkpoint)
    res = analogy(ckpt.embeddings(), ckpt.vocab, args.h1, args.h2, args.h3, args.k, args.vector)
    for rank, h in enumerate(res, start=1):
        print(f"{rank}\t{h}")
    _query_manifest(args, "analogy", args.checkpoint)


def cmd_impute(args):
    ckpt_path = _need_file(args.checkpoint, "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    schema = cat.load_schema(_need_file(args.schema, "schema"))
    records = cat.load_catalog(_need_file(args.catalog, "catalog"), schema)
    targets = None
    if args.hotels:
        targets = [ckpt.vocab.index(h) for h in Path(args.hotels).read_text().split()]
    policy = ImputationPolicy(radius_km=args.radius_km, pool_size=args.pool_size)
    params, audit = impute_cold_rows(ckpt.params, ckpt.vocab, records, schema, policy, targets)
    out = Path(args.out)
    save_checkpoint(out, Checkpoint(params, ckpt.vocab, ckpt.amenities, ckpt.geo, ckpt.state))
    audit_path = Path(args.audit) if args.audit else out.with_suffix(".audit.csv")
    with audit_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["target", "pool_size", "fallback"], lineterminator="\n")
        w.writeheader()
        w.writerows(audit)
    m = RunManifest("impute", _args_hash(args))
    m.add_input("checkpoint", ckpt_path)
    m.add_artifact("checkpoint", out)
    m.add_artifact("audit", audit_path)
    m.write(out.parent)
    print(f"imputed {len(audit)} click rows -> {out}")


def cmd_export(args):
    ckpt_path = _need_file(args.checkpoint, "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    blocks = [b for b in (args.blocks or "").split(",") if b]
    export_tsv(args.out, ckpt.vocab, ckpt.embeddings(), blocks)
    m = RunManifest("export", _args_hash(args))
    m.add_input("checkpoint", ckpt_path)
    m.add_artifact("embeddings", args.out)
    m.write(Path(args.out).parent)
    print(f"exported {len(ckpt.vocab)} hotels -> {args.out}")


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hotelemb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic click log + catalog + schema")
    g.add_argument("--out", required=True)
    g.add_argument("--hotels", type=int, default=1000)
    g.add_argument("--markets", type=int, default=25)
    g.add_argument("--clusters", type=int, default=8)
    g.add_argument("--sessions", type=int, default=50000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--p-market", type=float, default=0.9)
    g.add_argument("--p-cluster", type=float, default=0.7)
    g.add_argument("--popularity-sigma", type=float, default=1.5)
    g.set_defaults(func=cmd_gen_synthetic)

    i = sub.add_parser("ingest", help="sessionize clicks, split, build vocabulary and inputs")
    i.add_argument("--clicks", required=True)
    i.add_argument("--catalog", required=True)
    i.add_argument("--schema", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--gap-days", type=float, default=7)
    i.add_argument("--ratios", default="0.8,0.1,0.1")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--window", type=int, default=ses.DEFAULT_WINDOW)
    i.add_argument("--holdout-frac", type=float, default=0.0,
                   help="fraction of hotels removed from training sessions (cold-start protocol)")
    i.add_argument("--holdout-seed", type=int, default=0)
    i.set_defaults(func=cmd_ingest)

    t = sub.add_parser("train", help="train a model on an ingested corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--stop-at-step", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--mode", choices=["enriched", "session_only"])
    t.add_argument("--dims")
    t.add_argument("--lr", dest="learning_rate", type=float)
    for flag, typ in (("decay-rate", float), ("decay-steps", int), ("batch-size", int), ("epochs", int),
                      ("max-pairs", int), ("window", int), ("negatives", int), ("init-seed", int),
                      ("shuffle-seed", int), ("sampler-seed", int), ("checkpoint-every", int),
                      ("eval-every", int), ("log-every", int)):
        t.add_argument(f"--{flag}", type=typ)
    t.add_argument("--optimizer", choices=["sgd", "adagrad", "adam"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="hits@k, cold-start or market-similarity reports")
    e.add_argument("--checkpoint", required=True, action="append")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--task", choices=["hits", "coldstart", "similarity"], default="hits")
    e.add_argument("--candidates", default=FILTERED, help="raw, filtered or both comma-separated")
    e.add_argument("--vector", default=MODEL_SCORE,
                   help="model_score or a vector kind (click, concatenated, enriched, ...); comma list")
    e.add_argument("--k", default="10,100")
    e.add_argument("--split", choices=["train", "validation", "test"], default="test")
    e.add_argument("--markets", help="comma-separated market ids for --task similarity")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("similar", help="top-k most similar hotels")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--hotel", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--scope", choices=["all", "market"], default="all")
    s.add_argument("--vector", default="enriched")
    s.set_defaults(func=cmd_similar)

    a = sub.add_parser("analogy", help="h1 is to h2 as h3 is to ?")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--h1", required=True)
    a.add_argument("--h2", required=True)
    a.add_argument("--h3", required=True)
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--vector", default="enriched")
    a.set_defaults(func=cmd_analogy)

    m = sub.add_parser("impute", help="impute click rows for cold-start hotels")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--catalog", required=True)
    m.add_argument("--schema", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--audit")
    m.add_argument("--hotels", help="file listing hotel ids to impute (default: all cold-start)")
    m.add_argument("--radius-km", type=float, default=5.0)
    m.add_argument("--pool-size", type=int, default=100)
    m.set_defaults(func=cmd_impute)

    x = sub.add_parser("export", help="write embeddings as TSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--blocks", help="extra blocks: click,amenity,geo,concatenated")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyError as exc:
        print(f"data error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
