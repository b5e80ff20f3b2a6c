"""Command-line entry point: prepare, synth, train, evaluate, predict, grid-search."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np
import torch

from wgpnn import __version__
from wgpnn.config import FULL_SCALE_GRID, TrainConfig, expand_grid, read_config_file, write_config_file
from wgpnn.errors import ConfigError, DataFormatError, UnknownTokenError, WGPNNError
from wgpnn.gp import DTYPE, gp_posterior
from wgpnn.graph import (
    build_slices,
    parse_quadruples,
    read_dictionary,
    read_quadruples,
    time_unit,
    write_dictionary,
    write_quadruples,
    write_slices,
)
from wgpnn.io import file_sha256, load_checkpoint, read_json, save_checkpoint, write_json, write_report
from wgpnn.neural import WindowBatch
from wgpnn.synth import PeriodicGenerator
from wgpnn.training import TKGData, Trainer, grid_search, query_offset, split_by_time

log = logging.getLogger("wgpnn")

PREPARED_FILES = ("entities.tsv", "predicates.tsv", "train.txt", "valid.txt", "test.txt", "slices.txt", "filter.tsv", "meta.json")


def _write_manifest(out_dir, command, argv, config=None, inputs=(), outputs=(), extra=None, timings=None):
    """Write ``manifest.json`` (deterministic) and ``timings.json`` (wall-clock, kept apart)."""
    manifest = {
        "command": command,
        "argv": argv,
        "code_version": __version__,
        "config": config,
        "seed": (config or {}).get("seed"),
        "inputs": {os.path.basename(p): file_sha256(p) for p in inputs},
        "outputs": {os.path.relpath(p, out_dir): file_sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    if timings is not None:
        write_json(os.path.join(out_dir, "timings.json"), timings)


def _relargs(argv):
    return [os.path.basename(a) if os.path.sep in a else a for a in argv]


def load_prepared(prepared_dir) -> tuple[TKGData, dict]:
    missing = [f for f in PREPARED_FILES if not os.path.exists(os.path.join(prepared_dir, f))]
    if missing:
        raise ConfigError(f"{prepared_dir}: missing prepared artifacts {missing}; run 'wgpnn prepare' first")
    meta = read_json(os.path.join(prepared_dir, "meta.json"))
    path = lambda name: os.path.join(prepared_dir, name)  # noqa: E731
    data = TKGData(
        meta["num_entities"],
        meta["num_predicates"],
        read_quadruples(path("train.txt")),
        read_quadruples(path("valid.txt")),
        read_quadruples(path("test.txt")),
        unit=meta["unit"],
        entities=read_dictionary(path("entities.tsv")),
        predicates=read_dictionary(path("predicates.tsv")),
    )
    return data, meta


def resolve_config(args) -> TrainConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return TrainConfig.from_mapping(values)


def cmd_synth(args):
    gen = PeriodicGenerator(args.entities, args.predicates, args.period, args.horizon, args.noise, args.seed, args.time_step)
    gen.write(args.output)
    print(f"wrote {args.output}: {args.entities * args.predicates * args.horizon} regular events, noise rate {args.noise}")


def cmd_prepare(args):
    os.makedirs(args.output, exist_ok=True)
    entities, predicates = {}, {}
    if args.train or args.valid or args.test:
        if not (args.train and args.valid and args.test):
            raise ConfigError("--train, --valid and --test must be given together")
        splits = []
        for path in (args.train, args.valid, args.test):
            with open(path, encoding="utf-8") as fh:
                quads, entities, predicates = parse_quadruples(fh, entities, predicates)
            splits.append(quads)
        train, valid, test = splits
        for (a, b), (name_a, name_b) in (((train, valid), ("train", "valid")), ((valid, test), ("valid", "test"))):
            if a and b and max(q.timestamp for q in a) >= min(q.timestamp for q in b):
                raise DataFormatError(f"{name_a} and {name_b} timestamps overlap")
        inputs = [args.train, args.valid, args.test]
    else:
        if not args.raw:
            raise ConfigError("give raw TSV files or --train/--valid/--test")
        quads = []
        for path in args.raw:
            with open(path, encoding="utf-8") as fh:
                more, entities, predicates = parse_quadruples(fh, entities, predicates)
            quads.extend(more)
        quads.sort(key=lambda q: q.timestamp)
        train, valid, test = split_by_time(quads)
        inputs = list(args.raw)
    all_quads = train + valid + test
    data = TKGData(len(entities), len(predicates), train, valid, test, unit=time_unit(q.timestamp for q in all_quads))
    tau_max = data.tau_max(window=1)
    slices = build_slices(sorted(all_quads, key=lambda q: q.timestamp))

    out = lambda name: os.path.join(args.output, name)  # noqa: E731
    write_dictionary(out("entities.tsv"), entities)
    write_dictionary(out("predicates.tsv"), predicates)
    for name, split in (("train", train), ("valid", valid), ("test", test)):
        write_quadruples(out(f"{name}.txt"), split)
    write_slices(out("slices.txt"), slices)
    with open(out("filter.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("subject\tpredicate\ttimestamp\tobjects\n")
        for (s, p, t), objs in sorted(data.filter_index.items()):
            fh.write(f"{s}\t{p}\t{t}\t{','.join(map(str, sorted(objs)))}\n")
    summary = {
        "num_entities": len(entities),
        "num_predicates": len(predicates),
        "num_slices": len(slices),
        "train": len(train),
        "valid": len(valid),
        "test": len(test),
        "unit": data.unit,
        "tau_max": tau_max,
    }
    write_json(out("meta.json"), summary)
    _write_manifest(args.output, "prepare", _relargs(args.argv), inputs=inputs, outputs=[out(f) for f in PREPARED_FILES])
    print(
        f"entities={summary['num_entities']} predicates={summary['num_predicates']} slices={summary['num_slices']} "
        f"train={summary['train']} valid={summary['valid']} test={summary['test']} unit={summary['unit']} tau_max={tau_max:.6f}"
    )
    return summary


def cmd_train(args):
    started = time.perf_counter()
    data, meta = load_prepared(args.prepared)
    config = resolve_config(args)
    os.makedirs(args.output, exist_ok=True)
    out = lambda name: os.path.join(args.output, name)  # noqa: E731
    model = state = None
    start_epoch = 0
    if args.resume:
        model, state, ckpt_meta = load_checkpoint(
            args.resume,
            expect={"num_entities": data.num_entities, "num_predicates": data.num_relations, "dim": config.dim, "num_points": config.num_points},
        )
        start_epoch = ckpt_meta.get("epoch", 0)
    trainer = Trainer(data, config, model=model, state=state, tau_max=meta["tau_max"])
    trainer.epoch = start_epoch
    log_rows = []

    def on_epoch(tr, record):
        log_rows.append(record)
        print(f"epoch {record['epoch']}\tloss {record['loss']:.6f}\tvalid_mrr {record.get('valid_mrr', float('nan')):.6f}", flush=True)

    ckpt_meta = {"seed": config.seed, "config": config.to_dict(), "tau_max": meta["tau_max"], "unit": data.unit}
    history, best_state = trainer.fit(callback=on_epoch)
    save_checkpoint(out("last.ckpt"), trainer.model, trainer.state, {**ckpt_meta, "epoch": trainer.epoch})
    if best_state is not None:
        trainer.model.load_state_dict(best_state)
    save_checkpoint(out("best.ckpt"), trainer.model, None, {**ckpt_meta, "epoch": trainer.epoch})
    with open(out("train_log.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\tloss\tvalid_mrr\n")
        for r in log_rows:
            fh.write(f"{r['epoch']}\t{r['loss']!r}\t{r.get('valid_mrr', float('nan'))!r}\n")
    write_config_file(out("config.txt"), config)
    inputs = [os.path.join(args.prepared, f) for f in PREPARED_FILES] + ([args.resume] if args.resume else [])
    _write_manifest(
        args.output, "train", _relargs(args.argv), config=config.to_dict(), inputs=inputs,
        outputs=[out(f) for f in ("last.ckpt", "best.ckpt", "train_log.tsv", "config.txt")],
        timings={"train_seconds": time.perf_counter() - started},
    )
    return history


def _checkpoint_for(args, data, meta):
    model, _, ckpt_meta = load_checkpoint(args.checkpoint, expect={"num_entities": data.num_entities, "num_predicates": data.num_relations})
    config = TrainConfig.from_mapping(ckpt_meta.get("config", {}))
    return model, config, ckpt_meta


def cmd_evaluate(args):
    started = time.perf_counter()
    data, meta = load_prepared(args.prepared)
    model, config, ckpt_meta = _checkpoint_for(args, data, meta)
    if args.worst_case_ties:
        config = config.replace(worst_case_ties=True)
    os.makedirs(args.output, exist_ok=True)
    trainer = Trainer(data, config, model=model, tau_max=ckpt_meta.get("tau_max", meta["tau_max"]))
    report = trainer.evaluate(args.split)
    protocols = ("raw", "filtered") if args.protocol == "both" else (args.protocol,)
    prefix = os.path.join(args.output, f"{args.split}_report")
    extra = {"config": config.to_dict(), "seed": config.seed, "split": args.split, "protocols": list(protocols)}
    write_report(prefix, report, extra, protocols=protocols)
    for direction, m in report.summary().items():
        for proto in protocols:
            x = m[proto]
            print(f"{direction}\t{proto}\tMRR {x['mrr']:.4f}\tH@3 {x['hits@3']:.4f}\tH@10 {x['hits@10']:.4f}")
    _write_manifest(
        args.output, "evaluate", _relargs(args.argv), config=config.to_dict(),
        inputs=[args.checkpoint] + [os.path.join(args.prepared, f) for f in PREPARED_FILES],
        outputs=[f"{prefix}.json", f"{prefix}.tsv"],
        timings={"evaluate_seconds": time.perf_counter() - started},
    )
    return report


def _lookup(table, token, kind):
    if token in table:
        return table[token]
    raise UnknownTokenError(token, table, kind)


def predict_query(model, data, store, config, tau_max, entity, predicate, timestamp, subject_query=False):
    """Score all candidates for ``(entity, predicate, ?, timestamp)`` (or ``(?, predicate, entity, timestamp)``)."""
    p = predicate + data.num_predicates if subject_query else predicate
    window = store.window((entity, p), timestamp, config.window)
    tau_star = query_offset(timestamp, window.last_time, data.unit, tau_max)
    with torch.no_grad():
        points = model(WindowBatch.from_windows([window], config.window))
        kp = model.kernel_params(config.query_weight, config.jitter)
        q = torch.full((1, model.num_entities, 1), tau_star, dtype=DTYPE)
        post = gp_posterior(points.tau, points.y, points.w, q, kp)
    mean, var = post.mean[0, :, 0], post.var[0, :, 0]
    return tau_star, points, mean, var, torch.softmax(mean, -1)


def cmd_predict(args):
    data, meta = load_prepared(args.prepared)
    model, config, ckpt_meta = _checkpoint_for(args, data, meta)
    tau_max = ckpt_meta.get("tau_max", meta["tau_max"])
    entity = _lookup(data.entities, args.entity, "entity")
    predicate = _lookup(data.predicates, args.predicate, "predicate")
    if args.time < 0:
        raise ConfigError("query time must be non-negative")
    store = data.store("train", "valid", "test")
    tau_star, points, mean, var, probs = predict_query(model, data, store, config, tau_max, entity, predicate, args.time, args.subject_query)
    names = {i: tok for tok, i in data.entities.items()}
    # stable sort keeps ties in id order
    order = np.argsort(-mean.numpy(), kind="stable")[: args.top_k]
    print(f"tau*\t{tau_star:.6f}")
    print("rank\tcandidate\tmean\tvariance\tprobability")
    for r, c in enumerate(order, start=1):
        print(f"{r}\t{names[int(c)]}\t{mean[c]:.6f}\t{var[c]:.6f}\t{probs[c]:.6f}")
    if args.curve:
        tau_end = args.tau_end if args.tau_end is not None else tau_max
        grid = torch.linspace(0.0, tau_end, args.curve_points, dtype=DTYPE)
        kp = model.kernel_params(config.query_weight, config.jitter)
        idx = torch.as_tensor(order.copy())
        with torch.no_grad():
            post = gp_posterior(points.tau[0, idx], points.y[0, idx], points.w[0, idx], grid.expand(len(idx), -1), kp)
        with open(args.curve, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("tau\tcandidate_id\tmean\tvariance\n")
            for j, tau in enumerate(grid.tolist()):
                for k, c in enumerate(order):
                    fh.write(f"{tau!r}\t{int(c)}\t{post.mean[k, j].item()!r}\t{post.var[k, j].item()!r}\n")
    return order, mean, var


def _parse_grid(items):
    grid = {}
    for item in items or []:
        key, _, values = item.partition("=")
        if not values:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        grid[key.strip().replace("-", "_")] = values.split(",")
    return grid


def cmd_grid_search(args):
    started = time.perf_counter()
    data, meta = load_prepared(args.prepared)
    base = resolve_config(args)
    grid = dict(FULL_SCALE_GRID) if args.full_grid else {}
    grid.update(_parse_grid(args.grid))
    if not grid:
        raise ConfigError("empty grid; use --grid key=v1,v2 or --full-grid")
    configs = expand_grid(grid, base)
    best, results = grid_search(data, configs, epochs=args.budget)
    os.makedirs(args.output, exist_ok=True)
    path = os.path.join(args.output, "grid_results.tsv")
    keys = list(grid)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys + ["valid_filtered_mrr", "valid_filtered_hits@3", "valid_filtered_hits@10", "valid_raw_mrr"]) + "\n")
        for r in results:
            cfg, m = r["config"], r["metrics"]
            vals = [str(getattr(cfg, k)) for k in keys]
            vals += [f"{m['filtered']['mrr']:.6f}", f"{m['filtered']['hits@3']:.6f}", f"{m['filtered']['hits@10']:.6f}", f"{m['raw']['mrr']:.6f}"]
            fh.write("\t".join(vals) + "\n")
    write_config_file(os.path.join(args.output, "best_config.txt"), best)
    print(f"{len(results)} configurations; best: " + ", ".join(f"{k}={getattr(best, k)}" for k in keys))
    _write_manifest(
        args.output, "grid-search", _relargs(args.argv), config=base.to_dict(),
        inputs=[os.path.join(args.prepared, f) for f in PREPARED_FILES],
        outputs=[path, os.path.join(args.output, "best_config.txt")],
        timings={"grid_seconds": time.perf_counter() - started},
    )
    return best, results


def build_parser():
    parser = argparse.ArgumentParser(prog="wgpnn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--workers", type=int, default=1, help="torch threads; >1 gives up bit-for-bit determinism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a periodic synthetic dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--entities", type=int, default=8)
    p.add_argument("--predicates", type=int, default=2)
    p.add_argument("--period", type=int, default=2)
    p.add_argument("--horizon", type=int, default=200, help="number of timestamps")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--time-step", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="encode, split and index raw TSV quadruples")
    p.add_argument("raw", nargs="*")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_prepare)

    def add_config(p):
        p.add_argument("-c", "--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("prepared")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--resume", help="checkpoint (last.ckpt) to continue from")
    add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank queries under raw and time-aware filtered protocols")
    p.add_argument("checkpoint")
    p.add_argument("prepared")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--protocol", choices=("raw", "filtered", "both"), default="both")
    p.add_argument("--worst-case-ties", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="score candidates for one query, optionally export curves")
    p.add_argument("checkpoint")
    p.add_argument("prepared")
    p.add_argument("entity")
    p.add_argument("predicate")
    p.add_argument("time", type=int)
    p.add_argument("--subject-query", action="store_true", help="treat ENTITY as the object and rank subjects")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--curve", help="write tau/candidate/mean/variance samples for the top candidates")
    p.add_argument("--curve-points", type=int, default=50)
    p.add_argument("--tau-end", type=float, help="curve end (default tau_max)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("grid-search", help="train every grid point and keep the best validation MRR")
    p.add_argument("prepared")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2")
    p.add_argument("--full-grid", action="store_true")
    p.add_argument("--budget", type=int, default=5, help="epochs per grid point")
    add_config(p)
    p.set_defaults(func=cmd_grid_search)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        args.func(args)
    except WGPNNError as err:
        print(f"wgpnn: {err.category} error: {err}", file=sys.stderr)
        return err.exit_code
    except (OSError, ValueError) as err:
        print(f"wgpnn: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
