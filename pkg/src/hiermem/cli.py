"""Command-line surface: gen-data, train, eval, build-db, retrieve, session, cost.

Every command prints human-readable text followed by a machine-readable
JSON block introduced by the ``::MACHINE-REPORT::`` sentinel. Exit codes:
0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import autograd as ag
from . import memstore, report, retriever, session, trainer
from .autograd import NumericsError
from .memstore import StoreError
from .model import TransformerModel, checkpoint_fingerprint
from .trainer import (DatasetError, DivergenceError, TrainConfig, VocabSpec,
                      activation_estimate, count_forwards)
from .compressor import build_hierarchy, hierarchy_depth

MACHINE_SENTINEL = "::MACHINE-REPORT::"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _machine(obj: dict) -> None:
    print(MACHINE_SENTINEL)
    print(json.dumps(obj))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"malformed config file {path}: {e}") from e


def _train_config(args, file_cfg: dict) -> TrainConfig:
    cfg = TrainConfig()
    merged = dict(file_cfg)
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name.replace("-", "_"), None)
        if v is not None:
            merged[f.name] = v
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    bad = set(merged) - known - {"n_tasks", "n_keys", "n_values"}
    if bad:
        raise DatasetError(f"unknown config keys: {sorted(bad)}")
    return dataclasses.replace(cfg, **_decode_config(
        {k: v for k, v in merged.items() if k in known}))


def _decode_config(d: dict) -> dict:
    """Revive JSON-decoded TrainConfig fields to their dataclass types."""
    d = dict(d)
    if isinstance(d.get("vocab"), dict):
        d["vocab"] = VocabSpec(**d["vocab"])
    if isinstance(d.get("noise_ramp"), (list, tuple)):
        d["noise_ramp"] = tuple(d["noise_ramp"])
    return d


def _read_tokens(path: str) -> list[int]:
    with open(path) as f:
        text = f.read()
    try:
        return [int(t) for t in text.split()]
    except ValueError as e:
        raise DatasetError(f"{path}: token files must be whitespace-separated ints") from e


def _load_model_and_meta(ckpt_path: str) -> tuple[TransformerModel, dict]:
    model = TransformerModel.load(ckpt_path)
    meta_path = ckpt_path + ".meta.json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
    return model, meta


def _check_fingerprint(db: memstore.HierDatabase, ckpt_path: str) -> None:
    fp = checkpoint_fingerprint(ckpt_path)
    if db.fingerprint != fp:
        raise StoreError("database fingerprint does not match the checkpoint; "
                         "rebuild the database with this model")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> dict:
    vs = VocabSpec(n_tasks=args.n_tasks, n_keys=args.n_keys, n_values=args.n_values)
    train_set, test_set, stats = trainer.gen_icl_dataset(
        args.seed, args.n_train, args.n_test, vs)
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.jsonl")
    test_path = os.path.join(args.out, "test.jsonl")
    trainer.save_dataset(train_set, train_path)
    trainer.save_dataset(test_set, test_path)
    stats["vocab"] = dataclasses.asdict(vs)
    with open(os.path.join(args.out, "stats.json"), "w") as f:
        json.dump(stats, f, indent=2)
    if args.n_test == 0:
        print("warning: n_test=0, empty test file written")
    print(f"wrote {args.n_train} train / {args.n_test} test samples to {args.out}")
    print(f"mean token length {stats['mean_token_length']:.1f}, "
          f"answer vocab {stats['answer_vocab']}")
    return {"train": train_path, "test": test_path, **stats}


def cmd_train(args) -> dict:
    file_cfg = _load_config_file(args.config)
    cfg = _train_config(args, file_cfg)
    with open(os.path.join(args.data, "stats.json")) as f:
        stats = json.load(f)
    vs = VocabSpec(**stats["vocab"])
    cfg = dataclasses.replace(cfg, vocab=vs)
    train_set = trainer.load_dataset(os.path.join(args.data, "train.jsonl"))
    test_set = trainer.load_dataset(os.path.join(args.data, "test.jsonl"))
    model = trainer.make_model(vs, cfg)
    outdir = os.path.dirname(os.path.abspath(args.checkpoint)) or "."
    os.makedirs(outdir, exist_ok=True)
    log_path = os.path.join(outdir, "train_log.jsonl")
    history = trainer.train(model, train_set, test_set, cfg,
                            log_path=log_path, progress=True)
    model.save(args.checkpoint)
    with open(args.checkpoint + ".meta.json", "w") as f:
        json.dump({"train_config": dataclasses.asdict(cfg),
                   "vocab": stats["vocab"]}, f, indent=2)
    paths = report.write_train_report(history, outdir)
    print(f"saved checkpoint to {args.checkpoint}")
    final = history["epochs"][-1] if history["epochs"] else {}
    return {"checkpoint": args.checkpoint, "log": log_path,
            "final_epoch": final, **paths}


def cmd_eval(args) -> dict:
    model, meta = _load_model_and_meta(args.checkpoint)
    cfg = dataclasses.replace(TrainConfig(),
                              **_decode_config(meta.get("train_config", {})))
    test_set = trainer.load_dataset(args.data)
    if args.limit:
        test_set = test_set[:args.limit]
    rep = trainer.evaluate(model, test_set, cfg, keep_traces=args.traces)
    print(report.table_1_style(rep))
    paths = report.write_eval_report(rep, args.out)
    print(f"report written to {args.out}")
    d = rep.to_dict()
    del d["per_sample"]
    return {**d, **paths}


def cmd_build_db(args) -> dict:
    model, meta = _load_model_and_meta(args.checkpoint)
    tokens = _read_tokens(args.context)
    if args.chunk_len > model.config.max_positions:
        raise DatasetError(f"chunk_len {args.chunk_len} exceeds model "
                           f"max_positions {model.config.max_positions}")
    chunks = memstore.chunk_context(tokens, args.chunk_len)
    db = memstore.HierDatabase(factor=args.k, d_model=model.config.d_model,
                               fingerprint=checkpoint_fingerprint(args.checkpoint))
    shapes = []
    with ag.no_grad():
        for chunk in chunks:
            h = build_hierarchy(chunk, args.k, model)
            db.put_chunk(h)
            shapes.append([lv.data.shape[0] for lv in h.levels])
    memstore.save(db, args.db)
    for cid, shape in enumerate(shapes):
        print(f"chunk {cid}: level lengths {shape}")
    print(f"wrote {len(chunks)} hierarchies to {args.db}")
    return {"db": args.db, "chunks": len(chunks), "level_shapes": shapes}


def cmd_retrieve(args) -> dict:
    model, meta = _load_model_and_meta(args.checkpoint)
    db = memstore.load(args.db)
    _check_fingerprint(db, args.checkpoint)
    query = _read_tokens(args.query)
    rcfg = retriever.RetrievalConfig(
        num_ret_tokens=args.num_ret, top_c=args.top_c,
        early_stop_threshold=args.early_stop_threshold, max_depth=args.max_depth)
    max_width = max(max(h.level_len(l) for l in range(len(h.levels)))
                    for h in db.chunks.values())
    dense = args.top_c >= max(max_width, len(db))
    traces = []
    with ag.no_grad():
        states = retriever.encode_retrieval(query, args.num_ret, model)
        finals = [retriever.sparse_retrieve(db, s, rcfg, model) for s in states]
    for i, st in enumerate(finals):
        print(f"retrieval token {i}:")
        print(retriever.format_trace(st))
        traces.append([{
            "level": rec.level,
            "candidates": [dataclasses.astuple(r) for r in rec.candidates],
            "attention": [float(a) for a in rec.attention],
            "selected": [dataclasses.astuple(r) for r in rec.selected],
        } for rec in st.trace])
    prefix = retriever.soft_prefix(finals)
    print(f"soft prefix: {prefix.data.shape[0]} embeddings of width {prefix.data.shape[1]}, "
          f"norms {[round(float(np.linalg.norm(r)), 4) for r in prefix.data]}")
    if dense:
        print("note: top_c covers every level width; this descent is dense")
    return {"traces": traces, "dense": dense,
            "prefix_len": prefix.data.shape[0]}


def cmd_session(args) -> dict:
    model, meta = _load_model_and_meta(args.checkpoint)
    if args.db and os.path.exists(args.db):
        db = memstore.load(args.db)
        _check_fingerprint(db, args.checkpoint)
    else:
        db = memstore.HierDatabase(factor=args.k, d_model=model.config.d_model,
                                   fingerprint=checkpoint_fingerprint(args.checkpoint))
    turns = []
    with open(args.script) as f:
        for line in f:
            if line.strip():
                turns.append([int(t) for t in line.split()])
    cfg = session.SessionConfig(window_size=args.window_size,
                                max_new_tokens=args.max_new,
                                trigger_mode=args.trigger_mode,
                                async_mode=args.async_mode)
    events = session.run_session(model, db, turns, cfg)
    for e in events:
        print(e)
    if args.db:
        memstore.save(db, args.db)
    return {"events": events, "generated": session.transcript_tokens(events),
            "db_chunks": len(db)}


def cmd_cost(args) -> dict:
    depth = hierarchy_depth(args.n, args.k)
    forwards = count_forwards(args.n, args.k)
    est = activation_estimate(args.T, args.n, args.d)
    print(f"chunk length n={args.n}, factor k={args.k}")
    print(f"levels L = {depth}")
    print(f"forwards (compress + retrieve, one chunk, one retrieval token) = 2L+2 = {forwards}")
    print(f"activation estimate T*n^2 + T*n*d = {est} (T={args.T}, d={args.d})")
    result = {"L": depth, "forwards": forwards, "activation_estimate": est}
    if args.checkpoint:
        model, _ = _load_model_and_meta(args.checkpoint)
        chunk = list(range(6, 6 + args.n))
        chunk = [t % model.config.vocab_size for t in chunk]
        actual = trainer.instrument_forward_count(chunk, chunk[:2], args.k, model)
        print(f"instrumented forwards with checkpoint model: {actual}")
        result["instrumented_forwards"] = actual
    return result


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="hiermem", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic ICL dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--n-tasks", type=int, default=32)
    g.add_argument("--n-keys", type=int, default=12)
    g.add_argument("--n-values", type=int, default=8)
    g.add_argument("--out", default="data")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the model end to end")
    t.add_argument("--data", required=True, help="directory from gen-data")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--config", help="JSON config file; flags override")
    for f in dataclasses.fields(TrainConfig):
        if f.type in ("int", "float"):
            t.add_argument(f"--{f.name.replace('_', '-')}",
                           type=eval(f.type), default=None)
        elif f.type == "bool":
            t.add_argument(f"--{f.name.replace('_', '-')}",
                           type=lambda s: s.lower() in ("1", "true", "yes"),
                           default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="three-mode evaluation on a test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="test .jsonl file")
    e.add_argument("--out", default="eval_report")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--traces", action="store_true")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("build-db", help="compress a context file into a database")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--context", required=True, help="whitespace-separated token ids")
    b.add_argument("--chunk-len", type=int, default=8)
    b.add_argument("--k", type=int, default=2)
    b.add_argument("--db", required=True)
    b.set_defaults(fn=cmd_build_db)

    r = sub.add_parser("retrieve", help="trace a retrieval descent")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--db", required=True)
    r.add_argument("--query", required=True, help="whitespace-separated token ids")
    r.add_argument("--top-c", type=int, default=1)
    r.add_argument("--num-ret", type=int, default=1)
    r.add_argument("--early-stop-threshold", type=float, default=None)
    r.add_argument("--max-depth", type=int, default=None)
    r.set_defaults(fn=cmd_retrieve)

    s = sub.add_parser("session", help="scripted interactive session")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--db", default=None)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--script", required=True, help="one turn of token ids per line")
    s.add_argument("--window-size", type=int, default=64)
    s.add_argument("--max-new", type=int, default=4)
    s.add_argument("--trigger-mode", choices=["always", "token"], default="always")
    s.add_argument("--async", dest="async_mode", action="store_true")
    s.set_defaults(fn=cmd_session)

    c = sub.add_parser("cost", help="forward-count and activation cost model")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--d", type=int, default=64)
    c.add_argument("--T", type=int, default=1)
    c.add_argument("--checkpoint", default=None)
    c.set_defaults(fn=cmd_cost)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        result = args.fn(args)
        _machine(result)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericsError, DivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
