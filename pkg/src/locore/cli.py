"""``locore`` command line: gen-data, train, rerank, eval, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, inference, metrics, model as model_mod, pipeline, store, synth, trainer
from .attention import AttentionLayerParams, AttentionPattern, dense_flop_breakdown, flop_count, sparse_attention
from .errors import LocoreError
from .numerics import Var

log = logging.getLogger("locore")


class UsageError(Exception):
    """Bad arguments detected after parsing; exits with status 2."""


def _version() -> str:
    return __version__


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(out: Path, args, config: dict, inputs: dict, outputs: dict, timings: dict) -> Path:
    """Record how an output was produced, next to it (``<out>.run.json``)."""
    doc = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": args.seed,
        "deterministic": args.deterministic,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in outputs.items() if Path(v).is_file()},
        "version": _version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings_s": timings,
    }
    path = Path(str(out) + ".run.json") if not Path(out).is_dir() else Path(out) / "run.json"
    store._atomic_write(path, json.dumps(doc, indent=1, sort_keys=True).encode())
    return path


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    doc = _load_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    for key in ("instance_count", "images_per_instance", "distractor_images", "d", "L", "easy_fraction", "junk_fraction"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    cfg = synth.WorldConfig.from_dict(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank, truth = synth.generate_world(cfg)
    bank.validate()
    train_ids, eval_ids = synth.split_world(truth, args.train_fraction, cfg.seed)
    paths = {
        "bank": out / "bank.lcrb",
        "truth": out / "truth.json",
        "world": out / "world.json",
        "train_manifest": out / "train_manifest.json",
        "eval_manifest": out / "eval_manifest.json",
        "eval_manifest_hard_star": out / "eval_manifest_hard_star.json",
    }
    store.write_bank(bank, paths["bank"])
    store._atomic_write(paths["truth"], json.dumps(truth.to_json(), sort_keys=True).encode())
    store._atomic_write(paths["world"], json.dumps(cfg.to_dict(), indent=1, sort_keys=True).encode())
    store.write_manifest(synth.build_manifest(bank, truth, train_ids), paths["train_manifest"])
    eval_manifest = synth.build_manifest(bank, truth, eval_ids)
    store.write_manifest(eval_manifest, paths["eval_manifest"])
    store.write_manifest(eval_manifest.without_easy(), paths["eval_manifest_hard_star"])
    write_run_manifest(out, args, {"world": cfg.to_dict(), "train_fraction": args.train_fraction}, {"config": args.config}, paths, {"total": time.perf_counter() - t0})
    print(f"wrote {len(bank)} images ({len(train_ids)} train / {len(eval_ids)} eval) to {out}")
    return 0


def _model_config(args, bank: store.DescriptorBank, K: int) -> model_mod.ModelConfig:
    doc = _load_json(args.model_config)
    if args.variant and not doc:
        base = model_mod.make_config(args.variant, L=bank.L, K=K).to_dict()
    else:
        base = {}
    base.update(doc)
    base.setdefault("L", bank.L)
    base["K"] = K
    if base.get("d") is None:
        base["d"] = bank.d
    base["max_context"] = max(base.get("max_context", 0), (base["L"] + 1) * (K + 1))
    if args.seed is not None:
        base["seed"] = args.seed
    return model_mod.ModelConfig.from_dict(base)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    bank = store.read_bank(args.bank)
    manifest = store.read_manifest(args.manifest)
    tdoc = {}
    if args.resume:
        model, extra, tensors = model_mod.load_checkpoint(args.resume)
        tdoc.update(extra.get("train_config", {}))
        tdoc["max_steps"] = None  # a budget applies per invocation
    tdoc.update(_load_json(args.train_config))
    if args.seed is not None:
        tdoc["seed"] = args.seed
    if args.no_shuffle:
        tdoc["shuffle_enabled"] = False
    for key in ("lr", "max_steps", "epochs", "micro_batch_size", "accumulation_steps"):
        val = getattr(args, key)
        if val is not None:
            tdoc[key] = val
    tcfg = trainer.TrainConfig.from_dict(tdoc)
    state = None
    if args.resume:
        state = trainer.restore_state(extra, tensors)
        log.info("resuming from step %d", state.step)
    else:
        model = model_mod.init_model(_model_config(args, bank, args.K))
    log.info("model has %d parameters", model_mod.param_count(model))
    truth = trainer.ManifestTruth(manifest)
    train_ids = sorted(set(manifest.by_id()) | {g for q in manifest.queries for g in q.gallery})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".metrics.jsonl")
    if log_path.exists() and not args.resume:
        log_path.unlink()
    result = trainer.train(model, bank, truth, tcfg, train_ids=train_ids, state=state, log_path=log_path, checkpoint_path=out)
    last = result.log[-1]["loss"] if result.log else float("nan")
    write_run_manifest(
        out, args, {"model": model.config.to_dict(), "train": tcfg.to_dict()},
        {"bank": args.bank, "manifest": args.manifest, "resume": args.resume},
        {"checkpoint": out, "metrics": log_path}, {"total": time.perf_counter() - t0},
    )
    print(f"trained to step {result.state.step}; last loss {last:.4f}; checkpoint {out}")
    return 0


def cmd_rerank(args) -> int:
    t0 = time.perf_counter()
    model, _, _ = model_mod.load_checkpoint(args.checkpoint)
    bank = store.read_bank(args.bank)
    manifest = store.read_manifest(args.manifest)
    K = args.K or model.config.K
    if K != model.config.K:
        raise UsageError(f"--K {K} differs from the checkpoint's K={model.config.K}")
    N = args.N or K
    S = args.S or K
    if N < K:
        raise UsageError(f"--N {N} is smaller than --K {K}")
    if S > K:
        raise UsageError(f"--S {S} exceeds --K {K}")
    seed = args.seed if args.shuffle_eval else None
    if args.shuffle_eval and seed is None:
        seed = 0
    results = pipeline.rerank_manifest(model, bank, manifest, N, S, args.aggregator, args.merge, shuffle_seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    inference.write_results(results, out)
    write_run_manifest(
        out, args, {"N": N, "K": K, "S": S, "aggregator": args.aggregator, "merge": args.merge, "shuffle_eval": args.shuffle_eval},
        {"checkpoint": args.checkpoint, "bank": args.bank, "manifest": args.manifest},
        {"results": out}, {"total": time.perf_counter() - t0},
    )
    print(f"re-ranked {len(results)} queries -> {out}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    manifest = store.read_manifest(args.manifest)
    results = inference.read_results(args.results) if args.results else metrics.baseline_results(manifest)
    reports = []
    for proto in args.protocol:
        try:
            reports.append(metrics.evaluate(results, manifest, proto, args.ks))
        except KeyError as exc:
            raise LocoreError(f"no ground truth for query {exc.args[0]!r}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {r.protocol.value: r.to_json() for r in reports}
    store._atomic_write(out, json.dumps(doc, indent=1).encode())
    outputs = {"report": out}
    if args.csv:
        store._atomic_write(Path(args.csv), metrics.reports_csv({args.method: reports}, args.ks).encode())
        outputs["csv"] = Path(args.csv)
    write_run_manifest(out, args, {"protocols": args.protocol, "ks": args.ks}, {"results": args.results, "manifest": args.manifest}, outputs, {"total": time.perf_counter() - t0})
    for r in reports:
        rk = " ".join(f"R@{k}={100 * v:.2f}" for k, v in r.recall_at.items())
        print(f"{r.protocol.value}: mAP={100 * r.mAP:.2f} mAP@R={100 * r.map_at_R:.2f} {rk} ({len(r.per_query)} queries, {len(r.skipped)} skipped)")
    return 0


def bench_rows(M_list, radius: int, globals_frac: float, hidden: int, heads: int, repeat: int, seed: int):
    rng = np.random.default_rng(seed)
    params = None
    if repeat:
        names = ("wq", "bq", "wk", "bk", "wv", "bv", "wqg", "bqg", "wkg", "bkg", "wvg", "bvg", "wo", "bo")
        params = AttentionLayerParams(
            heads, *(Var((0.02 * rng.standard_normal((hidden, hidden) if n[0] == "w" else hidden)).astype(np.float32)) for n in names)
        )
    rows = []
    prev = None
    for M in M_list:
        n_glob = max(1, int(round(M * globals_frac))) if globals_frac > 0 else 0
        pattern = AttentionPattern.banded(M, radius, np.linspace(0, M - 1, n_glob).astype(int) if n_glob else ())
        dense = dense_flop_breakdown(M, hidden, heads)
        sf, df, dp = flop_count(pattern, hidden, heads), sum(dense.values()), dense["pairs"]
        lat = ""
        if repeat:
            x = Var(rng.standard_normal((M, hidden)).astype(np.float32))
            sparse_attention(x, params, pattern)
            t = time.perf_counter()
            for _ in range(repeat):
                sparse_attention(x, params, pattern)
            lat = f"{1000 * (time.perf_counter() - t) / repeat:.3f}"
        row = {
            "M": M, "radius": radius, "globals": n_glob, "sparse_flops": sf, "dense_flops": df,
            "sparse_growth": "" if prev is None else f"{sf / prev[0]:.4f}",
            "dense_growth": "" if prev is None else f"{df / prev[1]:.4f}",
            "dense_pair_flops": dp,
            "dense_pair_growth": "" if prev is None else f"{dp / prev[2]:.4f}",
            "latency_ms": lat,
        }
        rows.append(row)
        prev = (sf, df, dp)
    return rows


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    if args.hidden % args.heads:
        raise UsageError(f"--hidden {args.hidden} is not divisible by --heads {args.heads}")
    if not 0 <= args.globals < 1:
        raise UsageError(f"--globals is a fraction of M in [0, 1), got {args.globals}")
    rows = bench_rows(args.M_list, args.radius, args.globals, args.hidden, args.heads, args.repeat, args.seed or 0)
    import csv
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    text = buf.getvalue()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        store._atomic_write(out, text.encode())
        write_run_manifest(out, args, {"M_list": args.M_list, "radius": args.radius, "globals": args.globals, "hidden": args.hidden, "heads": args.heads}, {}, {"table": out}, {"total": time.perf_counter() - t0})
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed in the config")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics for bit-exact reruns")
    common.add_argument("--threads", type=_positive_int, default=None, help="BLAS threads (default: $LOCORE_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="locore", description="List-wise local-descriptor image re-ranking.")
    p.add_argument("--version", action="version", version=f"locore {_version()}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic world")
    g.add_argument("--config", help="WorldConfig JSON (defaults used when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--train-fraction", type=float, default=0.5)
    g.add_argument("--instance-count", dest="instance_count", type=int)
    g.add_argument("--images-per-instance", dest="images_per_instance", type=int)
    g.add_argument("--distractor-images", dest="distractor_images", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--L", type=int)
    g.add_argument("--easy-fraction", dest="easy_fraction", type=float)
    g.add_argument("--junk-fraction", dest="junk_fraction", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a re-ranker")
    t.add_argument("--bank", required=True)
    t.add_argument("--manifest", required=True, help="train manifest")
    t.add_argument("--train-config", help="TrainConfig JSON")
    t.add_argument("--model-config", help="ModelConfig JSON (fields override --variant)")
    t.add_argument("--variant", choices=["toy", "tiny", "small", "base"], default="tiny")
    t.add_argument("--K", type=_positive_int, default=16, help="gallery images per training list")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="metrics JSONL (default: next to the checkpoint)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-shuffle", action="store_true", help="train without gallery shuffling")
    t.add_argument("--lr", type=float)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--micro-batch-size", dest="micro_batch_size", type=_positive_int)
    t.add_argument("--accumulation-steps", dest="accumulation_steps", type=_positive_int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rerank", parents=[common], help="re-rank shortlists with a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--bank", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--N", type=_positive_int, help="images re-ranked per query (default K)")
    r.add_argument("--K", type=_positive_int, help="window size (default: checkpoint K)")
    r.add_argument("--S", type=_positive_int, help="window stride (default K)")
    r.add_argument("--aggregator", choices=["sep", "mean", "first"], default="sep")
    r.add_argument("--merge", choices=["freeze", "overwrite"], default="freeze")
    r.add_argument("--shuffle-eval", action="store_true", help="present each window in random order")
    r.add_argument("--out", required=True, help="results JSONL")
    r.set_defaults(func=cmd_rerank)

    e = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    e.add_argument("--results", help="results JSONL (omit for the global-retrieval baseline)")
    e.add_argument("--manifest", required=True)
    e.add_argument("--protocol", action="append", choices=["medium", "hard", "hard-star"], help="repeatable; default medium")
    e.add_argument("--ks", type=_int_list, default=[1, 5, 10])
    e.add_argument("--out", required=True, help="report JSON")
    e.add_argument("--csv", help="also write a CSV table here")
    e.add_argument("--method", default="locore", help="row label in the CSV table")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="FLOP and latency table for the sparse attention")
    b.add_argument("--M-list", dest="M_list", type=_int_list, default=[512, 1024, 2048])
    b.add_argument("--radius", type=_positive_int, default=256)
    b.add_argument("--globals", type=float, default=1 / 32, help="global tokens as a fraction of M")
    b.add_argument("--hidden", type=_positive_int, default=512)
    b.add_argument("--heads", type=_positive_int, default=8)
    b.add_argument("--repeat", type=int, default=0, help="timed runs per size (0: FLOPs only)")
    b.add_argument("--out", help="CSV path (always echoed to stdout)")
    b.set_defaults(func=cmd_bench)
    return p


@contextlib.contextmanager
def _thread_limit(args):
    threads = 1 if args.deterministic else (args.threads or int(os.environ.get("LOCORE_THREADS", "0")) or None)
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "protocol", "unset") is None:
        args.protocol = ["medium"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        with _thread_limit(args):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"locore {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LocoreError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"locore {args.command}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
