"""Command-line entry point: distill, eval, influence, transfer, bench."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, RfadError

log = logging.getLogger("rfad")

# published full-scale numbers, printed next to desk-scale measurements for context
REFERENCE_ACCURACY = {("mnist", 1, False): (96.7, 0.2)}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


# -- config files --------------------------------------------------------------------------


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = {"int": int, "float": float, "bool": bool, "str": str}.get(t.split("|")[0].strip(), str)
    return out


def coerce(value: str, typ: type):
    if typ is bool:
        v = value.strip().lower()
        if v in _BOOL_TRUE:
            return True
        if v in _BOOL_FALSE:
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    return typ(value)


def parse_config_text(text: str, cls, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines against the fields of dataclass ``cls``."""
    types = _field_types(cls)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = coerce(value, types[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def parse_config_file(path, cls) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), cls, str(path))


def artifact_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- commands ------------------------------------------------------------------------------

DISTILL_FLAGS = {
    "dataset": ("--dataset", str),
    "img_per_class": ("--ipc", int),
    "n_networks": ("--n-nets", int),
    "channels": ("--channels", int),
    "architecture": ("--architecture", str),
    "depth": ("--depth", int),
    "seed": ("--seed", int),
    "rho": ("--rho", float),
    "loss": ("--loss", str),
    "batch_size": ("--batch-size", int),
    "chunk_size": ("--chunk-size", int),
    "max_iterations": ("--max-iters", int),
    "patience": ("--patience", int),
    "val_size": ("--val-size", int),
    "val_networks": ("--val-nets", int),
    "lr_coreset": ("--lr", float),
}


def cmd_distill(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .distill import DistillConfig, distill_run

    values = parse_config_file(args.config, DistillConfig) if args.config else {}
    for key, (flag, _) in DISTILL_FLAGS.items():
        v = getattr(args, flag.lstrip("-").replace("-", "_"))
        if v is not None:
            values[key] = v
    if args.learn_labels:
        values["learn_labels"] = True
    cfg = DistillConfig(**values)
    train, test = load_dataset(cfg.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    coreset, history = distill_run(train, cfg)
    elapsed = time.perf_counter() - t0
    manifest = {
        "artifact_version": artifact_version(),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "loss": cfg.loss,
        "dataset": {"name": cfg.dataset, "train_hash": train.content_hash(), "test_hash": test.content_hash(),
                    "train_size": len(train), "test_size": len(test)},
        "seeds": {"master": cfg.seed},
        "corruption": {"rho": cfg.rho, "entries": int(coreset.mask.size), "frozen": coreset.frozen_count()},
        "coreset_hash": coreset.content_hash(),
        "best_iteration": history.best_iteration,
        "stopped_at": history.stopped_at,
        "stop_reason": history.stop_reason,
        "threads": args.threads,
        "iteration_seconds": history.iteration_seconds,
        "elapsed_seconds": elapsed,
    }
    save_checkpoint(out / "coreset.ckpt", coreset, cfg.config_hash(),
                    {"history": history.to_dict(), "seeds": {"master": cfg.seed}, "config": cfg.to_dict()})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    val = dict(history.validation)
    _write_csv(out / "history.csv", ["iteration", "train_loss", "val_loss", "seconds"],
               [[i, l, val.get(i, ""), s] for i, (l, s) in enumerate(zip(history.train_loss, history.iteration_seconds))])
    print(f"coreset {coreset.content_hash()} written to {out / 'coreset.ckpt'} "
          f"(best iteration {history.best_iteration}, stopped at {history.stopped_at})")
    return 0


def _load_kernel(coreset, args, seed):
    from .distill import kernel_for

    return kernel_for(coreset, args.kernel, n_networks=args.n_eval, channels=args.channels_eval, seed=seed)


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .distill import evaluate_coreset

    coreset, header = load_checkpoint(args.checkpoint)
    _, test = load_dataset(args.dataset)
    seeds = _ints(args.seeds)
    rows = []
    for seed in seeds:
        kernel = _load_kernel(coreset, args, seed)
        acc = evaluate_coreset(coreset, test, kernel)
        rows.append([seed, args.kernel, args.n_eval, args.channels_eval, acc])
        print(f"seed {seed}\t{args.kernel}\taccuracy {100 * acc:.2f}%")
    accs = np.array([r[-1] for r in rows]) * 100
    print(f"accuracy {accs.mean():.2f} +- {accs.std():.2f} over {len(seeds)} seed(s)")
    ipc = coreset.size // coreset.num_classes
    ref = REFERENCE_ACCURACY.get((args.dataset, ipc, coreset.learn_labels))
    if ref:
        print(f"reference (published, full-scale settings): {ref[0]} +- {ref[1]}")
    if args.csv:
        _write_csv(args.csv, ["seed", "kernel", "n_eval", "channels_eval", "accuracy"], rows)
    return 0


def cmd_influence(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .interpret import InfluenceModel, influence_embedding_table, similar_training_points, top_influence

    coreset, _ = load_checkpoint(args.checkpoint)
    train, test = load_dataset(args.dataset)
    kernel = _load_kernel(coreset, args, args.kernel_seed)
    if args.image:
        x = np.load(args.image).astype(np.float32).reshape(coreset.image_shape)
        true = -1
    else:
        x, true = test.images[args.test_index], int(test.labels[args.test_index])
    pool = train if args.table_size is None else train.subset(np.arange(min(args.table_size, len(train))))
    model = InfluenceModel(coreset, kernel)
    z = model.embeddings(x[None])[0]
    scores = np.abs(z).sum(axis=1)
    cache = Path(args.cache) if args.cache else None
    table = influence_embedding_table(model, kernel, pool, cache_path=cache)
    k = args.k
    if k > len(table):
        print(f"warning: k={k} clamped to table size {len(table)}", file=sys.stderr)
        k = len(table)
    pred = int(np.argmax(model.proba_full(model.query_kernel(x[None]))[0]))
    print(f"# query predicted {pred} true {true}")
    print("section\trank\tindex\tscore\tpredicted_class\ttrue_class")
    idx, vals = top_influence(scores, min(k, coreset.size))
    for r, (i, v) in enumerate(zip(idx, vals), start=1):
        print(f"I\t{r}\t{i}\t{v:.6g}\t{pred}\t{int(coreset.class_ids[i])}")
    idx, vals = similar_training_points(z, table, k)
    preds = np.argmax(model.query_kernel(pool.images[idx]) @ model.alpha, axis=1)
    for r, (i, v, p) in enumerate(zip(idx, vals, preds), start=1):
        print(f"J\t{r}\t{i}\t{v:.6g}\t{p}\t{int(pool.labels[i])}")
    return 0


def cmd_transfer(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import class_balanced_indices, load_dataset
    from .transfer import TransferConfig, eval_finite, grid_search, write_results_csv

    coreset, _ = load_checkpoint(args.checkpoint)
    train, test = load_dataset(args.dataset)
    cfg = TransferConfig(architecture=args.architecture, channels=args.channels,
                         learning_rates=tuple(_floats(args.lrs)), weight_decays=tuple(_floats(args.wds)),
                         alphas=tuple(_floats(args.alphas)), centering=not args.no_centering,
                         steps=args.steps, patience=args.patience)
    rng = np.random.default_rng(args.val_seed)
    val_idx = class_balanced_indices(train.labels, args.val_size // train.num_classes, train.num_classes, rng)
    val = train.subset(val_idx)
    results = []
    for seed in _ints(args.seeds):
        best, rows = grid_search(coreset, cfg, val.images, val.labels, seed=seed)
        if best.model is not None:
            best.test_accuracy = eval_finite(best.model, test.images, test.labels)
        results.extend(rows)
        print(f"seed {seed}: best lr={best.lr} wd={best.weight_decay} alpha={best.alpha} "
              f"val {100 * best.val_accuracy:.2f}% test {100 * (best.test_accuracy or 0):.2f}%")
    write_results_csv(args.out, results)
    print(f"{len(results)} rows written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import run_scaling

    sizes, nets = _ints(args.sizes), _ints(args.networks)

    def progress(row):
        print(f"|S|={row.support_size}\tN={row.n_networks}\t{row.mean_seconds:.4f}s", file=sys.stderr)

    rep = run_scaling(sizes, nets, args.channels, args.batch_size, args.repeats, args.warmup, args.seed,
                      progress=progress)
    rows = [[r.support_size, r.n_networks, r.mean_seconds, r.std_seconds, rep.kip_seconds(r.support_size)]
            for r in rep.rows]
    _write_csv(args.out, ["support_size", "n_networks", "mean_seconds", "std_seconds", "kip_seconds"], rows)
    for n, (slope, icpt, r2) in rep.fits_by_size.items():
        print(f"time vs |S| at N={n}: slope {slope:.3g}s intercept {icpt:.3g}s R2 {r2:.4f}; "
              f"KIP crossover at |S|={rep.crossover(n):.3g}")
    for s, (slope, icpt, r2) in rep.fits_by_networks.items():
        print(f"time vs N at |S|={s}: slope {slope:.3g}s intercept {icpt:.3g}s R2 {r2:.4f}")
    print(f"KIP exact entry {rep.kip_entry_seconds:.4g}s; overlay at |S|={max(sizes)}: "
          f"{rep.kip_seconds(max(sizes)):.4g}s per iteration")
    return 0


# -- parser -----------------------------------------------------------------------------------


def _kernel_flags(p) -> None:
    p.add_argument("--kernel", default="empirical", choices=["empirical", "exact-fc-nngp", "exact-fc-ntk"])
    p.add_argument("--n-eval", type=int, default=16)
    p.add_argument("--channels-eval", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfad", description="Dataset distillation with random-feature NNGP kernels")
    parser.add_argument("--threads", type=int, default=None, help="pin BLAS thread count")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="distill a coreset")
    p.add_argument("--config", help="key = value config file; flags override it")
    for key, (flag, typ) in DISTILL_FLAGS.items():
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--learn-labels", action="store_true")
    p.add_argument("--out", default="runs/distill")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="KRR test accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", default="mnist")
    _kernel_flags(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("influence", help="rank coreset elements and training points for a query")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", default="mnist")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--test-index", type=int)
    g.add_argument("--image", help=".npy file holding one preprocessed image")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--cache")
    p.add_argument("--table-size", type=int)
    p.add_argument("--kernel-seed", type=int, default=0)
    _kernel_flags(p)
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("transfer", help="train finite networks on a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", default="mnist")
    p.add_argument("--architecture")
    p.add_argument("--channels", type=int, default=1024)
    p.add_argument("--lrs", default="1e-1,1e-2,1e-3,1e-4")
    p.add_argument("--wds", default="0,1e-3")
    p.add_argument("--alphas", default="1,2,8,16")
    p.add_argument("--no-centering", action="store_true")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--patience", type=int, default=300)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--val-size", type=int, default=1000)
    p.add_argument("--val-seed", type=int, default=0)
    p.add_argument("--out", default="transfer.csv")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("bench", help="per-iteration scaling benchmark")
    p.add_argument("--sizes", default="10,20,50,100,200,500")
    p.add_argument("--networks", default="1,2,4,8")
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=1280)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except RfadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
