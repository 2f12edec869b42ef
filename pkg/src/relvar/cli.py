"""Command-line entry point: ``relvar <subcommand> ...``.

Exit codes: 0 success, 2 usage or data error, 3 search finished but more
than half of its jobs failed. Lines starting with ``RESULT `` carry a JSON
object for scripts; everything else is for people.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .data import (
    DEFAULT_FILL_VALUES,
    MODIS_REGRESSORS,
    TARGET,
    SynthSpec,
    bias_histogram,
    clean,
    load_csv,
    synth_generate,
)
from .errors import ConfigError, RelvarError
from .mi import MiConfig, mutual_information
from .regressor import TrainConfig, predict, rms_error, save_model, split_indices, train_lm
from .search import (
    EVAL_SCOPES,
    RankingTable,
    count_subsets,
    default_workers,
    report_table,
    run_search,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEGRADED = 3


def emit(payload: dict) -> None:
    print("RESULT " + json.dumps(payload, sort_keys=True))


def _floats(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _output_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get("RELVAR_OUTPUT_DIR")
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def resolve_features(columns, target: str, spec: str) -> list[str]:
    """Turn a ``--features`` value into an ordered list of column names.

    ``all`` means the 15 MODIS regressors in their canonical order when the
    file has all of them, otherwise every non-target column in file order.
    A comma list may give column names or 1-based indices into that
    universe.
    """
    columns = list(columns)
    if all(n in columns for n in MODIS_REGRESSORS) and target not in MODIS_REGRESSORS:
        universe = list(MODIS_REGRESSORS)
    else:
        universe = [c for c in columns if c != target]
    spec = spec.strip()
    if spec == "all":
        return universe
    out = []
    for tok in (t.strip() for t in spec.split(",")):
        if tok.isdigit():
            i = int(tok)
            if not 1 <= i <= len(universe):
                raise ConfigError(f"feature index {i} outside 1..{len(universe)}")
            tok = universe[i - 1]
        elif tok not in columns:
            raise ConfigError(f"missing column: {tok!r}")
        if tok == target:
            raise ConfigError("the target cannot also be a feature")
        if tok in out:
            raise ConfigError(f"feature {tok!r} listed twice")
        out.append(tok)
    if not out:
        raise ConfigError("no features selected")
    return out


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        hidden_dim=args.hidden,
        seed=args.seed,
        max_epochs=args.max_epochs,
        patience=args.patience,
        lm_lambda_init=args.lambda_init,
        lm_lambda_factor=args.lambda_factor,
        lambda_max=args.lambda_max,
    )


def _load_for_training(args):
    data = load_csv(args.input, schema=[args.target])
    features = resolve_features(data.names, args.target, args.features)
    data, report = clean(data, args.fill_values, columns=features + [args.target])
    return data, features, report


# -- subcommands ------------------------------------------------------------


def cmd_mi(args) -> int:
    cfg = MiConfig(chi2_threshold=args.chi2, min_cell_count=args.min_cell, clamp_negative=not args.no_clamp)
    data = load_csv(args.input, schema=[args.x, args.y])
    data, report = clean(data, args.fill_values, columns=[args.x, args.y])
    score = mutual_information(data.column(args.x), data.column(args.y), cfg)
    print(f"rows used: {data.row_count} (dropped {report.dropped_total})")
    print(f"mi_nats:   {score.mi_nats:.6f}")
    print(f"raw_mi:    {score.raw_mi:.6f}")
    print(f"pearson:   {score.pearson:.6f}")
    print(f"delta:     {score.delta:.6f}")
    emit({
        "cmd": "mi", "x": args.x, "y": args.y, "n": score.n,
        "mi_nats": score.mi_nats, "raw_mi": score.raw_mi, "pearson": score.pearson, "delta": score.delta,
    })
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data, features, _ = _load_for_training(args)
    model, trace = train_lm(data, args.target, features, cfg)
    pred = predict(model, data)
    obs = data.column(args.target)
    tr, va, te = split_indices(data.row_count, cfg)
    result = {
        "cmd": "train",
        "features": features,
        "epochs": trace.epochs,
        "stop_reason": trace.stop_reason,
        "train_rms": rms_error(pred[tr], obs[tr]),
        "val_rms": rms_error(pred[va], obs[va]),
        "test_rms": rms_error(pred[te], obs[te]),
    }
    if args.output:
        out = _output_path(args.output)
        save_model(model, out)
        trace_path = _output_path(args.trace) if args.trace else out.with_name(out.name + ".trace.csv")
        trace.to_csv(trace_path)
        result["model"] = str(out)
        result["trace"] = str(trace_path)
    print(f"features:  {','.join(features)}")
    print(f"epochs:    {trace.epochs} ({trace.stop_reason})")
    print(f"train RMSE {result['train_rms']:.6g}  val RMSE {result['val_rms']:.6g}  test RMSE {result['test_rms']:.6g}")
    emit(result)
    return EXIT_OK


class _Progress:
    def __init__(self, stream=sys.stderr, every: float = 1.0):
        self.stream = stream
        self.every = every
        self.start = time.monotonic()
        self.last = 0.0
        self.first_done = None

    def __call__(self, done, total, result):
        now = time.monotonic()
        if self.first_done is None:
            self.first_done = done - 1
        if now - self.last < self.every and done < total:
            return
        self.last = now
        fresh = done - self.first_done
        rate = fresh / max(now - self.start, 1e-9)
        eta = (total - done) / rate if rate > 0 else float("inf")
        mins, secs = divmod(int(eta), 60) if eta != float("inf") else (0, 0)
        self.stream.write(f"\rprogress: {done}/{total} jobs, ETA {mins}m{secs:02d}s ")
        if done == total:
            self.stream.write("\n")
        self.stream.flush()


def cmd_search(args) -> int:
    cfg = _train_config(args)
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise ConfigError("--workers must be >= 1")
    if args.resume and args.restart:
        raise ConfigError("--resume and --restart are mutually exclusive")

    if args.dry_run:
        data = load_csv(args.input, schema=[args.target])
        features = resolve_features(data.names, args.target, args.features)
        jobs = count_subsets(len(features), args.min_size, args.max_size)
        print(f"universe: {','.join(features)}")
        print(f"jobs:     {jobs}")
        emit({"cmd": "search", "dry_run": True, "jobs": jobs, "universe": features})
        return EXIT_OK

    if not args.output:
        raise ConfigError("--output is required unless --dry-run")
    data, features, report = _load_for_training(args)
    out = _output_path(args.output)
    ckpt = _output_path(args.checkpoint) if args.checkpoint else out.with_name(out.name + ".ckpt")
    if ckpt.exists() and not (args.resume or args.restart):
        raise ConfigError(f"checkpoint {ckpt} exists; pass --resume to continue it or --restart to discard it")
    total = count_subsets(len(features), args.min_size, args.max_size)
    print(f"rows: {data.row_count} (dropped {report.dropped_total}); universe: {len(features)} columns; jobs: {total}; workers: {workers}")
    table = run_search(
        data,
        args.target,
        cfg,
        universe=features,
        min_size=args.min_size,
        max_size=args.max_size,
        workers=workers,
        checkpoint_path=ckpt,
        resume=args.resume,
        eval_scope=args.eval_scope,
        progress=None if args.quiet else _Progress(),
    )
    table.write(out)
    print(report_table(table, args.top), end="")
    best = table.results[0]
    emit({
        "cmd": "search",
        "jobs": len(table),
        "failed": table.n_failed,
        "ranking": str(out),
        "checkpoint": str(ckpt),
        "best": best.subset.canonical,
        "best_mi": best.score.mi_nats if best.ok else None,
        "best_pearson": best.score.pearson if best.ok else None,
    })
    if table.n_failed * 2 > len(table):
        print(f"error: {table.n_failed} of {len(table)} jobs failed", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_report(args) -> int:
    table = RankingTable.read(args.input)
    print(report_table(table, args.top), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    relevant = {int(t) for t in args.relevant.split(",") if t.strip()}
    names = MODIS_REGRESSORS if args.modis_names else None
    n_features = len(MODIS_REGRESSORS) if args.modis_names and args.n_features is None else args.n_features
    if n_features is None:
        raise ConfigError("--n-features is required unless --modis-names")
    spec = SynthSpec(
        n_features=n_features,
        relevant=relevant,
        generator=args.generator,
        noise_sigma=args.noise,
        n_rows=args.rows,
        seed=args.seed,
        feature_names=names,
        target_name=TARGET if args.modis_names else args.target_name,
    )
    data = synth_generate(spec)
    out = _output_path(args.output)
    data.to_csv(out)
    print(f"wrote {data.row_count} rows x {len(data.names)} columns to {out}")
    emit({"cmd": "synth", "output": str(out), "rows": data.row_count, "columns": data.names})
    return EXIT_OK


def cmd_bias_hist(args) -> int:
    data = load_csv(args.input, schema=[args.col_a, args.col_b])
    data, _ = clean(data, args.fill_values, columns=[args.col_a, args.col_b])
    hist = bias_histogram(data, args.col_a, args.col_b, args.bins)
    if args.output:
        hist.to_csv(_output_path(args.output))
    for edge, count in zip(hist.bin_edges[:-1], hist.counts):
        print(f"{edge: .6g}\t{count}")
    emit({"cmd": "bias-hist", "bins": len(hist.counts), "total": int(hist.counts.sum()), "output": args.output})
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--target", default=TARGET, help="target column (default %(default)s)")
    p.add_argument("--features", default="all", help='comma list of names or 1-based indices, or "all"')
    p.add_argument("--hidden", type=int, default=200, help="hidden units (default %(default)s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=6)
    p.add_argument("--lambda-init", type=float, default=1e-3)
    p.add_argument("--lambda-factor", type=float, default=10.0)
    p.add_argument("--lambda-max", type=float, default=1e10)


def _add_fill(p):
    p.add_argument(
        "--fill-values",
        type=_floats,
        default=DEFAULT_FILL_VALUES,
        help="comma-separated fill sentinels to drop (default -9999,-999)",
    )


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="relvar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"relvar {__version__}")
    parser.add_argument("--config", help="JSON file of flag defaults (flags override it)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("mi", help="mutual information, Pearson rho and delta between two columns")
    p.add_argument("--input", required=True)
    p.add_argument("--x", required=True, help="first column")
    p.add_argument("--y", required=True, help="second column")
    p.add_argument("--chi2", type=float, default=7.815, help="split threshold (default %(default)s)")
    p.add_argument("--min-cell", type=int, default=8, help="smallest splittable cell (default %(default)s)")
    p.add_argument("--no-clamp", action="store_true", help="report negative raw estimates unclamped")
    _add_fill(p)
    p.set_defaults(func=cmd_mi)
    subs["mi"] = p

    p = sub.add_parser("train", help="train one network and report RMSE per split")
    p.add_argument("--input", required=True)
    _add_train_flags(p)
    _add_fill(p)
    p.add_argument("--output", help="model file to write")
    p.add_argument("--trace", help="per-epoch trace CSV (default <output>.trace.csv)")
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("search", help="brute-force search over all feature subsets")
    p.add_argument("--input", required=True)
    _add_train_flags(p)
    _add_fill(p)
    p.add_argument("--min-size", type=int, default=1)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="worker processes (env RELVAR_WORKERS, else CPU count)")
    p.add_argument("--eval-scope", choices=EVAL_SCOPES, default="all", help="rows used for the MI score")
    p.add_argument("--output", help="final ranking file (JSON lines)")
    p.add_argument("--checkpoint", help="checkpoint file (default <output>.ckpt)")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("--restart", action="store_true", help="discard an existing checkpoint")
    p.add_argument("--top", type=int, default=15, help="rows of the ranking to print")
    p.add_argument("--dry-run", action="store_true", help="only count the jobs")
    p.add_argument("--quiet", action="store_true", help="no progress line")
    p.set_defaults(func=cmd_search)
    subs["search"] = p

    p = sub.add_parser("report", help="print the top of a ranking file")
    p.add_argument("--input", required=True)
    p.add_argument("--top", type=int, default=15)
    p.set_defaults(func=cmd_report)
    subs["report"] = p

    p = sub.add_parser("synth", help="write a synthetic dataset with a known relevant set")
    p.add_argument("--n-features", type=int, default=None)
    p.add_argument("--relevant", required=True, help="1-based feature indices, e.g. 1,3,5")
    p.add_argument("--generator", required=True, help='target expression, e.g. "sin(3*x1)+2*x3*x5"')
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--rows", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-name", default="target")
    p.add_argument("--modis-names", action="store_true", help="name columns after the 15 MODIS regressors")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)
    subs["synth"] = p

    p = sub.add_parser("bias-hist", help="histogram of col_a - col_b")
    p.add_argument("--input", required=True)
    p.add_argument("--col-a", default="AOD0550")
    p.add_argument("--col-b", default=TARGET)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--output", help="histogram CSV (bin_left_edge,count)")
    _add_fill(p)
    p.set_defaults(func=cmd_bias_hist)
    subs["bias-hist"] = p

    return parser, subs


def _validate_counts(args) -> None:
    for name in ("top", "bins", "rows", "min_size"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 1")


def main(argv=None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            try:
                overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from None
            if not isinstance(overrides, dict):
                raise ConfigError("config file must hold a JSON object")
            sp = subs[args.command]
            known = {a.dest for a in sp._actions}
            unknown = sorted(k for k in overrides if k.replace("-", "_") not in known)
            if unknown:
                raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        _validate_counts(args)
        return args.func(args)
    except (RelvarError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
