"""Time a full 15-feature search (32,767 jobs) on a small synthetic table.

Uses a checkpoint, so an interrupted run continues with ``--resume``.
"""
import argparse
import sys
import time

from relvar.data import MODIS_REGRESSORS, TARGET, SynthSpec, synth_generate
from relvar.regressor import TrainConfig
from relvar.search import report_table, run_search


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--rows", type=int, default=500)
    p.add_argument("--hidden", type=int, default=5)
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default="scalability.ckpt")
    p.add_argument("--output", default="scalability.jsonl")
    p.add_argument("--resume", action="store_true")
    args = p.parse_args(argv)

    spec = SynthSpec(
        15, {1, 3, 5}, "sin(3*x1)+2*x3*x5", noise_sigma=0.05, n_rows=args.rows, seed=9,
        feature_names=MODIS_REGRESSORS, target_name=TARGET,
    )
    data = synth_generate(spec)
    start = time.perf_counter()

    def progress(done, total, _):
        if done % 500 == 0 or done == total:
            rate = done / (time.perf_counter() - start)
            sys.stderr.write(f"\r{done}/{total} jobs, {rate:.1f} jobs/s ")

    table = run_search(
        data, TARGET, TrainConfig(hidden_dim=args.hidden, seed=args.seed), workers=args.workers,
        checkpoint_path=args.checkpoint, resume=args.resume, progress=progress,
    )
    elapsed = time.perf_counter() - start
    sys.stderr.write("\n")
    table.write(args.output)
    print(report_table(table, 15), end="")
    print(f"\n{len(table)} jobs ({table.n_failed} failed) in {elapsed / 60:.1f} min with {args.workers} workers")


if __name__ == "__main__":
    main()
