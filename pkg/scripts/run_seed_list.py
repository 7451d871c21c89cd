"""Train and evaluate one configuration for several seeds via the CLI.

    python3 scripts/run_seed_list.py --panel data/panel.csv --hierarchy data/hierarchy.csv \
        --config config.yaml --variant full --seeds 0 1 2 3 4 --out-dir runs/ [--parallel 2]

Each seed gets ``<out-dir>/<variant>/seed<k>/`` with the checkpoint, history,
metrics and summary; a final ``report`` merges the summaries.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from hiercast.cli import main as cli


def one_seed(args: argparse.Namespace, seed: int) -> tuple[int, int]:
    run_dir = Path(args.out_dir) / args.variant / f"seed{seed}"
    common = ["--panel", args.panel, "--hierarchy", args.hierarchy]
    code = cli(["train", *common, "--config", args.config, "--variant", args.variant,
                "--seed", str(seed), "--out-dir", str(run_dir)])
    if code == 0:
        code = cli(["eval", "--checkpoint", str(run_dir / "checkpoint.pt"), *common,
                    "--samples", str(args.samples), "--seed", str(seed), "--out-dir", str(run_dir)])
    return seed, code


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--panel", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--variant", default="full")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--parallel", type=int, default=1, help="number of worker processes (default: sequential)")
    p.add_argument("--out-dir", default="runs")
    args = p.parse_args(argv)

    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            results = list(pool.map(one_seed, [args] * len(args.seeds), args.seeds))
    else:
        results = [one_seed(args, s) for s in args.seeds]
    failed = [s for s, code in results if code != 0]
    if failed:
        print(f"seeds failed: {failed}", file=sys.stderr)
        return 1
    summaries = [str(Path(args.out_dir) / args.variant / f"seed{s}" / "summary.json") for s in args.seeds]
    return cli(["report", "--runs", *summaries, "--out-dir", str(Path(args.out_dir) / args.variant)])


if __name__ == "__main__":
    sys.exit(main())
