"""Command-line interface: ``hiercast {synth,train,eval,hfmv,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``--out-dir``
defaults to ``$HIERCAST_OUT_DIR`` (or the current directory).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import dump_config, load_config
from .datasets import apply_normalization, generate_synthetic, load_panel
from .errors import CheckpointMismatchError, ConfigError, DataError, HierarchyError, NaNLossError, SchemaVersionError
from .evaluation import coherency_of, default_halfwidth, evaluate_origins, run_hfmv
from .hierarchy import consistency_report, load_hierarchy
from .refinement import mean_gamma
from .state import load_checkpoint, save_checkpoint
from .training import backtest_select, fit, tuning_grid

log = logging.getLogger("hiercast")

SUMMARY_SCHEMA_VERSION = 1
OUT_DIR_ENV = "HIERCAST_OUT_DIR"


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _artifact_version() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, inputs: list, seed, outputs: list, started: str) -> Path:
    path = out / f"manifest_{command}.json"
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": seed,
        "outputs": [str(p) for p in outputs] + [str(path)],
        "started": started,
        "finished": _now(),
        "version": _artifact_version(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = _now()
    if args.leaves < 2 or args.depth < 2 or args.length < 20:
        raise UsageError("need --leaves >= 2, --depth >= 2 and --length >= 20")
    if args.noise < 0:
        raise UsageError("--noise must be non-negative")
    out = _out_dir(args)
    h, panel = generate_synthetic(
        args.leaves, args.depth, args.length, args.consistency, args.noise, args.seed
    )
    panel_path, h_path = out / "panel.csv", out / "hierarchy.csv"
    panel.to_csv(panel_path)
    h.to_csv(h_path)
    rep = consistency_report(h, panel)
    log.info("synthetic panel: N=%d T=%d consistency rms=%.3g", panel.n_nodes, panel.T, rep.overall_rms)
    config = dict(
        leaves=args.leaves, depth=args.depth, length=args.length, consistency=args.consistency,
        noise=args.noise, seed=args.seed,
    )
    _write_manifest(out, "synth", config, [], args.seed, [panel_path, h_path], started)
    return 0


def _load_inputs(args):
    h = load_hierarchy(args.hierarchy)
    return h, load_panel(args.panel, h)


def cmd_train(args) -> int:
    started = _now()
    out = _out_dir(args)
    cfg = load_config(args.config)
    if args.variant is not None:
        cfg = cfg.with_(variant=args.variant)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    h, panel = _load_inputs(args)
    if args.tune:
        grid = tuning_grid(cfg)
        cfg, scores = backtest_select(grid, panel.truncate(panel.T - cfg.effective_holdout), h, return_scores=True)
        log.info("backtest selected lambda=%g batch_size=%d lr=%g", cfg.lam, cfg.batch_size, cfg.learning_rate)
    try:
        result = fit(panel, h, cfg)
    except NaNLossError as exc:
        print(f"error: {exc} (phase={exc.phase}, epoch={exc.epoch})", file=sys.stderr)
        return 1
    ckpt, hist, cfg_path = out / "checkpoint.pt", out / "history.csv", out / "config.yaml"
    save_checkpoint(
        ckpt, result.state, result.hierarchy, cfg.to_dict(), result.panel.offset, result.panel.scale,
        result.train_end, cfg.variant, cfg.preprocess,
    )
    result.history.to_csv(hist)
    dump_config(cfg, cfg_path)
    _write_manifest(
        out, "train", cfg.to_dict(), [Path(args.panel), Path(args.hierarchy), Path(args.config)],
        cfg.seed, [ckpt, hist, cfg_path], started,
    )
    return 0


def _checkpoint_inputs(args):
    ck = load_checkpoint(args.checkpoint)
    h, panel = _load_inputs(args)
    if not _same_structure(ck, h):
        raise CheckpointMismatchError("hierarchy does not match the checkpoint")
    if panel.T <= ck.train_end:
        raise CheckpointMismatchError(
            f"panel has {panel.T} steps but the model was trained on {ck.train_end}; nothing to evaluate"
        )
    proc, ph = apply_normalization(panel, h, ck.offset, ck.scale, ck.preprocess)
    return ck, proc, ph


def _same_structure(ck, h) -> bool:
    # sum preprocessing stores rescaled weights, so only the edges are compared
    if ck.preprocess == "sum":
        return [e[:2] for e in ck.hierarchy.edges] == [e[:2] for e in h.edges]
    return ck.hierarchy.edges == h.edges


def _gamma_stats(state, h) -> dict:
    g = state.refinement.gammas()
    return {scope: dict(zip(("mean", "std"), mean_gamma(g, h, scope))) for scope in ("all", "leaves", "internal")}


def cmd_eval(args) -> int:
    started = _now()
    out = _out_dir(args)
    ck, panel, h = _checkpoint_inputs(args)
    tau = ck.config["tau"] if args.tau is None else args.tau
    if tau != ck.config["tau"]:
        raise CheckpointMismatchError(f"checkpoint was trained for tau={ck.config['tau']}, got --tau {tau}")
    origins = range(ck.train_end - 1, panel.T - tau)
    if len(origins) == 0:
        raise CheckpointMismatchError("no held-out targets after the training range")
    L = default_halfwidth(panel, tau, ck.train_end)
    report = evaluate_origins(ck.state, panel, h, tau, origins, args.samples, args.seed, L)
    metrics_path, summary_path = out / "metrics.csv", out / "summary.json"
    report.to_csv(metrics_path)
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "dataset": args.dataset or Path(args.panel).stem,
        "variant": ck.variant,
        "seed": args.seed,
        "config": ck.config,
        "tau": tau,
        "samples": args.samples,
        "n_origins": len(origins),
        "overall": {"crps": report.overall[0], "interval_score": report.overall[1]},
        "per_level": {str(k): {"crps": c, "interval_score": s} for k, (c, s) in report.per_level.items()},
        "gamma": _gamma_stats(ck.state, h),
        "coherency_loss": coherency_of(ck.state, panel, h, origins, args.seed),
        "interval_halfwidth": report.interval_halfwidth.tolist(),
    }
    _write_json(summary_path, summary)
    _write_manifest(
        out, "eval", {"tau": tau, "samples": args.samples, "checkpoint_config": ck.config},
        [Path(args.checkpoint), Path(args.panel), Path(args.hierarchy)], args.seed,
        [metrics_path, summary_path], started,
    )
    return 0


def _parse_k_grid(text: str) -> list[float]:
    parts = [p.strip() for p in (text or "").split(",") if p.strip()]
    if not parts:
        raise UsageError("--k-grid must list at least one percentage")
    try:
        ks = [float(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"bad --k-grid value: {exc}") from exc
    if any(not 0 <= k <= 100 for k in ks):
        raise UsageError("--k-grid values must lie in [0, 100]")
    return ks


def cmd_hfmv(args) -> int:
    started = _now()
    ks = _parse_k_grid(args.k_grid)
    out = _out_dir(args)
    ck, panel, h = _checkpoint_inputs(args)
    tau = ck.config["tau"]
    baseline = None
    rows = []
    for k in ks:
        res = run_hfmv(
            ck.state, panel, h, args.rho, k, tau, args.iterations, args.seed, args.samples, baseline=baseline
        )
        baseline = res.baseline_metrics
        rows.append((k, res.crps, res.pct_degradation))
    curve = out / "hfmv.csv"
    with curve.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "crps", "pct_degradation"])
        for k, c, pct in rows:
            w.writerow([repr(k), repr(c), repr(pct)])
    outputs = [curve]
    if args.plot:
        outputs.append(_plot_curve(out / "hfmv.png", rows, ck.variant))
    _write_manifest(
        out, "hfmv",
        {"rho": args.rho, "k_grid": ks, "iterations": args.iterations, "samples": args.samples,
         "checkpoint_config": ck.config},
        [Path(args.checkpoint), Path(args.panel), Path(args.hierarchy)], args.seed, outputs, started,
    )
    return 0


def _plot_curve(path: Path, rows, label: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([r[0] for r in rows], [r[2] for r in rows], marker="o", label=label)
    ax.set_xlabel("% missing values (k)")
    ax.set_ylabel("% increase in CRPS")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


REPORT_COLUMNS = ("variant", "dataset", "seed", "crps", "interval_score", "gamma_mean", "gamma_std", "coherency_loss")


def cmd_report(args) -> int:
    started = _now()
    if not args.runs:
        raise UsageError("--runs needs at least one summary file")
    out = _out_dir(args)
    summaries = []
    for p in args.runs:
        s = json.loads(Path(p).read_text(encoding="utf-8"))
        summaries.append(s)
    versions = {s.get("schema_version") for s in summaries}
    if versions != {SUMMARY_SCHEMA_VERSION}:
        raise SchemaVersionError(f"summary schema versions {sorted(map(str, versions))} do not all equal {SUMMARY_SCHEMA_VERSION}")
    rows = []
    for s in sorted(summaries, key=lambda s: (s["dataset"], s["variant"], s["seed"])):
        rows.append((
            s["variant"], s["dataset"], s["seed"], s["overall"]["crps"], s["overall"]["interval_score"],
            s["gamma"]["all"]["mean"], s["gamma"]["all"]["std"], s["coherency_loss"],
        ))
    csv_path, txt_path = out / "report.csv", out / "report.txt"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], r[2]] + [repr(float(v)) for v in r[3:]])
    txt_path.write_text(_format_table(rows), encoding="utf-8")
    _write_manifest(out, "report", {"runs": [str(p) for p in args.runs]}, [Path(p) for p in args.runs], None,
                    [csv_path, txt_path], started)
    return 0


def _format_table(rows) -> str:
    header = ("variant", "dataset", "seed", "CRPS", "IS", "gamma", "L2")
    body = [
        (r[0], r[1], str(r[2]), f"{r[3]:.4f}", f"{r[4]:.4f}", f"{r[5]:.3f}±{r[6]:.3f}", f"{r[7]:.3f}")
        for r in rows
    ]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *body]]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiercast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic hierarchical panel")
    s.add_argument("--leaves", type=int, default=8)
    s.add_argument("--depth", type=int, default=3)
    s.add_argument("--length", type=int, default=200)
    s.add_argument("--consistency", choices=("strong", "weak"), default="strong")
    s.add_argument("--noise", type=float, default=0.1, help="noise std added to every node in weak mode")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="pretrain and train a forecaster")
    t.add_argument("--panel", required=True)
    t.add_argument("--hierarchy", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--variant", choices=("full", "p_global", "p_finetune", "p_nocoherent"))
    t.add_argument("--seed", type=int)
    t.add_argument("--tune", action="store_true", help="select lambda, batch size and lr by backtesting")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the steps after its training range")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--panel", required=True)
    e.add_argument("--hierarchy", required=True)
    e.add_argument("--tau", type=int)
    e.add_argument("--samples", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--dataset", help="dataset label for the summary (default: panel file stem)")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("hfmv", help="forecast degradation under missing input values")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--panel", required=True)
    m.add_argument("--hierarchy", required=True)
    m.add_argument("--rho", type=int, default=5)
    m.add_argument("--k-grid", default="0,2,5,10", help="comma-separated missing percentages")
    m.add_argument("--iterations", type=int, default=10)
    m.add_argument("--samples", type=int, default=100)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--plot", action="store_true", help="also write hfmv.png")
    m.add_argument("--out-dir")
    m.set_defaults(func=cmd_hfmv)

    r = sub.add_parser("report", help="merge run summaries into a comparison table")
    r.add_argument("--runs", nargs="*", default=[])
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointMismatchError, SchemaVersionError, DataError, HierarchyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
