"""Command line entry point: prepare, train, eval, ablate, sweep, verify, plot."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config
from .data import DataError

log = logging.getLogger("krigwrap")

RUN_ROOT_ENV = "KRIGWRAP_RUN_ROOT"
EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- run directories

def run_root(args) -> Path:
    return Path(args.run_root or os.environ.get(RUN_ROOT_ENV) or "runs")


def file_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=lambda q: q.name):
        h.update(p.name.encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """A run directory with a manifest; completed runs with the same input hash are skipped."""

    def __init__(self, path: Path, command: str, input_hash: str, cfg: ExperimentConfig | None):
        self.path, self.command, self.input_hash, self.cfg = Path(path), command, input_hash, cfg
        self.manifest_path = self.path / "manifest.json"

    def manifest(self) -> dict | None:
        if not self.manifest_path.is_file():
            return None
        return json.loads(self.manifest_path.read_text())

    def is_complete(self) -> bool:
        m = self.manifest()
        return bool(m and m.get("status") == "complete" and m.get("input_hash") == self.input_hash)

    def start(self, force: bool):
        if self.path.exists() and force:
            for p in sorted(self.path.rglob("*"), reverse=True):
                p.unlink() if p.is_file() else p.rmdir()
        old = self.manifest()
        if old and old.get("input_hash") != self.input_hash:
            raise UsageError(f"{self.path} holds a different run; pass --force or choose another --out")
        self.path.mkdir(parents=True, exist_ok=True)
        if self.cfg is not None:
            (self.path / "config.txt").write_text(dump_config(self.cfg))
        self._write({"command": self.command, "input_hash": self.input_hash, "status": "running",
                     "created": (old or {}).get("created", _now())})

    def finish(self, outputs: dict):
        m = self.manifest() or {}
        files = sorted(p for p in self.path.rglob("*") if p.is_file() and p.name != "manifest.json"
                       and p.suffix != ".png")
        m.update(status="complete", completed=_now(), outputs=outputs,
                 files=[str(p.relative_to(self.path)) for p in files], content_hash=file_hash(files))
        self._write(m)

    def _write(self, m: dict):
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True, default=str) + "\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    extra = list(getattr(args, "set", None) or [])
    if getattr(args, "data", None):
        extra.append(f"data.source={args.data}")
    return apply_overrides(cfg, extra)


def _input_hash(command: str, cfg: ExperimentConfig, extra: dict | None = None) -> str:
    payload = {"command": command, "config": cfg.to_dict(), "extra": extra or {}}
    if cfg.data.source != "synthetic":
        man = Path(cfg.data.source) / "manifest.json"
        if not man.is_file():
            raise DataError(f"prepared dataset not found: {man}")
        payload["dataset"] = json.loads(man.read_text()).get("content_hash")
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()).hexdigest()


def _run_dir(args, command: str, cfg: ExperimentConfig | None, input_hash: str) -> RunDir:
    path = Path(args.out) if getattr(args, "out", None) else run_root(args) / f"{command}-{cfg.name}-{input_hash[:10]}"
    return RunDir(path, command, input_hash, cfg)


def _skip(rd: RunDir) -> bool:
    if rd.is_complete():
        print(f"{rd.path}: already complete, skipping (use --force to rerun)")
        return True
    return False


# --------------------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    from .pipeline import Dataset, dataset_from_files, prepare_dataset, synthetic_dataset
    cfg = _config(args)
    if args.synthetic is not None:
        pairs = [p for p in args.synthetic.split(",") if p.strip()]
        cfg = apply_overrides(cfg, [f"data.{p.strip()}" for p in pairs])
        ds = synthetic_dataset(cfg)
        source = {"synthetic": cfg.to_dict()["data"]}
    else:
        if not args.series or not args.meta:
            raise UsageError("prepare needs --series and --meta, or --synthetic")
        for p in (args.series, args.meta) + ((args.adj,) if args.adj else ()):
            if not Path(p).is_file():
                raise UsageError(f"input file not found: {p}")
        ds: Dataset = dataset_from_files(args.series, args.meta, args.adj, cfg.data.sample_period_minutes,
                                         cfg.data.threshold)
        source = {"files": {k: file_hash([Path(v)]) for k, v in
                            (("series", args.series), ("meta", args.meta), ("adj", args.adj)) if v}}
    input_hash = hashlib.sha256(json.dumps({"source": source, "config": cfg.to_dict()}, sort_keys=True,
                                           default=list).encode()).hexdigest()
    rd = RunDir(Path(args.out), "prepare", input_hash, None)
    if not args.force and _skip(rd):
        return EXIT_OK
    rd.start(args.force)
    outputs = prepare_dataset(ds, rd.path, cfg)
    rd.finish(outputs)
    print(f"prepared dataset at {rd.path} (content hash {rd.manifest()['content_hash'][:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .evaluation import ResultRow, retrieval_stats, write_offsets, write_results
    from .jigsaw import dump_index
    from .pipeline import load_dataset, run_single
    from .training import make_context, save_checkpoint, write_history
    cfg = _config(args)
    extra = {"variant": args.variant, "seed": args.seed}
    rd = _run_dir(args, "train", cfg, _input_hash("train", cfg, extra))
    if not args.force and _skip(rd):
        return EXIT_OK
    rd.start(args.force)
    ds = load_dataset(cfg)
    out = run_single(ds, cfg, args.variant, seed=args.seed)
    write_history(out.result.history, rd.path / "history.csv")
    save_checkpoint(out.model, rd.path / "checkpoint.npz")
    write_results([ResultRow.from_run(out)], rd.path / "results.csv")
    if getattr(out.model, "jigsaw", None) is not None:
        ctx = make_context(out.model, out.setup.test, out.setup.node_features, cfg.train.t, True)
        dump_index(ctx.index, rd.path / "index")
        write_offsets(retrieval_stats(ctx.index), rd.path / "offsets.csv")
    rd.finish({"mae": out.report.mae, "rmse": out.report.rmse, "best_epoch": out.result.best_epoch})
    print(f"{args.variant} seed {args.seed}: MAE {out.report.mae:.4f} RMSE {out.report.rmse:.4f} -> {rd.path}")
    return EXIT_OK


def _grid_command(args, command: str, runner_fn) -> int:
    from .evaluation import ResultRow, read_results, write_results
    cfg = _config(args)
    rd = _run_dir(args, command, cfg, _input_hash(command, cfg))
    if not args.force and _skip(rd):
        return EXIT_OK
    rd.start(args.force)
    partial = rd.path / "results.partial.csv"
    done = {r.cell: r for r in read_results(partial)} if partial.is_file() else {}
    if done:
        print(f"resuming with {len(done)} completed cells")
    log_rows: list = list(done.values())

    def on_row(row: ResultRow):
        log_rows.append(row)
        write_results(log_rows, partial)
        print(f"  {row.variant:>12s} {row.pattern:>6s} rate={row.rate:.2f} seed={row.seed} MAE={row.mae:.4f}",
              flush=True)

    outputs = runner_fn(cfg, done, on_row, rd.path)
    if partial.is_file():
        partial.unlink()
    rd.finish(outputs)
    print(f"results in {rd.path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.run:
        return _eval_checkpoint(args)
    from .evaluation import default_runner, run_comparison, write_results
    from .pipeline import load_dataset

    def go(cfg, done, on_row, path):
        table = run_comparison(cfg, default_runner(load_dataset(cfg), cfg), done=done, on_row=on_row)
        write_results(table.rows, path / "results.csv")
        gains = {p: e["gain"] for p, e in table.per_pattern.items()}
        for p, g in gains.items():
            print(f"{p}: vanilla {table.per_pattern[p]['vanilla'].mean:.4f} "
                  f"full {table.per_pattern[p]['full'].mean:.4f} gain {g:.2f}%")
        return {"gain_percent": gains}
    return _grid_command(args, "eval", go)


def _eval_checkpoint(args) -> int:
    from .config import parse_config_text
    from .evaluation import ResultRow, read_results, write_results
    from .pipeline import RunOutput, evaluate_model, load_dataset, model_for, variant_setup
    from .training import TrainResult, load_checkpoint
    run = Path(args.run)
    if not (run / "checkpoint.npz").is_file() or not (run / "results.csv").is_file():
        raise UsageError(f"not a completed train run: {run}")
    cfg = parse_config_text((run / "config.txt").read_text())
    row = read_results(run / "results.csv")[0]
    ds = load_dataset(cfg)
    setup = variant_setup(ds, cfg, row.variant, row.pattern, row.rate, row.seed, row.unobserved_ratio)
    model = model_for(ds, cfg, row.variant, row.seed)
    load_checkpoint(model, run / "checkpoint.npz")
    report = evaluate_model(model, setup, cfg, row.seed)
    out = RunOutput(row.variant, row.pattern, row.rate, row.seed, row.unobserved_ratio, report, TrainResult({}))
    write_results([ResultRow.from_run(out)], run / "eval.csv")
    print(f"re-evaluated {run}: MAE {report.mae:.4f} RMSE {report.rmse:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import default_runner, run_ablation, write_results
    from .pipeline import load_dataset

    def go(cfg, done, on_row, path):
        table = run_ablation(cfg, default_runner(load_dataset(cfg), cfg), done=done, on_row=on_row)
        write_results(table.rows, path / "results.csv")
        for v, s in table.summary.items():
            print(f"{v:>6s}: MAE {s.mean:.4f} ± {s.se:.4f} ({table.degradation[v]:+.2f}% vs full)")
        return {"degradation_percent": table.degradation}
    return _grid_command(args, "ablate", go)


def cmd_sweep(args) -> int:
    from .evaluation import default_runner, run_robustness, write_results
    from .pipeline import load_dataset

    def go(cfg, done, on_row, path):
        table = run_robustness(cfg, default_runner(load_dataset(cfg), cfg), done=done, on_row=on_row)
        write_results(table.rows, path / "results.csv")
        out = {"monotone": {a: table.monotone(a) for a in table.rate_curves},
               "wrapped_dominates": table.wrapped_dominates()}
        if table.ratio_rows:
            write_results(table.ratio_rows, path / "results_unobserved.csv", ratio_column=True)
            out["monotone_unobserved"] = {a: table.monotone(a, "ratio") for a in table.ratio_curves}
        return out
    return _grid_command(args, "sweep", go)


def cmd_verify(args) -> int:
    from .theory import run_all, write_report
    cfg_hash = hashlib.sha256(json.dumps({"seed": args.seed, "n_trials": args.n_trials}).encode()).hexdigest()
    rd = _run_dir(args, "verify", ExperimentConfig(name="theory"), cfg_hash)
    rd.cfg = None
    if not args.force and _skip(rd):
        return EXIT_OK
    rd.start(args.force)
    rows = run_all(seed=args.seed, n_trials=args.n_trials)
    write_report(rows, rd.path / "theory_report.csv")
    n_pass = sum(r.passed for r in rows)
    rd.finish({"rows": len(rows), "passed": n_pass})
    print(f"theory report: {n_pass}/{len(rows)} checks pass -> {rd.path / 'theory_report.csv'}")
    return EXIT_OK if n_pass == len(rows) else EXIT_INTERNAL


def cmd_plot(args) -> int:
    from .plots import render_run
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"run directory not found: {run}")
    made = render_run(run, args.out)
    if not made:
        raise UsageError(f"no plottable CSV files in {run}")
    for p in made:
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="krigwrap", description="Kriging wrapper experiments and theory checks.")
    p.add_argument("--run-root", help=f"parent directory for run outputs (env {RUN_ROOT_ENV}, default ./runs)")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="config file with 'section.key = value' lines")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if data:
            sp.add_argument("--data", help="prepared dataset directory (default: built-in synthetic panel)")
        sp.add_argument("--out", help="run directory (default: derived from the run root and config hash)")
        sp.add_argument("--force", action="store_true", help="rerun even if a completed run exists")

    sp = sub.add_parser("prepare", help="write a prepared dataset directory")
    sp.add_argument("--series", help="series CSV (sensors x time, blank = missing)")
    sp.add_argument("--meta", help="metadata CSV (sensor_id,x,y[,one-hot...])")
    sp.add_argument("--adj", help="optional precomputed adjacency CSV")
    sp.add_argument("--synthetic", nargs="?", const="", help="synthetic spec, e.g. 'n_nodes=60,n_steps=2016,seed=0'")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train one variant and score the unobserved nodes")
    common(sp)
    sp.add_argument("--variant", default="full", help="full, vanilla, wo_J, wo_M, wo_A, wo_L, wo_JM")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="vanilla vs wrapped comparison grid, or re-score a train run")
    common(sp)
    sp.add_argument("--run", help="completed train run directory to re-evaluate")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="ablation table over the six variants")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="robustness sweep over missing rates (and unobserved ratios)")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="run the theory checks and write theory_report.csv")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-trials", type=int, default=20000)
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("plot", help="render figures from the CSV files of a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out", help="figure directory (default: <run>/plots)")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:        # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
