"""Command-line entry point: ``rdm {generate,train,evaluate,sweep,report}``.

Layout under ``--out``::

    data/<data-hash>/            generated environments + manifest.json
    runs/<config-hash>/seed-<n>/ metrics.csv, summary.json, model.rdmp, state.npz
    sweeps/<sweep-hash>/         table.csv, table.txt, sweep.json

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, DataError, RunConfig
from .data import read_rdmd, write_rdmd
from .model import forward_risks, load_checkpoint, save_checkpoint
from .reporting import HistogramSpec, compare_table, risk_histogram, table_csv, table_text
from .trainer import DivergenceError, TrainMetrics, TrainState, Trainer, evaluate

log = logging.getLogger("rdm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def data_dir(cfg: RunConfig, out) -> Path:
    return Path(out) / "data" / cfg.data_hash()


def run_dir(cfg: RunConfig, out) -> Path:
    return Path(out) / "runs" / cfg.content_hash() / f"seed-{cfg.seed}"


def _env_files(cfg: RunConfig, out) -> list[tuple[str, Path]]:
    d = data_dir(cfg, out)
    files = [("train", d / f"train-{i}.rdmd") for i in range(len(cfg.train_envs))]
    files += [("test", d / f"test-{i}.rdmd") for i in range(len(cfg.test_envs))]
    return files


# --- generate -------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out) -> Path:
    envs = cfgmod.build_environments(cfg)
    target = data_dir(cfg, out)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create {target}: {err}") from None
    entries = []
    for domain_id, ((role, ds), (_, path)) in enumerate(zip(envs, _env_files(cfg, out))):
        write_rdmd(path, ds)
        entries.append({"file": path.name, "role": role, "domain_id": domain_id,
                        "agreement": ds.agreement, "label_noise": ds.label_noise,
                        "n": len(ds), "d": ds.dim, "sha256": _sha256(path)})
    manifest = {"data": cfg.data, "data_hash": cfg.data_hash(), "environments": entries}
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return target


def load_benchmark(cfg: RunConfig, out):
    files = _env_files(cfg, out)
    missing = [str(p) for _, p in files if not p.exists()]
    if missing:
        raise DataError("missing data file(s); run `rdm generate` first. Expected:\n  "
                        + "\n  ".join(missing))
    envs = [(role, read_rdmd(p, domain_id=i, name=f"{role}{i}")) for i, (role, p) in enumerate(files)]
    for (_, ds), spec in zip(envs, cfg.train_envs + cfg.test_envs):
        ds.agreement, ds.label_noise = spec.agreement, spec.label_noise
    return cfgmod.make_benchmark(cfg, envs)


# --- train ----------------------------------------------------------------


def _write_run(target: Path, cfg: RunConfig, best, metrics: TrainMetrics) -> None:
    (target / "metrics.csv").write_text(metrics.to_csv())
    summary = metrics.summary()
    summary["config"] = cfg.raw
    summary["config_hash"] = cfg.content_hash()
    (target / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    save_checkpoint(target / "model.rdmp", best)


def write_manifest(target: Path, cfg: RunConfig, out, config_path=None) -> None:
    manifest = {"config_path": None if config_path is None else str(config_path),
                "config": cfg.raw, "config_hash": cfg.content_hash(),
                "out": str(out), "seeds": [cfg.seed]}
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: RunConfig, out, resume: bool = False, bench=None, config_path=None) -> Path:
    target = run_dir(cfg, out)
    target.mkdir(parents=True, exist_ok=True)
    write_manifest(target, cfg, out, config_path)
    bench = load_benchmark(cfg, out) if bench is None else bench
    state_path = target / "state.npz"
    state = None
    if resume and state_path.exists():
        state = TrainState.load(state_path)
        log.info("resuming %s at step %d", target, state.step)
    trainer = Trainer(cfg.train, bench, state, state_path)
    try:
        trainer.run()
    except DivergenceError as err:
        if err.best is not None:
            _write_run(target, cfg, err.best, err.metrics)
        raise
    best, metrics = trainer.result()
    _write_run(target, cfg, best, metrics)
    return target


# --- evaluate / report ----------------------------------------------------


def cmd_evaluate(cfg: RunConfig, out, checkpoint=None) -> dict:
    bench = load_benchmark(cfg, out)
    path = Path(checkpoint) if checkpoint else run_dir(cfg, out) / "model.rdmp"
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    params = load_checkpoint(path)
    results = []
    for split, sets in (("train", bench.train), ("val", bench.val),
                        ("test", bench.test), ("test_val", bench.test_val)):
        for ds in sets:
            acc, risk = evaluate(params, ds)
            results.append({"domain_id": ds.domain_id, "split": split,
                            "accuracy": acc, "mean_risk": risk})
    return {"checkpoint": str(path), "results": results}


def _collect_summaries(root: Path) -> list[tuple[str, float]]:
    runs = []
    for p in sorted(root.rglob("summary.json")):
        s = json.loads(p.read_text())
        obj = s["config"]["objective"]
        label = obj["kind"] if obj["kind"] == "erm" else f"{obj['kind']} (lam={obj['lam']:g})"
        runs.append((label, s["selected_test_accuracy"]))
    return runs


def cmd_report(cfg: RunConfig | None, out, runs_root=None, bins: int = 30) -> Path:
    """Comparison table over every run under ``runs_root`` and, when a config
    is given, risk histograms of that run's checkpoint on every environment."""
    out = Path(out)
    report = out / "report"
    report.mkdir(parents=True, exist_ok=True)
    root = Path(runs_root) if runs_root else out / "runs"
    rows = compare_table(_collect_summaries(root))
    (report / "table.csv").write_text(table_csv(rows))
    (report / "table.txt").write_text(table_text(rows))
    if cfg is not None:
        bench = load_benchmark(cfg, out)
        params = load_checkpoint(run_dir(cfg, out) / "model.rdmp")
        sets = bench.train + bench.test
        risks = [forward_risks(params, ds).risks.data for ds in sets]
        hist = risk_histogram(risks, HistogramSpec(bins=bins), [ds.domain_id for ds in sets])
        (report / "histogram.json").write_text(hist.to_json() + "\n")
        (report / "histogram_counts.csv").write_text(hist.counts_csv())
        (report / "histogram_kde.csv").write_text(hist.kde_csv())
    return report


# --- sweep ----------------------------------------------------------------


def _sweep_cell(args):
    raw, out, seed, lam = args
    cfg = cfgmod.resolve(raw).with_overrides(seed=seed, lam=lam)
    try:
        target = cmd_train(cfg, out)
        summary = json.loads((target / "summary.json").read_text())
        return {"seed": seed, "lam": lam, "dir": str(target), "status": "ok",
                "test_accuracy": summary["selected_test_accuracy"]}
    except Exception as err:  # recorded; the sweep carries on
        return {"seed": seed, "lam": lam, "dir": str(run_dir(cfg, out)), "status": "failed",
                "error": f"{type(err).__name__}: {err}"}


def cmd_sweep(cfg: RunConfig, out, seeds, lambdas, parallel: int = 1) -> Path:
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    if not lambdas:
        raise ConfigError("sweep needs at least one lambda")
    cells = [(cfg.raw, str(out), s, lam) for lam in lambdas for s in seeds]
    for _, _, s, lam in cells:
        cfg.with_overrides(seed=s, lam=lam)  # validate every cell before running any
    load_benchmark(cfg, out)
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]

    kind = cfg.train.objective.kind
    runs = [(f"{kind} (lam={r['lam']:g})", r["test_accuracy"]) for r in results if r["status"] == "ok"]
    rows = compare_table(runs, [f"{kind} (lam={lam:g})" for lam in lambdas])
    key = json.dumps({"config": cfg.content_hash(), "seeds": list(seeds),
                      "lambdas": list(lambdas)}, sort_keys=True).encode()
    target = Path(out) / "sweeps" / hashlib.sha256(key).hexdigest()[:12]
    target.mkdir(parents=True, exist_ok=True)
    (target / "table.csv").write_text(table_csv(rows))
    (target / "table.txt").write_text(table_text(rows))
    (target / "sweep.json").write_text(json.dumps({"runs": results}, indent=2, sort_keys=True) + "\n")
    for r in results:
        if r["status"] != "ok":
            log.warning("run seed=%s lam=%s failed: %s", r["seed"], r["lam"], r["error"])
    return target


# --- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdm", description="Risk distribution matching experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--out", default="rdm-out", help="output root directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--lambda", dest="lam", type=float, help="override objective.lam")

    common(sub.add_parser("generate", help="write environment datasets"))
    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from state.npz if present")
    p = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="explicit .rdmp path")
    p = sub.add_parser("sweep", help="train over seeds x lambda grid")
    common(p)
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--lambdas", help="comma-separated lambda grid (default: config value)")
    p.add_argument("--parallel", type=int, default=1, help="concurrent runs")
    p = sub.add_parser("report", help="comparison table and risk histograms")
    common(p, config_required=False)
    p.add_argument("--runs", help="directory searched for summary.json files")
    p.add_argument("--bins", type=int, default=30)
    return parser


def _limit_threads():
    threads = os.environ.get("RDM_THREADS")
    if not threads:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(threads))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        cfg = None
        if args.config:
            cfg = cfgmod.load(args.config)
            if args.seed is not None or args.lam is not None:
                cfg = cfg.with_overrides(seed=args.seed, lam=args.lam)
        if args.command == "generate":
            print(cmd_generate(cfg, args.out))
        elif args.command == "train":
            print(cmd_train(cfg, args.out, resume=args.resume, config_path=args.config))
        elif args.command == "evaluate":
            print(json.dumps(cmd_evaluate(cfg, args.out, args.checkpoint), indent=2))
        elif args.command == "sweep":
            seeds = cfgmod.as_int_list(args.seeds)
            lambdas = (cfgmod.as_float_list(args.lambdas) if args.lambdas
                       else [cfg.train.objective.lam])
            target = cmd_sweep(cfg, args.out, seeds, lambdas, args.parallel)
            print((target / "table.txt").read_text(), end="")
        elif args.command == "report":
            target = cmd_report(cfg, args.out, args.runs, args.bins)
            print((target / "table.txt").read_text(), end="")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        if limiter is not None:
            limiter.unregister()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
