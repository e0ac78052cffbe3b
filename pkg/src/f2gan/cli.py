"""Command-line entry point: ``f2gan run | verify | sweep``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .config import OVERLAP_ALIASES, SCHEMA_VERSION, SWEEP_AXES, RunConfig, load_config
from .errors import ConfigurationError, NonFiniteError
from .protocol import MetricsRecord, TrainingResult, run_training
from .verify import run_checks

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_BAD_CONFIG, EXIT_NON_FINITE = 0, 1, 2, 3


def metrics_header(num_clients: int, num_modes: int) -> list:
    return (
        ["iteration", "lambda", "generator_loss"]
        + [f"disc_loss_{i}" for i in range(num_clients)]
        + ["covered_count", "num_modes"]
        + [f"mode_fraction_{k}" for k in range(num_modes)]
        + ["empirical_divergence"]
    )


def metrics_row(rec: MetricsRecord) -> list:
    return ([rec.iteration, repr(rec.lam), repr(rec.generator_loss)]
            + [repr(v) for v in rec.disc_losses]
            + [rec.covered_count, rec.num_modes]
            + [repr(v) for v in rec.mode_fractions]
            + [repr(rec.empirical_divergence)])


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)


class RunWriter:
    """Streams a run's flat files into ``out_dir``.

    ``metrics.csv`` holds only deterministic columns so two runs with the
    same config and seed produce identical bytes; elapsed time goes to
    ``timing.csv``.
    """

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out_dir = out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        self.paths = {
            "metrics": out_dir / "metrics.csv",
            "timing": out_dir / "timing.csv",
            "lambda": out_dir / "lambda.csv",
            "samples": out_dir / "samples.ndjson",
            "manifest": out_dir / "manifest.json",
        }
        n_modes = len(cfg.scenario.classes)
        self._metrics = open(self.paths["metrics"], "w", encoding="utf-8", newline="")
        self._timing = open(self.paths["timing"], "w", encoding="utf-8", newline="")
        self._m = _csv_writer(self._metrics)
        self._t = _csv_writer(self._timing)
        self._m.writerow(metrics_header(cfg.num_clients, n_modes))
        self._t.writerow(["iteration", "wall_time"])

    def record(self, rec: MetricsRecord) -> None:
        self._m.writerow(metrics_row(rec))
        self._t.writerow([rec.iteration, f"{rec.wall_time:.6f}"])
        self._metrics.flush()
        self._timing.flush()

    def close(self) -> None:
        self._metrics.close()
        self._timing.close()

    def finish(self, result: TrainingResult) -> None:
        with open(self.paths["lambda"], "w", encoding="utf-8", newline="") as fh:
            w = _csv_writer(fh)
            w.writerow(["iteration", "lambda"])
            for it, lam in result.lambda_trajectory:
                w.writerow([it, repr(lam)])
        with open(self.paths["samples"], "w", encoding="utf-8") as fh:
            for it, samples in result.sample_dumps:
                for x in samples:
                    fh.write(json.dumps({"x": [float(v) for v in x], "iter": int(it)}) + "\n")
        write_manifest(self.cfg, self.paths, result.Z, result.grid_warnings)


def write_manifest(cfg: RunConfig, paths: dict, Z: Optional[float], warnings: list,
                   status: str = "ok", error: Optional[str] = None) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "strategy": cfg.strategy,
        "scenario": cfg.name,
        "partition": cfg.scenario.partition,
        "num_clients": cfg.num_clients,
        "iterations": cfg.iterations,
        "Z": Z,
        "status": status,
        "error": error,
        "warnings": list(warnings),
        "outputs": {k: p.name for k, p in paths.items()},
        "versions": {
            "f2gan": __version__,
            "numpy": np.__version__,
            "pyyaml": yaml.__version__,
            "python": platform.python_version(),
        },
        "config": cfg.to_dict(),
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def execute(cfg: RunConfig, out_dir: Path) -> TrainingResult:
    """Train and write every artifact; raises on failure after writing a manifest."""
    writer = RunWriter(cfg, out_dir)
    try:
        result = run_training(cfg, on_record=writer.record)
    except NonFiniteError as exc:
        writer.close()
        write_manifest(cfg, writer.paths, None, [], status="non_finite", error=str(exc))
        raise
    writer.close()
    writer.finish(result)
    return result


def _load(path: str, seed: Optional[int]) -> RunConfig:
    cfg = load_config(path)
    if seed is not None:
        if seed < 0:
            raise ConfigurationError("--seed must be >= 0")
        cfg.seed = seed
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config, args.seed)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    try:
        result = execute(cfg, out)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NON_FINITE
    final = result.final_record
    summary = f"wrote {out}"
    if final is not None:
        summary += (f"  iteration={final.iteration} lambda={final.lam:.4f}"
                    f" coverage={final.covered_count}/{final.num_modes}")
    print(summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.profile)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_VERIFY_FAILED
    print(f"all {len(results)} checks passed ({args.profile} profile)")
    return EXIT_OK


_DEFAULT_AXIS_VALUES = {
    "strategy": ["f2u", "f2a", "mdgan", "gman0"],
    "lambda_fixed": [0.0, 3.6],
    "num_clients": [5, 10, 20],
    "overlap": ["non_overlapping", "moderately_overlapping", "fully_overlapping"],
}


def sweep_variants(cfg: RunConfig, axis: str) -> list:
    """``(label, config)`` for every value on ``axis``; bad values give ``(label, error)``."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    values = cfg.sweep.get(axis, _DEFAULT_AXIS_VALUES[axis])
    out = []
    for v in values:
        label = f"{axis}={v}"
        try:
            if axis == "strategy":
                changes = {"strategy": str(v)}
            elif axis == "lambda_fixed":
                changes = {"strategy": "fixed_lambda", "lam.fixed": float(v)}
            elif axis == "num_clients":
                changes = {"scenario.num_clients": int(v), "scenario.clients": None}
            else:
                changes = {"scenario.partition": OVERLAP_ALIASES.get(str(v), str(v)),
                           "scenario.clients": None}
            variant = cfg.replace(**changes)
            variant.name = f"{cfg.name}-{axis}-{v}"
            out.append((label, variant))
        except (ConfigurationError, ValueError, TypeError) as exc:
            out.append((label, exc))
    return out


def cmd_sweep(args) -> int:
    try:
        cfg = _load(args.config, args.seed)
        variants = sweep_variants(cfg, args.axis)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    root = Path(args.out) if args.out else Path("runs") / f"{cfg.name}-sweep-{args.axis}"
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, (label, variant) in enumerate(variants):
        value = label.split("=", 1)[1]
        row = {"axis": args.axis, "value": value, "status": "ok", "run_dir": "", "final_iteration": "",
               "final_lambda": "", "covered_count": "", "num_modes": "", "empirical_divergence": "",
               "error": ""}
        if isinstance(variant, Exception):
            row.update(status="invalid_config", error=str(variant))
            rows.append(row)
            print(f"{label}: invalid ({variant})")
            continue
        run_dir = root / f"{k:02d}-{value}"
        row["run_dir"] = run_dir.name
        try:
            result = execute(variant, run_dir)
        except (NonFiniteError, ConfigurationError) as exc:
            row.update(status="failed", error=str(exc))
            rows.append(row)
            print(f"{label}: failed ({exc})")
            continue
        final = result.final_record
        if final is not None:
            row.update(final_iteration=final.iteration, final_lambda=repr(final.lam),
                       covered_count=final.covered_count, num_modes=final.num_modes,
                       empirical_divergence=repr(final.empirical_divergence))
        rows.append(row)
        print(f"{label}: ok")
    with open(root / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["axis"], lineterminator="\r\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {root / 'comparison.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="f2gan", description="Decentralised GAN simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default runs/<name>)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run the numerical self-checks")
    ver.add_argument("--profile", choices=("default", "strict"), default="default")
    ver.set_defaults(func=cmd_verify)

    sw = sub.add_parser("sweep", help="one run per value of a config axis")
    sw.add_argument("config")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--out", help="output directory")
    sw.add_argument("--seed", type=int, help="override the config seed")
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
