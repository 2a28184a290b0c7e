"""Command line front end: ``fominlab run <config.json>`` and ``fominlab list``.

Exit status: 0 when every check passes, 1 when a check fails, 2 on an invalid
config or a diverged simulation.  ``report.json`` is written with sorted keys
and no timing data so identical config and seed give identical bytes; wall
clock goes to ``timing.json`` next to it.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DivergenceError, ModelEvaluationError
from .experiments import REGISTRY, Outcome, build_model, list_experiments
from .sde_engine import WORKERS_ENV

log = logging.getLogger("fominlab")


def _clean(obj):
    """Make ``obj`` strict-JSON: non-finite floats become strings."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):  # numpy scalars
        return _clean(obj.item())
    return obj


def dump_json(obj, path):
    text = json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def run_experiment(cfg: ExperimentConfig):
    """Run ``cfg`` in-process.  Returns ``(report, exit_status)`` and writes files."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    exp = REGISTRY[cfg.experiment]
    report = {"experiment": cfg.experiment, "config": cfg.to_dict(), "seed": cfg.seed,
              "version": __version__, "paper_anchor": exp.anchor}
    t0 = time.perf_counter()
    status = 0
    try:
        model = build_model(cfg)
        outcome = Outcome()
        exp.run(cfg, model, outcome)
        for name, writer in sorted(outcome.exports.items()):
            writer(out_dir / name)
        report["checks"] = outcome.checks
        report["exports"] = sorted(outcome.exports)
        report["passed"] = all(c["pass"] for c in outcome.checks)
        status = 0 if report["passed"] else 1
    except (DivergenceError, ModelEvaluationError) as exc:
        report["checks"] = []
        report["passed"] = False
        report["error"] = f"{cfg.experiment}: {exc}"
        status = 2
    elapsed = time.perf_counter() - t0
    dump_json(report, out_dir / "report.json")
    dump_json({"experiment": cfg.experiment, "wall_clock_seconds": elapsed}, out_dir / "timing.json")
    return report, status


def _apply_overrides(cfg: ExperimentConfig, args):
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.n_paths is not None:
        if args.n_paths < 1:
            raise ConfigError("--n-paths must be positive")
        cfg.sim["n_paths"] = args.n_paths
    return cfg


def _cmd_run(args):
    try:
        cfg = _apply_overrides(load_config(args.config, REGISTRY), args)
        report, status = run_experiment(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for c in report["checks"]:
        flag = "PASS" if c["pass"] else "FAIL"
        print(f"[{flag}] {c['name']}: value={c['value']:.6g} bound={c['bound']:.6g} "
              f"se={c['std_error']:.3g}")
    if "error" in report:
        print(f"error: {report['error']}", file=sys.stderr)
    print(f"report written to {Path(cfg.output_dir) / 'report.json'}")
    return status


def _cmd_list(_args):
    for name, anchor in list_experiments():
        print(f"{name:22s} {anchor}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="fominlab",
        description="Monte Carlo verification suites for dissipative SDEs.",
        epilog=f"Set {WORKERS_ENV} to the number of simulation worker threads.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--n-paths", type=int)
    r.set_defaults(func=_cmd_run)
    ls = sub.add_parser("list", help="list experiments")
    ls.set_defaults(func=_cmd_list)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
