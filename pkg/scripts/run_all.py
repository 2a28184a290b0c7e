"""Run every config in scripts/configs and print one summary line per run.

    python3 scripts/run_all.py [--only NAME ...] [--output-root runs]
"""

import argparse
import sys
from pathlib import Path

from fominlab.cli import run_experiment
from fominlab.config import load_config
from fominlab.experiments import REGISTRY

CONFIGS = Path(__file__).resolve().parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", nargs="*", help="config stems to run (default: all)")
    ap.add_argument("--output-root", default="runs")
    args = ap.parse_args()

    paths = sorted(CONFIGS.glob("*.json"))
    if args.only:
        paths = [p for p in paths if p.stem in args.only]
    worst = 0
    for path in paths:
        cfg = load_config(path, REGISTRY)
        cfg.output_dir = str(Path(args.output_root) / path.stem)
        report, status = run_experiment(cfg)
        n_ok = sum(c["pass"] for c in report["checks"])
        print(f"{path.stem:38s} {'PASS' if status == 0 else 'FAIL'} "
              f"{n_ok}/{len(report['checks'])} checks -> {cfg.output_dir}")
        worst = max(worst, status)
    return worst


if __name__ == "__main__":
    sys.exit(main())
