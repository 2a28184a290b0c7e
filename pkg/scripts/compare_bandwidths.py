"""Score accuracy of the KDE bandwidth rules on a sampled OU invariant measure.

Prints the relative L2 error of the fitted score against v(x) = 2x and the
worst normalised integration-by-parts residual over the canonical battery.

    python3 scripts/compare_bandwidths.py [--n 100000] [--seed 0]
"""

import argparse

import numpy as np

from fominlab.drift_models import get_model
from fominlab.fomin_calculus import fit_score, ibp_residual, oracle_score, score_relative_error
from fominlab.invariant_measure import sample_long_run
from fominlab.observables import canonical_battery
from fominlab.sde_engine import SimConfig

RULES = [("silverman", False), ("score", False), ("score", True), ("score_matching", True)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="ou")
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    m = get_model(args.model)
    sim = SimConfig(dt=0.005, t_final=5.0, n_paths=args.n, seed=args.seed)
    meas = sample_long_run(m, np.zeros(m.d), 5.0, args.n, 1.0, sim)
    exact = oracle_score(m)
    print(f"{'rule':16s} {'var.corr':8s} {'h':>8s} {'L2 err':>8s} {'max IBP':>8s}")
    for rule, vc in RULES:
        sf = fit_score(meas, rule, variance_correction=vc)
        err = score_relative_error(meas, sf, exact)
        ibp = max(ibp_residual(meas, sf, tf, z).normalized_residual
                  for tf in canonical_battery(m.d) for z in np.eye(m.d))
        print(f"{rule:16s} {str(vc):8s} {sf.density.bandwidth[0]:8.4f} {err:8.4f} {ibp:8.4f}")


if __name__ == "__main__":
    main()
