"""Derive hypervolume reference points and maximum hypervolumes.

For each multi-objective problem, NSGA-II (P=200, G=500) runs on the true
objectives. The reference point is the front's nadir minus 10% of the
ideal-nadir range, and the maximum hypervolume is the hypervolume of that
front with respect to the reference point. Results go to
``src/vbllbo/data/reference_points.json``.

Usage:
    python3 scripts/derive_reference_points.py [--seed 0]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from vbllbo.acquisition import NsgaConfig, hypervolume, nsga2
from vbllbo.benchmarks import make_problem

PROBLEMS = ["branin_currin", "dtlz1", "dtlz2"]
OUT = Path(__file__).resolve().parents[1] / "src" / "vbllbo" / "data" / "reference_points.json"


def derive(name, seed):
    problem = make_problem(name, {"ref_point": [0.0, 0.0]})
    span = problem.upper - problem.lower

    def objective(U):
        return problem.evaluate(problem.lower + U * span)

    cfg = NsgaConfig(pop_size=200, generations=500)
    _, F = nsga2(objective, problem.dim, cfg, np.random.default_rng(seed))
    nadir, ideal = F.min(axis=0), F.max(axis=0)
    ref = nadir - 0.1 * (ideal - nadir)
    return {
        "ref_point": ref.tolist(),
        "max_hv": hypervolume(F, ref),
        "nadir": nadir.tolist(),
        "ideal": ideal.tolist(),
        "front_size": int(F.shape[0]),
        "nsga": {"pop_size": 200, "generations": 500, "seed": seed},
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    table = {name: derive(name, args.seed) for name in PROBLEMS}
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(table, indent=2) + "\n")
    for name, entry in table.items():
        print(f"{name}: ref={entry['ref_point']} max_hv={entry['max_hv']:.6g}")


if __name__ == "__main__":
    main()
