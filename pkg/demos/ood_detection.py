"""Can a penalty spot the steps where an exploited model goes wrong?

Plan unpenalised inside a cliffcar model until the planner finds returns the
model over-estimates, replay those imagined trajectories in the true
environment, and rank each penalty as a detector of the worst 10% of steps.

    python demos/ood_detection.py [--seed 1]
"""

import argparse

import numpy as np

from pessimlab.dynamics import ModelConfig, train_ensemble
from pessimlab.envlab import generate_dataset, make_env
from pessimlab.penalty import PenaltyContext
from pessimlab.planner import CEMConfig
from pessimlab.protocols import ood_event_report, true_model_based_records


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=10000)
    args = p.parse_args()

    env = make_env("cliffcar")
    ds = generate_dataset(env, "medium", args.size, args.seed)
    model = train_ensemble(ds, ModelConfig(n_total=7, n_elite=5, epochs=40, seed=args.seed))
    cem = CEMConfig(plan_horizon=8, population=32, elite_frac=0.2, iterations=3)
    records, chosen = true_model_based_records(model, env, ds, cem, horizon=20, rollouts=16, seed=args.seed,
                                               ctx=PenaltyContext(dims_used="state_only", seed=args.seed))
    print("most exploitative planners (model return - true return):")
    for ex in chosen:
        print(f"  seed {ex.seed:>10}: {ex.result.model_return:8.1f} - {ex.result.true_return:8.1f} = {ex.result.gap:7.1f}")

    err = np.concatenate([r.true_mse for r in records])
    print(f"\n{err.size} replayed steps, median error {np.median(err):.2e}, max {err.max():.2e}")
    rep = ood_event_report(records, percentiles=(90,), error_types=("dynamics",))
    print(f"\n{'detector':<20}{'AUC':>8}{'AP':>8}")
    rows = sorted(((k[2], v) for k, v in rep.entries.items()), key=lambda kv: -kv[1]["auc"])
    for name, v in rows:
        print(f"{name:<20}{v['auc']:>8.3f}{v['ap']:>8.3f}")


if __name__ == "__main__":
    main()
